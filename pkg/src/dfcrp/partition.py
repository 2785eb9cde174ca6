"""Exact partition probabilities for the CRP and its cannot-link variant.

The dysfunctional-family CRP (DFCRP) seats items sequentially like the
ordinary Chinese restaurant process but forbids two items with the same
family identifier from sharing a cluster.  Because the constrained process
is not exchangeable, partition probabilities depend on the allocation
order; order invariance is restored by averaging over all allocation
orders under a uniform prior.  This module provides the step rules, the
order-conditional joint probability, exact and Monte Carlo order
marginalization, a small-instance enumeration oracle, and prior sampling.

All probabilities are handled in log space; ``-inf`` encodes impossible
partitions (a cluster containing two items of one family).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 9

NEG_INF = float("-inf")


def canonical_labels(labels: Sequence[int]) -> tuple[int, ...]:
    """Relabel clusters by order of first appearance (0, 1, 2, ...)."""
    mapping: dict[int, int] = {}
    out = []
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return tuple(out)


def is_valid_partition(labels: Sequence[int], families: Sequence[int]) -> bool:
    """True iff no cluster contains two items of the same family."""
    if len(labels) != len(families):
        raise ValueError(
            f"length mismatch: {len(labels)} labels vs {len(families)} families"
        )
    seen: set[tuple[int, int]] = set()
    for lab, fam in zip(labels, families):
        key = (lab, fam)
        if key in seen:
            return False
        seen.add(key)
    return True


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not alpha > 0:
        raise ValueError(f"concentration must be positive, got {alpha}")
    return alpha


@dataclass(frozen=True)
class SeatingCounts:
    """Occupancy snapshot of a partially seated restaurant.

    ``totals[k]`` is the number of items at table ``k`` and
    ``family_members[k]`` maps family id to its member count at that
    table.  ``n_without_family(f)`` gives the number of items seated at
    tables with no family-``f`` member, the normalizing count of the
    constrained step rule.
    """

    totals: tuple[int, ...]
    family_members: tuple[dict, ...] = field(default=None)

    def __post_init__(self):
        totals = tuple(int(t) for t in self.totals)
        object.__setattr__(self, "totals", totals)
        if self.family_members is None:
            object.__setattr__(self, "family_members", tuple({} for _ in totals))
        fams = tuple(dict(d) for d in self.family_members)
        object.__setattr__(self, "family_members", fams)
        if len(fams) != len(totals):
            raise ValueError("family_members and totals length mismatch")
        for t, d in zip(totals, fams):
            if t < 0:
                raise ValueError(f"negative table count {t}")
            if any(c < 0 for c in d.values()):
                raise ValueError("negative family count")
            if sum(d.values()) > t:
                raise ValueError("family counts exceed table total")

    @classmethod
    def from_labels(cls, labels: Sequence[int], families: Sequence[int]) -> "SeatingCounts":
        order = canonical_labels(labels)
        n_tables = max(order) + 1 if order else 0
        totals = [0] * n_tables
        fams: list[dict] = [{} for _ in range(n_tables)]
        for lab, fam in zip(order, families):
            totals[lab] += 1
            fams[lab][fam] = fams[lab].get(fam, 0) + 1
        return cls(tuple(totals), tuple(fams))

    @property
    def num_seated(self) -> int:
        return sum(self.totals)

    def n_without_family(self, family) -> int:
        return sum(
            t for t, d in zip(self.totals, self.family_members) if d.get(family, 0) == 0
        )


def crp_step_probs(totals: Sequence[int], alpha: float) -> np.ndarray:
    """Seating probabilities of the next item under the plain CRP.

    Entry ``k`` is ``totals[k] / (n - 1 + alpha)`` for occupied tables and
    the final entry ``alpha / (n - 1 + alpha)`` opens a new table, where
    ``n - 1 = sum(totals)`` items are already seated.
    """
    alpha = _check_alpha(alpha)
    totals = np.asarray(totals, dtype=float)
    if totals.size and totals.min() < 0:
        raise ValueError("negative table count")
    denom = totals.sum() + alpha
    return np.append(totals, alpha) / denom


def dfcrp_step_probs(counts: SeatingCounts, family, alpha: float) -> np.ndarray:
    """Seating probabilities of the next item under the family constraint.

    Tables already holding a member of ``family`` get probability zero;
    the remaining tables follow a CRP over the items seated at
    unblocked tables.
    """
    alpha = _check_alpha(alpha)
    numer = np.array(
        [
            0.0 if d.get(family, 0) > 0 else float(t)
            for t, d in zip(counts.totals, counts.family_members)
        ]
    )
    denom = counts.n_without_family(family) + alpha
    return np.append(numer, alpha) / denom


def dfcrp_joint_logprob(
    labels: Sequence[int],
    alpha: float,
    families: Sequence[int],
    order: Sequence[int],
) -> float:
    """Log probability of a partition under a fixed allocation order.

    Items are seated one at a time following ``order`` (a permutation of
    item indices); each step contributes the constrained step
    probability of the table the partition assigns to that item.
    Returns ``-inf`` when the partition puts two same-family items in
    one cluster.

    Parameters
    ----------
    labels : sequence of int
        Cluster label per item.
    alpha : float
        Concentration parameter, > 0.
    families : sequence of int
        Family identifier per item.
    order : sequence of int
        Allocation order; ``order[0]`` is seated first.
    """
    alpha = _check_alpha(alpha)
    n = len(labels)
    if len(families) != n or len(order) != n:
        raise ValueError(
            f"length mismatch: {n} labels, {len(families)} families, {len(order)} order"
        )
    if sorted(order) != list(range(n)):
        raise ValueError("order is not a permutation of item indices")

    table_count: dict[int, int] = {}
    table_fams: dict[int, set] = {}
    blocked: dict = {}  # family -> items seated at tables holding that family
    logp = 0.0
    for pos, item in enumerate(order):
        lab = labels[item]
        fam = families[item]
        m = table_count.get(lab, 0)
        if pos > 0:
            if m > 0 and fam in table_fams[lab]:
                return NEG_INF
            n_minus = pos - blocked.get(fam, 0)
            if m > 0:
                logp += math.log(m) - math.log(n_minus + alpha)
            else:
                logp += math.log(alpha) - math.log(n_minus + alpha)
        # seat the item and refresh the per-family blocked totals
        fams_here = table_fams.setdefault(lab, set())
        for g in fams_here:
            blocked[g] += 1
        fams_here.add(fam)
        blocked[fam] = blocked.get(fam, 0) + m + 1
        table_count[lab] = m + 1
    return logp


def _check_cap(n: int, cap: int) -> None:
    if n > cap:
        raise ValueError(
            f"instance has {n} items, above the enumeration cap {cap}; "
            "pass a larger cap explicitly to override"
        )


def dfcrp_marginal_logprob_exact(
    labels: Sequence[int],
    alpha: float,
    families: Sequence[int],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> float:
    """Exact log probability of a partition with the order averaged out.

    Computes ``log((1/n!) * sum over all n! allocation orders of the
    order-conditional probability)``.  The sum is taken with a dynamic
    program over seated subsets rather than a literal loop over orders:
    the step probability of an item depends only on which items are
    already seated, so order prefixes ending in the same subset share
    their continuation.  The result is identical to brute-force order
    enumeration.

    Refuses instances with more than ``cap`` items.
    """
    alpha = _check_alpha(alpha)
    n = len(labels)
    if len(families) != n:
        raise ValueError(f"length mismatch: {n} labels vs {len(families)} families")
    _check_cap(n, cap)
    if n == 0:
        raise ValueError("empty partition")
    if not is_valid_partition(labels, families):
        return NEG_INF

    dense = canonical_labels(labels)
    n_clusters = max(dense) + 1
    cluster_mask = [0] * n_clusters
    for i, lab in enumerate(dense):
        cluster_mask[lab] |= 1 << i
    fam_ids = {f: i for i, f in enumerate(dict.fromkeys(families))}
    fam_mask = [0] * len(fam_ids)
    for i, f in enumerate(families):
        fam_mask[fam_ids[f]] |= 1 << i

    # accum[S] = sum over orderings of subset S of the product of step probs
    full = (1 << n) - 1
    accum = [0.0] * (full + 1)
    accum[0] = 1.0
    by_popcount: list[list[int]] = [[] for _ in range(n + 1)]
    for mask in range(full + 1):
        by_popcount[mask.bit_count()].append(mask)
    for size in range(n):
        for seated in by_popcount[size]:
            weight = accum[seated]
            if weight == 0.0:
                continue
            for item in range(n):
                bit = 1 << item
                if seated & bit:
                    continue
                lab = dense[item]
                m = (seated & cluster_mask[lab]).bit_count()
                if size == 0:
                    step = 1.0
                else:
                    gmask = fam_mask[fam_ids[families[item]]]
                    in_blocked = 0
                    for cmask in cluster_mask:
                        part = seated & cmask
                        if part & gmask:
                            in_blocked += part.bit_count()
                    numer = m if m > 0 else alpha
                    step = numer / (size - in_blocked + alpha)
                accum[seated | bit] += weight * step
    return math.log(accum[full]) - math.lgamma(n + 1)


def dfcrp_marginal_logprob_mc(
    labels: Sequence[int],
    alpha: float,
    families: Sequence[int],
    num_samples: int,
    rng: np.random.Generator,
    method: str = "uniform",
) -> float:
    """Monte Carlo estimate of the order-marginalized log probability.

    ``method="uniform"`` (default) averages the order-conditional
    probability over allocation orders drawn uniformly at random, an
    unbiased estimator of the marginal.  ``method="metropolis"`` instead
    averages along a Metropolis chain over orders (swap-a-random-item-
    with-the-last proposal) targeting the order posterior; it is exposed
    for comparison and is not unbiased for the uniform average.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    n = len(labels)
    if method == "uniform":
        logs = []
        for _ in range(num_samples):
            order = rng.permutation(n)
            logs.append(dfcrp_joint_logprob(labels, alpha, families, order))
        finite = [v for v in logs if v > NEG_INF]
        if not finite:
            return NEG_INF
        top = max(finite)
        total = math.fsum(math.exp(v - top) for v in finite)
        return top + math.log(total) - math.log(num_samples)
    if method == "metropolis":
        return _mc_metropolis(labels, alpha, families, num_samples, rng)
    raise ValueError(f"unknown method {method!r}")


def _mc_metropolis(labels, alpha, families, num_samples, rng) -> float:
    n = len(labels)
    order = list(rng.permutation(n))
    cur = dfcrp_joint_logprob(labels, alpha, families, order)
    if cur == NEG_INF:
        # invalid partition: zero under every order
        return NEG_INF
    logs = []
    for _ in range(num_samples):
        j = int(rng.integers(n))
        prop = list(order)
        prop[j], prop[-1] = prop[-1], prop[j]
        cand = dfcrp_joint_logprob(labels, alpha, families, prop)
        delta = cand - cur
        if delta >= 0 or rng.random() < math.exp(delta):
            order, cur = prop, cand
        logs.append(cur)
    top = max(logs)
    total = math.fsum(math.exp(v - top) for v in logs)
    return top + math.log(total) - math.log(num_samples)


def enumerate_valid_partitions(
    families: Sequence[int],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[tuple[int, ...]]:
    """All partitions with at most one member of each family per cluster.

    Partitions are returned in canonical first-appearance labeling, each
    exactly once.  Refuses instances with more than ``cap`` items.
    """
    n = len(families)
    _check_cap(n, cap)
    if n == 0:
        return []
    out: list[tuple[int, ...]] = []
    labels = [0] * n
    cluster_fams: list[set] = []

    def extend(i: int) -> None:
        if i == n:
            out.append(tuple(labels))
            return
        fam = families[i]
        for k, fams in enumerate(cluster_fams):
            if fam not in fams:
                labels[i] = k
                fams.add(fam)
                extend(i + 1)
                fams.remove(fam)
        labels[i] = len(cluster_fams)
        cluster_fams.append({fam})
        extend(i + 1)
        cluster_fams.pop()

    extend(0)
    return out


def sample_prior_partition(
    alpha: float,
    families: Sequence[int],
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Draw a partition by sequential seating in a random allocation order.

    The order is uniform over permutations, matching the marginalized
    process, so repeated draws follow the order-invariant partition
    distribution.  The returned labels are canonicalized and always
    satisfy the family constraint.
    """
    alpha = _check_alpha(alpha)
    n = len(families)
    order = rng.permutation(n)
    labels = [-1] * n
    table_count: list[int] = []
    table_fams: list[set] = []
    blocked: dict = {}
    for pos, item in enumerate(np.asarray(order)):
        item = int(item)
        fam = families[item]
        n_minus = pos - blocked.get(fam, 0)
        denom = n_minus + alpha
        u = rng.random() * denom
        acc = 0.0
        chosen = len(table_count)
        for k, (t, fams) in enumerate(zip(table_count, table_fams)):
            if fam in fams:
                continue
            acc += t
            if acc > u:
                chosen = k
                break
        if chosen == len(table_count):
            table_count.append(0)
            table_fams.append(set())
        for g in table_fams[chosen]:
            blocked[g] += 1
        blocked[fam] = blocked.get(fam, 0) + table_count[chosen] + 1
        table_fams[chosen].add(fam)
        table_count[chosen] += 1
        labels[item] = chosen
    return canonical_labels(labels)


def family_sizes(families: Sequence[int]) -> dict:
    """Member count per family identifier."""
    sizes: dict = {}
    for f in families:
        sizes[f] = sizes.get(f, 0) + 1
    return sizes
