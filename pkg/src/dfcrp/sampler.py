"""Permutation- and neighborhood-modified Gibbs sampler.

The partition is updated one item per iteration: a Metropolis step swaps
a random item of the allocation order with the last, then the item now
last is removed and reseated from its full conditional, which is exactly
CRP-shaped because every other allocation is conditioned upon.  ``n``
iterations form one scan; each scan also refreshes the concentration
parameter and every cluster's parameters.  An optional spatial radius
limits reseating candidates to clusters containing at least one nearby
item.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._engine import ChainEngine
from .config import LOG_DIAMETER_FLOOR, ChainConfig, Hyperparams
from .mixture import (
    ClusterCovariance,
    ClusterParams,
    features_matrix,
    mvn_logpdf,
    sample_covariance_prior,
)
from .partition import NEG_INF, canonical_labels, dfcrp_joint_logprob, is_valid_partition


@dataclass(frozen=True)
class SamplerState:
    """Full sampler state: partition, allocation order, concentration,
    and per-cluster parameters keyed by the occupied cluster labels."""

    partition: tuple[int, ...]
    permutation: tuple[int, ...]
    alpha: float
    params: dict = field(default_factory=dict)
    scan_index: int = 0


@dataclass(frozen=True)
class Draw:
    """One retained posterior sample of the partition."""

    chain_id: int
    scan_index: int
    alpha: float
    labels: tuple[int, ...]


@dataclass(frozen=True)
class NeighborIndex:
    """Fixed-radius neighbor lists over the spatial coordinates.

    ``indptr``/``indices`` form a CSR adjacency including self-links;
    both are ``None`` for an infinite radius, meaning no restriction.
    """

    n: int
    rho: float
    indptr: np.ndarray | None
    indices: np.ndarray | None

    @property
    def unrestricted(self) -> bool:
        return self.indptr is None

    def neighbors(self, i: int) -> np.ndarray:
        if self.unrestricted:
            return np.arange(self.n)
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


def build_neighbor_index(data, rho: float) -> NeighborIndex:
    """Neighbor lists under the Euclidean metric on (x, y) only.

    ``rho`` may be infinite (everyone neighbors everyone, encoded as an
    unrestricted index) or zero (items neighbor only coincident points,
    in practice just themselves).
    """
    feats = features_matrix(data)
    n = feats.shape[0]
    if math.isinf(rho):
        return NeighborIndex(n=n, rho=rho, indptr=None, indices=None)
    if rho < 0:
        raise ValueError(f"radius must be >= 0 or infinite, got {rho}")
    tree = cKDTree(feats[:, :2])
    lists = tree.query_ball_point(feats[:, :2], r=rho)
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i, lst in enumerate(lists):
        indptr[i + 1] = indptr[i] + len(lst)
    indices = np.empty(indptr[-1], dtype=np.int64)
    for i, lst in enumerate(lists):
        indices[indptr[i]:indptr[i + 1]] = sorted(lst)
    return NeighborIndex(n=n, rho=rho, indptr=indptr, indices=indices)


def propose_swap_with_last(order: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
    """Swap a uniformly chosen position with the last one.

    The chosen position may be the last itself, which proposes the
    identity; the proposal is symmetric either way.
    """
    order = tuple(order)
    n = len(order)
    j = int(rng.integers(n))
    if j == n - 1:
        return order
    out = list(order)
    out[j], out[-1] = out[-1], out[j]
    return tuple(out)


def permutation_metropolis_step(
    state: SamplerState,
    families,
    rng: np.random.Generator,
    current_logprob: float | None = None,
) -> tuple[SamplerState, float]:
    """One Metropolis update of the allocation order.

    The proposal is symmetric and the order prior is uniform, so the
    acceptance ratio is just the ratio of order-conditional partition
    probabilities.  Returns the new state plus its order-conditional log
    probability; pass ``current_logprob`` to avoid re-evaluating the
    current order.
    """
    if current_logprob is None:
        current_logprob = dfcrp_joint_logprob(
            state.partition, state.alpha, families, state.permutation
        )
    proposal = propose_swap_with_last(state.permutation, rng)
    if proposal == state.permutation:
        rng.random()
        return state, current_logprob
    cand_logprob = dfcrp_joint_logprob(state.partition, state.alpha, families, proposal)
    delta = cand_logprob - current_logprob
    u = rng.random()
    if delta >= 0 or u < math.exp(delta):
        new_state = SamplerState(
            state.partition, proposal, state.alpha, state.params, state.scan_index
        )
        return new_state, cand_logprob
    return state, current_logprob


def reassignment_probabilities(
    state: SamplerState,
    data,
    families,
    neighbors: NeighborIndex,
    h: Hyperparams,
    *,
    prior_only: bool = False,
    aux_params: ClusterParams | None = None,
):
    """Full-conditional probabilities for reseating the last-ordered item.

    Returns ``(candidate_labels, probs, new_label)`` where the final
    entry of ``probs`` belongs to a fresh cluster labeled ``new_label``.
    Existing candidates are clusters without a member of the item's
    family that contain at least one neighbor of the item; each weight is
    the cluster size (times the item's likelihood under the cluster's
    parameters unless ``prior_only``), and the fresh-cluster weight is
    the concentration (times the likelihood under ``aux_params``).
    """
    item = state.permutation[-1]
    fam = families[item]
    labels = list(state.partition)
    feats = None if prior_only else features_matrix(data)

    sizes: dict[int, int] = {}
    fams_of: dict[int, set] = {}
    members: dict[int, list] = {}
    for i, lab in enumerate(labels):
        if i == item:
            continue
        sizes[lab] = sizes.get(lab, 0) + 1
        fams_of.setdefault(lab, set()).add(families[i])
        members.setdefault(lab, []).append(i)

    nbrs = set(int(v) for v in neighbors.neighbors(item)) - {item}
    candidates = [
        lab
        for lab in sorted(sizes)
        if fam not in fams_of[lab] and any(i in nbrs for i in members[lab])
    ]
    new_label = max(labels) + 1

    logw = []
    for lab in candidates:
        lw = math.log(sizes[lab])
        if not prior_only:
            lw += mvn_logpdf(feats[item], state.params[lab])
        logw.append(lw)
    lw_new = math.log(state.alpha)
    if not prior_only:
        if aux_params is None:
            raise ValueError("aux_params required unless prior_only")
        lw_new += mvn_logpdf(feats[item], aux_params)
    logw.append(lw_new)

    top = max(logw)
    if top == NEG_INF:
        probs = np.zeros(len(logw))
        probs[-1] = 1.0
    else:
        probs = np.exp(np.asarray(logw) - top)
        probs /= probs.sum()
    return candidates, probs, new_label


def draw_auxiliary_params(h: Hyperparams, rng: np.random.Generator) -> ClusterParams:
    """Fresh cluster parameters from the priors: a Gaussian mean, then
    covariance components at the mean's (floored) log diameter."""
    mu = h.mu0_array + np.sqrt(np.asarray(h.sigma0_diag)) * rng.standard_normal(3)
    ld = max(float(mu[2]), LOG_DIAMETER_FLOOR)
    cov = sample_covariance_prior(ld, h, rng)
    return ClusterParams(mu, cov)


def reassign_last_item(
    state: SamplerState,
    data,
    families,
    neighbors: NeighborIndex,
    h: Hyperparams,
    rng: np.random.Generator,
    *,
    prior_only: bool = False,
) -> SamplerState:
    """Remove the last-ordered item and reseat it from its full
    conditional; an emptied cluster is deleted with its parameters."""
    item = state.permutation[-1]
    aux = None if prior_only else draw_auxiliary_params(h, rng)
    candidates, probs, new_label = reassignment_probabilities(
        state, data, families, neighbors, h, prior_only=prior_only, aux_params=aux
    )
    u = rng.random()
    acc = 0.0
    choice = len(probs) - 1
    for idx, p in enumerate(probs):
        acc += p
        if acc > u:
            choice = idx
            break
    labels = list(state.partition)
    old = labels[item]
    params = dict(state.params)
    if labels.count(old) == 1:
        params.pop(old, None)
    if choice < len(candidates):
        labels[item] = candidates[choice]
    else:
        labels[item] = new_label
        if not prior_only:
            params[new_label] = aux
    return SamplerState(
        tuple(labels), state.permutation, state.alpha, params, state.scan_index
    )


def _engine_from_state(
    state: SamplerState,
    data,
    families,
    neighbors: NeighborIndex | None,
    h: Hyperparams,
    *,
    prior_only: bool,
    update_alpha: bool,
    trace_weights: bool = False,
) -> ChainEngine:
    indptr = indices = None
    if neighbors is not None and not neighbors.unrestricted:
        indptr, indices = neighbors.indptr, neighbors.indices
    engine = ChainEngine(
        families,
        h,
        feats=None if prior_only else features_matrix(data),
        nb_indptr=indptr,
        nb_indices=indices,
        prior_only=prior_only,
        update_alpha=update_alpha,
        trace_weights=trace_weights,
    )
    engine.load_state(
        state.partition, state.permutation, state.alpha, state.params, state.scan_index
    )
    return engine


def _state_from_engine(engine: ChainEngine) -> SamplerState:
    return SamplerState(
        tuple(int(v) for v in engine.labels),
        tuple(int(v) for v in engine.order),
        float(engine.alpha),
        engine.params_dict(),
        engine.scan_index,
    )


def gibbs_scan(
    state: SamplerState,
    data,
    families,
    neighbors: NeighborIndex | None,
    h: Hyperparams,
    rng: np.random.Generator,
    *,
    prior_only: bool = False,
    update_alpha: bool = True,
) -> SamplerState:
    """One scan: a concentration update, ``n`` repetitions of {order
    Metropolis step, last-item reassignment}, then the per-cluster
    parameter pass."""
    engine = _engine_from_state(
        state, data, families, neighbors, h,
        prior_only=prior_only, update_alpha=update_alpha,
    )
    engine.scan(rng)
    return _state_from_engine(engine)


def run_chain(
    data,
    families,
    config: ChainConfig,
    *,
    chain_id: int = 0,
    prior_only: bool = False,
    update_alpha: bool = True,
    fixed_alpha: float | None = None,
    trace_weights: bool = False,
    return_engine: bool = False,
):
    """Run one chain and return its retained draws.

    The chain starts from all-singleton clusters with means at the data
    and prior-drawn covariances, runs ``config.num_scans`` scans, and
    emits scans ``s`` with ``s > burn_in`` and ``(s - burn_in)`` a
    multiple of ``thin_every``.  Deterministic given ``config.seed``.
    """
    families = np.asarray(families)
    rng = np.random.default_rng(config.seed)
    h = config.hyper
    neighbors = None
    if not prior_only and not math.isinf(h.rho):
        neighbors = build_neighbor_index(data, h.rho)
    engine = ChainEngine(
        families,
        h,
        feats=None if prior_only else features_matrix(data),
        nb_indptr=None if neighbors is None else neighbors.indptr,
        nb_indices=None if neighbors is None else neighbors.indices,
        prior_only=prior_only,
        update_alpha=update_alpha and fixed_alpha is None,
        trace_weights=trace_weights,
    )
    engine.start_singletons(rng, alpha_init=fixed_alpha)
    draws: list[Draw] = []
    for s in range(1, config.num_scans + 1):
        engine.scan(rng)
        if s > config.burn_in_scans and (s - config.burn_in_scans) % config.thin_every == 0:
            draws.append(
                Draw(chain_id, s, float(engine.alpha), canonical_labels(engine.labels))
            )
    if return_engine:
        return draws, engine
    return draws


def derive_chain_seeds(master_seed: int, num_chains: int) -> list[int]:
    """Deterministic per-chain seeds from a master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(v) for v in ss.generate_state(num_chains, dtype=np.uint64)]


def _chain_worker(args) -> list[Draw]:
    data, families, config, chain_id, prior_only = args
    return run_chain(
        data, families, config, chain_id=chain_id, prior_only=prior_only
    )


def run_chains_parallel(
    data,
    families,
    config: ChainConfig,
    num_chains: int,
    *,
    processes: int | None = None,
    prior_only: bool = False,
) -> list[Draw]:
    """Independent chains with seeds derived from ``config.seed``.

    Results are concatenated in chain order, so the output does not
    depend on scheduling.  ``processes=1`` runs sequentially in-process.
    """
    if num_chains < 1:
        raise ValueError("num_chains must be >= 1")
    seeds = derive_chain_seeds(config.seed, num_chains)
    configs = [config.with_overrides(seed=seeds[c]) for c in range(num_chains)]
    tasks = [
        (features_matrix(data) if not prior_only else data, np.asarray(families),
         configs[c], c, prior_only)
        for c in range(num_chains)
    ]
    if processes is None:
        processes = min(num_chains, os.cpu_count() or 1)
    if processes <= 1:
        results = [_chain_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_chain_worker, tasks))
    out: list[Draw] = []
    for chain_draws in results:
        out.extend(chain_draws)
    return out


def run_prior_chain(
    families,
    alpha: float,
    num_iterations: int,
    thin: int,
    seed: int,
    h: Hyperparams | None = None,
) -> list[tuple[int, ...]]:
    """Prior-only validation protocol: fixed concentration, no
    likelihood, every ``thin``-th iteration's partition recorded."""
    if num_iterations < 1 or thin < 1:
        raise ValueError("num_iterations and thin must be >= 1")
    h = h or Hyperparams()
    rng = np.random.default_rng(seed)
    engine = ChainEngine(np.asarray(families), h, prior_only=True, update_alpha=False)
    engine.start_singletons(rng, alpha_init=alpha)
    rec = engine.run_prior_iterations(num_iterations, thin, rng)
    return [canonical_labels(row) for row in rec]


def check_state(state: SamplerState, families) -> None:
    """Raise unless the state's partition is valid and params are keyed
    by exactly the occupied cluster labels."""
    if not is_valid_partition(state.partition, families):
        raise ValueError("partition violates the family constraint")
    if state.params:
        occupied = set(state.partition)
        if set(state.params) != occupied:
            raise ValueError("params keys do not match occupied clusters")
