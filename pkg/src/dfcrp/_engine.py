"""Mutable chain state driving the kernel loops.

One engine owns the slot arrays for a single chain.  Each scan draws its
randomness from the chain's generator in a fixed order (concentration
step, then per-iteration arrays, then parameter-pass arrays), so a run
is bit-reproducible from the seed.  The running order-conditional log
probability is cached and patched incrementally inside the iteration
kernel; it is recomputed from scratch at the top of every scan, which
bounds float drift and makes a persistent engine equivalent to rebuilding
one from a state snapshot between scans.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels as K
from .config import LOG_DIAMETER_FLOOR, Hyperparams
from .mixture import ClusterCovariance, ClusterParams, alpha_log_prior

NEG_INF = -math.inf


class ChainEngine:
    def __init__(
        self,
        families,
        h: Hyperparams,
        *,
        feats=None,
        nb_indptr=None,
        nb_indices=None,
        prior_only: bool = False,
        update_alpha: bool = True,
        trace_weights: bool = False,
    ):
        families = np.asarray(families)
        self.n = n = families.size
        if n < 1:
            raise ValueError("need at least one item")
        _, dense = np.unique(families, return_inverse=True)
        self.fams = dense.astype(np.int64)
        self.n_fam = int(self.fams.max()) + 1
        self.exchangeable = self.n_fam == n
        self.h = h
        self.prior_only = prior_only
        self.use_lik = not prior_only
        self.update_alpha = update_alpha
        if self.use_lik:
            if feats is None:
                raise ValueError("feature data required unless prior_only")
            self.feats = np.ascontiguousarray(feats, dtype=np.float64)
            if self.feats.shape != (n, 3):
                raise ValueError(f"feature data must be ({n}, 3)")
        else:
            self.feats = np.zeros((n, 3))
        if nb_indptr is None:
            self.unrestricted = True
            self.nb_indptr = np.zeros(1, dtype=np.int64)
            self.nb_indices = np.zeros(0, dtype=np.int64)
        else:
            self.unrestricted = False
            self.nb_indptr = np.ascontiguousarray(nb_indptr, dtype=np.int64)
            self.nb_indices = np.ascontiguousarray(nb_indices, dtype=np.int64)

        num_slots = self.num_slots = n + 1
        self.labels = np.empty(n, dtype=np.int64)
        self.order = np.empty(n, dtype=np.int64)
        self.alpha = float(h.a_alpha / h.b_alpha)
        self.counts = np.zeros(num_slots, dtype=np.int64)
        self.fam_in = np.zeros((num_slots, self.n_fam), dtype=np.uint8)
        self.active = np.zeros(num_slots, dtype=np.uint8)
        self.free_stack = np.zeros(num_slots, dtype=np.int64)
        self.state_ints = np.zeros(2, dtype=np.int64)  # (free_top, num_clusters)
        self.mu = np.zeros((num_slots, 3))
        self.covp = np.zeros((num_slots, 3))
        self.prec = np.zeros((num_slots, 3, 3))
        self.logdet = np.zeros(num_slots)
        self.cache_f = np.zeros(2)  # (order-conditional logp, sum log join numerators)
        self.d = np.zeros(n)
        self.scan_index = 0
        self.stats = np.zeros(2, dtype=np.int64)  # (order proposals, acceptances)

        # scratch buffers shared across kernel calls
        self._counts_scr = np.zeros(num_slots, dtype=np.int64)
        self._famtab_scr = np.zeros((num_slots, self.n_fam), dtype=np.uint8)
        self._blocked_scr = np.zeros(self.n_fam, dtype=np.int64)
        self._d_scr = np.zeros(n)
        self._order_scr = np.zeros(n, dtype=np.int64)
        self._cand_buf = np.zeros(num_slots + 1, dtype=np.int64)
        self._logw_buf = np.zeros(num_slots + 2)
        self._w_buf = np.zeros(num_slots + 2)
        self._seen_buf = np.zeros(num_slots, dtype=np.uint8)
        self._dummy_aux = np.zeros((1, 3))
        self._dummy_len = np.zeros(1, dtype=np.int64)
        self._dummy_c = np.zeros((1, 1), dtype=np.int64)
        self._dummy_w = np.zeros((1, 1))

        self.trace_weights = trace_weights
        self.weight_trace: list[tuple] = []

        # hyperparameter packs consumed by the kernels
        self._gam = np.array(
            [h.kappa_x, h.eta_x, h.tau_x, h.kappa_d, h.eta_d, h.tau_d,
             h.a_lambda, h.b_lambda]
        )
        self._prop_sd = np.sqrt(np.asarray(h.s_proposal))
        self._mu0 = np.asarray(h.mu0, dtype=float)
        self._s0_sd = np.sqrt(np.asarray(h.sigma0_diag))
        self._s0_inv = 1.0 / np.asarray(h.sigma0_diag)

    # ------------------------------------------------------------------
    # state setup

    def _set_occupancy(self, labels: np.ndarray) -> None:
        """Rebuild counts/fam_in/active/free list from slot labels."""
        n = self.n
        self.counts[:] = 0
        self.fam_in[:] = 0
        self.active[:] = 0
        for i in range(n):
            s = labels[i]
            self.counts[s] += 1
            self.fam_in[s, self.fams[i]] = 1
            self.active[s] = 1
        occupied = np.flatnonzero(self.active)
        free = [s for s in range(self.num_slots - 1, -1, -1) if not self.active[s]]
        self.free_stack[: len(free)] = free
        self.state_ints[0] = len(free)
        self.state_ints[1] = occupied.size

    def start_singletons(self, rng: np.random.Generator, alpha_init=None) -> None:
        """Every item in its own cluster; means at the data, covariances
        drawn from the prior at each item's (floored) log diameter."""
        n = self.n
        self.labels[:] = np.arange(n)
        self.order[:] = np.arange(n)
        self._set_occupancy(self.labels)
        self.alpha = float(alpha_init) if alpha_init is not None else float(
            self.h.a_alpha / self.h.b_alpha
        )
        self.scan_index = 0
        if self.use_lik:
            h = self.h
            self.mu[:n] = self.feats
            ld = np.maximum(self.feats[:, 2], LOG_DIAMETER_FLOOR)
            var_x = rng.gamma(h.tau_x * h.kappa_x * ld**h.eta_x, 1.0 / h.tau_x)
            var_d = rng.gamma(h.tau_d * h.kappa_d * ld**h.eta_d, 1.0 / h.tau_d)
            lam = 2.0 * rng.beta(h.a_lambda, h.b_lambda, size=n) - 1.0
            self.covp[:n, 0] = var_x
            self.covp[:n, 1] = var_d
            self.covp[:n, 2] = lam * np.sqrt(var_x * var_d / 2.0)
            for s in range(n):
                self.logdet[s] = K.cov3_precision(
                    self.covp[s, 0], self.covp[s, 1], self.covp[s, 2], self.prec[s]
                )

    def load_state(self, labels, order, alpha, params, scan_index=0) -> None:
        """Adopt an external state; cluster labels are mapped onto slots
        in ascending label order."""
        labels = np.asarray(labels)
        order = np.asarray(order, dtype=np.int64)
        distinct = sorted(set(int(v) for v in labels))
        slot_of = {lab: s for s, lab in enumerate(distinct)}
        self.labels[:] = [slot_of[int(v)] for v in labels]
        self.order[:] = order
        self._set_occupancy(self.labels)
        self.alpha = float(alpha)
        self.scan_index = int(scan_index)
        if self.use_lik:
            if set(params) != set(distinct):
                raise ValueError("params must be keyed exactly by occupied cluster labels")
            for lab, p in params.items():
                s = slot_of[int(lab)]
                self.mu[s] = np.asarray(p.mu, dtype=float)
                self.covp[s, 0] = p.cov.var_x
                self.covp[s, 1] = p.cov.var_d
                self.covp[s, 2] = p.cov.cov_xd
                self.logdet[s] = K.cov3_precision(
                    p.cov.var_x, p.cov.var_d, p.cov.cov_xd, self.prec[s]
                )
                if np.isnan(self.logdet[s]):
                    raise ValueError(f"cluster {lab} covariance is not positive definite")

    def params_dict(self) -> dict[int, ClusterParams]:
        if not self.use_lik:
            return {}
        out = {}
        for s in np.flatnonzero(self.active):
            out[int(s)] = ClusterParams(
                self.mu[s].copy(),
                ClusterCovariance(*(float(v) for v in self.covp[s])),
            )
        return out

    # ------------------------------------------------------------------
    # probability caches

    def refresh_cache(self) -> None:
        n = self.n
        if n == 1:
            self.cache_f[:] = 0.0
            return
        if self.exchangeable:
            self.d[:] = np.arange(n, dtype=float)
            slk = 0.0
            for s in np.flatnonzero(self.active):
                slk += math.lgamma(self.counts[s])
            self.cache_f[1] = slk
            self.cache_f[0] = self.decomp_logprob(self.alpha)
        else:
            logp, slk = K.joint_eval(
                self.labels, self.order, self.fams, self.n_fam, self.alpha,
                self._counts_scr, self._famtab_scr, self._blocked_scr, self.d,
            )
            self.cache_f[0] = logp
            self.cache_f[1] = slk

    def decomp_logprob(self, alpha: float) -> float:
        """Order-conditional log probability at another concentration,
        from the cached alpha-free step decomposition."""
        if self.n == 1:
            return 0.0
        n_clusters = int(self.state_ints[1])
        return (
            (n_clusters - 1) * math.log(alpha)
            + self.cache_f[1]
            - float(np.log(self.d[1:] + alpha).sum())
        )

    # ------------------------------------------------------------------
    # updates

    def alpha_step(self, rng: np.random.Generator) -> None:
        h = self.h
        cur = self.alpha
        sd_log = 1.0 / math.sqrt(h.tau_alpha)
        shift = 0.5 / h.tau_alpha
        prop = math.exp(math.log(cur) - shift + sd_log * rng.standard_normal())
        u = rng.random()

        def log_q(value, center):
            z = (math.log(value) - (math.log(center) - shift)) / sd_log
            return -math.log(value) - 0.5 * z * z

        delta = (
            self.decomp_logprob(prop) + alpha_log_prior(prop, h) + log_q(cur, prop)
            - self.decomp_logprob(cur) - alpha_log_prior(cur, h) - log_q(prop, cur)
        )
        if delta >= 0.0 or u < math.exp(delta):
            self.alpha = prop
            self.cache_f[0] = self.decomp_logprob(prop)

    def _iterate(self, num_iters, rng, record_every=0, rec_labels=None):
        n = self.n
        swap_idx = rng.integers(0, n, size=num_iters).astype(np.int64)
        u_sig = rng.random(num_iters)
        u_asn = rng.random(num_iters)
        if self.use_lik:
            h = self.h
            z = rng.standard_normal((num_iters, 3))
            aux_mu = self._mu0 + self._s0_sd * z
            ld = np.maximum(aux_mu[:, 2], LOG_DIAMETER_FLOOR)
            var_x = rng.gamma(h.tau_x * h.kappa_x * ld**h.eta_x, 1.0 / h.tau_x)
            var_d = rng.gamma(h.tau_d * h.kappa_d * ld**h.eta_d, 1.0 / h.tau_d)
            lam = 2.0 * rng.beta(h.a_lambda, h.b_lambda, size=num_iters) - 1.0
            aux_cov = np.stack(
                [var_x, var_d, lam * np.sqrt(var_x * var_d / 2.0)], axis=1
            )
        else:
            aux_mu = self._dummy_aux
            aux_cov = self._dummy_aux
        if rec_labels is None:
            record_every = 0
            rec_labels = self._dummy_c
        if self.trace_weights:
            trace_len = np.zeros(num_iters, dtype=np.int64)
            trace_c = np.full((num_iters, self.num_slots + 1), -2, dtype=np.int64)
            trace_w = np.zeros((num_iters, self.num_slots + 1))
        else:
            trace_len, trace_c, trace_w = self._dummy_len, self._dummy_c, self._dummy_w
        K.iterate(
            self.labels, self.order, self.fams, self.feats, self.n_fam, self.alpha,
            self.counts, self.fam_in, self.active, self.free_stack, self.state_ints,
            self.mu, self.covp, self.prec, self.logdet,
            self.nb_indptr, self.nb_indices, self.unrestricted,
            self.use_lik, self.exchangeable, LOG_DIAMETER_FLOOR,
            swap_idx, u_sig, u_asn, aux_mu, aux_cov,
            self.cache_f, self.d,
            self._counts_scr, self._famtab_scr, self._blocked_scr, self._d_scr,
            self._order_scr, self._cand_buf, self._logw_buf, self._w_buf,
            self._seen_buf, self.stats,
            record_every, rec_labels,
            self.trace_weights, trace_len, trace_c, trace_w,
        )
        if self.trace_weights:
            self.weight_trace.append((trace_len, trace_c, trace_w))

    def _sweep(self, rng: np.random.Generator) -> None:
        slots = np.flatnonzero(self.active).astype(np.int64)
        member_order = np.argsort(self.labels, kind="stable").astype(np.int64)
        starts = np.searchsorted(self.labels[member_order], slots).astype(np.int64)
        n_active = slots.size
        prop_norm = rng.standard_normal((n_active, 3))
        u_cov = rng.random(n_active)
        mu_norm = rng.standard_normal((n_active, 3))
        K.sweep(
            self.labels, self.feats, self.counts, self.mu, self.covp,
            self.prec, self.logdet,
            self._gam, self._prop_sd, self._mu0, self._s0_inv, LOG_DIAMETER_FLOOR,
            slots, member_order, starts, prop_norm, u_cov, mu_norm,
        )

    def scan(self, rng: np.random.Generator) -> None:
        """One full scan: concentration update, n sampler iterations,
        then the per-cluster parameter pass."""
        self.refresh_cache()
        if self.update_alpha:
            self.alpha_step(rng)
        self._iterate(self.n, rng)
        if self.use_lik:
            self._sweep(rng)
        self.scan_index += 1

    def run_prior_iterations(self, num_iterations, thin, rng) -> np.ndarray:
        """Prior-only iteration loop recording every ``thin``-th partition
        (raw slot labels, one row per record)."""
        if not self.prior_only:
            raise ValueError("iteration recording is a prior-only protocol")
        self.refresh_cache()
        num_records = num_iterations // thin
        rec = np.empty((num_records, self.n), dtype=np.int64)
        self._iterate(num_iterations, rng, record_every=thin, rec_labels=rec)
        return rec
