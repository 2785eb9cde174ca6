"""Synthetic multi-annotator data and the model-comparison study.

Datasets mimic the crater-marking setup: true object centers drawn
uniformly in a box with Gamma log diameters, each simulated annotator
detecting every true object independently with its own probability and
contributing a Gaussian-perturbed mark, plus a random number of spurious
marks drawn like fresh centers.  The study fits the constrained model
(optionally also its radius-restricted variant) and the unconstrained
CRP baseline to each dataset and compares partition recovery.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ChainConfig, preset_hyperparams
from .metrics import adjusted_rand_index, cluster_size_counts, duplicate_family_fraction
from .mixture import Annotation
from .sampler import run_chain

STUDY_MODELS = ("dfcrp", "dfcrp_radius", "crp")


@dataclass(frozen=True)
class SimConfig:
    """Generator settings for one synthetic dataset."""

    k_true: int = 30
    j_experts: int = 6
    bounds_x: tuple[float, float] = (0.0, 700.0)
    bounds_y: tuple[float, float] = (0.0, 500.0)
    a_ld: float = 64.0
    b_ld: float = 16.0
    detect_probs: tuple[float, ...] = (0.98, 0.96, 0.94, 0.92, 0.90, 0.88)
    false_rates: tuple[float, ...] = (0.12, 0.10, 0.08, 0.06, 0.04, 0.02)
    noise_cov: tuple = ((5.0, 0.0, 0.0), (0.0, 5.0, 0.0), (0.0, 0.0, 0.01))
    false_mode: str = "binomial"

    def __post_init__(self):
        if self.k_true < 1 or self.j_experts < 1:
            raise ValueError("k_true and j_experts must be >= 1")
        if self.bounds_x[0] >= self.bounds_x[1] or self.bounds_y[0] >= self.bounds_y[1]:
            raise ValueError("bounds must be ordered")
        if self.a_ld <= 0 or self.b_ld <= 0:
            raise ValueError("log-diameter Gamma parameters must be positive")
        for name in ("detect_probs", "false_rates"):
            vals = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if len(vals) != self.j_experts:
                raise ValueError(f"{name} must have one entry per expert")
            if any(not 0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"{name} entries must be probabilities")
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError("noise_cov must be 3x3")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("noise_cov must be positive definite")
        object.__setattr__(self, "noise_cov", tuple(map(tuple, cov)))
        if self.false_mode not in ("binomial", "poisson"):
            raise ValueError("false_mode must be 'binomial' or 'poisson'")

    @property
    def noise_matrix(self) -> np.ndarray:
        return np.asarray(self.noise_cov, dtype=float)


@dataclass(frozen=True)
class LabeledDataset:
    """Generated annotations plus the generating partition (spurious
    marks are singleton clusters)."""

    annotations: tuple[Annotation, ...]
    truth: tuple[int, ...]

    @property
    def features(self) -> np.ndarray:
        return np.array([[a.x, a.y, a.ld] for a in self.annotations])

    @property
    def families(self) -> np.ndarray:
        return np.array([a.family for a in self.annotations], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.annotations)


def generate_dataset(cfg: SimConfig, rng: np.random.Generator) -> LabeledDataset:
    """Draw one synthetic dataset.

    True centers first (uniform positions, Gamma log diameters), then per
    annotator: a Bernoulli detection per center with a Gaussian mark
    around detected centers, followed by the annotator's spurious marks
    drawn exactly like fresh centers.  The spurious count per annotator
    is Binomial(k_true, rate) by default, or Poisson(k_true * rate).
    """
    k_true = cfg.k_true
    centers_x = rng.uniform(cfg.bounds_x[0], cfg.bounds_x[1], size=k_true)
    centers_y = rng.uniform(cfg.bounds_y[0], cfg.bounds_y[1], size=k_true)
    centers_ld = rng.gamma(cfg.a_ld, 1.0 / cfg.b_ld, size=k_true)
    centers = np.column_stack([centers_x, centers_y, centers_ld])
    chol = np.linalg.cholesky(cfg.noise_matrix)

    annotations: list[Annotation] = []
    truth: list[int] = []
    next_false = k_true
    for j in range(cfg.j_experts):
        detected = rng.random(k_true) < cfg.detect_probs[j]
        for k in np.flatnonzero(detected):
            mark = centers[k] + chol @ rng.standard_normal(3)
            annotations.append(Annotation(j, float(mark[0]), float(mark[1]), float(mark[2])))
            truth.append(int(k))
        if cfg.false_mode == "binomial":
            n_false = int(rng.binomial(k_true, cfg.false_rates[j]))
        else:
            n_false = int(rng.poisson(k_true * cfg.false_rates[j]))
        for _ in range(n_false):
            fx = rng.uniform(cfg.bounds_x[0], cfg.bounds_x[1])
            fy = rng.uniform(cfg.bounds_y[0], cfg.bounds_y[1])
            fld = rng.gamma(cfg.a_ld, 1.0 / cfg.b_ld)
            annotations.append(Annotation(j, float(fx), float(fy), float(fld)))
            truth.append(next_false)
            next_false += 1
    return LabeledDataset(tuple(annotations), tuple(truth))


@dataclass(frozen=True)
class FitRecord:
    """Posterior summaries of one model fitted to one dataset."""

    dataset: int
    model: str
    n_items: int
    mean_ari: float
    dup_fraction: float
    size_counts: tuple[float, ...]
    seed: int


@dataclass(frozen=True)
class StudyResult:
    """All per-dataset fit records of a simulation study."""

    records: tuple[FitRecord, ...]
    models: tuple[str, ...]
    num_datasets: int

    def _per_dataset(self, model: str, attr: str) -> np.ndarray:
        recs = sorted(
            (r for r in self.records if r.model == model), key=lambda r: r.dataset
        )
        return np.array([getattr(r, attr) for r in recs])

    def ari_summary(self) -> list[dict]:
        """Five-number summaries of per-dataset posterior-mean agreement,
        plus the paired difference of the unrestricted constrained model
        against the CRP when both were fitted."""

        def five(vals: np.ndarray) -> dict:
            return {
                "minimum": float(vals.min()),
                "p25": float(np.percentile(vals, 25)),
                "mean": float(vals.mean()),
                "p75": float(np.percentile(vals, 75)),
                "maximum": float(vals.max()),
            }

        rows = []
        for model in self.models:
            rows.append({"type": model, **five(self._per_dataset(model, "mean_ari"))})
        if "dfcrp" in self.models and "crp" in self.models:
            diff = self._per_dataset("dfcrp", "mean_ari") - self._per_dataset("crp", "mean_ari")
            rows.append({"type": "difference", **five(diff)})
        return rows

    def counts_summary(self) -> list[dict]:
        """Mean posterior-average cluster counts at minimum sizes 1-6."""
        rows = []
        for model in self.models:
            counts = np.vstack(self._per_dataset(model, "size_counts"))
            row = {"type": model}
            for s in range(counts.shape[1]):
                row[f"size{s + 1}"] = float(counts[:, s].mean())
            rows.append(row)
        return rows

    def wins(self, model_a: str = "dfcrp", model_b: str = "crp") -> int:
        """Datasets on which model_a's posterior-mean agreement beats
        model_b's."""
        a = self._per_dataset(model_a, "mean_ari")
        b = self._per_dataset(model_b, "mean_ari")
        return int((a > b).sum())

    def mean_dup_fraction(self, model: str) -> float:
        return float(self._per_dataset(model, "dup_fraction").mean())


def _dataset_seeds(master_seed: int, num_datasets: int) -> list[np.ndarray]:
    root = np.random.SeedSequence(master_seed)
    return [child.generate_state(1 + len(STUDY_MODELS)) for child in root.spawn(num_datasets)]


def _fit_one(args) -> FitRecord:
    dataset_idx, model, cfg, chain_config, gen_seed, model_seed, radius = args
    data = generate_dataset(cfg, np.random.default_rng(gen_seed))
    feats = data.features
    true_families = data.families
    if model == "crp":
        fit_families = np.arange(len(data))
        rho = math.inf
    elif model == "dfcrp":
        fit_families = true_families
        rho = math.inf
    elif model == "dfcrp_radius":
        fit_families = true_families
        rho = radius
    else:
        raise ValueError(f"unknown model {model!r}")
    config = chain_config.with_overrides(
        seed=int(model_seed), hyper=chain_config.hyper.with_overrides(rho=rho)
    )
    draws = run_chain(feats, fit_families, config)
    aris = [adjusted_rand_index(d.labels, data.truth) for d in draws]
    dups = [duplicate_family_fraction(d.labels, true_families) for d in draws]
    counts = np.vstack([cluster_size_counts(d.labels) for d in draws]).mean(axis=0)
    return FitRecord(
        dataset=dataset_idx,
        model=model,
        n_items=len(data),
        mean_ari=float(np.mean(aris)),
        dup_fraction=float(np.mean(dups)),
        size_counts=tuple(float(v) for v in counts),
        seed=int(model_seed),
    )


def run_simulation_study(
    num_datasets: int,
    cfg: SimConfig,
    chain_config: ChainConfig,
    models: Sequence[str] = ("dfcrp", "crp"),
    *,
    master_seed: int = 0,
    radius: float = 75.0,
    processes: int | None = None,
) -> StudyResult:
    """Fit the requested models to generated datasets and summarize.

    Every dataset and every fit gets a seed derived deterministically
    from ``master_seed``, so re-running with the same arguments (in any
    process count) reproduces the result exactly.
    """
    models = tuple(models)
    if not models:
        raise ValueError("need at least one model")
    for m in models:
        if m not in STUDY_MODELS:
            raise ValueError(f"unknown model {m!r}; expected subset of {STUDY_MODELS}")
    seeds = _dataset_seeds(master_seed, num_datasets)
    tasks = []
    for d in range(num_datasets):
        for model in models:
            model_pos = STUDY_MODELS.index(model)
            tasks.append(
                (d, model, cfg, chain_config, int(seeds[d][0]),
                 int(seeds[d][1 + model_pos]), radius)
            )
    if processes is None:
        processes = os.cpu_count() or 1
    if processes <= 1:
        records = [_fit_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            records = list(pool.map(_fit_one, tasks))
    return StudyResult(tuple(records), models, num_datasets)


def study_chain_config(seed: int = 0, num_scans: int = 10_000, burn_in: int = 2_000) -> ChainConfig:
    """Chain settings used for model comparison: the simulation-box
    prior preset, no thinning, and the stated scan budget."""
    return ChainConfig(
        num_scans=num_scans,
        burn_in_scans=burn_in,
        thin_every=1,
        seed=seed,
        hyper=preset_hyperparams("simulation"),
    )
