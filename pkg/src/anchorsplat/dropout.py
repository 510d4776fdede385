"""Anchor-based structured dropout and degree-scheduled SH dropout.

Per training iteration a :class:`DropoutPlan` is drawn: anchors are sampled with
probability ``p_a`` (ramping linearly to ``pa_max``), each anchor drags its ``k``
nearest neighbours into the dropped set, and dropped Gaussians get opacity mask 0.
Independently, a ``p_sh`` fraction of Gaussians keeps only SH degrees ``<= l_max``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .gscore import GaussianCloud, coeff_degrees, num_sh_coeffs
from .spatial import KnnIndex, build_index

DEFAULT_MILESTONES = ((0, 0), (2000, 0), (4000, 1), (6000, 2))


@dataclass
class DropoutConfig:
    pa_max: float = 0.02
    k: int = 10
    p_sh: float = 0.2
    lmax_milestones: tuple[tuple[int, int], ...] = DEFAULT_MILESTONES
    total_iters: int = 10000
    rng_seed: int = 0
    anchor_dropout_on: bool = True
    sh_dropout_on: bool = True
    sh_random_baseline: bool = False
    knn_rebuild_every: int = 1

    def __post_init__(self):
        self.lmax_milestones = tuple((int(i), int(l)) for i, l in self.lmax_milestones)
        if not 0 <= self.pa_max <= 1:
            raise InvalidParameterError("pa_max must lie in [0, 1]")
        if self.k < 0:
            raise InvalidParameterError("k must be non-negative")
        if not 0 <= self.p_sh <= 1:
            raise InvalidParameterError("p_sh must lie in [0, 1]")
        iters = [i for i, _ in self.lmax_milestones]
        if not self.lmax_milestones or iters != sorted(iters):
            raise InvalidParameterError("lmax_milestones must be non-empty and sorted by iteration")
        if self.knn_rebuild_every < 1:
            raise InvalidParameterError("knn_rebuild_every must be >= 1")


def parse_milestones(text: str) -> tuple[tuple[int, int], ...]:
    """``"2000:0,4000:1,6000:2"`` -> ``((2000, 0), (4000, 1), (6000, 2))``."""
    try:
        pairs = [item.split(":") for item in text.split(",") if item.strip()]
        out = tuple((int(i), int(l)) for i, l in pairs)
    except ValueError as exc:
        raise InvalidParameterError(f"bad l_max schedule {text!r}; expected 'iter:lmax,...'") from exc
    if not out:
        raise InvalidParameterError("empty l_max schedule")
    return out


def format_milestones(milestones) -> str:
    return ",".join(f"{i}:{l}" for i, l in milestones)


def scale_milestones(milestones, total_iters: int, reference_iters: int = 10000):
    """Rescale milestone iterations from a ``reference_iters`` budget to ``total_iters``."""
    return tuple((int(round(i * total_iters / reference_iters)), l) for i, l in milestones)


@dataclass(eq=False)
class DropoutPlan:
    opacity_mask: np.ndarray  # (N,) 0/1
    sh_retain: np.ndarray  # (N,) highest SH degree kept
    anchors: np.ndarray
    dropped: np.ndarray
    sh_coeff_mask: np.ndarray | None = None  # (N, K), "drop SH randomly" baseline only
    p_a: float = 0.0
    l_max: int | None = None

    @property
    def is_identity(self) -> bool:
        return (
            self.dropped.size == 0
            and self.sh_coeff_mask is None
            and bool(np.all(self.sh_retain == self.sh_retain.max(initial=0)))
        )

    def render_kwargs(self) -> dict:
        return {"mask": self.opacity_mask, "sh_retain": self.sh_retain, "sh_coeff_mask": self.sh_coeff_mask}


def identity_plan(n: int, degree: int) -> DropoutPlan:
    empty = np.zeros(0, dtype=np.int64)
    return DropoutPlan(np.ones(n), np.full(n, degree, dtype=np.int64), empty, empty)


def anchor_rate(iteration: int, config: DropoutConfig) -> float:
    if config.total_iters <= 0:
        return config.pa_max
    return config.pa_max * iteration / config.total_iters


def select_anchors(n_gaussians: int, p_a: float, rng) -> np.ndarray:
    if not 0 <= p_a <= 1:
        raise InvalidParameterError("p_a must lie in [0, 1]")
    return np.flatnonzero(rng.random(n_gaussians) < p_a)


def build_dropout_set(positions, anchors, k: int, knn_index=None) -> np.ndarray:
    """Anchors together with each anchor's ``k`` nearest neighbours, sorted and unique.

    ``knn_index`` may be a :class:`KnnIndex`, a zero-argument callable returning one
    (built only when needed), or ``None`` to build a fresh index.
    """
    n = np.asarray(positions).shape[0]
    anchors = np.asarray(anchors, dtype=np.int64)
    if k >= n:
        raise InvalidParameterError(f"k={k} must be smaller than N={n}")
    if anchors.size == 0:
        return np.zeros(0, dtype=np.int64)
    if k == 0:
        return np.unique(anchors)
    if callable(knn_index):
        knn_index = knn_index()
    if knn_index is None:
        knn_index = build_index(positions)
    neighbors = knn_index.query_index(anchors, k)
    return np.unique(np.concatenate([anchors, neighbors.ravel()]))


def make_mask(n: int, dropped) -> np.ndarray:
    dropped = np.asarray(dropped, dtype=np.int64)
    if dropped.size and (dropped.min() < 0 or dropped.max() >= n):
        raise InvalidParameterError(f"dropped indices must lie in [0, {n})")
    mask = np.ones(n)
    mask[dropped] = 0.0
    return mask


def current_lmax(iteration: int, milestones) -> int:
    """Value of the latest milestone reached; before the first one its value applies."""
    value = milestones[0][1]
    for it, lmax in milestones:
        if iteration >= it:
            value = lmax
    return value


def plan_sh_dropout(n: int, iteration: int, config: DropoutConfig, degree: int, rng) -> np.ndarray:
    """Per-Gaussian retained SH degree: ``l_max`` for a ``p_sh`` fraction, ``degree`` otherwise."""
    retain = np.full(n, degree, dtype=np.int64)
    if not config.sh_dropout_on or config.sh_random_baseline:
        return retain
    lmax = min(current_lmax(iteration, config.lmax_milestones), degree)
    retain[rng.random(n) < config.p_sh] = lmax
    return retain


def random_sh_zero_probability(lmax: int, degree: int, p_sh: float) -> float:
    """Per-coefficient zeroing rate matching the expected count removed by degree truncation."""
    higher = num_sh_coeffs(degree) - 1
    if higher == 0:
        return 0.0
    truncated = num_sh_coeffs(degree) - num_sh_coeffs(min(lmax, degree))
    return p_sh * truncated / higher


def plan_sh_random(n: int, iteration: int, config: DropoutConfig, degree: int, rng) -> np.ndarray:
    """``(N, K)`` keep-mask zeroing individual degree>=1 coefficients at a matched rate."""
    lmax = current_lmax(iteration, config.lmax_milestones)
    q = random_sh_zero_probability(lmax, degree, config.p_sh)
    keep = rng.random((n, num_sh_coeffs(degree))) >= q
    keep[:, coeff_degrees(degree) == 0] = True
    return keep.astype(np.float64)


def make_plan(
    cloud: GaussianCloud,
    iteration: int | None,
    config: DropoutConfig,
    knn_index,
    rng,
) -> DropoutPlan:
    """Compose anchor dropout and SH dropout for one iteration; ``iteration=None`` -> identity."""
    n, degree = cloud.n, cloud.max_degree
    if iteration is None:
        return identity_plan(n, degree)
    p_a = anchor_rate(iteration, config)
    empty = np.zeros(0, dtype=np.int64)
    anchors, dropped = empty, empty
    if config.anchor_dropout_on:
        anchors = select_anchors(n, p_a, rng)
        if anchors.size:
            k = min(config.k, n - 1)
            dropped = build_dropout_set(cloud.positions, anchors, k, knn_index)
    lmax = current_lmax(iteration, config.lmax_milestones)
    retain = plan_sh_dropout(n, iteration, config, degree, rng)
    coeff_mask = None
    if config.sh_dropout_on and config.sh_random_baseline:
        coeff_mask = plan_sh_random(n, iteration, config, degree, rng)
    return DropoutPlan(
        opacity_mask=make_mask(n, dropped),
        sh_retain=retain,
        anchors=anchors,
        dropped=dropped,
        sh_coeff_mask=coeff_mask,
        p_a=p_a if config.anchor_dropout_on else 0.0,
        l_max=lmax if config.sh_dropout_on else None,
    )
