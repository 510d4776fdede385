"""k-nearest-neighbour index and spatial statistics over Gaussian centres."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, EmptyBinError, InvalidParameterError
from .gscore import Camera, GaussianCloud
from .render import render_backward, render_forward

MAX_PAIRS = 2_000_000


class KnnIndex:
    """Exact kNN over 3D points; distance ties are broken by ascending index.

    Candidates come from a kd-tree, distances are recomputed exactly and sorted
    lexicographically by ``(squared distance, index)``.
    """

    def __init__(self, positions, leaf_size: int = 16):
        positions = np.ascontiguousarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
            raise InvalidParameterError("positions must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(positions)):
            raise InvalidParameterError("positions must be finite")
        self.positions = positions
        self.leaf_size = leaf_size
        # unbalanced, non-compacted trees build faster; queries stay exact
        self.tree = cKDTree(positions, leafsize=leaf_size, balanced_tree=False, compact_nodes=False)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def _sorted_neighbors(self, i: int, cand: np.ndarray, k: int):
        cand = cand[cand != i]
        d2 = np.sum((self.positions[cand] - self.positions[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]

    def query_index(self, indices, k: int) -> np.ndarray:
        """``(len(indices), k)`` neighbour ids of stored points, excluding each point itself."""
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        if k >= self.n:
            raise InvalidParameterError(f"k={k} must be smaller than N={self.n}")
        out = np.empty((indices.size, k), dtype=np.int64)
        if k == 0 or indices.size == 0:
            return out
        kk = min(k + 2, self.n)
        _, cand = self.tree.query(self.positions[indices], k=kk)
        cand = np.asarray(cand, dtype=np.int64).reshape(indices.size, kk)
        d2 = np.sum((self.positions[cand] - self.positions[indices][:, None]) ** 2, axis=2)
        d2[cand == indices[:, None]] = np.inf  # self goes to the back
        rows = np.repeat(np.arange(indices.size), kk)
        order = np.lexsort((cand.ravel(), d2.ravel(), rows)).reshape(indices.size, kk) % kk
        cand = np.take_along_axis(cand, order, 1)
        d2 = np.take_along_axis(d2, order, 1)
        out[:] = cand[:, :k]
        if kk < self.n:
            # a candidate outside the returned set could tie with the k-th distance
            risky = ~np.isfinite(d2[:, k]) | (d2[:, k] <= d2[:, k - 1] * (1 + 1e-12))
            for row in np.flatnonzero(risky):
                i = indices[row]
                radius = np.sqrt(d2[row, k - 1]) * (1 + 1e-9) + 1e-300
                ball = np.asarray(self.tree.query_ball_point(self.positions[i], radius), dtype=np.int64)
                out[row] = self._sorted_neighbors(i, ball, k)[0][:k]
        return out

    def query(self, i: int, k: int) -> np.ndarray:
        return self.query_index([i], k)[0]


def build_index(positions, leaf_size: int = 16) -> KnnIndex:
    return KnnIndex(positions, leaf_size)


def _centered(attribute) -> tuple[np.ndarray, float]:
    values = np.asarray(attribute, dtype=np.float64)
    if values.size == 0 or np.all(values == values.flat[0]):
        raise DegenerateInputError("attribute has zero variance")
    z = values - values.mean()
    return z, float(np.sum(z * z))


def _pairs_within(positions: np.ndarray, hi: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Unordered pairs (i < j) with distance <= hi and their exact distances."""
    tree = cKDTree(positions)
    pairs = tree.query_pairs(hi, output_type="ndarray")
    if pairs.shape[0] > MAX_PAIRS:
        rng = np.random.default_rng(seed)
        pairs = pairs[np.sort(rng.choice(pairs.shape[0], MAX_PAIRS, replace=False))]
    d = np.sqrt(np.sum((positions[pairs[:, 0]] - positions[pairs[:, 1]]) ** 2, axis=1))
    return pairs, d


def morans_i(positions, attribute, distance_bin, seed: int = 0) -> float:
    """Moran's I with binary distance-band weights ``w_ij = [lo <= |p_i - p_j| < hi]``."""
    positions = np.asarray(positions, dtype=np.float64)
    lo, hi = distance_bin
    z, denom = _centered(attribute)
    pairs, d = _pairs_within(positions, hi, seed)
    sel = (d >= lo) & (d < hi)
    pairs = pairs[sel]
    if pairs.shape[0] == 0:
        raise EmptyBinError(f"no pairs with distance in [{lo}, {hi})")
    # symmetric weights: every unordered pair counts twice in both sums
    num = 2.0 * float(np.sum(z[pairs[:, 0]] * z[pairs[:, 1]]))
    weight = 2.0 * pairs.shape[0]
    return (z.size / weight) * num / denom


@dataclass
class MoranBin:
    distance_lo: float
    distance_hi: float
    moran_i: float
    pair_count: int


@dataclass
class MoranResult:
    bins: dict[str, list[MoranBin]] = field(default_factory=dict)

    def rows(self):
        for attr, bins in self.bins.items():
            for b in bins:
                yield attr, b.distance_lo, b.distance_hi, b.moran_i, b.pair_count


def default_bins(scene_extent: float, n_bins: int = 8, lo: float = 1e-3) -> list[tuple[float, float]]:
    edges = np.geomspace(lo, scene_extent / 2, n_bins + 1)
    return list(zip(edges[:-1], edges[1:]))


def moran_profile(positions, attributes: dict, bins, seed: int = 0) -> MoranResult:
    """Moran's I of each named attribute in each distance bin; empty bins report NaN."""
    positions = np.asarray(positions, dtype=np.float64)
    hi = max(b[1] for b in bins)
    pairs, d = _pairs_within(positions, hi, seed)
    result = MoranResult()
    for name, values in attributes.items():
        z, denom = _centered(values)
        prod = z[pairs[:, 0]] * z[pairs[:, 1]]
        out = []
        for lo_b, hi_b in bins:
            sel = (d >= lo_b) & (d < hi_b)
            count = int(sel.sum())
            value = (z.size / count) * float(prod[sel].sum()) / denom if count else float("nan")
            out.append(MoranBin(float(lo_b), float(hi_b), value, count))
        result.bins[name] = out
    return result


def color_scalar(sh: np.ndarray) -> np.ndarray:
    """Mean of the three degree-0 SH coefficients."""
    return sh[:, 0, :].mean(axis=1)


@dataclass
class CompensationRow:
    seed: int
    strategy: str  # "S1" clustered (anchors + kNN), "S2" scattered
    n_dropped: int
    mae: float
    local_grad_mass: float


@dataclass
class CompensationReport:
    rows: list[CompensationRow]

    def mean(self, strategy: str, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.rows if r.strategy == strategy]))


def clustered_drop_set(index: KnnIndex, candidates: np.ndarray, drop_count: int, k: int, rng):
    """Anchors drawn from ``candidates`` plus their k neighbours until ``drop_count`` is reached."""
    dropped: set[int] = set()
    for anchor in rng.permutation(candidates):
        if len(dropped) >= drop_count:
            break
        dropped.add(int(anchor))
        dropped.update(int(j) for j in index.query(int(anchor), k))
    return np.array(sorted(dropped), dtype=np.int64)


def _local_survivors(cloud: GaussianCloud, index: KnnIndex, dropped: np.ndarray) -> np.ndarray:
    radii = 3.0 * cloud.scales[dropped].max(axis=1)
    near = index.tree.query_ball_point(cloud.positions[dropped], radii)
    local = np.zeros(cloud.n, dtype=bool)
    for ids in near:
        local[ids] = True
    local[dropped] = False
    return local


def compensation_study(
    cloud: GaussianCloud,
    camera: Camera,
    drop_count: int,
    k: int = 10,
    seeds=range(10),
    background=(0.0, 0.0, 0.0),
) -> CompensationReport:
    """Compare clustered (S1) against scattered (S2) drops of equal size.

    For each strategy reports the MAE between the full and the dropped render and the
    summed absolute opacity-logit gradient of surviving Gaussians within three
    standard deviations of a dropped centre, under the squared photometric error
    against the full render.
    """
    if cloud.n == 0 or cloud.opacities.max() < 1e-3:
        raise DegenerateInputError("cloud is empty or fully transparent")
    if drop_count < 0 or drop_count > cloud.n // 2:
        raise InvalidParameterError(f"drop_count must lie in [0, {cloud.n // 2}]")
    full = render_forward(cloud, camera, background=background)
    candidates = full.order if full.order.size else np.arange(cloud.n)
    index = build_index(cloud.positions)
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        if drop_count == 0:
            rows += [CompensationRow(seed, s, 0, 0.0, 0.0) for s in ("S1", "S2")]
            continue
        s1 = clustered_drop_set(index, candidates, drop_count, k, rng)
        pool = candidates if candidates.size >= s1.size else np.arange(cloud.n)
        s2 = np.sort(rng.choice(pool, s1.size, replace=False))
        for name, dropped in (("S1", s1), ("S2", s2)):
            mask = np.ones(cloud.n)
            mask[dropped] = 0.0
            buf = render_forward(cloud, camera, mask=mask, background=background)
            diff = buf.image - full.image
            grads = render_backward(buf, 2.0 * diff / diff.size)
            local = _local_survivors(cloud, index, dropped)
            rows.append(
                CompensationRow(
                    seed,
                    name,
                    int(dropped.size),
                    float(np.mean(np.abs(diff))),
                    float(np.abs(grads.opacity_logits[local]).sum()),
                )
            )
    return CompensationReport(rows)
