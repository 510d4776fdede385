"""Training loop: photometric loss, Adam, per-iteration dropout plans, opacity pruning."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .dropout import DropoutConfig, make_plan
from .errors import InvalidParameterError, TrainingDivergenceError
from .gscore import SH_C0, GaussianCloud, inverse_sigmoid, num_sh_coeffs, sigmoid
from .io import DatasetSpec, load_points_ply
from .metrics import image_metrics, ssim_with_grad
from .render import Gradients, render_backward, render_forward
from .spatial import build_index

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15
PRUNE_FLOOR = 16
LOG_COLUMNS = ("iteration", "loss", "psnr", "ssim", "n_gaussians", "p_a", "l_max")


@dataclass
class TrainConfig:
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    iterations: int = 10000
    lambda_ssim: float = 0.2
    # "additive": L1 + lambda (1 - SSIM); "convex": (1 - lambda) L1 + lambda (1 - SSIM)
    loss_form: str = "additive"
    lr_position_init: float = 1.6e-4  # scaled by scene extent
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 0.0025
    lr_sh_rest: float = 0.0025 / 20
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    prune_interval: int = 500
    prune_opacity_threshold: float = 0.005
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    eval_every: int = 1000
    n_init: int = 20000
    init_jitter: float = 0.01  # std of position jitter, fraction of scene extent
    init_opacity: float = 0.1
    sh_degree: int = 3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dropout, dict):
            self.dropout = DropoutConfig(**self.dropout)
        self.background = tuple(float(b) for b in self.background)
        lrs = [self.lr_position_init, self.lr_position_final, self.lr_sh_dc, self.lr_sh_rest,
               self.lr_opacity, self.lr_scale, self.lr_rotation]
        if min(lrs) <= 0:
            raise InvalidParameterError("learning rates must be positive")
        if self.lambda_ssim < 0:
            raise InvalidParameterError("lambda_ssim must be non-negative")
        if self.loss_form not in ("additive", "convex"):
            raise InvalidParameterError("loss_form must be 'additive' or 'convex'")
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"]["lmax_milestones"] = [list(m) for m in self.dropout.lmax_milestones]
        d["background"] = list(self.background)
        return d


def loss(rendered, target, lambda_ssim: float = 0.2, loss_form: str = "additive"):
    """Photometric loss and its gradient with respect to ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidParameterError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    w_l1 = 1.0 - lambda_ssim if loss_form == "convex" else 1.0
    if lambda_ssim == 0:
        return w_l1 * l1, w_l1 * g_l1
    s, g_s = ssim_with_grad(rendered, target)
    return w_l1 * l1 + lambda_ssim * (1.0 - s), w_l1 * g_l1 - lambda_ssim * g_s


def position_lr(step: int, config: TrainConfig, scene_extent: float) -> float:
    """Log-linear decay from the initial to the final position learning rate."""
    t = np.clip(step / max(config.iterations, 1), 0.0, 1.0)
    lr0 = config.lr_position_init * scene_extent
    lr1 = config.lr_position_final * scene_extent
    return float(np.exp(np.log(lr0) * (1 - t) + np.log(lr1) * t))


@dataclass(eq=False)
class TrainState:
    cloud: GaussianCloud
    config: TrainConfig
    scene_extent: float
    rng: np.random.Generator
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    iteration: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self):
        for name, arr in self.cloud.params().items():
            self.m.setdefault(name, np.zeros_like(arr))
            self.v.setdefault(name, np.zeros_like(arr))


def _learning_rates(state: TrainState) -> dict:
    cfg = state.config
    k = state.cloud.sh.shape[1]
    sh_lr = np.full(k, cfg.lr_sh_rest)
    sh_lr[0] = cfg.lr_sh_dc
    return {
        "positions": position_lr(state.step, cfg, state.scene_extent),
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "sh": sh_lr,
    }


@njit(cache=True)
def _adam_kernel(param, grad, m, v, lr, bc1, bc2):
    rows, cols = param.shape
    for i in range(rows):
        for j in range(cols):
            g = grad[i, j]
            m[i, j] = BETA1 * m[i, j] + (1.0 - BETA1) * g
            v[i, j] = BETA2 * v[i, j] + (1.0 - BETA2) * g * g
            param[i, j] -= lr[j] * (m[i, j] / bc1) / (np.sqrt(v[i, j] / bc2) + ADAM_EPS)


def _column_lr(name: str, lr, width: int) -> np.ndarray:
    if name == "sh":
        return np.repeat(np.asarray(lr, dtype=np.float64).reshape(-1), 3)
    return np.full(width, float(lr))


def adam_step(state: TrainState, gradients: Gradients) -> TrainState:
    """One bias-corrected Adam update of every parameter group, in place."""
    for name, g in gradients.items():
        if g.shape != getattr(state.cloud, name).shape:
            raise InvalidParameterError(f"gradient {name} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", state.iteration)
    lrs = _learning_rates(state)
    state.step += 1
    bc1 = 1.0 - BETA1**state.step
    bc2 = 1.0 - BETA2**state.step
    for name, g in gradients.items():
        param = getattr(state.cloud, name)
        if not param.flags.c_contiguous:
            param = np.ascontiguousarray(param)
            setattr(state.cloud, name, param)
        n = param.shape[0]
        flat = param.reshape(n, -1)
        _adam_kernel(
            flat,
            np.ascontiguousarray(g, dtype=np.float64).reshape(n, -1),
            state.m[name].reshape(n, -1),
            state.v[name].reshape(n, -1),
            _column_lr(name, lrs[name], flat.shape[1]),
            bc1,
            bc2,
        )
    return state


def prune(state: TrainState, threshold: float, floor: int = PRUNE_FLOOR) -> TrainState:
    """Drop Gaussians with opacity below ``threshold``, keeping at least ``floor`` of them."""
    opac = state.cloud.opacities
    keep = opac >= threshold
    if keep.sum() < min(floor, state.cloud.n):
        keep = np.zeros(state.cloud.n, dtype=bool)
        keep[np.argsort(-opac, kind="stable")[:floor]] = True
    if keep.all():
        return state
    state.cloud = state.cloud.subset(keep)
    for name in state.m:
        state.m[name] = state.m[name][keep].copy()
        state.v[name] = state.v[name][keep].copy()
    return state


def _mean_color(dataset: DatasetSpec, background) -> np.ndarray:
    return np.mean([dataset.image(i, background).reshape(-1, 3).mean(0) for i in dataset.train_ids], 0)


def _random_frustum_points(dataset: DatasetSpec, n: int, rng) -> np.ndarray:
    corners = []
    for cam in (f.camera for f in dataset.train):
        for u, v in ((0, 0), (cam.width, 0), (0, cam.height), (cam.width, cam.height)):
            ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            for depth in (cam.near_clip, 2.0 * dataset.scene_extent):
                corners.append(cam.rotation.T @ (ray * depth - cam.translation))
    corners = np.array(corners)
    return rng.uniform(corners.min(0), corners.max(0), (n, 3))


def initial_cloud(dataset: DatasetSpec, config: TrainConfig, rng) -> GaussianCloud:
    """Points from ``points3d.ply`` plus jitter (or uniform in the frustum box), grey-free colour."""
    n = config.n_init
    extent = dataset.scene_extent
    if dataset.points_path is not None:
        pts, _ = load_points_ply(dataset.points_path)
        idx = rng.choice(pts.shape[0], n, replace=n > pts.shape[0])
        positions = pts[idx] + rng.normal(0.0, config.init_jitter * extent, (n, 3))
    else:
        positions = _random_frustum_points(dataset, n, rng)
    d2, _ = cKDTree(positions).query(positions, k=4)
    mean_d2 = np.maximum(np.mean(d2[:, 1:] ** 2, axis=1), 1e-7)
    log_scales = np.repeat(np.log(np.sqrt(mean_d2))[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = np.zeros((n, num_sh_coeffs(config.sh_degree), 3))
    color = np.clip(_mean_color(dataset, config.background), 1e-3, 1.0)
    sh[:, 0, :] = (color - 0.5) / SH_C0
    return GaussianCloud(
        positions, log_scales, rotations, np.full(n, float(inverse_sigmoid(config.init_opacity))), sh
    )


def evaluate(cloud: GaussianCloud, dataset: DatasetSpec, ids, background, sh_degree=None) -> dict:
    """Mean PSNR/SSIM/MAE over frames ``ids``, rendered with the full (undropped) model."""
    if not len(ids):
        raise InvalidParameterError("empty evaluation split")
    if sh_degree is not None:
        cloud = cloud.truncated(sh_degree)
    scores = []
    for i in ids:
        img = render_forward(cloud, dataset.frames[i].camera, background=background).image
        scores.append(image_metrics(img, dataset.image(i, background)))
    psnrs = [s.psnr for s in scores]
    return {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean([s.ssim for s in scores])),
        "mae": float(np.mean([s.mae for s in scores])),
    }


class _IndexCache:
    def __init__(self, every: int):
        self.every = every
        self.index = None
        self.built_at = None

    def provider(self, cloud: GaussianCloud, iteration: int):
        def get():
            stale = (
                self.index is None
                or self.index.n != cloud.n
                or iteration - self.built_at >= self.every
                or self.every == 1
            )
            if stale:
                self.index = build_index(cloud.positions)
                self.built_at = iteration
            return self.index

        return get


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list
    summary: dict
    wall_time: float


def train(dataset: DatasetSpec, config: TrainConfig, out_dir=None, init: GaussianCloud | None = None) -> TrainResult:
    """Optimise a Gaussian cloud on the training frames of ``dataset``."""
    if not dataset.train_ids:
        raise InvalidParameterError("dataset has no training views")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    cloud = init.copy() if init is not None else initial_cloud(dataset, config, rng)
    state = TrainState(cloud, config, dataset.scene_extent, rng)
    dcfg = config.dropout
    if dcfg.total_iters != config.iterations:
        dcfg = DropoutConfig(**{**asdict(dcfg), "total_iters": config.iterations})
    eval_ids = dataset.test_ids or dataset.train_ids
    background = np.asarray(config.background)
    index_cache = _IndexCache(dcfg.knn_rebuild_every)
    views = list(dataset.train_ids)
    order: list[int] = []
    window_loss = []
    for it in range(config.iterations):
        state.iteration = it
        if it % len(views) == 0:
            order = [views[j] for j in rng.permutation(len(views))]
        view = order[it % len(views)]
        plan = make_plan(state.cloud, it, dcfg, index_cache.provider(state.cloud, it), rng)
        buf = render_forward(
            state.cloud, dataset.frames[view].camera, background=background, **plan.render_kwargs()
        )
        value, d_img = loss(buf.image, dataset.image(view, config.background), config.lambda_ssim, config.loss_form)
        if not np.isfinite(value):
            _dump(state, out_dir)
            raise TrainingDivergenceError(f"non-finite loss on view {view}", it)
        window_loss.append(value)
        try:
            adam_step(state, render_backward(buf, d_img))
        except TrainingDivergenceError:
            _dump(state, out_dir)
            raise
        done = it + 1
        if config.prune_interval and done % config.prune_interval == 0 and done < config.iterations:
            prune(state, config.prune_opacity_threshold)
        if (config.eval_every and done % config.eval_every == 0) or done == config.iterations:
            metrics = evaluate(state.cloud, dataset, eval_ids, config.background)
            row = {
                "iteration": done,
                "loss": float(np.mean(window_loss)),
                "psnr": metrics["psnr"],
                "ssim": metrics["ssim"],
                "n_gaussians": state.cloud.n,
                "p_a": plan.p_a,
                "l_max": "" if plan.l_max is None else plan.l_max,
            }
            window_loss = []
            state.log.append(row)
            log.info("iter %d loss %.4f psnr %.2f n=%d", done, row["loss"], row["psnr"], row["n_gaussians"])
    final = evaluate(state.cloud, dataset, eval_ids, config.background) if config.iterations else {}
    summary = {
        "config": config.to_dict(),
        "iterations": config.iterations,
        "n_gaussians": state.cloud.n,
        "n_train_views": len(dataset.train_ids),
        "n_eval_views": len(eval_ids),
        "final": final,
    }
    result = TrainResult(state.cloud, state.log, summary, time.perf_counter() - start)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: TrainResult, out_dir) -> None:
    from .io import save_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(result.cloud, out / "model.ply")
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in result.log:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps({"wall_time_s": result.wall_time}, indent=2))


def _dump(state: TrainState, out_dir) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "divergence_dump.npz", iteration=state.iteration, **state.cloud.params())


__all__ = [
    "TrainConfig", "TrainState", "TrainResult", "loss", "adam_step", "prune", "train",
    "evaluate", "initial_cloud", "position_lr", "sigmoid",
]
