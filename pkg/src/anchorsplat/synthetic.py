"""Procedural reference scenes rendered by analytic ray casting.

Scenes are z-up. Shading is ambient + Lambert + a weak white Blinn-Phong lobe, so
the ground truth carries mild view dependence. Cameras sit on a horizontal arc
around the scene centre; train cameras are evenly spaced over the arc and test
cameras fill the gaps between them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidParameterError
from .gscore import Camera
from .io import save_png, save_points_ply, write_transforms

LIGHT_DIR = np.array([0.4, 0.3, 0.86]) / np.linalg.norm([0.4, 0.3, 0.86])
AMBIENT = 0.35
DIFFUSE = 0.65
SPECULAR = 0.25
SHININESS = 24.0

Albedo = Callable[[np.ndarray], np.ndarray]


def solid(rgb) -> Albedo:
    rgb = np.asarray(rgb, dtype=np.float64)
    return lambda p: np.broadcast_to(rgb, p.shape).copy()


def checker(rgb_a, rgb_b, size: float, axes=(0, 1)) -> Albedo:
    a, b = np.asarray(rgb_a, float), np.asarray(rgb_b, float)

    def fn(p):
        idx = np.floor(p[:, axes[0]] / size) + np.floor(p[:, axes[1]] / size)
        return np.where((idx % 2 == 0)[:, None], a, b)

    return fn


def stripes(rgb_a, rgb_b, period: float, axis: int = 2) -> Albedo:
    a, b = np.asarray(rgb_a, float), np.asarray(rgb_b, float)
    return lambda p: np.where((np.floor(p[:, axis] / period) % 2 == 0)[:, None], a, b)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: Albedo

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = -b - sq
        t = np.where(t > 1e-6, t, -b + sq)
        t = np.where((disc >= 0) & (t > 1e-6), t, np.inf)
        return t

    def normal(self, p):
        return (p - self.center) / self.radius

    def area(self):
        return 4 * np.pi * self.radius**2

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v


@dataclass
class Rect:
    """Axis-aligned rectangle ``p[axis] = offset`` with bounds on the other two axes."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    albedo: Albedo
    facing: float = 1.0  # sign of the normal along ``axis``

    def _others(self):
        return [i for i in range(3) if i != self.axis]

    def intersect(self, o, d):
        da = d[:, self.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o[:, self.axis]) / da
        p = o + t[:, None] * d
        u, v = self._others()
        ok = (
            (t > 1e-6)
            & (p[:, u] >= self.lo[0]) & (p[:, u] <= self.hi[0])
            & (p[:, v] >= self.lo[1]) & (p[:, v] <= self.hi[1])
        )
        return np.where(ok, t, np.inf)

    def normal(self, p):
        n = np.zeros_like(p)
        n[:, self.axis] = self.facing
        return n

    def area(self):
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])

    def sample(self, n, rng):
        u, v = self._others()
        p = np.empty((n, 3))
        p[:, self.axis] = self.offset
        p[:, u] = rng.uniform(self.lo[0], self.hi[0], n)
        p[:, v] = rng.uniform(self.lo[1], self.hi[1], n)
        return p


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: Albedo

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - o) / d
            t2 = (self.hi - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-6)
        t = np.where(tmin > 1e-6, tmin, tmax)
        return np.where(hit, t, np.inf)

    def normal(self, p):
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = (p - c) / half
        axis = np.argmax(np.abs(q), axis=1)
        n = np.zeros_like(p)
        n[np.arange(p.shape[0]), axis] = np.sign(q[np.arange(p.shape[0]), axis])
        return n

    def area(self):
        e = self.hi - self.lo
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample(self, n, rng):
        e = self.hi - self.lo
        faces = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]])
        face = rng.choice(6, n, p=faces / faces.sum())
        p = rng.uniform(self.lo, self.hi, (n, 3))
        axis = face // 2
        p[np.arange(n), axis] = np.where(face % 2 == 0, self.lo[axis], self.hi[axis])
        return p


@dataclass
class Scene:
    primitives: list
    center: np.ndarray
    arc_radius: float
    arc_height: float
    arc_degrees: tuple[float, float]
    fov_degrees: float = 50.0
    background: tuple = (0.0, 0.0, 0.0)


def _scene_textured_spheres(rng) -> Scene:
    prims = [
        Sphere(np.array([-0.55, 0.0, 0.4]), 0.4, stripes((0.9, 0.2, 0.15), (0.95, 0.85, 0.3), 0.12)),
        Sphere(np.array([0.45, 0.35, 0.35]), 0.35, checker((0.2, 0.75, 0.3), (0.1, 0.3, 0.6), 0.15, (0, 2))),
        Sphere(np.array([0.25, -0.5, 0.25]), 0.25, solid((0.3, 0.4, 0.95))),
    ]
    return Scene(prims, np.array([0.0, 0.0, 0.35]), 3.0, 1.2, (-40.0, 80.0))


def _scene_boxes(rng) -> Scene:
    prims = [
        Box(np.array([-0.8, -0.4, 0.0]), np.array([-0.2, 0.2, 0.6]), checker((0.9, 0.5, 0.1), (0.5, 0.2, 0.1), 0.15, (0, 2))),
        Box(np.array([0.1, -0.3, 0.0]), np.array([0.6, 0.2, 0.9]), stripes((0.2, 0.6, 0.9), (0.9, 0.9, 0.9), 0.15)),
        Box(np.array([-0.3, 0.4, 0.0]), np.array([0.3, 0.8, 0.35]), solid((0.8, 0.2, 0.6))),
    ]
    return Scene(prims, np.array([0.0, 0.0, 0.35]), 3.0, 1.4, (-40.0, 80.0))


def _scene_checker_room(rng) -> Scene:
    floor = Rect(2, 0.0, (-1.5, -1.5), (1.5, 1.5), checker((0.85, 0.85, 0.8), (0.15, 0.2, 0.35), 0.375))
    wall_x = Rect(0, -1.5, (-1.5, 0.0), (1.5, 1.5), stripes((0.75, 0.35, 0.25), (0.9, 0.75, 0.55), 0.25), facing=1.0)
    wall_y = Rect(1, -1.5, (-1.5, 0.0), (1.5, 1.5), checker((0.35, 0.6, 0.4), (0.8, 0.85, 0.6), 0.3, (0, 2)), facing=1.0)
    prims = [
        floor,
        wall_x,
        wall_y,
        Sphere(np.array([0.3, -0.25, 0.35]), 0.35, stripes((0.9, 0.3, 0.2), (0.95, 0.9, 0.4), 0.1)),
        Box(np.array([-0.75, 0.2, 0.0]), np.array([-0.25, 0.7, 0.5]), solid((0.25, 0.45, 0.9))),
    ]
    return Scene(prims, np.array([-0.2, -0.2, 0.4]), 3.2, 1.6, (5.0, 85.0))


SCENES = {
    "textured-spheres": _scene_textured_spheres,
    "boxes": _scene_boxes,
    "checker-room": _scene_checker_room,
}


def make_scene(name: str, rng=None) -> Scene:
    if name not in SCENES:
        raise InvalidParameterError(f"unknown scene {name!r}; valid names: {', '.join(sorted(SCENES))}")
    return SCENES[name](rng if rng is not None else np.random.default_rng(0))


def shade(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best = np.full(n, -1)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best[closer] = k
    out = np.broadcast_to(np.asarray(scene.background, float), (n, 3)).copy()
    for k, prim in enumerate(scene.primitives):
        sel = best == k
        if not sel.any():
            continue
        p = origins[sel] + best_t[sel, None] * dirs[sel]
        nrm = prim.normal(p)
        view = -dirs[sel]
        # two-sided surfaces: flip normals facing away from the viewer
        nrm = np.where(np.sum(nrm * view, axis=1, keepdims=True) < 0, -nrm, nrm)
        lam = np.clip(nrm @ LIGHT_DIR, 0.0, None)
        half = view + LIGHT_DIR
        half /= np.linalg.norm(half, axis=1, keepdims=True)
        spec = np.clip(np.sum(nrm * half, axis=1), 0.0, None) ** SHININESS
        color = prim.albedo(p) * (AMBIENT + DIFFUSE * lam)[:, None] + SPECULAR * spec[:, None]
        out[sel] = np.clip(color, 0.0, 1.0)
    return out


def render_reference(scene: Scene, camera: Camera, supersample: int = 2) -> np.ndarray:
    """Ray-cast ``scene``; ``supersample**2`` stratified samples per pixel, box-filtered."""
    s = supersample
    w, h = camera.width, camera.height
    offs = (np.arange(s) + 0.5) / s
    us = (np.arange(w)[:, None] + offs[None, :]).ravel()
    vs = (np.arange(h)[:, None] + offs[None, :]).ravel()
    uu, vv = np.meshgrid(us, vs)
    cam_dirs = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs = cam_dirs @ camera.rotation  # camera -> world
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape)
    img = shade(scene, origins, dirs).reshape(h * s, w * s, 3)
    return img.reshape(h, s, w, s, 3).mean(axis=(1, 3))


def arc_angles(n_train: int, n_test: int, arc: tuple[float, float]):
    lo, hi = arc
    if n_train == 1:
        train = np.array([0.5 * (lo + hi)])
    else:
        train = np.linspace(lo, hi, n_train)
    test = lo + (np.arange(n_test) + 0.5) / max(n_test, 1) * (hi - lo)
    return train, test


def arc_camera(scene: Scene, degrees: float, resolution: int) -> Camera:
    theta = np.deg2rad(degrees)
    eye = scene.center + np.array(
        [scene.arc_radius * np.cos(theta), scene.arc_radius * np.sin(theta), scene.arc_height]
    )
    f = 0.5 * resolution / np.tan(0.5 * np.deg2rad(scene.fov_degrees))
    return Camera.look_at(eye, scene.center, [0.0, 0.0, 1.0], f, f, resolution, resolution)


def surface_points(scene: Scene, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    areas = np.array([p.area() for p in scene.primitives])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, cols = [], []
    for prim, c in zip(scene.primitives, counts):
        if c == 0:
            continue
        p = prim.sample(c, rng)
        pts.append(p)
        cols.append(np.clip(prim.albedo(p) * (AMBIENT + 0.5 * DIFFUSE), 0, 1))
    return np.concatenate(pts), np.concatenate(cols)


def generate_synthetic(
    scene_name: str,
    n_views_train: int,
    n_views_test: int,
    resolution: int,
    seed: int,
    out_dir,
    n_points: int = 50000,
) -> Path:
    """Write a NeRF-style dataset (transforms JSON, PNGs, ``points3d.ply``) to ``out_dir``."""
    rng = np.random.default_rng(seed)
    scene = make_scene(scene_name, rng)
    if n_views_train < 1 or n_views_test < 0 or resolution < 1:
        raise InvalidParameterError("need >= 1 train view, >= 0 test views and resolution >= 1")
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    train_deg, test_deg = arc_angles(n_views_train, n_views_test, scene.arc_degrees)
    fov = np.deg2rad(scene.fov_degrees)
    for split, angles in (("train", train_deg), ("test", test_deg)):
        frames = []
        for i, deg in enumerate(angles):
            cam = arc_camera(scene, deg, resolution)
            rel = f"{split}/r_{i:03d}.png"
            save_png(out / rel, render_reference(scene, cam))
            frames.append((f"./{rel}", cam.world_to_camera))
        write_transforms(out / f"transforms_{split}.json", frames, fov, resolution, resolution)
    pts, cols = surface_points(scene, n_points, rng)
    save_points_ply(out / "points3d.ply", pts, cols)
    (out / "scene.json").write_text(
        json.dumps({"scene": scene_name, "seed": seed, "train_degrees": train_deg.tolist(),
                    "test_degrees": test_deg.tolist(), "resolution": resolution}, indent=2)
    )
    return out
