"""Gaussian scene representation, cameras, covariance construction, EWA projection
and real spherical-harmonics colour evaluation.

All arrays are float64. Per-Gaussian parameters are stored pre-activation:

* ``log_scales`` -> ``exp`` gives per-axis standard deviations
* ``rotations`` -> unnormalised quaternions ``(w, x, y, z)``, normalised on use
* ``opacity_logits`` -> ``sigmoid`` gives opacity in (0, 1)
* ``sh`` -> ``(N, (L+1)**2, 3)`` coefficients, degree-major then channel
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError

MAX_SH_DEGREE = 3
# added to both diagonal entries of the projected covariance (pixel^2)
LOWPASS = 0.3
CULL_SIGMA = 3.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_coeffs(n_coeffs: int) -> int:
    degree = int(round(np.sqrt(n_coeffs))) - 1
    if degree < 0 or num_sh_coeffs(degree) != n_coeffs:
        raise InvalidParameterError(f"{n_coeffs} is not a perfect square SH coefficient count")
    return degree


def coeff_degrees(degree: int) -> np.ndarray:
    """Degree ``l`` of every coefficient slot ``0 .. (degree+1)**2 - 1``."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(degree + 1)])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(eq=False)
class GaussianCloud:
    """Contiguous parameter arrays for ``N`` anisotropic Gaussians."""

    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) w, x, y, z
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh")

    def __post_init__(self):
        for name in self.PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise InvalidParameterError(f"sh has shape {self.sh.shape}, expected ({n}, K, 3)")
        degree = sh_degree_from_coeffs(self.sh.shape[1])
        if degree > MAX_SH_DEGREE:
            raise InvalidParameterError(f"SH degree {degree} exceeds {MAX_SH_DEGREE}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def max_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, index) -> GaussianCloud:
        return GaussianCloud(**{k: v[index].copy() for k, v in self.params().items()})

    def truncated(self, degree: int) -> GaussianCloud:
        """Copy keeping SH coefficients up to ``degree`` only."""
        if not 0 <= degree <= self.max_degree:
            raise InvalidParameterError(f"degree {degree} outside [0, {self.max_degree}]")
        params = {k: v.copy() for k, v in self.params().items()}
        params["sh"] = params["sh"][:, : num_sh_coeffs(degree)].copy()
        return GaussianCloud(**params)

    def equals(self, other: GaussianCloud) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.PARAM_NAMES
        )

    @classmethod
    def empty(cls, degree: int = MAX_SH_DEGREE) -> GaussianCloud:
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros(0),
            np.zeros((0, num_sh_coeffs(degree), 3)),
        )


@dataclass(eq=False)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near_clip: float = 0.01
    _rotation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4) or not np.all(np.isfinite(self.world_to_camera)):
            raise InvalidParameterError("world_to_camera must be a finite 4x4 matrix")
        rot = self.world_to_camera[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not self.near_clip > 0:
            raise InvalidParameterError("near_clip must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidParameterError("resolution must be at least 1x1")
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.width, self.height = int(self.width), int(self.height)
        self._rotation = rot.copy()

    @property
    def rotation(self) -> np.ndarray:
        return self._rotation

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near_clip=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, forward])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        return cls(
            w2c,
            fx,
            fy,
            width / 2 if cx is None else cx,
            height / 2 if cy is None else cy,
            width,
            height,
            near_clip,
        )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(..., 4)`` in ``(w, x, y, z)`` order."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched ``R diag(exp(s))^2 R^T``."""
    rot = quat_to_rotmat(normalize_quaternions(rotations))
    m = rot * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance(log_scale, rotation) -> np.ndarray:
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if log_scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidParameterError("expected a 3-vector log-scale and a 4-vector quaternion")
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite covariance parameters")
    if np.linalg.norm(rotation) == 0:
        raise InvalidParameterError("zero quaternion")
    return covariances(log_scale, rotation)


class Projected2D(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


class ProjectedBatch(NamedTuple):
    """Vectorised projection results; ``cov2d`` already includes the low-pass term."""

    t_cam: np.ndarray  # (N, 3) camera-space centres
    mean2d: np.ndarray  # (N, 2)
    cov3d: np.ndarray  # (N, 3, 3)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) a, b, c of the inverse covariance
    radius: np.ndarray  # (N,) CULL_SIGMA * sqrt(largest eigenvalue)
    visible: np.ndarray  # (N,) bool


def project_batch(positions, log_scales, rotations, camera: Camera) -> ProjectedBatch:
    rot_w = camera.rotation
    t_cam = positions @ rot_w.T + camera.translation
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    in_front = z > camera.near_clip
    # behind-camera entries get a harmless depth so the algebra below stays finite
    zs = np.where(in_front, z, 1.0)
    n = positions.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / zs**2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / zs**2
    cov3d = covariances(log_scales, rotations)
    t = jac @ rot_w
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)
    mean2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    visible = (
        in_front
        & (mean2d[:, 0] > -radius)
        & (mean2d[:, 0] < camera.width + radius)
        & (mean2d[:, 1] > -radius)
        & (mean2d[:, 1] < camera.height + radius)
    )
    return ProjectedBatch(t_cam, mean2d, cov3d, cov2d, conic, radius, visible)


def project(position, log_scale, rotation, camera: Camera) -> Projected2D:
    """Project a single Gaussian; see :func:`project_batch`."""
    batch = project_batch(
        np.asarray(position, dtype=np.float64)[None],
        np.asarray(log_scale, dtype=np.float64)[None],
        np.asarray(rotation, dtype=np.float64)[None],
        camera,
    )
    return Projected2D(
        batch.mean2d[0], batch.cov2d[0], float(batch.t_cam[0, 2]), bool(batch.visible[0])
    )


def unproject(mean2d, depth: float, camera: Camera) -> np.ndarray:
    """Camera-space point whose projection is ``mean2d`` at ``depth``."""
    u, v = mean2d
    return np.array([(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth])


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis ``(N, (degree+1)**2)`` at unit directions ``(N, 3)``."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], num_sh_coeffs(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives ``(N, K, 3)`` of the basis polynomials with respect to ``(x, y, z)``."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac = np.zeros((dirs.shape[0], num_sh_coeffs(degree), 3))
    if degree >= 1:
        jac[:, 1, 1] = -SH_C1
        jac[:, 2, 2] = SH_C1
        jac[:, 3, 0] = -SH_C1
    if degree >= 2:
        jac[:, 4] = SH_C2[0] * np.stack([y, x, 0 * x], 1)
        jac[:, 5] = SH_C2[1] * np.stack([0 * x, z, y], 1)
        jac[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], 1)
        jac[:, 7] = SH_C2[3] * np.stack([z, 0 * x, x], 1)
        jac[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, 0 * x], 1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * x], 1)
        jac[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], 1)
        jac[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], 1)
        jac[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], 1)
        jac[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], 1)
        jac[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], 1)
        jac[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * x], 1)
    return jac


def degree_mask(sh_retain: np.ndarray, degree: int) -> np.ndarray:
    """Float mask ``(N, K)``: 1 where the coefficient degree is within the retained degree."""
    return (coeff_degrees(degree)[None, :] <= np.asarray(sh_retain)[:, None]).astype(np.float64)


def eval_sh(sh, view_dir, retain_degree: int | None = None) -> np.ndarray:
    """RGB colour of SH coefficients ``(K, 3)`` (or batched ``(N, K, 3)``) seen along ``view_dir``.

    Degrees above ``retain_degree`` are ignored. Output is ``max(sum + 0.5, 0)``.
    """
    sh = np.asarray(sh, dtype=np.float64)
    dirs = np.asarray(view_dir, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh, dirs = sh[None], dirs[None]
    degree = sh_degree_from_coeffs(sh.shape[1])
    if retain_degree is None:
        retain_degree = degree
    if not 0 <= retain_degree <= degree:
        raise InvalidParameterError(f"retain_degree {retain_degree} outside [0, {degree}]")
    if np.abs(np.linalg.norm(dirs, axis=-1) - 1.0).max() > 1e-6:
        raise InvalidParameterError("view_dir must be a unit vector")
    basis = sh_basis(dirs, retain_degree)
    rgb = np.einsum("nk,nkc->nc", basis, sh[:, : basis.shape[1]]) + 0.5
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def count_parameters(cloud: GaussianCloud, retain_degree: int | None = None) -> int:
    degree = cloud.max_degree if retain_degree is None else retain_degree
    if not 0 <= degree <= cloud.max_degree:
        raise InvalidParameterError(f"retain_degree {degree} outside [0, {cloud.max_degree}]")
    return cloud.n * (3 + 3 + 4 + 1 + 3 * num_sh_coeffs(degree))
