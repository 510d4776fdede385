"""Model files, images, datasets and procedural reference scenes.

Model PLY layout (binary little endian, one ``vertex`` element)::

    x y z  f_dc_0..2  f_rest_0..(3*((L+1)^2-1)-1)  opacity  scale_0..2  rot_0..3

``f_rest`` is channel-major: ``f_rest_{c * ((L+1)^2 - 1) + j}`` holds coefficient
``j + 1`` of channel ``c``. Values are stored pre-activation.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, InvalidParameterError, PlyParseError
from .gscore import Camera, GaussianCloud, count_parameters, num_sh_coeffs, sh_degree_from_coeffs

# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int"}


def model_property_names(degree: int) -> list[str]:
    n_rest = 3 * (num_sh_coeffs(degree) - 1)
    return (
        ["x", "y", "z"]
        + [f"f_dc_{i}" for i in range(3)]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
    )


def _write_vertex_ply(path, columns: dict[str, np.ndarray], dtype: str = "f4"):
    n = len(next(iter(columns.values())))
    ply_dtype = []
    for name, col in columns.items():
        code = np.dtype(col.dtype).str[1:] if col.dtype.kind == "u" else dtype
        ply_dtype.append((name, "<" + code))
    record = np.empty(n, dtype=ply_dtype)
    for name, col in columns.items():
        record[name] = col
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_NP_TO_PLY[record.dtype[name].str[1:]]} {name}" for name in columns]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(record.tobytes())


def _read_vertex_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply") or end < 0:
        raise PlyParseError(f"{path}: missing 'ply' magic or 'end_header'")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyParseError(f"{path}: malformed element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}: property {line!r} before any element")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyParseError(f"{path}: unsupported property declaration {line!r}")
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        else:
            raise PlyParseError(f"{path}: unexpected header line {line!r}")
    if fmt != "binary_little_endian":
        raise PlyParseError(f"{path}: format {fmt!r} unsupported, need binary_little_endian")
    if not elements or elements[0][0] != "vertex":
        raise PlyParseError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if len(set(names)) != len(names):
        raise PlyParseError(f"{path}: duplicate vertex property names")
    dtype = np.dtype(props)
    payload = data[end + len(marker):]
    need = count * dtype.itemsize
    if len(payload) < need:
        raise PlyParseError(
            f"{path}: vertex data truncated, expected {need} bytes for {count} vertices, got {len(payload)}"
        )
    return np.frombuffer(payload[:need], dtype=dtype, count=count)


def save_ply(cloud: GaussianCloud, path, precision: str = "float") -> None:
    """Write ``cloud``; ``precision`` is ``"float"`` (ecosystem default) or ``"double"``."""
    if precision not in ("float", "double"):
        raise InvalidParameterError("precision must be 'float' or 'double'")
    k = cloud.sh.shape[1]
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(cloud.n, 3 * (k - 1))
    names = model_property_names(cloud.max_degree)
    values = np.concatenate(
        [
            cloud.positions,
            cloud.sh[:, 0, :],
            rest,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.rotations,
        ],
        axis=1,
    )
    _write_vertex_ply(path, {n: values[:, i] for i, n in enumerate(names)}, "f4" if precision == "float" else "f8")


def ply_precision(path) -> str:
    record = _read_vertex_ply(path)
    return "double" if record.dtype["x"].itemsize == 8 else "float"


def load_ply(path) -> GaussianCloud:
    record = _read_vertex_ply(path)
    names = record.dtype.names
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyParseError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    try:
        degree = sh_degree_from_coeffs(n_rest // 3 + 1)
    except InvalidParameterError:
        raise PlyParseError(f"{path}: f_rest count {n_rest} does not match any SH degree") from None
    if degree > 3:
        raise PlyParseError(f"{path}: f_rest count {n_rest} implies SH degree {degree} > 3")
    for name in model_property_names(degree):
        if name not in names:
            raise PlyParseError(f"{path}: missing vertex property '{name}'")

    def cols(*keys):
        return np.stack([record[k].astype(np.float64) for k in keys], axis=1)

    n = record.shape[0]
    k = num_sh_coeffs(degree)
    sh = np.empty((n, k, 3))
    sh[:, 0, :] = cols("f_dc_0", "f_dc_1", "f_dc_2")
    if k > 1:
        rest = cols(*[f"f_rest_{i}" for i in range(n_rest)])
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianCloud(
        positions=cols("x", "y", "z"),
        log_scales=cols("scale_0", "scale_1", "scale_2"),
        rotations=cols("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=record["opacity"].astype(np.float64),
        sh=sh,
    )


def save_points_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Coloured point cloud (``x y z`` float, ``red green blue`` uchar)."""
    colors = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
    _write_vertex_ply(
        path,
        {
            "x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
            "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2],
        },
    )


def load_points_ply(path) -> tuple[np.ndarray, np.ndarray]:
    record = _read_vertex_ply(path)
    for name in ("x", "y", "z"):
        if name not in record.dtype.names:
            raise PlyParseError(f"{path}: missing vertex property '{name}'")
    pts = np.stack([record[k].astype(np.float64) for k in ("x", "y", "z")], axis=1)
    if all(c in record.dtype.names for c in ("red", "green", "blue")):
        cols = np.stack([record[c] for c in ("red", "green", "blue")], axis=1) / 255.0
    else:
        cols = np.full_like(pts, 0.5)
    return pts, cols


def truncate_sh_file(in_path, degree: int, out_path) -> dict:
    """Rewrite a model keeping SH degrees ``<= degree``; reports sizes and parameter counts."""
    cloud = load_ply(in_path)
    if not 0 <= degree <= cloud.max_degree:
        raise InvalidParameterError(f"degree {degree} outside [0, {cloud.max_degree}] of {in_path}")
    save_ply(cloud.truncated(degree), out_path, precision=ply_precision(in_path))
    return {
        "n_gaussians": cloud.n,
        "degree_in": cloud.max_degree,
        "degree_out": degree,
        "params_in": count_parameters(cloud),
        "params_out": count_parameters(cloud, degree),
        "bytes_in": os.path.getsize(in_path),
        "bytes_out": os.path.getsize(out_path),
    }


# ---------------------------------------------------------------------------
# images


def save_png(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def load_png(path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Float RGB in [0, 1]; RGBA images are composited over ``background``."""
    with Image.open(path) as im:
        im.load()
        if im.mode == "RGBA":
            arr = np.asarray(im, dtype=np.float64) / 255.0
            alpha = arr[..., 3:]
            return arr[..., :3] * alpha + np.asarray(background) * (1 - alpha)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# datasets

# NeRF transforms store OpenGL camera-to-world (y up, z backwards); cameras here use OpenCV axes
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def c2w_gl_to_w2c(c2w) -> np.ndarray:
    c2w = np.asarray(c2w, dtype=np.float64) @ _GL_TO_CV
    rot = c2w[:3, :3]
    u, _, vt = np.linalg.svd(rot)
    if np.abs(rot - u @ vt).max() < 1e-3:
        rot = u @ vt
    w2c = np.eye(4)
    w2c[:3, :3] = rot.T
    w2c[:3, 3] = -rot.T @ c2w[:3, 3]
    return w2c


def w2c_to_c2w_gl(w2c) -> np.ndarray:
    return np.linalg.inv(np.asarray(w2c, dtype=np.float64)) @ _GL_TO_CV


def camera_from_pose(meta: dict) -> Camera:
    """Camera from a single NeRF-style frame record that also carries ``w`` and ``h``."""
    try:
        c2w = np.asarray(meta["transform_matrix"], dtype=np.float64)
        width, height = int(meta["w"]), int(meta["h"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"pose needs transform_matrix, w and h ({exc})") from None
    if c2w.shape != (4, 4):
        raise DatasetError("transform_matrix must be 4x4")
    fx = meta.get("fl_x")
    if fx is None:
        if "camera_angle_x" not in meta:
            raise DatasetError("pose has neither fl_x nor camera_angle_x")
        fx = 0.5 * width / np.tan(0.5 * float(meta["camera_angle_x"]))
    return Camera(
        c2w_gl_to_w2c(c2w),
        float(fx),
        float(meta.get("fl_y", fx)),
        float(meta.get("cx", width / 2)),
        float(meta.get("cy", height / 2)),
        width,
        height,
    )


@dataclass(eq=False)
class Frame:
    camera: Camera
    image_path: Path

    def load_image(self, background=(0.0, 0.0, 0.0)) -> np.ndarray:
        return load_png(self.image_path, background)


@dataclass(eq=False)
class DatasetSpec:
    root: Path
    frames: list[Frame]
    train_ids: list[int]
    test_ids: list[int]
    scene_extent: float
    points_path: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def train(self) -> list[Frame]:
        return [self.frames[i] for i in self.train_ids]

    @property
    def test(self) -> list[Frame]:
        return [self.frames[i] for i in self.test_ids]

    def image(self, i: int, background=(0.0, 0.0, 0.0)) -> np.ndarray:
        key = (i, tuple(background))
        if key not in self._cache:
            self._cache[key] = self.frames[i].load_image(background)
        return self._cache[key]


def _resolve_image(root: Path, file_path: str) -> Path:
    path = (root / file_path).resolve()
    if path.suffix == "":
        path = path.with_suffix(".png")
    return path


def _frames_from_transforms(root: Path, name: str) -> list[Frame]:
    path = root / name
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable JSON in {path}: {exc}") from None
    if "frames" not in meta or not isinstance(meta["frames"], list):
        raise DatasetError(f"{path}: no 'frames' list")
    frames = []
    for i, fr in enumerate(meta["frames"]):
        try:
            img_path = _resolve_image(root, fr["file_path"])
            c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: frame {i} lacks file_path/transform_matrix ({exc})") from None
        if not img_path.is_file():
            raise DatasetError(f"{path}: frame {i} image {img_path} not found")
        try:
            with Image.open(img_path) as im:
                width, height = im.size
        except OSError as exc:
            raise DatasetError(f"{path}: frame {i} image {img_path} unreadable ({exc})") from None

        def get(key, default=None):
            return fr.get(key, meta.get(key, default))

        decl_w, decl_h = get("w"), get("h")
        if (decl_w is not None and int(decl_w) != width) or (decl_h is not None and int(decl_h) != height):
            raise DatasetError(
                f"{path}: frame {i} image is {width}x{height}, declared {decl_w}x{decl_h}"
            )
        fx = get("fl_x")
        if fx is None:
            angle = get("camera_angle_x")
            if angle is None:
                raise DatasetError(f"{path}: frame {i} has neither fl_x nor camera_angle_x")
            fx = 0.5 * width / np.tan(0.5 * float(angle))
        fy = get("fl_y", fx)
        camera = Camera(
            c2w_gl_to_w2c(c2w),
            float(fx),
            float(fy),
            float(get("cx", width / 2)),
            float(get("cy", height / 2)),
            width,
            height,
        )
        frames.append(Frame(camera, img_path))
    if frames:
        res = {(f.camera.width, f.camera.height) for f in frames}
        if len(res) > 1:
            raise DatasetError(f"{path}: inconsistent image resolutions {sorted(res)}")
    return frames


def minimal_bounding_sphere(points) -> tuple[np.ndarray, float]:
    """Smallest enclosing ball (Welzl's algorithm, deterministic shuffle)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise InvalidParameterError("no points")
    pts = pts[np.random.default_rng(0).permutation(pts.shape[0])]

    def ball(boundary):
        if not boundary:
            return np.zeros(3), -1.0
        a = boundary[0]
        if len(boundary) == 1:
            return a.copy(), 0.0
        if len(boundary) == 2:
            c = 0.5 * (a + boundary[1])
            return c, float(np.linalg.norm(boundary[1] - c))
        diffs = np.array([p - a for p in boundary[1:]])
        if len(boundary) == 3:
            u, v = diffs
            w = np.cross(u, v)
            ww = w @ w
            if ww < 1e-24:
                return _farthest_pair_ball(boundary)
            off = np.cross(u @ u * v - v @ v * u, w) / (2 * ww)
            return a + off, float(np.linalg.norm(off))
        if abs(np.linalg.det(diffs)) < 1e-18:
            return _farthest_pair_ball(boundary)
        off = np.linalg.solve(2 * diffs, np.sum(diffs**2, axis=1))
        return a + off, float(np.linalg.norm(off))

    def inside(p, c, r):
        return r >= 0 and np.linalg.norm(p - c) <= r * (1 + 1e-10) + 1e-12

    # iterative move-to-front formulation of Welzl's recursion
    def mtf(n, boundary):
        c, r = ball(boundary)
        if len(boundary) == 4:
            return c, r
        for i in range(n):
            if not inside(pts[i], c, r):
                c, r = mtf(i, boundary + [pts[i]])
        return c, r

    return mtf(pts.shape[0], [])


def _farthest_pair_ball(boundary):
    best = (boundary[0].copy(), 0.0)
    for i in range(len(boundary)):
        for j in range(i + 1, len(boundary)):
            c = 0.5 * (boundary[i] + boundary[j])
            r = float(np.linalg.norm(boundary[i] - c))
            if r > best[1]:
                best = (c, r)
    return best


def evenly_spaced(n_total: int, n_pick: int | None) -> list[int]:
    if n_pick is None or n_pick >= n_total:
        return list(range(n_total))
    if n_pick < 1:
        raise InvalidParameterError("need at least one training view")
    if n_pick == 1:
        return [0]
    return [int(round(i * (n_total - 1) / (n_pick - 1))) for i in range(n_pick)]


def load_dataset(root, n_train_views: int | None = None) -> DatasetSpec:
    """Load ``transforms_train.json`` (+ optional ``transforms_test.json``) under ``root``."""
    root = Path(root)
    train_frames = _frames_from_transforms(root, "transforms_train.json")
    if not train_frames:
        raise DatasetError(f"{root}: empty training split")
    test_frames = (
        _frames_from_transforms(root, "transforms_test.json")
        if (root / "transforms_test.json").exists()
        else []
    )
    picked = evenly_spaced(len(train_frames), n_train_views)
    frames = train_frames + test_frames
    _, extent = minimal_bounding_sphere(np.array([f.camera.center for f in train_frames]))
    points = root / "points3d.ply"
    return DatasetSpec(
        root=root,
        frames=frames,
        train_ids=picked,
        test_ids=list(range(len(train_frames), len(frames))),
        scene_extent=float(extent) if extent > 1e-9 else 1.0,
        points_path=points if points.exists() else None,
    )


def write_transforms(path, frames: list[tuple[str, np.ndarray]], camera_angle_x: float, width, height):
    meta = {
        "camera_angle_x": float(camera_angle_x),
        "w": int(width),
        "h": int(height),
        "frames": [
            {"file_path": fp, "transform_matrix": np.round(w2c_to_c2w_gl(w2c), 12).tolist()}
            for fp, w2c in frames
        ],
    }
    Path(path).write_text(json.dumps(meta, indent=2))
