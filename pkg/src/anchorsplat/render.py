"""Differentiable front-to-back alpha-blending rasterizer.

Per camera, every visible Gaussian with a nonzero mask is registered on the pixels
inside its 3-sigma screen-space ellipse, in global depth order (ties broken by
index). Each pixel then composites its list::

    C = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_final * background
    a_i = min(0.999, sigmoid(o_i) * exp(-0.5 d^T conic_i d) * m_i)

and stops before a contributor would push transmittance below ``1e-4``. Pixel
``(u, v)`` has its centre at ``(u + 0.5, v + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import InvalidParameterError
from .gscore import (
    CULL_SIGMA,
    Camera,
    GaussianCloud,
    ProjectedBatch,
    degree_mask,
    project_batch,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
)

ALPHA_MAX = 0.999
T_MIN = 1e-4
POWER_CUTOFF = -0.5 * CULL_SIGMA**2


@njit(cache=True)
def _footprint(mx, my, r, width, height):
    x0 = max(0, int(np.ceil(mx - r - 0.5)))
    x1 = min(width - 1, int(np.floor(mx + r - 0.5)))
    y0 = max(0, int(np.ceil(my - r - 0.5)))
    y1 = min(height - 1, int(np.floor(my + r - 0.5)))
    return x0, x1, y0, y1


@njit(cache=True)
def _build_pairs(order, mean2d, conic, radius, width, height):
    """CSR lists of (pixel -> Gaussian ids) in ``order``, restricted to the 3-sigma ellipse."""
    n_pix = width * height
    bound = 0
    for g in order:
        x0, x1, y0, y1 = _footprint(mean2d[g, 0], mean2d[g, 1], radius[g], width, height)
        if x1 >= x0 and y1 >= y0:
            bound += (x1 - x0 + 1) * (y1 - y0 + 1)
    pix = np.empty(bound, dtype=np.int64)
    gid = np.empty(bound, dtype=np.int64)
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    m = 0
    for g in order:
        mx = mean2d[g, 0]
        my = mean2d[g, 1]
        ca = conic[g, 0]
        cb = conic[g, 1]
        cc = conic[g, 2]
        x0, x1, y0, y1 = _footprint(mx, my, radius[g], width, height)
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - my
            for px in range(x0, x1 + 1):
                dx = px + 0.5 - mx
                if -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy >= POWER_CUTOFF:
                    p = py * width + px
                    pix[m] = p
                    gid[m] = g
                    offsets[p + 1] += 1
                    m += 1
    for p in range(n_pix):
        offsets[p + 1] += offsets[p]
    # stable counting sort by pixel keeps the depth order within each list
    cursor = offsets[:n_pix].copy()
    ids = np.empty(m, dtype=np.int64)
    for j in range(m):
        p = pix[j]
        ids[cursor[p]] = gid[j]
        cursor[p] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def _blend(offsets, ids, mean2d, conic, opac, colors, background, width, height):
    n_pix = width * height
    image = np.empty((n_pix, 3))
    t_final = np.empty(n_pix)
    n_contrib = np.zeros(n_pix, dtype=np.int64)
    pair_alpha = np.zeros(ids.shape[0])
    pair_t = np.zeros(ids.shape[0])
    for p in prange(n_pix):
        px = p % width + 0.5
        py = p // width + 0.5
        t = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        count = 0
        for j in range(offsets[p], offsets[p + 1]):
            g = ids[j]
            dx = px - mean2d[g, 0]
            dy = py - mean2d[g, 1]
            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
            alpha = min(ALPHA_MAX, opac[g] * np.exp(power))
            test_t = t * (1.0 - alpha)
            if test_t < T_MIN:
                break
            w = alpha * t
            c0 += colors[g, 0] * w
            c1 += colors[g, 1] * w
            c2 += colors[g, 2] * w
            pair_alpha[j] = alpha
            pair_t[j] = t
            t = test_t
            count += 1
        image[p, 0] = c0 + t * background[0]
        image[p, 1] = c1 + t * background[1]
        image[p, 2] = c2 + t * background[2]
        t_final[p] = t
        n_contrib[p] = count
    return image, t_final, n_contrib, pair_alpha, pair_t


@njit(parallel=True, cache=True)
def _blend_backward(
    offsets, ids, n_contrib, pair_alpha, pair_t, t_final,
    mean2d, conic, opac, colors, background, grad_img, width, height, n_gauss, n_chunks,
):
    d_mean = np.zeros((n_chunks, n_gauss, 2))
    d_conic = np.zeros((n_chunks, n_gauss, 3))
    d_opac = np.zeros((n_chunks, n_gauss))
    d_color = np.zeros((n_chunks, n_gauss, 3))
    rows_per = (height + n_chunks - 1) // n_chunks
    for chunk in prange(n_chunks):
        row0 = chunk * rows_per
        row1 = min(height, row0 + rows_per)
        for p in range(row0 * width, row1 * width):
            g0 = grad_img[p, 0]
            g1 = grad_img[p, 1]
            g2 = grad_img[p, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            px = p % width + 0.5
            py = p // width + 0.5
            # colour accumulated behind the current contributor, dotted with the upstream grad
            behind = t_final[p] * (background[0] * g0 + background[1] * g1 + background[2] * g2)
            for j in range(offsets[p] + n_contrib[p] - 1, offsets[p] - 1, -1):
                g = ids[j]
                alpha = pair_alpha[j]
                t = pair_t[j]
                w = alpha * t
                d_color[chunk, g, 0] += w * g0
                d_color[chunk, g, 1] += w * g1
                d_color[chunk, g, 2] += w * g2
                cdot = colors[g, 0] * g0 + colors[g, 1] * g1 + colors[g, 2] * g2
                dl_dalpha = t * cdot - behind / (1.0 - alpha)
                behind += cdot * w
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                gauss = np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                if opac[g] * gauss > ALPHA_MAX:
                    continue
                d_opac[chunk, g] += gauss * dl_dalpha
                dl_dpower = alpha * dl_dalpha
                d_mean[chunk, g, 0] += dl_dpower * (ca * dx + cb * dy)
                d_mean[chunk, g, 1] += dl_dpower * (cb * dx + cc * dy)
                d_conic[chunk, g, 0] += -0.5 * dx * dx * dl_dpower
                d_conic[chunk, g, 1] += -dx * dy * dl_dpower
                d_conic[chunk, g, 2] += -0.5 * dy * dy * dl_dpower
    return d_mean, d_conic, d_opac, d_color


@dataclass(eq=False)
class RenderBuffers:
    image: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H*W,)
    offsets: np.ndarray  # (H*W + 1,) CSR row pointers into pair arrays
    pair_ids: np.ndarray
    pair_alpha: np.ndarray
    pair_t: np.ndarray
    order: np.ndarray  # depth-sorted active Gaussian ids
    projected: ProjectedBatch
    opac: np.ndarray  # effective opacity per Gaussian (0 when inactive)
    colors: np.ndarray  # (N, 3) clamped view-dependent colours
    raw_colors: np.ndarray  # (N, 3) before clamping
    dirs: np.ndarray  # (N, 3) unit view directions
    coef_mask: np.ndarray  # (N, K) SH coefficients in use
    basis: np.ndarray  # (N, K) SH basis at the view directions
    cloud: GaussianCloud
    camera: Camera
    background: np.ndarray


@dataclass(eq=False)
class Gradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def items(self):
        return ((k, getattr(self, k)) for k in GaussianCloud.PARAM_NAMES)

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> Gradients:
        return cls(**{k: np.zeros_like(v) for k, v in cloud.params().items()})


def _coef_mask(cloud: GaussianCloud, sh_retain, sh_coeff_mask) -> np.ndarray:
    n, k = cloud.n, cloud.sh.shape[1]
    degree = cloud.max_degree
    if sh_retain is None:
        mask = np.ones((n, k))
    else:
        sh_retain = np.asarray(sh_retain)
        if sh_retain.shape != (n,):
            raise InvalidParameterError(f"sh_retain must have length {n}")
        if sh_retain.size and (sh_retain.min() < 0 or sh_retain.max() > degree):
            raise InvalidParameterError(f"sh_retain entries must lie in [0, {degree}]")
        mask = degree_mask(sh_retain, degree)
    if sh_coeff_mask is not None:
        sh_coeff_mask = np.asarray(sh_coeff_mask, dtype=np.float64)
        if sh_coeff_mask.shape != (n, k):
            raise InvalidParameterError(f"sh_coeff_mask must have shape {(n, k)}")
        mask = mask * sh_coeff_mask
    return mask


def render_forward(
    cloud: GaussianCloud,
    camera: Camera,
    mask=None,
    sh_retain=None,
    background=(0.0, 0.0, 0.0),
    sh_coeff_mask=None,
) -> RenderBuffers:
    """Render ``cloud`` from ``camera``.

    ``mask`` is the per-Gaussian binary opacity mask, ``sh_retain`` the per-Gaussian
    highest SH degree used, ``sh_coeff_mask`` an optional ``(N, K)`` per-coefficient
    keep mask multiplied on top of ``sh_retain``.
    """
    if not isinstance(camera, Camera):
        raise InvalidParameterError("camera must be a Camera")
    background = np.asarray(background, dtype=np.float64).reshape(3)
    n = cloud.n
    if mask is None:
        mask = np.ones(n)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n,):
            raise InvalidParameterError(f"mask must have length {n}")
    coef_mask = _coef_mask(cloud, sh_retain, sh_coeff_mask)

    proj = project_batch(cloud.positions, cloud.log_scales, cloud.rotations, camera)
    opac = sigmoid(cloud.opacity_logits) * mask
    active = proj.visible & (mask != 0)
    idx = np.flatnonzero(active)
    order = idx[np.lexsort((idx, proj.t_cam[idx, 2]))]
    opac = np.where(active, opac, 0.0)

    delta = cloud.positions - camera.center
    dirs = delta / np.maximum(np.linalg.norm(delta, axis=1, keepdims=True), 1e-12)
    degree = cloud.max_degree
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis * coef_mask, cloud.sh) + 0.5
    colors = np.maximum(raw, 0.0)

    width, height = camera.width, camera.height
    offsets, ids = _build_pairs(order, proj.mean2d, proj.conic, proj.radius, width, height)
    image, t_final, n_contrib, pair_alpha, pair_t = _blend(
        offsets, ids, proj.mean2d, proj.conic, opac, colors, background, width, height
    )
    return RenderBuffers(
        image=image.reshape(height, width, 3),
        final_transmittance=t_final.reshape(height, width),
        n_contrib=n_contrib,
        offsets=offsets,
        pair_ids=ids,
        pair_alpha=pair_alpha,
        pair_t=pair_t,
        order=order,
        projected=proj,
        opac=opac,
        colors=colors,
        raw_colors=raw,
        dirs=dirs,
        coef_mask=coef_mask,
        basis=basis,
        cloud=cloud,
        camera=camera,
        background=background,
    )


def render_image(cloud, camera, **kwargs) -> np.ndarray:
    return render_forward(cloud, camera, **kwargs).image


@njit(cache=True)
def _geometry_backward(d_mean, d_conic, conic, t_cam, cov3d, rot_w, fx, fy, log_scales, rotations):
    """Chain conic/mean2d gradients through projection and covariance to position, scale, rotation."""
    n = d_mean.shape[0]
    d_pos = np.zeros((n, 3))
    d_ls = np.zeros((n, 3))
    d_q = np.zeros((n, 4))
    jac = np.zeros((2, 3))
    gc = np.zeros((2, 2))
    cm = np.zeros((2, 2))
    g2 = np.zeros((2, 2))
    tm = np.zeros((2, 3))
    g2t = np.zeros((2, 3))
    g3 = np.zeros((3, 3))
    g_t = np.zeros((2, 3))
    g_jac = np.zeros((2, 3))
    rot = np.zeros((3, 3))
    r = np.zeros((3, 3))
    for g in range(n):
        # conic -> 2D covariance: dL/dS = -C dL/dC C, off-diagonal conic entry shared by two slots
        cm[0, 0] = conic[g, 0]
        cm[0, 1] = conic[g, 1]
        cm[1, 0] = conic[g, 1]
        cm[1, 1] = conic[g, 2]
        gc[0, 0] = d_conic[g, 0]
        gc[0, 1] = 0.5 * d_conic[g, 1]
        gc[1, 0] = 0.5 * d_conic[g, 1]
        gc[1, 1] = d_conic[g, 2]
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for k in range(2):
                    for l in range(2):
                        acc += cm[i, k] * gc[k, l] * cm[l, j]
                g2[i, j] = -acc
        tx = t_cam[g, 0]
        ty = t_cam[g, 1]
        tz = t_cam[g, 2]
        jac[0, 0] = fx / tz
        jac[0, 2] = -fx * tx / (tz * tz)
        jac[1, 1] = fy / tz
        jac[1, 2] = -fy * ty / (tz * tz)
        for i in range(2):
            for j in range(3):
                tm[i, j] = jac[i, 0] * rot_w[0, j] + jac[i, 1] * rot_w[1, j] + jac[i, 2] * rot_w[2, j]
        # g3 = T^T G2 T;  g_t = 2 G2 T Sigma
        for i in range(2):
            for j in range(3):
                g2t[i, j] = g2[i, 0] * tm[0, j] + g2[i, 1] * tm[1, j]
        for i in range(3):
            for j in range(3):
                g3[i, j] = tm[0, i] * g2t[0, j] + tm[1, i] * g2t[1, j]
        for i in range(2):
            for j in range(3):
                g_t[i, j] = 2.0 * (g2t[i, 0] * cov3d[g, 0, j] + g2t[i, 1] * cov3d[g, 1, j] + g2t[i, 2] * cov3d[g, 2, j])
        for i in range(2):
            for j in range(3):
                # g_jac = g_t R_w^T
                g_jac[i, j] = g_t[i, 0] * rot_w[j, 0] + g_t[i, 1] * rot_w[j, 1] + g_t[i, 2] * rot_w[j, 2]
        dc0 = g_jac[0, 2] * (-fx / tz**2) + d_mean[g, 0] * fx / tz
        dc1 = g_jac[1, 2] * (-fy / tz**2) + d_mean[g, 1] * fy / tz
        dc2 = (
            g_jac[0, 0] * (-fx / tz**2)
            + g_jac[0, 2] * (2 * fx * tx / tz**3)
            + g_jac[1, 1] * (-fy / tz**2)
            + g_jac[1, 2] * (2 * fy * ty / tz**3)
            - d_mean[g, 0] * fx * tx / tz**2
            - d_mean[g, 1] * fy * ty / tz**2
        )
        for j in range(3):
            d_pos[g, j] = dc0 * rot_w[0, j] + dc1 * rot_w[1, j] + dc2 * rot_w[2, j]

        # Sigma = M M^T, M = R diag(s)
        qw, qx, qy, qz = rotations[g, 0], rotations[g, 1], rotations[g, 2], rotations[g, 3]
        qnorm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        w = qw / qnorm
        x = qx / qnorm
        y = qy / qnorm
        z = qz / qnorm
        rot[0, 0] = 1 - 2 * (y * y + z * z)
        rot[0, 1] = 2 * (x * y - w * z)
        rot[0, 2] = 2 * (x * z + w * y)
        rot[1, 0] = 2 * (x * y + w * z)
        rot[1, 1] = 1 - 2 * (x * x + z * z)
        rot[1, 2] = 2 * (y * z - w * x)
        rot[2, 0] = 2 * (x * z - w * y)
        rot[2, 1] = 2 * (y * z + w * x)
        rot[2, 2] = 1 - 2 * (x * x + y * y)
        for j in range(3):
            sj = np.exp(log_scales[g, j])
            acc = 0.0
            for i in range(3):
                # g_m = 2 g3 M with M = R diag(s)
                gm = 2.0 * (g3[i, 0] * rot[0, j] + g3[i, 1] * rot[1, j] + g3[i, 2] * rot[2, j]) * sj
                acc += gm * rot[i, j]
                r[i, j] = gm * sj
            d_ls[g, j] = acc * sj
        dw = 2 * (-z * r[0, 1] + y * r[0, 2] + z * r[1, 0] - x * r[1, 2] - y * r[2, 0] + x * r[2, 1])
        dx = 2 * (
            y * r[0, 1] + z * r[0, 2] + y * r[1, 0] - 2 * x * r[1, 1] - w * r[1, 2]
            + z * r[2, 0] + w * r[2, 1] - 2 * x * r[2, 2]
        )
        dy = 2 * (
            -2 * y * r[0, 0] + x * r[0, 1] + w * r[0, 2] + x * r[1, 0] + z * r[1, 2]
            - w * r[2, 0] + z * r[2, 1] - 2 * y * r[2, 2]
        )
        dz = 2 * (
            -2 * z * r[0, 0] - w * r[0, 1] + x * r[0, 2] + w * r[1, 0] - 2 * z * r[1, 1]
            + y * r[1, 2] + x * r[2, 0] + y * r[2, 1]
        )
        dot = w * dw + x * dx + y * dy + z * dz
        d_q[g, 0] = (dw - w * dot) / qnorm
        d_q[g, 1] = (dx - x * dot) / qnorm
        d_q[g, 2] = (dy - y * dot) / qnorm
        d_q[g, 3] = (dz - z * dot) / qnorm
    return d_pos, d_ls, d_q



def render_backward(buffers: RenderBuffers, upstream_grad) -> Gradients:
    """Gradients of ``sum(upstream_grad * image)`` with respect to every cloud parameter."""
    cloud, camera = buffers.cloud, buffers.camera
    height, width = camera.height, camera.width
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (height, width, 3):
        raise InvalidParameterError(
            f"upstream_grad has shape {upstream_grad.shape}, expected {(height, width, 3)}"
        )
    grads = Gradients.zeros_like(cloud)
    if cloud.n == 0 or buffers.order.size == 0:
        return grads
    proj = buffers.projected
    n_chunks = max(1, min(numba.get_num_threads(), height))
    d_mean, d_conic, d_opac, d_color = _blend_backward(
        buffers.offsets, buffers.pair_ids, buffers.n_contrib, buffers.pair_alpha, buffers.pair_t,
        buffers.final_transmittance.reshape(-1), proj.mean2d, proj.conic, buffers.opac,
        buffers.colors, buffers.background, np.ascontiguousarray(upstream_grad.reshape(-1, 3)),
        width, height, cloud.n, n_chunks,
    )
    act = buffers.order
    d_mean = d_mean.sum(axis=0)[act]
    d_conic = d_conic.sum(axis=0)[act]
    d_opac = d_opac.sum(axis=0)[act]
    d_color = d_color.sum(axis=0)[act]

    # opacity
    sig = sigmoid(cloud.opacity_logits[act])
    grads.opacity_logits[act] = d_opac * sig * (1.0 - sig)

    # colour: clamp, SH coefficients and view direction
    degree = cloud.max_degree
    dirs = buffers.dirs[act]
    d_raw = d_color * (buffers.raw_colors[act] > 0.0)
    basis = buffers.basis[act] * buffers.coef_mask[act]
    grads.sh[act] = basis[:, :, None] * d_raw[:, None, :]
    sh_dot = np.einsum("nkc,nc->nk", cloud.sh[act], d_raw) * buffers.coef_mask[act]
    d_dir = np.einsum("nkj,nk->nj", sh_basis_jacobian(dirs, degree), sh_dot)
    dist = np.linalg.norm(cloud.positions[act] - camera.center, axis=1, keepdims=True)
    d_pos = (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / dist

    d_pos_geo, grads.log_scales[act], grads.rotations[act] = _geometry_backward(
        d_mean, d_conic, proj.conic[act], proj.t_cam[act], proj.cov3d[act], camera.rotation,
        camera.fx, camera.fy, cloud.log_scales[act], cloud.rotations[act],
    )
    grads.positions[act] = d_pos + d_pos_geo
    return grads


def render_mae(cloud, camera, mask_a, mask_b, background=(0.0, 0.0, 0.0)) -> float:
    img_a = render_forward(cloud, camera, mask=mask_a, background=background).image
    img_b = render_forward(cloud, camera, mask=mask_b, background=background).image
    return float(np.mean(np.abs(img_a - img_b)))
