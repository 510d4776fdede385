import numpy as np
import pytest

from anchorsplat.errors import InvalidParameterError
from anchorsplat.gscore import GaussianCloud, project, sigmoid
from anchorsplat.render import T_MIN, render_backward, render_forward, render_image, render_mae

from conftest import identity_camera, random_cloud, single_gaussian, small_camera
from fdcheck import check_gradients

ON_PIXEL = (-0.05, -0.05, 1.0)  # projects onto the centre of pixel (3, 3) of identity_camera()


def test_single_gaussian_pixel():
    img = render_image(single_gaussian(ON_PIXEL, log_scale=-8, opacity=0.6), identity_camera())
    np.testing.assert_allclose(img[3, 3], [0.6, 0.0, 0.0], atol=1e-12)


def test_two_coincident_gaussians():
    one = single_gaussian(ON_PIXEL, log_scale=-8, opacity=0.5, color=(1, 1, 1))
    two = GaussianCloud(*(np.concatenate([v, v]) for v in one.params().values()))
    np.testing.assert_allclose(render_image(two, identity_camera())[3, 3], [0.75] * 3, atol=1e-12)


def test_zero_mask_and_empty_cloud_give_background(rng):
    cloud = random_cloud(rng, 30)
    cam = small_camera()
    bg = (0.2, 0.4, 0.9)
    img = render_image(cloud, cam, mask=np.zeros(30), background=bg)
    np.testing.assert_array_equal(img, np.broadcast_to(bg, img.shape))
    img = render_image(GaussianCloud.empty(), cam, background=bg)
    np.testing.assert_array_equal(img, np.broadcast_to(bg, img.shape))


def test_invalid_inputs(rng):
    cloud = random_cloud(rng, 5)
    with pytest.raises(InvalidParameterError):
        render_forward(cloud, "not a camera")
    with pytest.raises(InvalidParameterError):
        render_forward(cloud, small_camera(), mask=np.ones(4))
    with pytest.raises(InvalidParameterError):
        render_forward(cloud, small_camera(), sh_retain=np.full(5, 4))
    buf = render_forward(cloud, small_camera())
    with pytest.raises(InvalidParameterError):
        render_backward(buf, np.zeros((8, 8, 3)))


def test_zero_upstream_gives_zero_gradients(rng):
    cloud = random_cloud(rng, 10)
    cam = small_camera()
    grads = render_backward(render_forward(cloud, cam), np.zeros((16, 16, 3)))
    for _, g in grads.items():
        assert not np.any(g)


def test_single_pixel_opacity_fd():
    cam = identity_camera()
    cloud = single_gaussian(ON_PIXEL, log_scale=-8, opacity=0.6)
    up = np.zeros((8, 8, 3))
    up[3, 3, 0] = 1.0
    analytic = render_backward(render_forward(cloud, cam), up).opacity_logits[0]
    h = 1e-4
    vals = []
    for s in (1, -1):
        c = cloud.copy()
        c.opacity_logits[0] += s * h
        vals.append(render_image(c, cam)[3, 3, 0])
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic - numeric) / abs(numeric) < 1e-4
    np.testing.assert_allclose(analytic, 1.0 * 0.6 * 0.4, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_fd_small_scene(seed):
    r = np.random.default_rng(seed)
    cloud = random_cloud(r, 5)
    cam = small_camera(8, 8)
    target = r.uniform(0, 1, (8, 8, 3))
    assert check_gradients(cloud, cam, target, lam=0.0) == []


def test_render_mae():
    cam = identity_camera()
    cloud = single_gaussian(ON_PIXEL, log_scale=-8, opacity=0.6)
    assert render_mae(cloud, cam, np.ones(1), np.ones(1)) == 0.0
    # the 0.3 px^2 low-pass spreads even a point onto the 3x3 neighbourhood
    proj = project(cloud.positions[0], cloud.log_scales[0], cloud.rotations[0], cam)
    conic = np.linalg.inv(proj.cov2d)
    total = 0.0
    for v in range(8):
        for u in range(8):
            d = np.array([u + 0.5, v + 0.5]) - proj.mean2d
            power = -0.5 * d @ conic @ d
            if power >= -4.5:
                total += 0.6 * np.exp(power)
    expected = total / (64 * 3)
    np.testing.assert_allclose(render_mae(cloud, cam, np.ones(1), np.zeros(1)), expected, rtol=1e-12)


def test_transmittance_and_bounds(rng):
    cloud = random_cloud(rng, 60, opacity=(0.5, 0.99))
    cloud.sh[:, 1:] = 0
    cloud.sh[:, 0] = rng.uniform(-1.7, 1.7, (60, 3))  # colours within [0, 1]
    buf = render_forward(cloud, small_camera(), background=(1, 1, 1))
    assert np.all((buf.final_transmittance >= 0) & (buf.final_transmittance <= 1))
    assert buf.image.max() <= 1 + T_MIN
    for p in range(256):
        lo = buf.offsets[p]
        t = buf.pair_t[lo : lo + buf.n_contrib[p]]
        assert np.all(np.diff(t) <= 0)


def test_storage_order_invariance(rng):
    cloud = random_cloud(rng, 40)
    cam = small_camera()
    perm = rng.permutation(40)
    np.testing.assert_array_equal(render_image(cloud, cam), render_image(cloud.subset(perm), cam))


def test_mask_equivalence_and_zero_gradient(rng):
    cloud = random_cloud(rng, 40)
    cam = small_camera()
    mask = (rng.random(40) < 0.6).astype(float)
    buf = render_forward(cloud, cam, mask=mask)
    sub = render_image(cloud.subset(mask == 1), cam)
    np.testing.assert_allclose(buf.image, sub, atol=1e-6)
    grads = render_backward(buf, rng.normal(size=(16, 16, 3)))
    for _, g in grads.items():
        assert not np.any(g[mask == 0])


def test_truncated_sh_zero_gradient(rng):
    cloud = random_cloud(rng, 20)
    retain = rng.integers(0, 4, 20)
    buf = render_forward(cloud, small_camera(), sh_retain=retain)
    g = render_backward(buf, rng.normal(size=(16, 16, 3))).sh
    degrees = np.repeat(np.arange(4), [1, 3, 5, 7])
    for i in range(20):
        assert not np.any(g[i, degrees > retain[i]])
    # same image as rendering a copy with those coefficients zeroed
    c = cloud.copy()
    for i in range(20):
        c.sh[i, degrees > retain[i]] = 0
    np.testing.assert_allclose(buf.image, render_image(c, small_camera()), atol=1e-12)


def test_empty_cloud_backward():
    buf = render_forward(GaussianCloud.empty(), small_camera())
    grads = render_backward(buf, np.ones((16, 16, 3)))
    assert grads.positions.shape == (0, 3)


def test_opacity_activation_used(rng):
    cloud = random_cloud(rng, 10)
    buf = render_forward(cloud, small_camera())
    act = buf.order
    np.testing.assert_allclose(buf.opac[act], sigmoid(cloud.opacity_logits[act]))
