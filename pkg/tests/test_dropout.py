import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat.dropout import (
    DropoutConfig,
    anchor_rate,
    build_dropout_set,
    current_lmax,
    make_mask,
    make_plan,
    parse_milestones,
    plan_sh_dropout,
    plan_sh_random,
    random_sh_zero_probability,
    scale_milestones,
    select_anchors,
)
from anchorsplat.errors import InvalidParameterError
from anchorsplat.gscore import coeff_degrees
from anchorsplat.render import render_backward, render_forward
from anchorsplat.spatial import build_index

from conftest import random_cloud, small_camera


def brute_dropout_set(positions, anchors, k):
    out = set()
    for a in anchors:
        d2 = np.sum((positions - positions[a]) ** 2, axis=1)
        others = [j for j in np.lexsort((np.arange(len(positions)), d2)) if j != a]
        out.add(int(a))
        out.update(int(j) for j in others[:k])
    return sorted(out)


def test_anchor_rate():
    cfg = DropoutConfig()
    assert anchor_rate(0, cfg) == 0.0
    assert anchor_rate(10000, cfg) == pytest.approx(0.02)
    assert anchor_rate(5000, cfg) == pytest.approx(0.01)


def test_select_anchors_extremes(rng):
    assert select_anchors(50, 0.0, rng).size == 0
    np.testing.assert_array_equal(select_anchors(50, 1.0, rng), np.arange(50))
    with pytest.raises(InvalidParameterError):
        select_anchors(5, 1.5, rng)


def test_select_anchors_binomial():
    n, p = 100000, 0.02
    sizes = [select_anchors(n, p, np.random.default_rng(s)).size for s in range(100)]
    sd = np.sqrt(n * p * (1 - p))
    # the mean of 100 draws has standard deviation sd / 10
    assert abs(np.mean(sizes) - n * p) < 3 * sd / 10
    a = select_anchors(n, p, np.random.default_rng(0))
    assert np.all(np.diff(a) > 0)


def test_dropout_set_line():
    pos = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], 1)
    np.testing.assert_array_equal(build_dropout_set(pos, [2], 2), [1, 2, 3])
    assert build_dropout_set(pos, [], 2).size == 0
    with pytest.raises(InvalidParameterError):
        build_dropout_set(pos, [0], 5)


def test_dropout_set_overlap(rng):
    pos = rng.uniform(size=(150, 3))
    idx = build_index(pos)
    a, b = 0, int(idx.query(0, 1)[0])
    d = build_dropout_set(pos, [a, b], 8, idx)
    assert d.size < 2 * 9
    np.testing.assert_array_equal(d, brute_dropout_set(pos, [a, b], 8))
    np.testing.assert_array_equal(build_dropout_set(pos, [a, b, a], 8, idx), d)


def test_dropout_set_lazy_index(rng):
    pos = rng.uniform(size=(60, 3))
    calls = []

    def provider():
        calls.append(1)
        return build_index(pos)

    assert build_dropout_set(pos, [], 3, provider).size == 0
    assert calls == []
    np.testing.assert_array_equal(build_dropout_set(pos, [4, 9], 3, provider), brute_dropout_set(pos, [4, 9], 3))
    assert calls == [1]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(0, 2**31))
def test_dropout_set_property(n, seed):
    r = np.random.default_rng(seed)
    # grid-snapped coordinates produce many exact distance ties
    pos = np.round(r.uniform(0, 4, (n, 3)))
    k = int(r.integers(0, min(n - 1, 12) + 1))
    anchors = np.unique(r.integers(0, n, r.integers(0, 6)))
    d = build_dropout_set(pos, anchors, k)
    np.testing.assert_array_equal(d, brute_dropout_set(pos, anchors, k))
    assert set(anchors.tolist()) <= set(d.tolist())
    assert d.size <= anchors.size * (k + 1)


def test_make_mask():
    np.testing.assert_array_equal(make_mask(4, [1, 3]), [1, 0, 1, 0])
    np.testing.assert_array_equal(make_mask(4, []), [1, 1, 1, 1])
    np.testing.assert_array_equal(make_mask(4, range(4)), [0, 0, 0, 0])
    with pytest.raises(InvalidParameterError):
        make_mask(4, [4])


def test_lmax_schedule():
    ms = DropoutConfig().lmax_milestones
    assert [current_lmax(i, ms) for i in (0, 1999, 2000, 3999, 4000, 6000, 9999)] == [0, 0, 0, 0, 1, 2, 2]
    assert current_lmax(0, parse_milestones("2000:0,4000:1,6000:2")) == 0
    assert scale_milestones(ms, 4000) == ((0, 0), (800, 0), (1600, 1), (2400, 2))
    with pytest.raises(InvalidParameterError):
        parse_milestones("2000-0")
    with pytest.raises(InvalidParameterError):
        DropoutConfig(lmax_milestones=((4000, 1), (2000, 0)))


def test_plan_sh_dropout(rng):
    assert np.all(plan_sh_dropout(100, 3000, DropoutConfig(p_sh=0.0), 3, rng) == 3)
    assert np.all(plan_sh_dropout(100, 3000, DropoutConfig(p_sh=1.0), 3, rng) == 0)
    assert np.all(plan_sh_dropout(100, 3000, DropoutConfig(sh_dropout_on=False), 3, rng) == 3)
    n, p = 10000, 0.2
    counts = [np.sum(plan_sh_dropout(n, 3000, DropoutConfig(), 3, np.random.default_rng(s)) == 0) for s in range(100)]
    assert abs(np.mean(counts) - n * p) < 3 * np.sqrt(n * p * (1 - p)) / 10


def test_random_sh_baseline_rate():
    cfg = DropoutConfig(sh_random_baseline=True)
    # l_max = 0 truncation removes 15 of 16 coefficients for a selected Gaussian
    assert random_sh_zero_probability(0, 3, 0.2) == pytest.approx(0.2)
    assert random_sh_zero_probability(1, 3, 0.2) == pytest.approx(0.2 * 12 / 15)
    assert random_sh_zero_probability(3, 3, 0.2) == 0
    keep = plan_sh_random(20000, 5000, cfg, 3, np.random.default_rng(0))
    deg = coeff_degrees(3)
    assert np.all(keep[:, deg == 0] == 1)
    degree_scheme = 0.2 * 12  # expected zeroed per Gaussian at l_max = 1
    assert abs((1 - keep).sum(1).mean() - degree_scheme) < 0.05


def test_make_plan_modes(rng):
    cloud = random_cloud(rng, 200)
    off = DropoutConfig(anchor_dropout_on=False, sh_dropout_on=False)
    plan = make_plan(cloud, 9000, off, None, rng)
    assert plan.is_identity and np.all(plan.opacity_mask == 1)
    assert make_plan(cloud, None, DropoutConfig(), None, rng).is_identity
    plan0 = make_plan(cloud, 0, DropoutConfig(), None, rng)
    assert np.all(plan0.opacity_mask == 1)
    cfg = DropoutConfig(pa_max=0.05)
    p = make_plan(cloud, 10000, cfg, None, np.random.default_rng(3))
    q = make_plan(cloud, 10000, cfg, None, np.random.default_rng(3))
    np.testing.assert_array_equal(p.opacity_mask, q.opacity_mask)
    np.testing.assert_array_equal(p.sh_retain, q.sh_retain)
    assert p.anchors.size > 0
    assert set(p.anchors.tolist()) <= set(p.dropped.tolist())
    assert np.sum(1 - p.opacity_mask) == p.dropped.size
    assert np.all(p.opacity_mask[p.dropped] == 0)


def test_plan_zero_gradients(rng):
    cloud = random_cloud(rng, 120)
    cfg = DropoutConfig(pa_max=0.1, p_sh=0.5)
    plan = make_plan(cloud, 10000, cfg, None, rng)
    buf = render_forward(cloud, small_camera(), **plan.render_kwargs())
    g = render_backward(buf, rng.normal(size=(16, 16, 3)))
    deg = coeff_degrees(3)
    for i in range(cloud.n):
        if plan.opacity_mask[i] == 0:
            assert not np.any(g.sh[i]) and g.opacity_logits[i] == 0
        assert not np.any(g.sh[i, deg > plan.sh_retain[i]])


def test_config_validation():
    for bad in ({"pa_max": -0.1}, {"k": -1}, {"p_sh": 2}, {"knn_rebuild_every": 0}):
        with pytest.raises(InvalidParameterError):
            DropoutConfig(**bad)
