import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoxel.events import EventStream
from evoxel.representation import (
    SOBEL_X,
    SOBEL_Y,
    FrameStack,
    RepresentationConfig,
    augment,
    apply_op,
    make_frames,
    normalize_unit,
    read_stack,
    represent,
    resize_stack,
    sobel_frames,
    sobel_magnitude,
    stack_to_tensor,
    write_stack,
)
from evoxel.voxels import VoxelGrid
from helpers import brute_correlate, check_mode_algebra, random_stream


def _one_pixel(p_seq):
    n = len(p_seq)
    return EventStream(np.linspace(0.001, 0.004, n), [2] * n, [1] * n, p_seq, 4, 3, 0.005)


def test_last_negative_event_modes():
    s = _one_pixel([1, -1])
    val = {m: make_frames(s, 0.005, m).frames[0, 1, 2] for m in ("pos", "neg", "last")}
    assert val == {"pos": 0.0, "neg": 1.0, "last": -1.0}


def test_sep_both_polarities():
    f = make_frames(_one_pixel([1, -1]), 0.005, "sep").frames
    assert f.shape == (2, 3, 4)
    assert f[0, 1, 2] == 1.0 and f[1, 1, 2] == 1.0


@pytest.mark.parametrize("mode", ["pos", "neg", "last", "any", "sep"])
def test_empty_windows_zero(mode):
    st_ = make_frames(EventStream.empty(5, 4, 0.02), 0.005, mode)
    assert st_.frames.shape[0] == (8 if mode == "sep" else 4)
    assert not st_.frames.any()


def test_unknown_mode():
    with pytest.raises(ValueError):
        make_frames(EventStream.empty(2, 2, 0.01), 0.005, "both")


@settings(max_examples=80, deadline=None)
@given(n=st.integers(0, 400), w=st.sampled_from([0.003, 0.005, 0.0125, 0.05]), seed=st.integers(0, 2**31))
def test_mode_algebra_property(n, w, seed):
    s = random_stream(np.random.default_rng(seed), n, width=7, height=5, duration=0.05)
    assert check_mode_algebra(s, w) == 0


def test_modes_match_last_event_oracle(rng):
    from evoxel.events import last_event_per_pixel, partition

    s = random_stream(rng, 300, width=6, height=4)
    pos = make_frames(s, 0.01, "pos").frames
    last = make_frames(s, 0.01, "last").frames
    for k, g in enumerate(partition(s, 0.01)):
        ref = np.zeros((4, 6))
        for (x, y), e in last_event_per_pixel(g).items():
            ref[y, x] = e.polarity
        assert np.array_equal(last[k], ref)
        assert np.array_equal(pos[k], (ref > 0).astype(float))


def test_sobel_kernels():
    assert SOBEL_X.sum() == 0 and SOBEL_Y.sum() == 0
    assert np.array_equal(SOBEL_Y, SOBEL_X.T)


def test_sobel_impulse_pattern():
    plane = np.zeros((5, 5))
    plane[2, 2] = 1.0
    m = sobel_magnitude(plane)
    r2 = np.sqrt(2)
    expect = np.array([[r2, 2, r2], [2, 0, 2], [r2, 2, r2]])
    assert np.max(np.abs(m[1:4, 1:4] - expect)) < 1e-12
    assert m.sum() == pytest.approx(4 * 2 + 4 * r2)


def test_sobel_matches_brute_force(rng):
    for _ in range(20):
        plane = (rng.random((16, 16)) < 0.3).astype(float) * rng.choice([-1.0, 1.0], (16, 16))
        gx, gy = brute_correlate(plane, SOBEL_X), brute_correlate(plane, SOBEL_Y)
        assert np.array_equal(sobel_magnitude(plane), np.sqrt(gx * gx + gy * gy))


def test_sobel_constant_plane_interior_zero():
    m = sobel_magnitude(np.ones((9, 9)))
    assert not m[1:-1, 1:-1].any()
    assert m[0].any() and m[:, -1].any()


def test_sobel_frames_normalization():
    f = np.zeros((3, 8, 8))
    f[0, 4, 4] = 1
    f[2, 1:5, 2] = 1
    out = sobel_frames(FrameStack(f, "pos", "binary01"))
    assert out.value_range == "greyscale255" and out.sobel
    assert out.frames[0].max() == 255 and out.frames[2].max() == 255
    assert not out.frames[1].any()
    glob = sobel_frames(FrameStack(f, "pos", "binary01"), "global")
    assert glob.frames.max() == 255
    with pytest.raises(ValueError):
        sobel_frames(out)


def test_resize_examples():
    f = np.zeros((1, 512, 512))
    f[0, 301, 77] = 1
    small = resize_stack(FrameStack(f, "pos", "binary01"), 256).frames
    assert small.shape == (1, 256, 256) and small.sum() == 1
    const = resize_stack(FrameStack(np.full((1, 8, 8), 99.0), "pos", "greyscale255", True), 4).frames
    assert np.all(const == 99.0)
    block = FrameStack(np.array([[[0.0, 0.0], [0.0, 255.0]]]), "pos", "greyscale255", True)
    assert resize_stack(block, 1).frames[0, 0, 0] == 63.75
    with pytest.raises(ValueError):
        resize_stack(block, 4)


def test_resize_signed_keeps_magnitude():
    f = np.zeros((1, 4, 4))
    f[0, 0, 0] = -1
    f[0, 3, 3] = 1
    f[0, 0, 3], f[0, 1, 2] = 1, -1  # tie in one block goes to +1
    out = resize_stack(FrameStack(f, "last", "signed1"), 2).frames[0]
    assert out.tolist() == [[-1, 1], [0, 1]]


def test_resize_non_integer_factor():
    f = np.full((2, 10, 10), 100.0)
    out = resize_stack(FrameStack(f, "pos", "greyscale255", True), 4).frames
    assert out.shape == (2, 4, 4) and np.allclose(out, 100.0)
    ev = np.zeros((1, 10, 10))
    ev[0, 9, 9] = 1
    assert resize_stack(FrameStack(ev, "pos", "binary01"), 3).frames.sum() == 1


def test_normalize_examples():
    g = normalize_unit(FrameStack(np.array([[[255.0, 127.5, 0.0]]]), "pos", "greyscale255", True))
    assert g.frames.tolist() == [[[1.0, 0.5, 0.0]]] and g.value_range == "unit_interval"
    s = normalize_unit(FrameStack(np.array([[[-1.0, 0.0, 1.0]]]), "last", "signed1"))
    assert s.frames.tolist() == [[[0.0, 0.5, 1.0]]]
    b = normalize_unit(FrameStack(np.array([[[0.0, 1.0]]]), "pos", "binary01"))
    assert b.frames.tolist() == [[[0.0, 1.0]]]


def test_normalize_monotone(rng):
    v = np.sort(rng.uniform(0, 255, 50))
    out = normalize_unit(FrameStack(v.reshape(1, 1, -1), "pos", "greyscale255", True)).frames.ravel()
    assert np.all(np.diff(out) >= 0)


def _label(rng, D=6):
    return VoxelGrid(rng.random((D,) * 3) < 0.3, "car", "c")


def test_flip_involution(rng):
    st_ = FrameStack((rng.random((3, 5, 7)) < 0.5).astype(float), "pos", "binary01")
    lab = _label(rng)
    for op in ("flip_h", "flip_v", "rotate_180"):
        s2, l2 = apply_op(*apply_op(st_, lab, op), op)
        assert np.array_equal(s2.frames, st_.frames) and l2.same_as(lab)


def test_flip_h_matches_scanner_geometry():
    """Mirroring the object along x mirrors its scan frames left-right (orbit reversed)."""
    from evoxel.synth import ScanConfig, generate_category_object, render_orbit

    obj = generate_category_object(0, 16, "chair")
    mirrored = VoxelGrid(obj.occupancy[::-1], obj.category)
    cfg = dict(seed=0, sensor_width=32, sensor_height=32, frame_rate=40)
    f1, _ = render_orbit(ScanConfig(object=obj, **cfg))
    f2, _ = render_orbit(ScanConfig(object=mirrored, revolutions=-1.0, **cfg))
    assert np.allclose(f1[0][:, ::-1], f2[0])
    assert np.allclose(f1[:, :, ::-1], f2)


def test_polarity_invert(rng, caplog):
    f = rng.choice([-1.0, 0.0, 1.0], (2, 4, 4))
    lab = _label(rng)
    out, l2 = apply_op(FrameStack(f, "last", "signed1"), lab, "polarity_invert")
    assert np.array_equal(out.frames, -f) and l2.same_as(lab)
    sep = FrameStack(np.abs(f[[0, 1, 1, 0]]), "sep", "binary01")
    out, _ = apply_op(sep, lab, "polarity_invert")
    assert np.array_equal(out.frames, sep.frames[[1, 0, 3, 2]])
    any_ = FrameStack(np.abs(f), "any", "binary01")
    with caplog.at_level(logging.WARNING):
        out, _ = apply_op(any_, lab, "polarity_invert")
    assert out is any_ and "polarity_invert" in caplog.text


def test_polarity_invert_sep_matches_inverted_stream(rng):
    s = random_stream(rng, 200, width=6, height=6)
    inv = EventStream(s.t, s.x, s.y, -s.p, s.sensor_width, s.sensor_height, s.duration)
    lab = _label(rng)
    for mode in ("sep", "last"):
        out, _ = apply_op(make_frames(s, 0.01, mode), lab, "polarity_invert")
        assert np.array_equal(out.frames, make_frames(inv, 0.01, mode).frames)


def test_temporal_reverse(rng):
    f = np.arange(3)[:, None, None] * np.ones((3, 2, 2))
    g = FrameStack(f, "pos", "greyscale255", True)
    out, _ = apply_op(g, _label(rng), "temporal_reverse")
    assert out.frames[:, 0, 0].tolist() == [2, 1, 0]
    sep = FrameStack(np.arange(6)[:, None, None] * np.ones((6, 1, 1)), "sep", "greyscale255", True)
    out, _ = apply_op(sep, _label(rng), "temporal_reverse")
    assert out.frames[:, 0, 0].tolist() == [4, 5, 2, 3, 0, 1]


def test_augment_deterministic_in_seed(rng):
    st_ = FrameStack((rng.random((4, 6, 6)) < 0.5).astype(float), "pos", "binary01")
    lab = _label(rng)
    ops = ["flip_h", "flip_v", "temporal_reverse"]
    a = augment(st_, lab, ops, seed=9)
    b = augment(st_, lab, ops, seed=9)
    assert np.array_equal(a[0].frames, b[0].frames) and a[1].same_as(b[1])
    with pytest.raises(ValueError):
        augment(st_, lab, ["rotate_90"], seed=0)


def test_represent_pipeline_and_container(tmp_path, rng):
    s = random_stream(rng, 500, width=16, height=16, duration=0.05)
    st_ = represent(s, 0.01, "sep", sobel=True, size=8)
    assert st_.frames.shape == (10, 8, 8) and st_.value_range == "unit_interval"
    assert st_.check_range()
    write_stack(st_, tmp_path / "f.evfs")
    back = read_stack(tmp_path / "f.evfs")
    assert back.mode == "sep" and np.allclose(back.frames, st_.frames.astype(np.float32))
    t = stack_to_tensor(st_)
    assert t.shape == (2, 5, 8, 8)
    assert np.array_equal(t[0], st_.frames[0::2]) and np.array_equal(t[1], st_.frames[1::2])


def test_representation_config(rng):
    s = random_stream(rng, 300, width=64, height=64, duration=0.5)
    rc = RepresentationConfig()
    x = rc.tensor(s)
    assert x.shape == (1, 16, 32, 32) and x.min() >= 0 and x.max() <= 1
    assert RepresentationConfig(mode="sep").channels == 2
    with pytest.raises(ValueError):
        RepresentationConfig(mode="both")
