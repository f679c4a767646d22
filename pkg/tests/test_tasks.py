import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbmrnn.cell import StackConfig
from cbmrnn.model import CLASSIFY, REGRESS, CbmModel
from cbmrnn.probe import static_mask, unit_activity
from cbmrnn.tasks import (
    CAT_GLYPH,
    DOG_GLYPH,
    LEFT,
    RIGHT,
    SequenceSet,
    catdog_labels,
    evaluate_classification,
    evaluate_distance,
    gen_catdog,
    gen_moving_shapes,
    load_dataset,
    save_dataset,
    shape_raster,
)

from oracles import brute_catdog_labels, circular_centroid_x, wrapped_shift


# -- moving shapes ---------------------------------------------------------------

def test_balanced_classes():
    samples = gen_moving_shapes(400, rng=np.random.default_rng(0))
    counts = np.bincount([s.label for s in samples], minlength=4)
    assert counts.tolist() == [100, 100, 100, 100]


@pytest.mark.parametrize("speed", [1, 2, 3])
def test_centroid_shift_matches_direction(speed):
    for s in gen_moving_shapes(8, seq_len=6, image_size=16, speed=speed, rng=np.random.default_rng(speed)):
        want = -speed if s.direction_class == LEFT else speed
        for a, b in zip(s.frames[:-1, 0], s.frames[1:, 0]):
            shift = wrapped_shift(circular_centroid_x(a), circular_centroid_x(b), 16)
            assert shift == pytest.approx(want, abs=1e-9)


def test_class_recoverable_from_two_frames():
    for s in gen_moving_shapes(40, rng=np.random.default_rng(1)):
        shift = wrapped_shift(circular_centroid_x(s.frames[0, 0]), circular_centroid_x(s.frames[1, 0]), 16)
        direction = RIGHT if shift > 0 else LEFT
        area = s.frames[0, 0].sum()
        shape = 0 if area == shape_raster(0).sum() else 1
        assert 2 * shape + direction == s.label


def test_raster_is_translated_not_changed():
    s = gen_moving_shapes(1, rng=np.random.default_rng(2))[0]
    for t in range(1, s.frames.shape[0]):
        assert any(np.array_equal(np.roll(s.frames[0, 0], k, axis=1), s.frames[t, 0]) for k in range(16))


def test_shapes_are_distinct_and_binary():
    tri, disc = shape_raster(0), shape_raster(1)
    assert not np.array_equal(tri, disc) and tri.sum() != disc.sum()
    frames = gen_moving_shapes(4, rng=np.random.default_rng(3))[0].frames
    assert set(np.unique(frames)) <= {0.0, 1.0}


def test_moving_shapes_rejections():
    with pytest.raises(ValueError, match="speed"):
        gen_moving_shapes(4, speed=0)
    with pytest.raises(ValueError, match="fit"):
        gen_moving_shapes(4, image_size=4)
    with pytest.raises(ValueError):
        shape_raster(7)


def test_noise_is_additive():
    clean = gen_moving_shapes(4, rng=np.random.default_rng(5))
    noisy = gen_moving_shapes(4, rng=np.random.default_rng(5), noise=0.1)
    assert not np.array_equal(clean[0].frames, noisy[0].frames)
    assert np.abs(clean[0].frames - noisy[0].frames).max() < 1.0


# -- cat & dog --------------------------------------------------------------------

def test_catdog_label_example():
    assert catdog_labels(3, 8).tolist() == [-1, -1, -1, 0, 1, 2, 3, 4]
    assert -1 not in catdog_labels(0, 5).tolist()


@given(st.integers(2, 80).flatmap(lambda n: st.tuples(st.integers(0, n - 1), st.just(n))))
def test_catdog_labels_match_brute_force(args):
    p, n = args
    assert catdog_labels(p, n).tolist() == brute_catdog_labels(p, n)


def test_catdog_sequences():
    seqs = gen_catdog(200, 60, 50, np.random.default_rng(0), noise=0.0)
    cat = np.zeros((5, 56))
    cat[:5, :5] = CAT_GLYPH
    for s in seqs:
        assert 9 <= s.cat_position <= 59
        is_cat = [np.array_equal(f[0], cat) for f in s.frames]
        assert sum(is_cat) == 1 and is_cat[s.cat_position]
        assert s.labels.tolist() == brute_catdog_labels(s.cat_position, 60)
    gaps = {60 - 1 - s.cat_position for s in seqs}
    assert max(gaps) == 50 and min(gaps) == 0
    assert not np.array_equal(CAT_GLYPH, DOG_GLYPH)


def test_catdog_rejections():
    with pytest.raises(ValueError):
        gen_catdog(1, 1, 0)
    with pytest.raises(ValueError):
        gen_catdog(1, 10, 10)


def test_generators_are_deterministic():
    a = gen_catdog(5, 20, 10, np.random.default_rng(9))
    b = gen_catdog(5, 20, 10, np.random.default_rng(9))
    assert all(np.array_equal(x.frames, y.frames) and x.cat_position == y.cat_position for x, y in zip(a, b))
    c = gen_moving_shapes(5, rng=np.random.default_rng(9))
    d = gen_moving_shapes(5, rng=np.random.default_rng(9))
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(c, d))


# -- containers -------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = SequenceSet.from_catdog(gen_catdog(3, 12, 5, np.random.default_rng(1)))
    save_dataset(tmp_path / "d.bin", ds)
    back = load_dataset(tmp_path / "d.bin")
    assert back.kind == ds.kind
    for name in ("frames", "targets", "meta"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    shapes = SequenceSet.from_shapes(gen_moving_shapes(4, rng=np.random.default_rng(2)))
    save_dataset(tmp_path / "s.bin", shapes)
    assert np.array_equal(load_dataset(tmp_path / "s.bin").frames, shapes.frames)


def test_dataset_file_corruption_is_detected(tmp_path):
    ds = SequenceSet.from_catdog(gen_catdog(2, 6, 3, np.random.default_rng(1)))
    path = tmp_path / "d.bin"
    save_dataset(path, ds)
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"X" + raw[1:])
    with pytest.raises(ValueError, match="not a sequence"):
        load_dataset(tmp_path / "magic.bin")


# -- metrics ----------------------------------------------------------------------

class _Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, frames):
        return self.fn(frames)


def test_constant_class_is_chance():
    ds = SequenceSet.from_shapes(gen_moving_shapes(400, rng=np.random.default_rng(0)))

    def always_zero(frames):
        out = np.zeros(frames.shape[:2] + (4,))
        out[..., 0] = 1.0
        return out
    assert evaluate_classification(_Stub(always_zero), ds).accuracy == 0.25


def test_perfect_distance_oracle():
    ds = SequenceSet.from_catdog(gen_catdog(20, 30, 20, np.random.default_rng(0)))
    m = evaluate_distance(_Stub(lambda f: ds.targets[..., None].copy()), ds)
    assert m.exact_match == 1.0 and m.mae == 0.0 and m.exact_match_after_cat == 1.0


def test_distance_rounding():
    ds = SequenceSet.from_catdog(gen_catdog(4, 10, 5, np.random.default_rng(0)))
    m = evaluate_distance(_Stub(lambda f: ds.targets[..., None] + 0.49), ds)
    assert m.exact_match == 1.0 and m.mae == pytest.approx(0.49)
    m = evaluate_distance(_Stub(lambda f: ds.targets[..., None] + 0.51), ds)
    assert m.exact_match == 0.0
    assert set(m.as_dict()) == {"exact_match", "mae", "exact_match_after_cat"}


def counting_model() -> CbmModel:
    """Hand-set addition stack that outputs the distance from the cat frame.

    Layer 1 R is a matched filter that fires 1 at one pixel on the cat
    frame only, layer 2 memory latches it into a flag, layer 3 memory
    accumulates the flag into a counter and the head reads counter - 1.
    """
    cfg = StackConfig(num_layers=3, channels=3, merge_kind="addition")
    model = CbmModel(cfg, (5, 56), REGRESS, target_scale=10.0, pool="mean")
    for layer in model.layers:
        for t in layer.tensors():
            t.data[...] = 0.0
        layer.psi_b.data[:] = -1.0
        layer.phi_b.data[:] = -1.0
    first = model.layers[0]
    window = np.pad(CAT_GLYPH, 1)[2:5, 2:5]
    first.psi_w.data[0, 0] = 2 * window - 1  # scores 7 on the cat, at most 5 elsewhere
    first.psi_b.data[0] = -6.0
    for layer in model.layers[1:]:
        layer.phi_w.data[0, 0, 1, 1] = 1.0  # own memory
        layer.phi_w.data[0, 3, 1, 1] = 1.0  # input from below
        layer.phi_b.data[0] = 0.0
    model.head_w.data[0, 0] = 5 * 56 / 10.0
    model.head_b.data[0] = -0.1
    return model


def test_stack_can_represent_distance_counter():
    ds = SequenceSet.from_catdog(gen_catdog(50, 60, 50, np.random.default_rng(0), noise=0.0))
    m = evaluate_distance(counting_model(), ds)
    assert m.exact_match == 1.0 and m.exact_match_after_cat == 1.0


def test_model_prediction_shapes():
    cfg = StackConfig(num_layers=2, channels=2)
    ds = SequenceSet.from_shapes(gen_moving_shapes(4, image_size=8, rng=np.random.default_rng(0)))
    clf = CbmModel(cfg, (8, 8), CLASSIFY, rng=np.random.default_rng(0))
    assert clf.predict(ds.frames).shape == (4, 8, 4)
    reg = CbmModel(cfg, (8, 8), REGRESS, rng=np.random.default_rng(0), target_scale=10.0)
    assert reg.predict(ds.frames).shape == (4, 8, 1)


# -- probes -----------------------------------------------------------------------

def test_static_mask_example():
    frames = np.zeros((1, 2, 1, 7, 7))
    frames[0, 0, 0, 3, 1] = 1.0
    frames[0, 1, 0, 3, 2] = 1.0
    mask = static_mask(frames, 1)
    # active columns 1..2 in row 3, dilated by one: rows 2..4, columns 0..3
    expected = np.ones((7, 7), bool)
    expected[2:5, 0:4] = False
    assert np.array_equal(mask[0], expected)
    assert np.array_equal(static_mask(frames, 0)[0], frames[0, :, 0].sum(axis=0) == 0)


def test_static_mask_matches_brute_force():
    rng = np.random.default_rng(4)
    frames = (rng.random((2, 3, 1, 9, 9)) < 0.05).astype(float)
    mask = static_mask(frames, 2)
    for n in range(2):
        on = np.argwhere(frames[n, :, 0].any(axis=0))
        for y in range(9):
            for x in range(9):
                far = all(max(abs(y - a), abs(x - b)) > 2 for a, b in on)
                assert mask[n, y, x] == far


def test_first_layer_representation_is_constant_on_static_pixels():
    cfg = StackConfig(num_layers=3, channels=3)
    model = CbmModel(cfg, (16, 16), CLASSIFY, rng=np.random.default_rng(1), pool="mean")
    ds = SequenceSet.from_shapes(gen_moving_shapes(8, rng=np.random.default_rng(1)))
    act = unit_activity(model, ds.frames, static_mask(ds.frames, cfg.num_layers))
    assert act.r_var[0] == 0.0
    assert act.pixels > 0 and len(act.c_var) == 3
