import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbmrnn import autodiff as ad
from cbmrnn.autodiff import Tensor
from cbmrnn.cell import CbmState, StackConfig, TdSchedule
from cbmrnn.model import CLASSIFY, REGRESS, CbmModel
from cbmrnn.optim import Adam
from cbmrnn.scheme import (
    Clip,
    CoherenceConfig,
    OverlapRegistry,
    StateStore,
    TrainingDiverged,
    adjacent_overlap_fractions,
    build_overlap_registry,
    coherence_loss,
    init_clip_state,
    plan_waves,
    sample_clips,
    total_objective,
    train_epoch,
    write_clip_states,
)
from cbmrnn.tasks import SequenceSet


def _streams(seed=0):
    return {"sampler": np.random.default_rng(seed), "gates": np.random.default_rng(seed + 1)}


# -- clips and sampler --------------------------------------------------------

def test_clip_bounds():
    c = Clip(0, 3, 4)
    assert c.end == 7 and c.covers(3) and c.covers(6) and not c.covers(7)
    with pytest.raises(ValueError):
        Clip(0, -1, 3)
    with pytest.raises(ValueError):
        Clip(0, 0, 0)


def test_coherence_config_validation():
    with pytest.raises(ValueError):
        CoherenceConfig(lam=-1)
    with pytest.raises(ValueError):
        CoherenceConfig(overlap_rate=1.0)
    with pytest.raises(ValueError):
        CoherenceConfig(clip_len_min=1)
    with pytest.raises(ValueError):
        CoherenceConfig(clip_len_min=9, clip_len_max=8)


@settings(max_examples=200, deadline=None)
@given(
    length=st.integers(1, 200),
    lo=st.integers(2, 12),
    extra=st.integers(0, 6),
    rate=st.floats(0.0, 0.9),
    seed=st.integers(0, 2**32 - 1),
)
def test_sampler_covers_and_stays_in_bounds(length, lo, extra, rate, seed):
    cfg = CoherenceConfig(overlap_rate=rate, clip_len_min=lo, clip_len_max=lo + extra)
    clips = sample_clips(length, cfg, np.random.default_rng(seed))
    covered = np.zeros(length, bool)
    for c in clips:
        assert 0 <= c.start and c.end <= length
        assert c.length <= max(cfg.clip_len_max, length if length <= lo else 0)
        assert c.length >= 2 or length == 1
        covered[c.start:c.end] = True
    assert covered.all()


def test_short_sequence_is_one_clip():
    clips = sample_clips(8, CoherenceConfig(clip_len_min=8, clip_len_max=8), np.random.default_rng(0))
    assert clips == [Clip(0, 0, 8)]
    assert len(build_overlap_registry(clips)) == 0


def test_zero_rate_partitions():
    cfg = CoherenceConfig(overlap_rate=0.0)
    for seed in range(50):
        clips = sample_clips(100, cfg, np.random.default_rng(seed))
        assert clips[0].start == 0 and clips[-1].end == 100
        for a, b in zip(clips, clips[1:]):
            assert a.end == b.start


def test_sampler_deterministic():
    cfg = CoherenceConfig()
    assert sample_clips(60, cfg, np.random.default_rng(4)) == sample_clips(60, cfg, np.random.default_rng(4))


def test_overlap_fraction_near_target():
    cfg = CoherenceConfig()
    fr = [f for s in range(200) for f in adjacent_overlap_fractions(sample_clips(100, cfg, np.random.default_rng(s)))]
    assert abs(np.mean(fr) - 0.25) < 0.05


# -- registry -------------------------------------------------------------------

def test_registry_two_clips():
    reg = build_overlap_registry([Clip(0, 0, 10), Clip(0, 8, 8)])
    assert reg.pairs == [(0, 1, 8), (0, 1, 9)]


def test_registry_three_mutual_clips():
    reg = build_overlap_registry([Clip(0, 0, 5), Clip(0, 2, 5), Clip(0, 4, 4)])
    assert {(a, b) for a, b, t in reg.pairs if t == 4} == {(0, 1), (0, 2), (1, 2)}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(1, 12)), min_size=1, max_size=6))
def test_registry_equals_brute_force(spans):
    clips = [Clip(0, s, n) for s, n in spans]
    brute = set()
    for a in range(len(clips)):
        for b in range(a + 1, len(clips)):
            for t in range(60):
                if clips[a].covers(t) and clips[b].covers(t):
                    brute.add((a, b, t))
    pairs = build_overlap_registry(clips).pairs
    assert len(pairs) == len(set(pairs))
    assert set(pairs) == brute


def test_registry_restriction():
    reg = build_overlap_registry([Clip(0, 0, 5), Clip(0, 2, 5), Clip(0, 4, 4)])
    assert {(a, b) for a, b, _ in reg.restricted_to({0, 2}).pairs} == {(0, 2)}


# -- state store --------------------------------------------------------------

def test_store_absence_and_copies():
    s = StateStore()
    assert s.get(0, 0, 3) is None and not s.has(0, 0, 3)
    v = np.ones((2, 2))
    s.put(0, 0, 3, v)
    v[:] = 5
    got = s.get(0, 0, 3)
    np.testing.assert_array_equal(got, np.ones((2, 2)))
    got[:] = 7
    np.testing.assert_array_equal(s.get(0, 0, 3), np.ones((2, 2)))


def test_store_last_writer_wins():
    s = StateStore()
    s.put("a", 1, 2, np.zeros(3))
    s.put("a", 1, 2, np.full(3, 2.0))
    assert len(s) == 1
    np.testing.assert_array_equal(s.get("a", 1, 2), np.full(3, 2.0))


def test_init_state_zero_without_predecessor():
    s = StateStore()
    st_ = init_clip_state(Clip(0, 0, 4), s, 2, (1, 3, 3))
    assert all(not m.data.any() for m in st_.memory)
    st_ = init_clip_state(Clip(0, 5, 4), s, 2, (1, 3, 3))
    assert all(not m.data.any() for m in st_.memory)


def test_init_state_reads_preceding_timestamp_detached():
    s = StateStore()
    s.put(7, 0, 4, np.full((1, 2, 2), 3.0))
    s.put(7, 1, 4, np.full((1, 2, 2), 4.0))
    st_ = init_clip_state(Clip(7, 5, 3), s, 2, (1, 2, 2))
    assert st_.memory[0].data[0, 0, 0] == 3.0 and st_.memory[1].data[0, 0, 0] == 4.0
    assert not st_.memory[0].requires_grad


def test_batched_clip_round_trip():
    s = StateStore()
    clip = Clip((3, 5), 0, 2)
    states = [CbmState([Tensor(np.stack([np.full((1, 2, 2), 10 * k + j) for j in range(2)]))])
              for k in range(2)]
    write_clip_states(clip, states, s)
    np.testing.assert_array_equal(s.get(5, 0, 1), np.full((1, 2, 2), 11.0))
    nxt = init_clip_state(Clip((3, 5), 2, 2), s, 1, (1, 2, 2))
    np.testing.assert_array_equal(nxt.memory[0].data[:, 0, 0, 0], [10.0, 11.0])


def test_plan_waves_sequential_then_parallel():
    clips = [Clip(0, 0, 10), Clip(0, 8, 10), Clip(0, 16, 10)]
    s = StateStore()
    assert plan_waves(clips, s, 1) == [[0], [1], [2]]
    for t in range(26):
        s.put(0, 0, t, np.zeros(1))
    assert plan_waves(clips, s, 1) == [[0, 1, 2]]


# -- losses ---------------------------------------------------------------------

def _outputs(values):
    return [[Tensor(np.asarray(v, float), requires_grad=True) for v in clip] for clip in values]


def test_coherence_example():
    clips = [Clip(0, 0, 2), Clip(0, 1, 2)]
    reg = build_overlap_registry(clips)
    out = _outputs([[[0.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]])
    assert coherence_loss(reg, out).item() == pytest.approx(1.0)
    out = _outputs([[[0.0], [1.0]], [[0.0], [0.0]]])
    assert coherence_loss(reg, out).item() == pytest.approx(1.0)
    out = _outputs([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]])
    assert coherence_loss(reg, out).item() == pytest.approx(0.5)


def test_coherence_zero_for_identical_outputs_and_empty_registry():
    clips = [Clip(0, 0, 3), Clip(0, 1, 3)]
    reg = build_overlap_registry(clips)
    same = np.random.default_rng(0).standard_normal((5, 2))
    out = _outputs([[same[t] for t in range(0, 3)], [same[t] for t in range(1, 4)]])
    assert coherence_loss(reg, out).item() == 0.0
    assert coherence_loss(OverlapRegistry(clips), out).item() == 0.0


def test_total_objective_and_lambda_scaling():
    task = [Tensor(1.0), Tensor(2.0)]
    assert total_objective(task, Tensor(0.5), 0.8).item() == pytest.approx(3.4)
    assert total_objective(task, Tensor(0.5), 0.0).item() == pytest.approx(3.0)
    a = total_objective(task, Tensor(0.5), 0.8).item() - 3.0
    b = total_objective(task, Tensor(0.5), 1.6).item() - 3.0
    assert b == pytest.approx(2 * a)


def test_coherence_gradient_pulls_pairs_together():
    reg = build_overlap_registry([Clip(0, 0, 1), Clip(0, 0, 1)])
    out = _outputs([[[2.0]], [[0.0]]])
    ad.backward(coherence_loss(reg, out))
    assert out[0][0].grad[0] > 0 > out[1][0].grad[0]


# -- training loop --------------------------------------------------------------

def _toy_model(head=REGRESS, seed=0):
    cfg = StackConfig(num_layers=2, channels=2)
    return CbmModel(cfg, (4, 4), head, num_classes=2, rng=np.random.default_rng(seed), pool="mean")


def _toy_data(n=4, T=24, seed=0, kind="catdog"):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((n, T, 1, 4, 4))
    targets = np.tile(np.arange(T, dtype=float) / T, (n, 1))
    return SequenceSet(kind, frames, targets, np.zeros(n))


def test_first_epoch_has_no_coherence_then_later_epochs_do():
    model = _toy_model()
    data = _toy_data()
    opt = Adam(model.parameters(), lr=1e-3)
    store = StateStore()
    rngs = _streams()
    e0 = train_epoch(model, data, CoherenceConfig(), opt, TdSchedule(), 0, rngs, store, batch_size=2)
    assert e0.coherence_loss == 0.0 and e0.waves > 2
    e1 = train_epoch(model, data, CoherenceConfig(), opt, TdSchedule(), 1, rngs, store, batch_size=2)
    assert e1.coherence_loss > 0.0 and e1.waves == 2


def test_tape_depth_bounded_by_longest_clip():
    model = _toy_model()
    data = _toy_data(n=2, T=100)
    cfg = CoherenceConfig(clip_len_max=10)
    e = train_epoch(model, data, cfg, Adam(model.parameters(), lr=1e-3), TdSchedule(), 0,
                    _streams(), StateStore(), batch_size=2)
    clips = sample_clips(100, cfg, np.random.default_rng(0), sequence_id=(0, 1))
    assert e.max_tape_depth == max(c.length for c in clips) <= 10


def test_update_false_changes_nothing():
    model = _toy_model()
    before = model.state_dict()
    store = StateStore()
    train_epoch(model, _toy_data(), CoherenceConfig(), Adam(model.parameters(), lr=1e-2),
                TdSchedule(), 0, _streams(), store, batch_size=2, update=False)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len(store) == 0


def test_training_reduces_task_loss():
    model = _toy_model()
    data = _toy_data()
    opt = Adam(model.parameters(), lr=1e-2)
    store, rngs = StateStore(), _streams()
    losses = [train_epoch(model, data, CoherenceConfig(), opt, TdSchedule.constant(0.0), e, rngs,
                          store, batch_size=4).task_loss for e in range(15)]
    assert losses[-1] < 0.5 * losses[0]


def test_detachment_across_store():
    # gradients of a clip started from a stored state never reach the
    # parameters that produced the stored state
    model = _toy_model()
    rng = np.random.default_rng(1)
    src = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    store = StateStore()
    store.put(0, 0, 3, src.data)
    store.put(0, 1, 3, src.data)
    init = init_clip_state(Clip(0, 4, 3), store, 2, model.state_shape)
    run = model.unroll(rng.standard_normal((3, 1, 4, 4)), init, 0.0, rng)
    ad.backward(ad.tensor_sum(run.outputs[-1]))
    assert src.grad is None
    assert all(m.grad is None for m in init.memory)


def test_non_finite_loss_is_diagnosed():
    model = _toy_model()
    data = _toy_data()
    data.targets[1, 5] = np.nan
    with pytest.raises(TrainingDiverged, match="sequences"):
        train_epoch(model, data, CoherenceConfig(), Adam(model.parameters()), TdSchedule(), 0,
                    _streams(), StateStore(), batch_size=4)


def test_classification_loss_is_finite_and_batches_shapes():
    model = _toy_model(CLASSIFY)
    data = _toy_data(kind="moving-shapes")
    data.targets = np.zeros_like(data.targets)
    e = train_epoch(model, data, CoherenceConfig(), Adam(model.parameters(), lr=1e-3),
                    TdSchedule(), 0, _streams(), StateStore(), batch_size=3)
    assert math.isfinite(e.task_loss) and e.clips > 0
