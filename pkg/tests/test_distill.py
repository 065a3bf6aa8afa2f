from types import SimpleNamespace

import numpy as np
import pytest

from altslim import tensor as T
from altslim.depgraph import EMBEDDING, build_dependency_graph, embedding_groups, make_plan
from altslim.distill import (AdamState, AlignConfig, adam_step, alpha_schedule, bottleneck_align_loss,
                             clear_feature_cache, embedding_align_loss, final_embedding_loss,
                             plateau_scheduler, run_alignment)
from altslim.encoder import EncoderConfig, TapSet, build_encoder
from altslim.errors import InvalidConfig, InvalidShape, NumericOverflow
from altslim.pruner import apply_plan
from altslim.tensor import Tensor

from conftest import TINY


def plateau_replay(history, lr0, patience=4):
    """The lr in force at each epoch when the scheduler runs after every epoch."""
    lrs = [lr0]
    for i in range(1, len(history)):
        lrs.append(plateau_scheduler(history[:i], lrs[-1], patience))
    return lrs


def _const(shape, value):
    return Tensor(np.full(shape, value))


class TestAlpha:
    # expected values written out from the piecewise definitions
    EMB_DYNAMIC = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0]
    BN_DYNAMIC = [0.5] * 10 + [0.0] * 3

    def test_table_dynamic(self):
        for n in range(13):
            assert alpha_schedule("embedding_align", n, 10, "dynamic") == pytest.approx(self.EMB_DYNAMIC[n], abs=1e-15)
            assert alpha_schedule("bottleneck_align", n, 10, "dynamic") == self.BN_DYNAMIC[n]

    def test_table_constant(self):
        for phase in ("bottleneck_align", "embedding_align"):
            assert [alpha_schedule(phase, n, 10, "constant_half") for n in range(13)] == self.BN_DYNAMIC

    def test_examples(self):
        assert alpha_schedule("bottleneck_align", 3, 10) == 0.5
        assert alpha_schedule("embedding_align", 0, 10) == 0.9
        assert alpha_schedule("embedding_align", 9, 10) == 0.0
        for phase in ("bottleneck_align", "embedding_align"):
            for mode in ("dynamic", "constant_half"):
                assert alpha_schedule(phase, 10, 10, mode) == 0.0

    def test_final_align_never_uses_features(self):
        assert all(alpha_schedule("final_align", n, 10) == 0.0 for n in range(12))


class TestLosses:
    def _bn_taps(self, h_val, t_val):
        H = [(_const((2, 3), h_val), _const((2, 5), h_val))]
        return TapSet(None, H, _const((2, 4), t_val))

    def test_bottleneck_arithmetic(self):
        with T.precision(np.float64):
            # per-feature MSE_H = 2 (diff sqrt 2), MSE_t = 4 (diff 2)
            s = self._bn_taps(np.sqrt(2.0), 2.0)
            t = self._bn_taps(0.0, 0.0)
            assert bottleneck_align_loss(s, t, 0.5).item() == pytest.approx(3.0, abs=1e-12)
            assert bottleneck_align_loss(s, t, 0.0).item() == pytest.approx(4.0, abs=1e-12)

    def test_feature_mse_is_uniform_over_blocks(self):
        with T.precision(np.float64):
            s = TapSet(None, [(_const((1, 2), 1.0), _const((1, 8), 0.0)),
                              (_const((1, 2), 0.0), _const((1, 8), 3.0))], _const((1, 1), 0.0))
            t = TapSet(None, [(_const((1, 2), 0.0), _const((1, 8), 0.0))] * 2, _const((1, 1), 0.0))
            # per-feature MSEs 1, 0, 0, 9 averaged with equal weight
            assert bottleneck_align_loss(s, t, 1.0 - 1e-12).item() == pytest.approx(2.5, rel=1e-9)

    def test_embedding_arithmetic(self):
        with T.precision(np.float64):
            v2 = TapSet([_const((2, 3), 1.0)], None, _const((2, 4), 1.0))
            v1 = TapSet([_const((2, 3), 0.0)], None, _const((2, 4), 0.0))
            v0_t = _const((2, 4), 1.0 - np.sqrt(10.0))
            assert embedding_align_loss(v2, v1, v0_t, 0.9).item() == pytest.approx(2.8, abs=1e-12)
            assert embedding_align_loss(v2, v1, v0_t, 0.0).item() == pytest.approx(10.0, abs=1e-12)

    def test_identical_models_zero(self):
        taps = self._bn_taps(0.3, -1.0)
        assert bottleneck_align_loss(taps, taps, 0.5).item() == 0.0
        e = TapSet([_const((2, 3), 0.2)], None, _const((2, 4), 0.7))
        assert embedding_align_loss(e, e, e.t, 0.9).item() == 0.0
        assert final_embedding_loss(e, e.t).item() == 0.0

    def test_shape_mismatch(self):
        s = TapSet([_const((2, 3), 1.0)], None, _const((2, 4), 1.0))
        v1 = TapSet([_const((2, 5), 1.0)], None, _const((2, 4), 1.0))
        with pytest.raises(InvalidShape):
            embedding_align_loss(s, v1, s.t, 0.5)
        with pytest.raises(InvalidShape):
            bottleneck_align_loss(self._bn_taps(1.0, 1.0),
                                  TapSet(None, [(_const((2, 2), 0.0), _const((2, 5), 0.0))], _const((2, 4), 0.0)),
                                  0.5)

    def test_zero_alpha_needs_no_features(self):
        # one-step students cannot provide matching E/H; alpha 0 must not ask for them
        s = TapSet([_const((2, 3), 1.0)], [(_const((2, 6), 0.0), _const((2, 2), 0.0))], _const((2, 4), 1.0))
        v = TapSet(None, None, _const((2, 4), 0.0))
        assert bottleneck_align_loss(s, v, 0.0).item() == pytest.approx(1.0)
        assert embedding_align_loss(s, v, v.t, 0.0).item() == pytest.approx(1.0)
        with pytest.raises(InvalidShape):
            bottleneck_align_loss(s, v, 0.5)


class TestAdam:
    def test_first_step(self):
        w = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(w, {"w": np.array([1.0, 1.0])}, AdamState(), lr=1e-4)
        np.testing.assert_allclose(new["w"] - w["w"], [-1e-4, -1e-4], rtol=1e-6)
        assert state.step == 1

    def test_zero_grad_no_change(self):
        w = {"w": np.array([0.3, 0.4])}
        new, _ = adam_step(w, {"w": np.zeros(2)}, AdamState(), lr=1e-2)
        np.testing.assert_array_equal(new["w"], w["w"])

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=3) for _ in range(5)]
        w = np.array([0.1, 0.2, 0.3])
        ours = {"w": w.copy()}
        state = AdamState()
        m = v = np.zeros(3)
        ref = w.copy()
        for t, g in enumerate(grads, 1):
            ours, state = adam_step(ours, {"w": g}, state, lr=1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(ours["w"], ref, rtol=1e-12)

    def test_deterministic(self):
        g = {"w": np.array([0.5, -0.25])}
        runs = []
        for _ in range(2):
            w, s = {"w": np.array([1.0, 1.0])}, AdamState()
            for _ in range(3):
                w, s = adam_step(w, g, s, 1e-3)
            runs.append(w["w"].tobytes())
        assert runs[0] == runs[1]

    def test_non_finite(self):
        with pytest.raises(NumericOverflow):
            adam_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(), 1e-3)


class TestPlateau:
    def test_halves_after_four_flat_epochs(self):
        # best at epoch 1, epochs 2..5 do not improve -> halve when epoch 5 completes
        hist = [1.0, 0.5, 0.6, 0.7, 0.5, 0.9]
        assert [plateau_scheduler(hist[:i], 1.0) for i in range(1, 7)] == [1.0] * 5 + [0.5]

    def test_strictly_improving(self):
        hist = list(np.linspace(1.0, 0.1, 12))
        assert all(plateau_scheduler(hist[:i], 0.1) == 0.1 for i in range(1, 13))

    def test_two_plateaus(self):
        hist = [1.0] + [2.0] * 8
        assert plateau_replay(hist + [2.0], 1.0)[-1] == 0.25

    def test_counter_resets_after_halving(self):
        hist = [1.0, 2, 2, 2, 2, 2, 2, 2]
        fired = [plateau_scheduler(hist[:i], 1.0) < 1.0 for i in range(1, 9)]
        assert fired == [False, False, False, False, True, False, False, False]

    def test_empty(self):
        with pytest.raises(ValueError):
            plateau_scheduler([], 1.0)


def _data(config, n=12, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0, 1, size=(n, config.in_channels, config.image_size, config.image_size))
    imgs = imgs.astype(np.float32)
    return SimpleNamespace(train_images=imgs[:-4], val_images=imgs[-4:])


@pytest.fixture
def pruned_pair():
    teacher = build_encoder(TINY)
    graph = build_dependency_graph(teacher)
    plan = make_plan(graph, EMBEDDING, [g.id for g in embedding_groups(graph)[:4]])
    return teacher, apply_plan(teacher, plan)


class TestRunAlignment:
    def test_zero_epochs(self, pruned_pair):
        teacher, student = pruned_pair
        out, log = run_alignment(student, {"v0": teacher}, _data(TINY), AlignConfig(epochs=0))
        assert out is student
        assert log.records == []

    def test_train_loss_decreases(self):
        # linear toy: a teacher whose only job is a fixed linear read-out
        cfg = EncoderConfig(image_size=4, patch_size=2, in_channels=1, blocks=1, embed_dim=4, heads=1,
                            mlp_ratio=1.0, out_dim=2, seed=1)
        teacher = build_encoder(cfg)
        student = build_encoder(EncoderConfig(**{**cfg.to_dict(), "seed": 2}))
        conf = AlignConfig(phase="final_align", epochs=5, lr0=1e-2, batch_size=4)
        _, log = run_alignment(student, {"v0": teacher}, _data(cfg, n=24), conf)
        losses = log.column("train_loss")
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_log_consistent_with_scheduler(self, pruned_pair):
        teacher, student = pruned_pair
        conf = AlignConfig(phase="bottleneck_align", epochs=7, lr0=0.05, patience=1, N=3)
        _, log = run_alignment(student, {"v0": teacher}, _data(TINY), conf)
        assert log.column("lr") == plateau_replay(log.column("val_fidelity"), 0.05, patience=1)
        assert log.column("alpha") == [alpha_schedule("bottleneck_align", n, 3) for n in range(7)]

    def test_teachers_untouched_and_deterministic(self, pruned_pair):
        teacher, student = pruned_pair
        before = teacher.weight_bytes()
        conf = AlignConfig(phase="bottleneck_align", epochs=2, lr0=1e-3)
        a, _ = run_alignment(student, {"v0": teacher}, _data(TINY), conf)
        clear_feature_cache()
        b, _ = run_alignment(student, {"v0": teacher}, _data(TINY), conf)
        assert teacher.weight_bytes() == before
        assert a.digest() == b.digest()
        assert a.digest() != student.digest()

    def test_embedding_align_with_two_teachers(self, pruned_pair):
        teacher, v1 = pruned_pair
        graph = build_dependency_graph(v1)
        v2 = apply_plan(v1, make_plan(graph, "bottleneck", ["mlp:0:0", "attn:1:1:3"]))
        conf = AlignConfig(phase="embedding_align", epochs=2, lr0=1e-3, N=2)
        out, log = run_alignment(v2, {"v0": teacher, "v1": v1}, _data(TINY), conf)
        assert log.column("alpha") == [0.5, 0.0]
        assert out.dims() == v2.dims()

    def test_phase_order_enforced(self, pruned_pair):
        teacher, v1 = pruned_pair
        graph = build_dependency_graph(teacher)
        bn_pruned = apply_plan(teacher, make_plan(graph, "bottleneck", ["mlp:0:0"]))
        with pytest.raises(InvalidShape):
            run_alignment(bn_pruned, {"v0": teacher}, _data(TINY), AlignConfig(phase="bottleneck_align"))
        with pytest.raises(InvalidShape):
            run_alignment(v1, {"v0": teacher, "v1": teacher}, _data(TINY), AlignConfig(phase="embedding_align"))
        with pytest.raises(InvalidConfig):
            run_alignment(v1, {"v0": teacher}, _data(TINY), AlignConfig(phase="embedding_align"))

    def test_bad_config(self):
        with pytest.raises(InvalidConfig):
            AlignConfig(phase="warmup")
        with pytest.raises(InvalidConfig):
            AlignConfig(alpha_mode="linear")
