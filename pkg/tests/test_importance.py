import json

import numpy as np
import pytest

from altslim import tensor as T
from altslim.depgraph import EMBEDDING, build_dependency_graph, embedding_groups, validate_plan
from altslim.encoder import EncoderConfig, build_encoder, embed
from altslim.errors import InvalidInput, InvalidMode, InvalidRatio, InvalidTargets
from altslim.importance import (Criterion, Targets, aggregate_group_scores, layer_partition,
                                normalize_scores, parameter_importance, perturb_targets,
                                report_from_scores, select_pruning_plan, taylor_scores)

from conftest import TINY, random_batch
from oracles import SMALL, first_order_ratios, taylor_loop


def _labels(config, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, config.num_patches, config.out_dim))


class TestPerturb:
    def test_sigma_zero_is_identity(self):
        t = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        np.testing.assert_array_equal(perturb_targets(t, 0.0, seed=5).data, t)

    def test_seeded(self):
        t = np.zeros((4, 5), dtype=np.float32)
        a = perturb_targets(t, 0.01, seed=3).data
        assert np.array_equal(a, perturb_targets(t, 0.01, seed=3).data)
        assert not np.array_equal(a, perturb_targets(t, 0.01, seed=4).data)

    def test_monte_carlo_mean(self):
        t = np.array([0.5, -1.0, 2.0])
        sigma, n = 0.01, 10000
        with T.precision(np.float64):
            draws = np.stack([perturb_targets(t, sigma, seed=s).data for s in range(n)])
        assert np.all(np.abs(draws.mean(axis=0) - t) <= 5 * sigma / np.sqrt(n))
        assert draws.std(axis=0) == pytest.approx([sigma] * 3, rel=0.05)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            perturb_targets(np.zeros(2), -0.1, 0)


class TestParameterImportance:
    def test_single_weight_example(self):
        scores = taylor_scores({"w": np.array([2.0, 0.0])}, {"w": np.array([0.5, 3.0])})
        np.testing.assert_array_equal(scores["w"], [1.0, 0.0])

    def test_taylor_matches_loop(self):
        with T.precision(np.float64):
            enc = build_encoder(TINY)
            x = random_batch(TINY, n=6, dtype=np.float64)
            y = _labels(TINY, 6)
            report = parameter_importance(enc, x, Targets.labels(y), Criterion("taylor"), chunk=4)
            loop = taylor_loop(enc, x, y)
        for name in loop:
            np.testing.assert_allclose(report.param_scores[name], loop[name], rtol=0, atol=1e-12)

    def test_hessian_is_taylor_squared(self, tiny_encoder):
        x = random_batch(TINY, n=4)
        y = Targets.labels(_labels(TINY, 4))
        tay = parameter_importance(tiny_encoder, x, y, Criterion("taylor")).param_scores
        hes = parameter_importance(tiny_encoder, x, y, Criterion("hessian_surrogate")).param_scores
        for name in tay:
            np.testing.assert_array_equal(hes[name], np.square(tay[name]))

    def test_disturbed_sigma_zero_on_own_output(self, tiny_encoder):
        x = random_batch(TINY, n=4)
        own = Targets.embeddings(embed(tiny_encoder, x))
        report = parameter_importance(tiny_encoder, x, own, Criterion("disturbed_taylor", sigma=0.0))
        assert all(not s.any() for s in report.param_scores.values())
        assert set(report.group_scores.values()) == {0.0}

    def test_disturbed_nonzero_with_noise_and_reproducible(self, tiny_encoder):
        x = random_batch(TINY, n=4)
        own = Targets.embeddings(embed(tiny_encoder, x))
        crit = Criterion("disturbed_taylor", sigma=0.01, seed=2)
        a = parameter_importance(tiny_encoder, x, own, crit)
        b = parameter_importance(tiny_encoder, x, own, crit)
        assert sum(a.group_scores.values()) > 0
        for name in a.param_scores:
            assert a.param_scores[name].tobytes() == b.param_scores[name].tobytes()

    def test_magnitude_and_random(self, tiny_encoder):
        x = random_batch(TINY, n=2)
        mag = parameter_importance(tiny_encoder, x, None, Criterion("magnitude")).param_scores
        w = tiny_encoder.params["blocks.0.fc1.weight"].data.astype(np.float64)
        np.testing.assert_array_equal(mag["blocks.0.fc1.weight"], w * w)
        r1 = parameter_importance(tiny_encoder, x, None, Criterion("random", seed=1)).param_scores
        r2 = parameter_importance(tiny_encoder, x, None, Criterion("random", seed=1)).param_scores
        assert all(np.array_equal(r1[k], r2[k]) for k in r1)
        assert all(((v >= 0) & (v < 1)).all() for v in r1.values())

    def test_scores_non_negative(self, tiny_encoder):
        x = random_batch(TINY, n=2)
        rep = parameter_importance(tiny_encoder, x, Targets.labels(_labels(TINY, 2)), Criterion("taylor"))
        assert min(rep.group_scores.values()) >= 0

    def test_group_score_is_member_sum(self, tiny_encoder):
        x = random_batch(TINY, n=2)
        rep = parameter_importance(tiny_encoder, x, Targets.labels(_labels(TINY, 2)), Criterion("taylor"))
        s = rep.param_scores
        expect = (s["blocks.1.fc1.weight"][:, 3].sum() + s["blocks.1.fc1.bias"][3]
                  + s["blocks.1.fc2.weight"][3].sum())
        assert rep.group_scores["mlp:1:3"] == pytest.approx(expect, rel=1e-12)
        # embedding channel 2 touches every block
        total = sum(s[k][..., 2].sum() if k in ("patch_embed.weight", "pos_embed") else 0 for k in s)
        assert rep.group_scores["emb:2"] > total

    def test_wrong_target_role(self, tiny_encoder):
        x = random_batch(TINY, n=2)
        y = _labels(TINY, 2)
        with pytest.raises(InvalidTargets):
            parameter_importance(tiny_encoder, x, Targets.labels(y), Criterion("disturbed_taylor"))
        with pytest.raises(InvalidTargets):
            parameter_importance(tiny_encoder, x, Targets.embeddings(y), Criterion("taylor"))
        with pytest.raises(InvalidTargets):
            parameter_importance(tiny_encoder, x, None, Criterion("hessian_surrogate"))

    def test_empty_batch(self, tiny_encoder):
        with pytest.raises(InvalidInput):
            parameter_importance(tiny_encoder, np.zeros((0, 3, 8, 8)), None, Criterion("magnitude"))

    def test_report_json(self, tiny_encoder):
        rep = parameter_importance(tiny_encoder, random_batch(TINY), None, Criterion("magnitude"))
        doc = json.loads(rep.to_json("max"))
        assert len(doc["groups"]) == len(rep.group_scores)
        assert set(doc["groups"][0]) == {"id", "raw", "normalized"}


class TestFirstOrder:
    def test_first_order_model_is_small(self):
        assert sum(p.size for p in build_encoder(SMALL).params.values()) <= 1000

    def test_error_shrinks_with_eps(self):
        ratios = first_order_ratios(SMALL, seed=0)
        assert np.mean([r < 0.5 for r in ratios.values()]) >= 0.9


class TestNormalize:
    @pytest.mark.parametrize("scheme,scores,expect", [
        ("sum", [1, 2, 5], [0.125, 0.25, 0.625]),
        ("mean", [3, 3, 3], [1.0, 1.0, 1.0]),
        ("max", [1, 2, 4], [0.25, 0.5, 1.0]),
        ("standardization", [1, 2, 3], [-1.0, -0.5, 0.0]),
        ("gaussian", [1, 2, 3], [-1.224744871391589, 0.0, 1.224744871391589]),
    ])
    def test_hand_cases(self, scheme, scores, expect):
        np.testing.assert_allclose(normalize_scores([scores], scheme)[0], expect, atol=1e-7, rtol=0)

    def test_hand_cases_with_guard(self):
        std = normalize_scores([[1, 2, 3]], "standardization")[0]
        np.testing.assert_allclose(std, np.array([-2.0, -1.0, 0.0]) / (2 + 1e-8), atol=1e-12)
        gauss = normalize_scores([[1, 2, 3]], "gaussian")[0]
        np.testing.assert_allclose(gauss, np.array([-1, 0, 1]) / (np.sqrt(2 / 3) + 1e-8), atol=1e-12)

    def test_layers_independent(self):
        a, b = normalize_scores([[1, 2], [10, 30, 60]], "max")
        np.testing.assert_allclose(a, [0.5, 1.0])
        np.testing.assert_allclose(b, [1 / 6, 0.5, 1.0])

    @pytest.mark.parametrize("scheme", ["sum", "mean", "max", "standardization", "gaussian"])
    def test_argsort_invariance(self, scheme):
        rng = np.random.default_rng(4)
        for _ in range(20):
            s = rng.exponential(size=int(rng.integers(2, 40)))
            out = normalize_scores([s], scheme)[0]
            np.testing.assert_array_equal(np.argsort(out, kind="stable"), np.argsort(s, kind="stable"))

    def test_aliases_and_unknown(self):
        np.testing.assert_array_equal(normalize_scores([[1, 2]], "std")[0],
                                      normalize_scores([[1, 2]], "standardization")[0])
        with pytest.raises(ValueError):
            normalize_scores([[1.0]], "median")
        with pytest.raises(ValueError):
            normalize_scores([[]], "sum")

    def test_zero_layer_does_not_divide_by_zero(self):
        for scheme in ("sum", "mean", "max"):
            np.testing.assert_array_equal(normalize_scores([[0, 0]], scheme)[0], [0, 0])


def _emb_graph(d=4):
    return build_dependency_graph(build_encoder(EncoderConfig(embed_dim=d, heads=1, blocks=1, out_dim=2)))


class TestSelectPlan:
    def test_local_example(self):
        graph = _emb_graph(4)
        scores = dict(zip([g.id for g in embedding_groups(graph)], [0.1, 0.9, 0.5, 0.3]))
        scores.update({g.id: 1.0 for g in graph.groups if g.id not in scores})
        plan = select_pruning_plan(report_from_scores(graph, scores), EMBEDDING, 0.5)
        assert plan.remove == {"emb:0", "emb:3"}
        assert plan.dims.embed_dim == 2

    def test_ratio_zero(self):
        graph = _emb_graph()
        rep = report_from_scores(graph, {g.id: 1.0 for g in graph.groups})
        assert select_pruning_plan(rep, EMBEDDING, 0.0).remove == frozenset()
        assert select_pruning_plan(rep, "bottleneck", 0.0, "global", "max").remove == frozenset()

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, float("nan")])
    def test_bad_ratio(self, ratio):
        graph = _emb_graph()
        rep = report_from_scores(graph, {g.id: 1.0 for g in graph.groups})
        with pytest.raises(InvalidRatio):
            select_pruning_plan(rep, EMBEDDING, ratio)

    def test_mode_errors(self):
        graph = _emb_graph()
        rep = report_from_scores(graph, {g.id: 1.0 for g in graph.groups})
        with pytest.raises(InvalidMode):
            select_pruning_plan(rep, EMBEDDING, 0.5, "global", "max")
        with pytest.raises(InvalidMode):
            select_pruning_plan(rep, "bottleneck", 0.5, "global")

    @pytest.mark.parametrize("mode,scheme", [("local", None), ("global", "sum"), ("global", "gaussian"),
                                             ("global", "standardization")])
    @pytest.mark.parametrize("ratio", [0.25, 0.5, 0.77, 0.95])
    def test_bottleneck_plans_valid_and_counted(self, mode, scheme, ratio):
        enc = build_encoder(EncoderConfig())
        graph = build_dependency_graph(enc)
        rng = np.random.default_rng(int(ratio * 100))
        rep = report_from_scores(graph, {g.id: float(rng.exponential()) for g in graph.groups})
        plan = select_pruning_plan(rep, "bottleneck", ratio, mode, scheme)
        assert validate_plan(graph, plan) == []
        layers = [layer for layer in layer_partition(graph) if layer[0].kind != EMBEDDING]
        total = sum(len(layer) for layer in layers)
        if mode == "global":
            assert len(plan.remove) == int(np.floor(ratio * total))
        else:
            assert len(plan.remove) == sum(int(np.floor(ratio * len(layer))) for layer in layers)
        before = graph.dims
        after = plan.dims
        removed = (sum(map(sum, before.head_dims)) - sum(map(sum, after.head_dims))
                   + sum(before.mlp_dims) - sum(after.mlp_dims))
        assert removed == len(plan.remove)

    def test_global_mixes_attention_and_mlp(self):
        enc = build_encoder(EncoderConfig())
        graph = build_dependency_graph(enc)
        # attention groups score far lower than mlp groups once normalised by sum
        scores = {g.id: (1.0 if g.kind == "mlp_bottleneck" else 1.0 + g.channel) for g in graph.groups}
        plan = select_pruning_plan(report_from_scores(graph, scores), "bottleneck", 0.5, "global", "sum")
        kinds = {gid.split(":")[0] for gid in plan.remove}
        assert kinds == {"attn", "mlp"}
        assert validate_plan(graph, plan) == []

    def test_local_keeps_one_per_head(self):
        cfg = EncoderConfig(embed_dim=8, heads=4, blocks=1)
        graph = build_dependency_graph(build_encoder(cfg))
        rep = report_from_scores(graph, {g.id: 0.0 for g in graph.groups})
        plan = select_pruning_plan(rep, "bottleneck", 0.9, "local")
        assert all(w >= 1 for hd in plan.dims.head_dims for w in hd)

    def test_aggregate_matches_report(self, tiny_encoder):
        x = random_batch(TINY)
        rep = parameter_importance(tiny_encoder, x, None, Criterion("magnitude"))
        again = aggregate_group_scores(build_dependency_graph(tiny_encoder), rep.param_scores)
        assert again == rep.group_scores
