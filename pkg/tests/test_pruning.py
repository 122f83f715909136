import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bypasstrack import autodiff as ad
from bypasstrack.autodiff import ContractError, Tensor
from bypasstrack.backbone import PrunedViTLayer, layer_forward
from bypasstrack.config import Config
from bypasstrack.flops import layer_params
from bypasstrack.model import PhaseError, TrackerModel
from bypasstrack.pruning import (
    EQUIVALENCE_TOL,
    PipelineError,
    PruneConfigError,
    PruneReport,
    RelaxedDRState,
    binarize_global,
    binarize_local,
    compact,
    compact_shapes,
    d_star,
    equivalence_error,
    masked_copy,
    prune_model,
    prune_pipeline,
    reg_loss,
)


def tiny_config():
    return Config().with_updates(**{
        "model.d": 8, "model.depth": 2, "model.n_heads": 2, "model.patch": 4,
        "model.template_size": 8, "model.search_size": 16, "model.head_width": 4, "model.head_stages": 2,
        "bypass.n_enf": 1, "train.epochs": 1, "train.lr_drop_epoch": 1, "train.batch": 4,
        "train.samples_per_epoch": 8, "data.num_sequences": 4, "data.sequence_length": 4, "data.frame_size": 48,
    })


def random_masks(rng, d, n_heads):
    masks = []
    for _ in range(2):
        k = int(rng.integers(1, d // n_heads + 1)) * n_heads
        m = np.zeros(d, dtype=bool)
        m[rng.choice(d, k, replace=False)] = True
        masks.append(m)
    return masks


class TestRegLoss:
    def layers(self, n=2, d=3, value=1.0):
        layers = [PrunedViTLayer(d, 1, 2, np.random.default_rng(i)) for i in range(n)]
        return RelaxedDRState.attach(layers, value)

    def test_zero_gates(self):
        assert reg_loss(self.layers(value=0.0), 1e-4).item() == 0.0

    def test_all_ones(self):
        assert reg_loss(self.layers(), 1e-4).item() == pytest.approx(1.2e-3, rel=1e-6)

    def test_per_layer_alphas(self):
        assert reg_loss(self.layers(), [1e-4, 3e-4]).item() == pytest.approx(6 * 4e-4, rel=1e-6)

    def test_alpha_count_checked(self):
        with pytest.raises(PruneConfigError):
            reg_loss(self.layers(), [1e-4])

    def test_subgradient(self):
        state = self.layers(n=1, d=4)
        d1, d2 = state.pairs[0]
        d1.data = np.array([0.5, -0.2, 0.0, 3.0], np.float32)
        with ad.Tape() as tape:
            ad.backward(tape, reg_loss(state, 1e-4))
        np.testing.assert_allclose(d1.grad, [1e-4, -1e-4, 0.0, 1e-4], rtol=1e-6)
        np.testing.assert_allclose(d2.grad, np.full(4, 1e-4), rtol=1e-6)

    def test_empty_state(self):
        with pytest.raises(ContractError):
            reg_loss(RelaxedDRState([]), 1e-4)

    def test_of_requires_gates(self):
        with pytest.raises(PipelineError):
            RelaxedDRState.of([PrunedViTLayer(4, 2)])

    def test_attach_refuses_compact(self):
        layer = PrunedViTLayer(4, 2)
        small = compact(layer, (np.ones(4, bool), np.ones(4, bool)))
        with pytest.raises(PipelineError):
            RelaxedDRState.attach([small])


class TestDStar:
    @pytest.mark.parametrize("d,mu,n_heads,expected", [(192, 0.3, 3, 57), (6, 0.5, 2, 2), (64, 0.5, 4, 32),
                                                       (64, 0.3, 4, 16), (16, 1.0, 2, 16), (100, 0.29, 1, 29)])
    def test_examples(self, d, mu, n_heads, expected):
        assert d_star(d, mu, n_heads) == expected

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 32), st.integers(1, 100))
    def test_matches_rational_oracle(self, n_heads, per_head, mu_pct):
        d = n_heads * per_head
        mu = mu_pct / 100
        k = d_star(d, mu, n_heads)
        assert k == oracles.d_star(d, mu, n_heads)
        assert k % n_heads == 0 and 0 <= k <= d


class TestBinarizeLocal:
    def test_small_example(self):
        mask = binarize_local([0.9, 0.1, 0.5, 0.7, 0.3, 0.2], 0.5, 2)
        assert mask.astype(int).tolist() == [1, 0, 0, 1, 0, 0]

    def test_against_sort_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            d, n_heads = 16, int(rng.choice([1, 2, 4, 8]))
            mu = float(rng.uniform(0.1, 1.0))
            # coarse values force ties on many trials
            scores = rng.integers(-4, 5, d) / 4 if trial % 2 else rng.normal(size=d)
            k = oracles.d_star(d, mu, n_heads)
            if k == 0:
                continue
            np.testing.assert_array_equal(binarize_local(scores, mu, n_heads), oracles.sort_oracle_topk(scores, k))

    def test_signed_ranking(self):
        mask = binarize_local([-5.0, 0.1, 0.2, -0.1], 0.5, 1)
        assert mask.tolist() == [False, True, True, False]

    def test_ties_prefer_lower_index(self):
        assert binarize_local(np.ones(8), 0.5, 2).tolist() == [True] * 4 + [False] * 4

    def test_nothing_kept(self):
        with pytest.raises(PruneConfigError):
            binarize_local(np.ones(8), 0.1, 4)

    def test_non_finite(self):
        with pytest.raises(PruneConfigError):
            binarize_local([1.0, np.nan, 0.0, 2.0], 0.5, 2)

    def test_head_count_must_divide(self):
        with pytest.raises(PruneConfigError):
            binarize_local(np.ones(6), 0.5, 4)


class TestBinarizeGlobal:
    def test_identical_layers_match_local(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=16)
        local = binarize_local(scores, 0.5, 2)
        for mask in binarize_global([scores, scores, scores], 0.5, 2):
            np.testing.assert_array_equal(mask, local)

    def test_dominant_layer_starves_the_other(self):
        rng = np.random.default_rng(2)
        strong = rng.uniform(10, 11, 16)
        weak = rng.uniform(0, 1, 16)
        k = d_star(16, 0.5, 2)
        local = [binarize_local(s, 0.5, 2) for s in (strong, weak)]
        glob = binarize_global([strong, weak], 0.5, 2)
        assert [m.sum() for m in local] == [k, k]
        # the global budget of 16 would all go to the strong layer; the floor keeps N_h in the weak one
        assert glob[0].sum() == 14 and glob[1].sum() == 2
        assert glob[1].sum() < local[1].sum()
        np.testing.assert_array_equal(glob[1], oracles.sort_oracle_topk(weak, 2))

    def test_counts_contract(self):
        rng = np.random.default_rng(3)
        refused = 0
        for _ in range(200):
            n_heads = int(rng.choice([1, 2, 4]))
            n_layers = int(rng.integers(2, 6))
            scores = [rng.normal(loc=rng.normal(), size=16) for _ in range(n_layers)]
            mu = float(rng.uniform(0.3, 1.0))
            try:
                masks = binarize_global(scores, mu, n_heads)
            except PruneConfigError:
                refused += 1  # starved layers with no donor left above N_h
                continue
            counts = [int(m.sum()) for m in masks]
            assert all(c % n_heads == 0 and c >= n_heads for c in counts)
            assert sum(counts) <= d_star(16, mu, n_heads) * n_layers
        assert refused < 100

    def test_unsatisfiable_floor(self):
        with pytest.raises(PruneConfigError):
            # ranked counts 5 and 3 round down to 4 and 0, and no layer holds more than N_h to give
            binarize_global([np.r_[np.full(5, 9.0), np.zeros(3)], np.r_[np.full(3, 9.0), np.zeros(5)]], 0.5, 4)


class TestCompact:
    def test_all_ones_is_unchanged(self):
        layer = PrunedViTLayer(16, 4, 2, np.random.default_rng(0))
        small = compact(layer, (np.ones(16, bool), np.ones(16, bool)))
        assert layer_params(small) == layer_params(layer)
        for name in ("wq", "wk", "wv", "wo"):
            np.testing.assert_array_equal(getattr(small, name).data, getattr(layer, name).data)

    def test_half_kept_halves_projection_rows(self):
        layer = PrunedViTLayer(16, 2, 2, np.random.default_rng(0))
        mask = np.zeros(16, bool)
        mask[::2] = True  # 4 dims per head, both heads survive
        small = compact(layer, (mask, mask))
        for name in ("wq", "wk", "wv"):
            assert getattr(small, name).shape[0] == getattr(layer, name).shape[0] // 2
        assert small.wq.data.size + small.wk.data.size == (layer.wq.data.size + layer.wk.data.size) // 2
        assert small.wo.shape == (8, 16)

    def test_dropped_head_drops_its_columns(self):
        layer = PrunedViTLayer(16, 2, 2, np.random.default_rng(0))
        mask = np.zeros(16, bool)
        mask[:8] = True  # all of head 0, none of head 1
        small = compact(layer, (mask, mask))
        assert small.wq.shape == (8, 8)
        np.testing.assert_array_equal(small.wq.data, layer.wq.data[:8, :8])

    def test_equivalence_on_200_inputs(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for trial in range(10):
            d, n_heads = [(16, 2), (16, 4), (12, 3), (8, 1)][trial % 4]
            layer = PrunedViTLayer(d, n_heads, 2 + trial % 2, rng)
            masks = random_masks(rng, d, n_heads)
            inputs = rng.normal(size=(200, 5, d)).astype(np.float32)
            worst = max(worst, equivalence_error(layer, masks, inputs))
        assert worst < EQUIVALENCE_TOL

    def test_compact_keeps_token_dim(self):
        rng = np.random.default_rng(5)
        layer = PrunedViTLayer(16, 4, 2, rng)
        small = compact(layer, random_masks(rng, 16, 4))
        assert layer_forward(Tensor(rng.normal(size=(2, 3, 16))), small).shape == (2, 3, 16)

    def test_masked_copy_matches_zeroed_rows(self):
        rng = np.random.default_rng(6)
        layer = PrunedViTLayer(8, 2, 2, rng)
        m1, m2 = random_masks(rng, 8, 2)
        x = rng.normal(size=(3, 4, 8))
        p = {n: getattr(layer, n).data.astype(np.float64) for n in
             ("ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift", "wq", "wk", "wv", "wo")}
        p["w_mlp"] = [w.data.astype(np.float64) for w in layer.w_mlp]
        ref = oracles.reference_block(x, p, 2, m1, m2)
        got = layer_forward(Tensor(x.astype(np.float32)), masked_copy(layer, (m1, m2))).data
        np.testing.assert_allclose(got, ref, atol=1e-5)

    def test_popcount_error(self):
        layer = PrunedViTLayer(8, 2)
        bad = np.array([1, 1, 1, 0, 0, 0, 0, 0], bool)
        with pytest.raises(ContractError):
            compact(layer, (bad, np.ones(8, bool)))

    def test_empty_mask_error(self):
        with pytest.raises(ContractError):
            compact(PrunedViTLayer(8, 2), (np.zeros(8, bool), np.ones(8, bool)))

    def test_shape_reconstruction(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            layer = PrunedViTLayer(16, 4, 3, rng)
            small = compact(layer, random_masks(rng, 16, 4))
            shapes = compact_shapes(16, 4, 3, small.kept1, small.kept2)
            assert shapes["wq"] == small.wq.shape and shapes["wv"] == small.wv.shape
            assert shapes["wo"] == small.wo.shape
            assert [shapes[f"w_mlp.{k}"] for k in range(3)] == [w.shape for w in small.w_mlp]


class TestReportAndPipeline:
    def reg_trained(self, seed=0):
        model = TrackerModel(tiny_config().model, seed=seed)
        state = RelaxedDRState.attach(model.layers)
        rng = np.random.default_rng(seed)
        for pair in state.pairs:
            for g in pair:
                g.data = rng.normal(size=g.shape).astype(np.float32)
        model.advance_phase("reg-trained")
        return model

    def test_report_roundtrip(self):
        model = self.reg_trained()
        report = prune_model(model, 0.5, check_inputs=20)
        again = PruneReport.from_text(report.to_text())
        assert again.to_text() == report.to_text()
        assert [r.kept1 for r in again.records] == [r.kept1 for r in report.records]

    def test_kept_sets_have_d_star(self):
        model = self.reg_trained(1)
        report = prune_model(model, 0.5, check_inputs=20)
        k = d_star(8, 0.5, 2)
        for r in report.records:
            assert len(r.kept1) == len(r.kept2) == k
            assert r.params_after < r.params_before and r.flops_after < r.flops_before
            assert r.equivalence < EQUIVALENCE_TOL
        assert model.phase == "compacted" and all(layer.is_compact for layer in model.layers)

    def test_full_ratio_changes_nothing(self):
        model = self.reg_trained(2)
        report = prune_model(model, 1.0, check_inputs=20)
        for r in report.records:
            assert r.params_after == r.params_before and r.flops_after == r.flops_before

    def test_wrong_phase(self):
        model = TrackerModel(tiny_config().model)
        with pytest.raises(PhaseError):
            prune_model(model, 0.5)

    def test_pipeline_refuses_bdms(self):
        cfg = tiny_config()
        model = TrackerModel(cfg.model)
        model.attach_bdms(cfg.bypass)
        with pytest.raises(PipelineError):
            prune_pipeline(model, [], cfg)

    @pytest.mark.slow
    def test_pipeline_runs(self):
        from bypasstrack.training import training_sequences

        cfg = tiny_config().with_updates(**{"prune.mu": 0.5})
        model = TrackerModel(cfg.model, seed=0)
        model, report = prune_pipeline(model, training_sequences(cfg), cfg, finetune_epochs=1)
        assert model.phase == "compacted"
        assert all(len(r.kept1) == 4 for r in report.records)
