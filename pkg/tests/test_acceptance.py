"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The heavy criteria (4, 7, 8) train or time desk-scale models and take minutes.
"""

import time

import numpy as np
import pytest

import oracles
from bypasstrack.autodiff import Tensor
from bypasstrack.backbone import PrunedViTLayer, TokenSequence, backbone_forward, checked_mlp, checked_msa
from bypasstrack.bench import bench_blocks, bench_models, bench_problems
from bypasstrack.bypass import BypassDecisionModule, Decision, GatingPolicy, decide, gated_backbone
from bypasstrack.checkpoint import load_checkpoint, save_checkpoint
from bypasstrack.config import Config, ConfigError
from bypasstrack.diagnostics import KINK_TOL, SMOOTH_TOL, gradcheck_suite
from bypasstrack.flops import layer_macs, model_flops
from bypasstrack.losses import sparsity_loss, sparsity_target, SparsityContext
from bypasstrack.model import TrackerModel
from bypasstrack.pruning import (
    EQUIVALENCE_TOL,
    binarize_global,
    binarize_local,
    compact,
    d_star,
    equivalence_error,
)
from bypasstrack.tracker import (
    SceneSpec,
    evaluate,
    generate_sequence,
    track_sequence,
    write_summary,
)
from bypasstrack.training import build_tracker, train_model, training_sequences

from test_backbone import f64_layer
from test_checkpoint import final_model
from test_config import BAD_VALUES
from test_flops import hand_count, mask_of


def report(record_property, ok: bool, detail: str, label: str) -> None:
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")


def test_criterion_01_identity_reduction(record_property):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng([seed, 1])
        n_heads = int(rng.choice([1, 2, 4, 8]))
        d = n_heads * int(rng.choice([2, 4, 8]))
        n = int(rng.integers(1, 12))
        layer = f64_layer(d, n_heads, seed)
        layer.set_masks(np.ones(d), np.ones(d))
        x = Tensor(rng.normal(size=(2, n, d)), dtype=np.float64)
        msa_ref = oracles.reference_msa(x.data, layer.wq.data, layer.wk.data, layer.wv.data, layer.wo.data, n_heads)
        mlp_ref = oracles.reference_mlp(x.data, [w.data for w in layer.w_mlp])
        worst = max(worst, np.abs(checked_msa(x, layer).data - msa_ref).max(),
                    np.abs(checked_mlp(x, layer).data - mlp_ref).max())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10
    report(record_property, ok, f"max-abs {worst:.2e} over 100 configs (bound 1e-6), {elapsed:.1f} s",
           "identity reduction")
    assert worst < 1e-6
    assert elapsed < 10


def test_criterion_02_gradient_correctness(record_property):
    start = time.perf_counter()
    results = gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - start
    terms = {k: v for k, v in results.items() if k != "overall"}
    worst_term = max(err for err, _ in terms.values())
    overall = results["overall"][0]
    ok = worst_term < SMOOTH_TOL and overall < KINK_TOL and elapsed < 60
    report(record_property, ok,
           f"worst term {worst_term:.1e} (bound {SMOOTH_TOL:.0e}), full objective {overall:.1e} "
           f"(bound {KINK_TOL:.0e}), {elapsed:.1f} s", "gradient correctness")
    assert set(terms) == {"focal", "giou", "l1", "spar", "reg"}
    assert SMOOTH_TOL == 1e-4 and KINK_TOL == 1e-3
    assert worst_term < SMOOTH_TOL
    assert overall < KINK_TOL
    assert elapsed < 60


def test_criterion_03_bypass_semantics(record_property):
    start = time.perf_counter()
    policy = GatingPolicy(0.5, 2)
    assert decide(0.5, policy) is Decision.EXECUTE
    assert decide(np.nextafter(0.5, 1.0), policy) is Decision.SKIP
    assert decide(0.5 + 1e-9, policy) is Decision.SKIP

    d, depth = 16, 6
    worst, mixed = 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng([seed, 3])
        layers = [PrunedViTLayer(d, 4, 2, rng) for _ in range(depth)]
        bdms = [BypassDecisionModule(d, rng) for _ in range(depth - 2)]
        for b in bdms:
            b.weight.data = rng.normal(0, 1.0, d).astype(np.float32)
        seq = TokenSequence(Tensor(rng.normal(size=(6, 7, d)).astype(np.float32)), 2, 4)
        a, ta = gated_backbone(seq, layers, bdms, policy, mode="train")
        b, tb = gated_backbone(seq, layers, bdms, policy, mode="infer")
        np.testing.assert_array_equal(ta.executed, tb.executed)
        assert ta.executed[:, :2].all()
        worst = max(worst, float(np.abs(a.tokens.data - b.tokens.data).max()))
        mixed += int(not (ta.executed.all(axis=0) | ~ta.executed.any(axis=0)).all())

        # saturated gates skip every gated layer: the output is exactly the enforced prefix
        for bdm in bdms:
            bdm.bias.data = np.float32(100.0)
        skipped, trace = gated_backbone(seq, layers, bdms, policy, mode="infer")
        prefix, _ = backbone_forward(seq, layers[:2])
        np.testing.assert_array_equal(skipped.tokens.data, prefix.tokens.data)
        assert trace.executed[:, :2].all() and not trace.executed[:, 2:].any()
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 30
    report(record_property, ok, f"train/infer max-abs {worst:.1e} over 50 seeds ({mixed} with mixed batches), "
           f"{elapsed:.1f} s", "bypass semantics")
    assert worst < 1e-6
    assert mixed > 0
    assert elapsed < 30


def test_criterion_04_sparsity_loss(record_property):
    start = time.perf_counter()
    ctx = SparsityContext(0.4, 0.1, batch_mean_iou_loss=0.3)
    assert sparsity_target(0.3, ctx) == pytest.approx(0.4)
    assert sparsity_target(0.8, ctx) == pytest.approx(0.45)
    assert sparsity_loss([0.6] * 10, 0.4, 2, 12).item() == pytest.approx(0.2, abs=1e-6)

    cfg = Config().with_updates(**{"data.easy_fraction": 1.0})
    model = TrackerModel(cfg.model, seed=cfg.train.seed)
    model.attach_bdms(cfg.bypass, seed=cfg.train.seed)
    history = train_model(model, training_sequences(cfg), cfg, objective="full")
    first, last = history[0].spar_gap, history[-1].spar_gap
    drop = 1.0 - last / first
    elapsed = time.perf_counter() - start
    ok = len(history) == 30 and drop >= 0.5 and elapsed < 600
    report(record_property, ok, f"|mean p - tau| {first:.4f} -> {last:.4f} over {len(history)} epochs "
           f"({drop:.0%} drop, need 50%), {elapsed / 60:.1f} min", "sparsity loss")
    assert len(history) == 30
    assert drop >= 0.5
    assert elapsed < 600


def test_criterion_05_pruning_correctness(record_property):
    start = time.perf_counter()
    assert d_star(192, 0.3, 3) == 57
    assert binarize_local([0.9, 0.1, 0.5, 0.7, 0.3, 0.2], 0.5, 2).astype(int).tolist() == [1, 0, 0, 1, 0, 0]

    rng = np.random.default_rng(5)
    for _ in range(1000):
        n_heads = int(rng.choice([1, 2, 4]))
        mu = float(rng.uniform(0.25, 1.0))
        scores = rng.normal(size=16)
        k = oracles.d_star(16, mu, n_heads)
        np.testing.assert_array_equal(binarize_local(scores, mu, n_heads), oracles.sort_oracle_topk(scores, k))

    for d in range(1, 200):
        for n_heads in (h for h in range(1, 13) if d % h == 0):
            for mu in (0.05, 0.1, 0.25, 0.3, 0.33, 0.5, 0.7, 0.9, 1.0):
                k = d_star(d, mu, n_heads)
                assert k % n_heads == 0 and 0 <= k <= d and k == oracles.d_star(d, mu, n_heads)

    cfg = Config()
    m = cfg.model
    n_tokens = (m.template_size // m.patch) ** 2 + (m.search_size // m.patch) ** 2 + 1
    worst = 0.0
    for _ in range(m.depth):
        layer = PrunedViTLayer(m.d, m.n_heads, m.mlp_layers, rng)
        masks = [binarize_local(rng.normal(size=m.d), cfg.prune.mu, m.n_heads) for _ in range(2)]
        inputs = rng.normal(size=(200, n_tokens, m.d)).astype(np.float32)
        worst = max(worst, equivalence_error(layer, masks, inputs))
    elapsed = time.perf_counter() - start
    ok = worst < EQUIVALENCE_TOL and elapsed < 60
    report(record_property, ok, f"compaction max-abs {worst:.1e} over {m.depth} layers x 200 inputs "
           f"(bound 1e-5), sort oracle 1000/1000, {elapsed:.1f} s", "pruning correctness")
    assert EQUIVALENCE_TOL == 1e-5
    assert worst < EQUIVALENCE_TOL
    assert elapsed < 60


def test_criterion_06_local_vs_global(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    d, n_heads, mu = 64, 4, 0.3
    strong = rng.uniform(5.0, 6.0, d)
    weak = rng.uniform(0.0, 1.0, d)
    k = d_star(d, mu, n_heads)
    local = [int(binarize_local(s, mu, n_heads).sum()) for s in (strong, weak)]
    glob = [int(m.sum()) for m in binarize_global([strong, weak], mu, n_heads)]
    elapsed = time.perf_counter() - start
    ok = local == [k, k] and glob[1] < k and elapsed < 5
    report(record_property, ok, f"d* = {k}; local keeps {local}, global keeps {glob}", "local vs global ranking")
    assert local == [k, k]
    assert glob[1] < local[1]
    assert elapsed < 5


def test_criterion_07_latency_trends(record_property):
    start = time.perf_counter()
    cfg = Config()
    blocks = bench_blocks(cfg, seed=0, runs=3000)
    models = bench_models(cfg, seed=0, scenarios=["forced-skip-k"])
    problems = bench_problems(blocks + models)
    med = {r.scenario: r.median_ms for r in blocks + models}
    saving = 1.0 - med["block:bypassed"] / med["block:+bdm+vtp"]
    skips = [f"{med[f'forced-skip-{k}']:.2f}" for k in range(cfg.model.depth - cfg.bypass.n_enf + 1)]
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 300
    report(record_property, ok,
           f"block ms +bdm {med['block:+bdm']:.3f} > dense {med['block:dense']:.3f} > +bdm+vtp "
           f"{med['block:+bdm+vtp']:.3f}; bypass saves {saving:.0%}; forced-skip-k ms {'/'.join(skips)}; "
           f"{elapsed:.0f} s" + (f"; {problems}" if problems else ""), "latency trends")
    assert problems == []
    assert elapsed < 300


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """The full build on the default desk configuration, evaluated on both held-out sets."""
    start = time.perf_counter()
    cfg = Config()
    model, prune_report, _, _ = build_tracker(cfg, log_dir=tmp_path_factory.mktemp("build"))
    easy, _, _ = evaluate(model, cfg.data, cfg.train.seed, "easy")
    hard, _, _ = evaluate(model, cfg.data, cfg.train.seed, "hard")
    return cfg, model, prune_report, easy, hard, time.perf_counter() - start


def test_criterion_08_tracking_sanity(trained, record_property):
    cfg, model, _, easy, hard, elapsed = trained
    diff = hard["mean_executed_blocks"] - easy["mean_executed_blocks"]
    ok = easy["ao"] > 0.6 and easy["ao"] > hard["ao"] and elapsed < 1800
    report(record_property, ok,
           f"easy AO {easy['ao']:.3f}, hard AO {hard['ao']:.3f}; executed blocks easy "
           f"{easy['mean_executed_blocks']:.2f}, hard {hard['mean_executed_blocks']:.2f}, "
           f"hard - easy = {diff:+.2f}; {elapsed / 60:.1f} min", "tracking sanity")
    assert model.phase == "final"
    assert cfg.data.num_sequences == 200
    assert easy["ao"] > 0.6
    assert easy["ao"] > hard["ao"]
    assert elapsed < 1800


def test_criterion_09_flops_accounting(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 8))
    counts = []
    for kept in (None, ((0, 1, 4, 5), (2, 3, 6, 7)), ((0, 1, 2, 3), (0, 5))):
        layer = PrunedViTLayer(8, 2, 2, rng)
        if kept is not None:
            layer = compact(layer, (mask_of(kept[0]), mask_of(kept[1])))
        counts.append((layer_macs(layer, 4), hand_count(layer, x)))

    cfg = Config().with_updates(**{"prune.mu": 0.3})
    model = TrackerModel(cfg.model)
    model.attach_bdms(cfg.bypass)
    flops = model_flops(model)
    text = flops.to_text()
    elapsed = time.perf_counter() - start
    exact = all(a == b for a, b in counts)
    ok = exact and flops.min_flops < flops.max_flops and "flops_range_g" in text and elapsed < 5
    report(record_property, ok, f"analytic vs hand-counted MACs {counts}; range line "
           f"'{[l for l in text.splitlines() if l.startswith('flops_range_g')][0].split('  ')[0]}'",
           "flops accounting")
    assert exact
    assert flops.min_flops == flops.embed + sum(flops.layers[:2]) + flops.head + flops.bdm
    assert flops.min_flops < flops.max_flops
    assert elapsed < 5


def test_criterion_10_artifact_integrity(tmp_path, record_property):
    start = time.perf_counter()
    cfg = Config()
    model = final_model(cfg)
    save_checkpoint(model, tmp_path / "a.abtk", cfg)
    loaded, _ = load_checkpoint(tmp_path / "a.abtk")
    save_checkpoint(loaded, tmp_path / "b.abtk", cfg)
    bit_exact = all(a.data.tobytes() == b.data.tobytes()
                    for (_, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()))
    same_file = (tmp_path / "a.abtk").read_bytes() == (tmp_path / "b.abtk").read_bytes()

    rejected = 0
    for key, value in BAD_VALUES.items():
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            Config().with_updates(**{key: value})
        rejected += 1
    with pytest.raises(ConfigError, match=r"bypass\.n_enf"):
        Config().with_updates(**{"bypass.n_enf": cfg.model.depth})

    tiny = Config().with_updates(**{
        "model.d": 8, "model.depth": 2, "model.n_heads": 2, "model.patch": 4, "model.template_size": 8,
        "model.search_size": 16, "model.head_width": 4, "model.head_stages": 1, "bypass.n_enf": 1,
        "train.epochs": 2, "train.lr_drop_epoch": 1, "train.batch": 4, "train.samples_per_epoch": 8,
        "data.num_sequences": 4, "data.sequence_length": 4, "data.frame_size": 48, "data.eval_sequences": 2,
    })
    files = []
    for run in range(2):
        m = TrackerModel(tiny.model, seed=0)
        m.attach_bdms(tiny.bypass)
        train_model(m, training_sequences(tiny), tiny, objective="full", log_path=tmp_path / f"metrics{run}.csv")
        metrics, _, _ = evaluate(m, tiny.data, 0, "hard")
        write_summary(metrics, tmp_path / f"report{run}.json")
        files.append(((tmp_path / f"metrics{run}.csv").read_bytes(), (tmp_path / f"report{run}.json").read_bytes()))
    deterministic = files[0] == files[1]
    elapsed = time.perf_counter() - start
    ok = bit_exact and same_file and deterministic and elapsed < 10
    report(record_property, ok, f"round trip bit-exact {bit_exact}, re-save identical {same_file}, "
           f"{rejected + 1} out-of-range fields rejected, reruns identical {deterministic}, {elapsed:.1f} s",
           "artifact integrity")
    assert bit_exact and same_file
    assert deterministic
    assert elapsed < 10


# ---- tracker properties that need the trained model ---------------------------------------

def test_static_easy_target_tracks_well(trained):
    cfg, model, *_ = trained
    ious = []
    for seed in range(5):
        seq = generate_sequence(SceneSpec.easy(cfg.data.frame_size, motion_std=0.0), cfg.data.sequence_length,
                                90_000 + seed)
        ious.append(track_sequence(model, seq).ious[1:].mean())
    assert np.mean(ious) > 0.7


def test_ground_truth_centred_search_is_no_worse(trained):
    cfg, model, *_ = trained
    free, centred = [], []
    for seed in range(20):
        spec = SceneSpec.easy(cfg.data.frame_size) if seed % 2 else SceneSpec.hard(cfg.data.frame_size)
        seq = generate_sequence(spec, cfg.data.sequence_length, 80_000 + seed)
        free.append(track_sequence(model, seq).ious[1:].mean())
        centred.append(track_sequence(model, seq, gt_centered=True).ious[1:].mean())
    assert np.mean(centred) >= np.mean(free)


def test_trace_length_matches_depth(trained):
    cfg, model, *_ = trained
    seq = generate_sequence(SceneSpec.easy(cfg.data.frame_size), 4, 70_000)
    assert all(t.depth == cfg.model.depth for t in track_sequence(model, seq).traces[1:])


def test_prune_report_sizes(trained):
    cfg, _, prune_report, *_ = trained
    k = d_star(cfg.model.d, cfg.prune.mu, cfg.model.n_heads)
    assert all(len(r.kept1) == len(r.kept2) == k for r in prune_report.records)
    assert all(r.flops_after < r.flops_before for r in prune_report.records)
