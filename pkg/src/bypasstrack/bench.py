"""Wall-clock latency measurement: per-block and end-to-end scenarios."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .backbone import PrunedViTLayer, layer_forward
from .bypass import BypassDecisionModule, GatingPolicy, bypass_probability
from .config import Config
from .flops import layer_flops, model_flops
from .model import TrackerModel
from .pruning import binarize_local, compact

MIN_WARMUP = 100
MIN_RUNS = 1000
TIMER_RESOLUTION_NS = 100
BENCH_COLUMNS = ("scenario", "median_ms", "p10_ms", "p90_ms", "flops", "params", "mean_executed_blocks", "runs")


@dataclass
class BenchRecord:
    scenario: str
    median_ms: float
    p10_ms: float
    p90_ms: float
    flops: int
    params: int
    mean_executed_blocks: float
    runs: int

    def row(self) -> dict[str, str]:
        out = {k: str(v) for k, v in asdict(self).items()}
        for k in ("median_ms", "p10_ms", "p90_ms"):
            out[k] = f"{getattr(self, k):.6f}"
        out["mean_executed_blocks"] = f"{self.mean_executed_blocks:g}"
        return out


def _inner_repeats() -> int:
    """Calls per timing sample so that one sample spans well over the clock resolution."""
    res_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if res_ns < TIMER_RESOLUTION_NS:
        return 1
    warnings.warn(f"timer resolution {res_ns:.0f} ns is coarse; repeating each call", RuntimeWarning)
    return int(math.ceil(res_ns / TIMER_RESOLUTION_NS))


def time_interleaved(fns: dict[str, Callable[[], object]], warmup: int = MIN_WARMUP,
                     runs: int = MIN_RUNS) -> dict[str, np.ndarray]:
    """Per-call seconds for each function, sampled round-robin so drift hits all equally."""
    if warmup < MIN_WARMUP or runs < MIN_RUNS:
        raise ValueError(f"need >= {MIN_WARMUP} warm-up and >= {MIN_RUNS} timed runs")
    inner = _inner_repeats()
    names = list(fns)
    for _ in range(warmup):
        for name in names:
            fns[name]()
    samples = {name: np.empty(runs) for name in names}
    clock = time.perf_counter_ns
    for r in range(runs):
        for name in names:
            fn = fns[name]
            t0 = clock()
            for _ in range(inner):
                fn()
            samples[name][r] = (clock() - t0) / inner * 1e-9
    return samples


def summarise(label: str, seconds: np.ndarray, flops: int, params: int, executed: float) -> BenchRecord:
    ms = seconds * 1e3
    p10, med, p90 = np.percentile(ms, [10, 50, 90])
    return BenchRecord(label, float(med), float(p10), float(p90), int(flops), int(params), float(executed), len(ms))


# ---- per-block ----------------------------------------------------------------------------

def pruned_copy(layer: PrunedViTLayer, mu: float, rng: np.random.Generator) -> PrunedViTLayer:
    """Compact ``layer`` at ratio ``mu`` using random importance scores."""
    masks = [binarize_local(rng.normal(size=layer.dim), mu, layer.n_heads) for _ in range(2)]
    return compact(layer, masks)


def block_scenarios(layer: PrunedViTLayer, pruned_layer: PrunedViTLayer, bdm: BypassDecisionModule,
                    tokens: np.ndarray) -> dict[str, tuple[Callable[[], object], int, int]]:
    """Callables for one gated block: ``(fn, flops, params)`` per scenario label."""
    x = Tensor(tokens)
    n = tokens.shape[-2]
    bypass = Tensor(tokens[..., -1, :])
    bdm_flops = 2 * bdm.dim
    bdm_params = bdm.num_parameters()

    def dense():
        return layer_forward(x, layer)

    def with_bdm():
        bypass_probability(bdm, bypass)
        return layer_forward(x, layer)

    def pruned():
        return layer_forward(x, pruned_layer)

    def pruned_with_bdm():
        bypass_probability(bdm, bypass)
        return layer_forward(x, pruned_layer)

    def skipped():
        bypass_probability(bdm, bypass)
        return x

    return {
        "block:dense": (dense, layer_flops(layer, n), layer.num_parameters()),
        "block:+bdm": (with_bdm, layer_flops(layer, n) + bdm_flops, layer.num_parameters() + bdm_params),
        "block:vtp": (pruned, layer_flops(pruned_layer, n), pruned_layer.num_parameters()),
        "block:+bdm+vtp": (pruned_with_bdm, layer_flops(pruned_layer, n) + bdm_flops,
                           pruned_layer.num_parameters() + bdm_params),
        "block:bypassed": (skipped, bdm_flops, bdm_params),
    }


def bench_blocks(cfg: Config, *, seed: int = 0, warmup: int = MIN_WARMUP, runs: int = MIN_RUNS,
                 layer: PrunedViTLayer | None = None) -> list[BenchRecord]:
    rng = np.random.default_rng([seed, 29])
    m = cfg.model
    if layer is None:
        layer = PrunedViTLayer(m.d, m.n_heads, m.mlp_layers, rng)
    if layer.is_compact:
        raise ValueError("per-block bench needs a dense layer")
    pruned = pruned_copy(layer, cfg.prune.mu, rng)
    bdm = BypassDecisionModule(m.d, rng)
    n = (m.template_size // m.patch) ** 2 + (m.search_size // m.patch) ** 2 + 1
    tokens = rng.normal(size=(1, n, m.d)).astype(np.float32)
    scen = block_scenarios(layer, pruned, bdm, tokens)
    times = time_interleaved({k: v[0] for k, v in scen.items()}, warmup, runs)
    return [summarise(k, times[k], scen[k][1], scen[k][2], 1.0 if k != "block:bypassed" else 0.0)
            for k in scen]


# ---- end to end ---------------------------------------------------------------------------

def model_variants(cfg: Config, *, seed: int = 0, final: TrackerModel | None = None) -> dict[str, TrackerModel]:
    """Dense, dense+BDM and pruned+BDM models sharing one architecture config.

    Weights are random unless ``final`` (a pruned model with BDMs) is given,
    in which case it is used for the pruned variant.
    """
    rng = np.random.default_rng([seed, 31])
    dense = TrackerModel(cfg.model, seed=seed)
    with_bdm = TrackerModel(cfg.model, seed=seed)
    with_bdm.attach_bdms(cfg.bypass, seed=seed)
    if final is None:
        final = TrackerModel(cfg.model, seed=seed)
        final.layers = [pruned_copy(layer, cfg.prune.mu, rng) for layer in final.layers]
        final.attach_bdms(cfg.bypass, seed=seed)
    return {"dense": dense, "+bdm": with_bdm, "+bdm+vtp": final}


def _inputs(cfg: Config, seed: int):
    rng = np.random.default_rng([seed, 37])
    m = cfg.model
    z = rng.random((1, m.template_size, m.template_size, m.channels)).astype(np.float32)
    x = rng.random((1, m.search_size, m.search_size, m.channels)).astype(np.float32)
    return z, x


def forced_skip_layers(depth: int, n_enf: int, k: int) -> tuple[int, ...]:
    """The last ``k`` gated layers (1-based)."""
    if not 0 <= k <= depth - n_enf:
        raise ValueError(f"k must lie in [0, {depth - n_enf}], got {k}")
    return tuple(range(depth - k + 1, depth + 1))


def bench_models(cfg: Config, *, seed: int = 0, warmup: int = MIN_WARMUP, runs: int = MIN_RUNS,
                 final: TrackerModel | None = None, skip_counts: Sequence[int] | None = None,
                 scenarios: Sequence[str] | None = None) -> list[BenchRecord]:
    """End-to-end single-pair inference under each scenario.

    ``forced-skip-k`` uses the pruned+BDM model with threshold 1 (no natural
    skips) and overrides the last ``k`` gated layers to skip.
    """
    variants = model_variants(cfg, seed=seed, final=final)
    z, x = _inputs(cfg, seed)
    depth, n_enf = cfg.model.depth, cfg.bypass.n_enf
    if skip_counts is None:
        skip_counts = range(depth - n_enf + 1)
    never = GatingPolicy(1.0, n_enf)
    fns: dict[str, Callable[[], object]] = {}
    meta: dict[str, tuple[int, int, float]] = {}
    for label, model in variants.items():
        if scenarios is not None and label not in scenarios:
            continue
        fns[label] = (lambda mdl=model: mdl.forward(z, x))
        _, trace = model.forward(z, x)
        rep = model_flops(model)
        meta[label] = (rep.max_flops, rep.params, float(trace.executed_count()[0]))
    final_model = variants["+bdm+vtp"]
    for k in skip_counts:
        label = f"forced-skip-{k}"
        if scenarios is not None and label not in scenarios and "forced-skip-k" not in scenarios:
            continue
        skip = forced_skip_layers(depth, n_enf, k)
        fns[label] = (lambda s=skip: final_model.forward(z, x, policy=never, force_skip=s))
        rep = model_flops(final_model)
        flops = rep.max_flops - sum(rep.layers[i - 1] for i in skip)
        meta[label] = (flops, rep.params, float(depth - k))
    times = time_interleaved(fns, warmup, runs)
    return [summarise(label, times[label], *meta[label]) for label in fns]


def write_bench_csv(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def bench_problems(records) -> list[str]:
    """Ordering and monotonicity violations among the measured scenarios."""
    med = {r.scenario: r.median_ms for r in records}
    problems = []
    if {"block:dense", "block:+bdm", "block:+bdm+vtp"} <= med.keys():
        if not med["block:+bdm"] > med["block:dense"] > med["block:+bdm+vtp"]:
            problems.append("per-block order +bdm > dense > +bdm+vtp does not hold")
    if {"block:bypassed", "block:+bdm+vtp"} <= med.keys():
        if med["block:bypassed"] > 0.5 * med["block:+bdm+vtp"]:
            problems.append("bypassing saves less than half of the block time")
    ks = sorted(int(s.rsplit("-", 1)[1]) for s in med if s.startswith("forced-skip-"))
    for a, b in zip(ks, ks[1:]):
        if med[f"forced-skip-{b}"] > med[f"forced-skip-{a}"]:
            problems.append(f"forced-skip-{b} slower than forced-skip-{a}")
    return problems
