"""Acceptance gates.  Each test prints one ``PASS``/``FAIL`` line.

The sample-efficiency grid trains 27 small networks and takes roughly 40
minutes on one core; deselect it with ``-m "not slow"``.
"""
import json
import time

import numpy as np
import pytest

from gcnnseg import cli
from gcnnseg import data as D
from gcnnseg import layers as L
from gcnnseg import oracle as O
from gcnnseg.equivcheck import gradient_check, layer_equivariance, layer_gradients
from gcnnseg.experiment import REGIMES, TrendConfig, run_trend
from gcnnseg.groups import P1, P4, P4M
from gcnnseg.model import ArchitectureConfig, build, count_parameters
from gcnnseg.train import TrainConfig, stability_report, train
from tissue_cases import CASES

GROUPS = (P1, P4, P4M)


@pytest.fixture
def gate(capsys):
    def report(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}  {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    return report


# 1 -------------------------------------------------------------------------


def _fuzz_case(rng, group, k, stride):
    """Random shapes, one comparison per operator; returns errors by name."""
    S = group.stabilizer_size
    pad = int(rng.integers(0, k // 2 + 1))
    n = int(rng.integers(max(k, 3), 8))
    b, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
    x = rng.standard_normal((b, cin, n, n))
    f = rng.standard_normal((b, cin, S, n, n))
    wl = rng.standard_normal((cout, cin, k, k))
    wg = rng.standard_normal((cout, cin, S, k, k))
    wp = rng.standard_normal((cout, cin, k, k))
    y = rng.standard_normal((1, cout, S, 3, 3))
    return {
        "lift": np.abs(L.lift_conv_forward(x, wl, None, group, pad)[0] - O.direct_lift(x, wl, group, pad)).max(),
        "group": np.abs(L.group_conv_forward(f, wg, None, group, stride, pad)[0]
                        - O.direct_group(f, wg, group, stride, pad)).max(),
        "proj": np.abs(L.proj_conv_forward(f, wp, None, group, pad)[0] - O.direct_proj(f, wp, group, pad)).max(),
        "transposed": np.abs(L.group_transposed_conv_forward(y, wg, None, group, stride, pad)[0]
                             - O.direct_transposed_group(y, wg, group, stride, pad)).max(),
    }


def test_oracle_equivalence(gate):
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        for group in GROUPS:
            for k in (1, 3, 5):
                for stride in (1, 2, 3):
                    errs = _fuzz_case(rng, group, k, stride)
                    cases += len(errs)
                    worst = max(worst, max(errs.values()))
    elapsed = time.perf_counter() - t0
    gate(1, "oracle equivalence", cases >= 600 and worst < 1e-10 and elapsed < 120,
         f"cases={cases} max_err={worst:.2e} time={elapsed:.0f}s")


# 2 -------------------------------------------------------------------------


def test_layer_equivariance(gate):
    t0 = time.perf_counter()
    results = []
    for seed in range(3):
        for n in (9, 11):
            results += layer_equivariance(P4M, seed=seed, n=n)
    names = {r.name.split("/")[-1] for r in results}
    worst = max(r.max_error for r in results)
    elapsed = time.perf_counter() - t0
    ok = (all(r.passed for r in results) and worst < 1e-10 and elapsed < 120
          and {f"transposed(stride={s})" for s in (1, 2, 3)} <= names)
    gate(2, "layer equivariance (p4m)", ok, f"checks={len(results)} max_err={worst:.2e} time={elapsed:.0f}s")


# 3 -------------------------------------------------------------------------


def _short_training(group, dtype):
    task = D.SyntheticTaskConfig(image_size=33, shapes_per_image=3, cell_size=2, num_images=30, model_depth=4)
    synth = D.generate_synthetic(task)
    tr, va, te = (synth.split(s) for s in D.SPLITS)
    model = build(ArchitectureConfig(group=group, depth=4, base_width=4), seed=0, dtype=dtype)
    train(model, tr, va, TrainConfig(epochs=3, batches_per_epoch=4, batch_size=4, seed=0))
    return model, te


def _max_std(model, images):
    return max(stability_report(model, img[None].astype(model.dtype), "p4m").max_std for img in images)


def test_network_stability(gate):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 33, 33))
    stds = {}
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-10)):
        fresh = build(ArchitectureConfig(group="p4m", depth=4, base_width=4), seed=1, dtype=dtype)
        stds[f"fresh/{np.dtype(dtype).name}"] = (_max_std(fresh, x), tol)
    trained, test_set = _short_training("p4m", np.float64)
    images = test_set.images[:3]
    stds["trained/float64"] = (_max_std(trained, images), 1e-10)
    trained32 = build(trained.config, dtype=np.float32)
    trained32.load_state_dict(trained.state_dict())
    stds["trained/float32"] = (_max_std(trained32, images), 1e-4)
    baseline, _ = _short_training("p1", np.float32)
    p1_std = _max_std(baseline, images)
    ratio = p1_std / max(stds["trained/float32"][0], np.finfo(np.float64).tiny)
    elapsed = time.perf_counter() - t0
    ok = all(v < tol for v, tol in stds.values()) and ratio >= 10 and elapsed < 300
    detail = " ".join(f"{k}={v:.1e}" for k, (v, _) in stds.items())
    gate(3, "network stability", ok, f"{detail} p1={p1_std:.1e} ratio={ratio:.1e} time={elapsed:.0f}s")


# 4 -------------------------------------------------------------------------


def test_gradients(gate):
    t0 = time.perf_counter()
    results = []
    for group in GROUPS:
        results += layer_gradients(group, seed=0, probes=10)
    model = build(ArchitectureConfig(group="p4m", depth=2, base_width=2), seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 13, 13))

    def backward(d):
        grads = dict(model.backward(d))
        grads["__input__"] = model.input_grad
        return grads

    net = gradient_check(lambda: model.forward(x, train=True), backward,
                         {**model.parameters(), "__input__": x}, rng, probes=10)
    worst = max(r.max_error for r in results)
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in results) and net < 1e-4 and elapsed < 180
    gate(4, "finite-difference gradients", ok,
         f"layer checks={len(results)} layer max={worst:.1e} network={net:.1e} time={elapsed:.0f}s")


# 5 -------------------------------------------------------------------------


def test_parameter_matching(gate):
    devs = {}
    for base in (16, 32):
        ref = count_parameters(build(ArchitectureConfig(group="p1", base_width=base)))
        for g in ("p4", "p4m"):
            n = count_parameters(build(ArchitectureConfig(group=g, base_width=base)))
            devs[f"{g}@{base}"] = abs(n - ref) / ref
    gate(5, "parameter matching", max(devs.values()) <= 0.10,
         " ".join(f"{k}={100 * v:.1f}%" for k, v in devs.items()))


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_sample_efficiency_trend(gate, capsys):
    config = TrendConfig()
    assert len(config.seeds) == 3 and config.task.num_images * 8 // 10 == 400
    t0 = time.perf_counter()
    result = run_trend(config)
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        print("\nmean test DSC (%)\n" + result.table())
    above = all(result.mean("p4m", f) >= result.mean("p1", f) for f in REGIMES)
    widening = result.gap(0.125) > result.gap(1.0)
    ablation = result.mean("p4m", 1.0) >= result.mean("p4", 1.0)
    gate(6, "sample-efficiency trend", above and widening and ablation,
         f"p4m>=p1 everywhere={above} gap 1/8={result.gap(0.125):+.3f} gap 1={result.gap(1.0):+.3f} "
         f"p4m-p4={result.gap(1.0, 'p4m', 'p4'):+.3f} time={elapsed / 60:.0f}min")


# 7 -------------------------------------------------------------------------


def test_tissue_filter_fixture(gate):
    wrong = [name for name, patch, expected in CASES if D.tissue_filter(patch) is not expected]
    gate(7, "tissue filter fixture", len(CASES) == 12 and not wrong, f"cases={len(CASES)} mismatches={wrong}")


# 8 -------------------------------------------------------------------------


def test_determinism(gate, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "architecture": {"depth": 2, "base_width": 2},
        "train": {"epochs": 2, "batches_per_epoch": 2, "batch_size": 2},
        "data": {"image_size": 13, "cell_size": 1, "shapes_per_image": 2, "model_depth": 2},
    }))
    data = tmp_path / "data"
    assert cli.main(["prepare", "--config", str(cfg), "--num-images", "10", "--out", str(data)]) == 0
    runs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--f64",
                         "--out", str(tmp_path / name)]) == 0
        runs.append(tmp_path / name)
    same = {f: (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in ("metrics.jsonl", "best.gunt")}
    gate(8, "determinism", all(same.values()), " ".join(f"{k}={v}" for k, v in same.items()))
