"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from oracles import dct_oracle, graph_loss_oracle, node_loss_oracle, temporal_negative_sets
from stgcl.augment import AugmentSpec, augment_batch, dct, edge_mask, idct, input_mask, input_smooth, temporal_shift
from stgcl.cli import main
from stgcl.contrast import FilterSpec, graph_infonce, node_infonce_factorized, temporal_filter
from stgcl.data import split_counts, synth_generate, window_count
from stgcl.experiments import run_directional
from stgcl.gradcheck import run_gradcheck
from stgcl.graph import build_adjacency
from stgcl.model import EncoderConfig
from stgcl.tensor import Tensor
from stgcl.train import TrainConfig, run, train_joint


@pytest.fixture
def gate(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="module")
def desk():
    ds = synth_generate()
    return ds, build_adjacency(ds.distances)


def test_01_gradient_suite(gate):
    results, seconds = run_gradcheck(instances=20)
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and seconds < 120
    gate(1, "gradient suite", ok,
         f"{len(results)} ops x 20 instances, worst {worst.name} {worst.max_rel_error:.1e} <= 1e-4, {seconds:.1f}s < 120s")


def test_02_dct_roundtrip(gate):
    rng = np.random.default_rng(2)
    round_err = def_err = 0.0
    for _ in range(100):
        x = rng.normal(size=24)
        round_err = max(round_err, np.abs(idct(dct(x)) - x).max())
        def_err = max(def_err, np.abs(dct(x) - dct_oracle(x)).max())
    gate(2, "DCT/IDCT roundtrip", round_err <= 1e-9 and def_err <= 1e-9,
         f"roundtrip {round_err:.1e}, vs O(L^2) definition {def_err:.1e} (<= 1e-9)")


def test_03_zero_radius_filter_is_unfiltered(gate):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        z1, z2 = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
        slots = rng.integers(0, 288, 16)
        tau = 0.1
        filtered = graph_infonce(Tensor(z1), Tensor(z2), temporal_filter(slots, FilterSpec(r_f=0)), tau).item()
        unfiltered = graph_loss_oracle(z1, z2, ~np.eye(16, dtype=bool), tau)
        worst = max(worst, abs(filtered - unfiltered))
    gate(3, "r_f = 0 equals unfiltered graph loss", worst <= 1e-12, f"max abs diff {worst:.1e} over 50 batches")


def test_04_node_loss_vs_set_oracle(gate):
    rng = np.random.default_rng(4)
    m, n = 4, 5
    worst = 0.0
    cases = 0
    for spatial_on in (False, True):
        for r_f in (0, 60):
            for _ in range(10):
                z1, z2 = rng.normal(size=(m, n, 3)), rng.normal(size=(m, n, 3))
                sp = ~np.eye(n, dtype=bool)
                if spatial_on:
                    a = rng.random((n, n)) < 0.3
                    sp &= ~(a | a.T)
                tp = temporal_filter(rng.integers(0, 288, m), FilterSpec(r_f=r_f))
                if any(not sp[i].any() and not tp[k].any() for k in range(m) for i in range(n)):
                    continue
                ours = node_infonce_factorized(Tensor(z1), Tensor(z2), sp, tp, 0.5).item()
                worst = max(worst, abs(ours - node_loss_oracle(z1, z2, sp, tp, 0.5)))
                cases += 1
    gate(4, "node-level factorized loss", worst <= 1e-10 and cases >= 30,
         f"max abs diff {worst:.1e} over {cases} batches with and without filters")


def test_05_negative_set_cardinalities(gate):
    rng = np.random.default_rng(5)
    mismatches = 0
    for r_f in (30, 60, 120):
        for _ in range(200):
            slots = rng.integers(0, 288, 32)
            ours = temporal_filter(slots, FilterSpec(r_f=r_f, steps_per_day=288, interval_minutes=5)).sum(axis=1)
            ref = [len(s) for s in temporal_negative_sets(slots, 288, 5, r_f)]
            mismatches += int((ours != np.array(ref)).sum())
    gate(5, "negative-set cardinalities", mismatches == 0, f"{mismatches} mismatches over 600 batches of 32")


def test_06_split_arithmetic(gate):
    got = {total: tuple(window_count(s) for s in split_counts(total)) for total in (16992, 17856)}
    want = {16992: (10172, 3375, 3376), 17856: (10690, 3548, 3549)}
    gate(6, "split arithmetic", got == want, f"{got}")


def test_07_augmentation_identities(gate, desk):
    ds, graph = desk
    rng = np.random.default_rng(7)
    batch = ds.instances("train").gather(np.arange(32))
    errs = {}
    for spec in (AugmentSpec("edge_mask", r_em=0.0), AugmentSpec("input_mask", r_im=0.0),
                 AugmentSpec("temporal_shift", r_ts=1.0), AugmentSpec("input_smooth", r_is=1.0)):
        x, adj = augment_batch(batch, [spec], graph.adjacency, graph.normalized, 0, 0, 0)
        err = np.abs(x - batch.x).max()
        if adj is not None:
            err = max(err, np.abs(adj - graph.adjacency).max())
        errs[spec.method] = err
    errs["edge_mask fn"] = np.abs(edge_mask(graph.adjacency, 0.0, rng) - graph.adjacency).max()
    errs["temporal_shift fn"] = np.abs(temporal_shift(batch.x[..., 0], batch.next_x, 1.0) - batch.x[..., 0]).max()
    errs["input_smooth fn"] = np.abs(input_smooth(batch.full[0], 20, 1.0, rng) - batch.full[0]).max()
    n = 100_000
    masked = int((input_mask(np.zeros(n), 0.01, rng) == -1.0).sum())
    band = 3 * np.sqrt(n * 0.01 * 0.99)
    ok = max(errs.values()) <= 1e-9 and abs(masked - n * 0.01) <= band
    gate(7, "augmentation identities", ok,
         f"max identity error {max(errs.values()):.1e}; masked {masked} of 1e5 (band {n * 0.01:.0f}±{band:.0f})")


def test_08_lambda_zero_is_base_only(gate, desk):
    ds, graph = desk
    a = train_joint(TrainConfig(scheme="joint", lam=0.0, epochs=3), ds, graph)
    b = train_joint(TrainConfig(scheme="base_only", epochs=3), ds, graph)
    same = json.dumps(a.epochs) == json.dumps(b.epochs) and a.test == b.test
    gate(8, "lambda = 0 matches base-only", same, f"{len(a.epochs)} epochs of losses bit-identical: {same}")


def test_09_directional_experiment(gate, tmp_path):
    result = run_directional(out_dir=tmp_path)
    m = result["mean_mae"]
    ok = result["mean_ok"] and result["horizon_ok"] and result["seconds"] < 20 * 60
    gaps = ", ".join(f"s{s}: h3 {g['h3']:+.3f} h12 {g['h12']:+.3f}" for s, g in result["gaps"].items())
    gate(9, "directional base vs JL-graph", ok,
         f"mean MAE base {m['base']:.3f} vs JL-graph {m['jl_graph']:.3f}; long-horizon gain wider in "
         f"{result['long_gap_wider']}/5 seeds (gains {gaps}); {result['seconds']:.0f}s")


def test_10_pretrain_finetune(gate, desk, tmp_path):
    ds, graph = desk
    cfg = TrainConfig(scheme="pretrain_finetune", pretrain_patience=10,
                      finetune_encoder_lr=1e-4, finetune_decoder_lr=1e-3)
    started = time.perf_counter()
    report = run(cfg, ds, graph, EncoderConfig(), tmp_path)
    written = json.loads((tmp_path / "report.json").read_text())
    ok = (written["pretrain"] and written["epochs"] and np.isfinite(written["test"]["average"]["mae"])
          and written["config"]["finetune_param_groups"] == ["dec", "enc"])
    gate(10, "pretrain & fine-tune end to end", bool(ok),
         f"{len(report.pretrain)} pretrain epochs, {len(report.epochs)} fine-tune epochs, "
         f"test MAE {report.test['average']['mae']:.3f}, {time.perf_counter() - started:.0f}s")


def test_11_determinism(gate, tmp_path):
    outs = []
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), "--seed", "0"]) == 0
        outs.append((tmp_path / name / "seed_0" / "metrics.jsonl").read_bytes())
    lines = outs[0].count(b"\n")
    gate(11, "byte-identical metrics.jsonl", outs[0] == outs[1] and lines > 0,
         f"{lines} epochs, identical: {outs[0] == outs[1]}")
