"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The desk-small grid (criteria 6, 8, 9) is trained once per session and shared.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.optimize as spo

import factories
import layer_checks
import oracles
from conftest import record_verdict, serving_series, second_series
from prnetplus import autodiff as ad
from prnetplus import experiments as ex
from prnetplus import mrdata
from prnetplus.losses import UncertaintyParams, joint_loss
from prnetplus.prnet import TINY, ModelConfig, init_params
from prnetplus.train import TrainConfig, batch_loss, encode_sequence, predict_encoded, train

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk_small.cfg"
SEEDS = (1, 2, 3)
FOLDS = (0, 1, 2, 3, 4)
GRID_BUDGET_S = 2 * 3600


def verdict(capsys, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    record_verdict(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# --- 1. gradients ---------------------------------------------------------------------------


def test_gradient_checks(capsys):
    start = time.perf_counter()
    worst = {name: max(fn(seed) for seed in range(100)) for name, fn in layer_checks.LAYERS.items()}
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    verdict(capsys, 1, ok, f"worst rel err {worst[top]:.2e} ({top}) over 100 seeds x {len(worst)} checks, {elapsed:.0f}s")


# --- 2. loss algebra ---------------------------------------------------------------------------


def test_loss_algebra(capsys):
    rng = np.random.default_rng(0)
    gaps, stationary = [], []
    for _ in range(200):
        l_loc, l_mode = rng.uniform(1e-3, 5.0, 2)
        j = joint_loss(l_loc, l_mode, 0.0, UncertaintyParams(0.0, 0.0, alpha=0.0)).item()
        gaps.append(abs(j - (0.5 * l_loc + 0.5 * l_mode)))

        # minimize over s1 = log sigma1^2 and compare sigma1^2 with l_loc
        def f(s1):
            return joint_loss(l_loc, l_mode, 0.0, UncertaintyParams(s1, 0.0, alpha=0.0)).item()

        res = spo.minimize_scalar(f, bracket=(-5.0, 5.0), tol=1e-12)
        stationary.append(abs(np.exp(res.x) - l_loc))
    ok = max(gaps) <= 1e-12 and max(stationary) <= 1e-6
    verdict(capsys, 2, ok, f"half-sum gap {max(gaps):.1e}, stationary-point gap {max(stationary):.1e}")


# --- 3. mask neutrality --------------------------------------------------------------------------


def test_padded_steps_get_zero_gradient(capsys):
    leak, checked = 0.0, 0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        for encoder in ("hierarchical", "local", "global"):
            cfg = replace(TINY, encoder=encoder)
            store = init_params(cfg, seed)
            lengths = sorted(rng.integers(1, 9, 4).tolist(), reverse=True)
            lengths[0] = 9
            batch = factories.random_batch(rng, cfg, lengths, unlabeled=0.2)
            x = ad.Tensor(batch.features, requires_grad=True)
            tcfg = TrainConfig(alpha=0.5, speed_interp=bool(seed % 2))
            with ad.Tape() as tape:
                res = batch_loss(batch, store, cfg, tcfg, factories.speed_dists(), factories.STATS, features=x)
            tape.backward(res.joint)
            pad = batch.steps == 0
            leak = max(leak, float(np.abs(x.grad[pad]).max()) if pad.any() else 0.0)
            checked += int(pad.sum())
    verdict(capsys, 3, leak == 0.0 and checked > 0, f"max |grad| on {checked} padded steps = {leak}")


# --- 4. segmentation oracles ----------------------------------------------------------------------


def test_segmentation_matches_oracles(capsys):
    A, B, C = (1, 1), (1, 2), (2, 1)
    mismatches, cases = 0, 0
    for ids in oracles.all_series(8, (A, B, C)):
        for tau in (1, 2, 3, 5, 8):
            got = [len(s) for s in mrdata.segment_sequences(serving_series(ids), tau)]
            mismatches += got != oracles.brute_segment_lengths(ids, tau)
            cases += 1
        mismatches += mrdata.split_subsequences(second_series(ids)) != oracles.brute_runs(list(ids))
        cases += 1
    rng = np.random.default_rng(0)
    alphabet = [A, B, C, (3, 1), (3, 2)]
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        ids = [alphabet[i] for i in rng.integers(0, len(alphabet), n)]
        tau = int(rng.integers(1, 12))
        got = [len(s) for s in mrdata.segment_sequences(serving_series(ids), tau)]
        mismatches += got != oracles.brute_segment_lengths(ids, tau)
        mismatches += mrdata.split_subsequences(second_series(ids)) != oracles.brute_runs(ids)
        cases += 2
    verdict(capsys, 4, mismatches == 0, f"{mismatches} mismatches in {cases} cases")


# --- 5. memorization ---------------------------------------------------------------------------------


def test_memorizes_two_sequences(capsys, tiny_dataset):
    seqs = mrdata.build_sequences(tiny_dataset.series, 8)
    seqs = sorted(seqs, key=len)[len(seqs) // 2 : len(seqs) // 2 + 2]
    mcfg = ModelConfig()
    start = time.perf_counter()
    res = train(seqs, TrainConfig(epochs=500, batch_size=2, lr=2e-3, lr_schedule="cosine"), mcfg)
    elapsed = time.perf_counter() - start
    enc = [encode_sequence(s, res.stats, mcfg.N) for s in seqs]
    preds = predict_encoded(res.store, mcfg, enc)
    loc = np.mean(np.concatenate([np.sum((p - e.positions) ** 2, axis=1) for (p, _), e in zip(preds, enc)]))
    acc = np.mean(np.concatenate([m.argmax(1) == e.modes for (_, m), e in zip(preds, enc)]))
    ok = loc < 1e-3 and acc == 1.0 and elapsed < 300
    verdict(capsys, 5, ok, f"loc loss {loc:.2e}, mode acc {acc:.3f}, {elapsed:.0f}s")


# --- 6, 8, 9. desk-small grid ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_grid(tmp_path_factory):
    spec = ex.spec_from_file(DESK_CFG, seeds=SEEDS, folds=FOLDS)
    cache = ex.DatasetCache()
    start = time.perf_counter()
    rows = ex.run_experiment(spec, out_dir=tmp_path_factory.mktemp("table"), cache=cache)
    table_s = time.perf_counter() - start
    abl = replace(spec, variants=("prnet_l", "prnet_g"), alphas=(0.05,))
    rows += ex.run_experiment(abl, out_dir=tmp_path_factory.mktemp("ablation"), cache=cache)
    return rows, table_s


def _mean(rows, variant, col, alpha=0.05):
    return float(np.mean([r[col] for r in rows if r["variant"] == variant and np.isclose(r["alpha"], alpha)]))


@pytest.mark.slow
def test_multitask_directional(capsys, desk_grid):
    rows, table_s = desk_grid
    full, pos = _mean(rows, "full", "median_m"), _mean(rows, "pos_only", "median_m")
    uni_med, uni_acc = _mean(rows, "uniform_weights", "median_m"), _mean(rows, "uniform_weights", "mode_acc")
    full_acc = _mean(rows, "full", "mode_acc")
    by_alpha = {a: _mean(rows, "full", "median_m", a) for a in (0.01, 0.05, 0.1)}
    a = full <= pos
    b = uni_med > full and uni_acc < full_acc
    c = by_alpha[0.05] <= 1.05 * min(by_alpha.values())
    ok = a and b and c and table_s < GRID_BUDGET_S
    detail = (f"(a) full {full:.1f} m vs pos-only {pos:.1f} m: {a}; "
              f"(b) uniform {uni_med:.1f} m / {uni_acc:.3f} vs full {full:.1f} m / {full_acc:.3f}: {b}; "
              f"(c) median by alpha {', '.join(f'{k}: {v:.1f}' for k, v in by_alpha.items())}: {c}; {table_s / 60:.0f} min")
    verdict(capsys, 6, ok, detail)


@pytest.mark.slow
def test_encoder_ablation_ordering(capsys, desk_grid):
    rows, _ = desk_grid
    full = _mean(rows, "full", "p90_m")
    local = _mean(rows, "prnet_l", "p90_m")
    glob = _mean(rows, "prnet_g", "p90_m")
    ok = local > full and glob < local
    verdict(capsys, 8, ok, f"p90 full {full:.1f} m, local-only {local:.1f} m, global {glob:.1f} m")


@pytest.mark.slow
def test_mode_beats_majority(capsys, desk_grid):
    rows, _ = desk_grid
    acc, maj = _mean(rows, "full", "mode_acc"), _mean(rows, "full", "majority")
    verdict(capsys, 9, acc - maj >= 0.15, f"mode acc {acc:.3f} vs majority {maj:.3f} (+{100 * (acc - maj):.1f} points)")


# --- 7. sweeps ------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_sweep_trends(capsys, tmp_path):
    spec = ex.spec_from_file(DESK_CFG)
    cache = ex.DatasetCache()
    reports = []
    for axis, values in (("time_interval", (3, 30, 60, 120)), ("station_density", (0.25, 0.5, 0.75, 1.0))):
        _, rep = ex.run_sweep(ex.SweepSpec(axis, values, SEEDS), spec.sim, spec.train, spec.model,
                              out_dir=tmp_path / axis, cache=cache)
        reports.append(rep)
    detail = "; ".join(
        f"{r.axis} rho {r.rho:+.2f} p {r.p_value:.3g} means {[round(m, 1) for m in r.means.values()]}" for r in reports
    )
    verdict(capsys, 7, all(r.holds for r in reports), detail)


# --- 10. determinism and checkpoints -----------------------------------------------------------------------


def test_determinism_and_round_trip(capsys, tiny_dataset, tmp_path):
    seqs = mrdata.build_sequences(tiny_dataset.series, 8)
    mcfg = ModelConfig(K=4, d_l=4, d_b=8, d_u=8, d_f=8, T=2)
    tcfg = TrainConfig(epochs=3, batch_size=4, seed=5)
    a, b = train(seqs, tcfg, mcfg), train(seqs, tcfg, mcfg)
    same_trace = a.trace == b.trace
    ad.save_checkpoint(a.store, tmp_path / "a.bin")
    loaded = ad.load_checkpoint(tmp_path / "a.bin")
    exact = set(loaded.names()) == set(a.store.names()) and all(
        np.array_equal(loaded[n], a.store[n]) and loaded[n].dtype == a.store[n].dtype for n in a.store.names()
    )
    ad.save_checkpoint(loaded, tmp_path / "b.bin")
    same_bytes = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    ok = same_trace and exact and same_bytes
    verdict(capsys, 10, ok, f"identical traces {same_trace}, bit-exact params {exact}, identical re-save {same_bytes}")
