"""End-to-end acceptance checks.  Each test records a PASS/FAIL line that is
printed in the terminal summary, so a red criterion still shows its numbers.

The slow criteria share one pretrain -> train pipeline run through the CLI.
"""
import csv
import dataclasses
import json
import time

import mpmath
import numpy as np
import pytest

from conftest import VERDICTS
from vmdnn.cli import OK, main
from vmdnn.codec import PopulationCodec, decode_analog, encode_analog
from vmdnn.config import ConvSpec, paper_config, tiny_config
from vmdnn.dynamics import activation, activation_derivative
from vmdnn.envsim import make_branching_dataset, run_trial, trial_steps
from vmdnn.errors import ConfigError
from vmdnn.network import build_network, reset_state, run_sequence
from vmdnn.training import _pad, load_checkpoint

GRAD_TOL = 1e-5
GRAD_SECONDS = 120
PRETRAIN_ACCURACY = 0.95
PRETRAIN_MAX_EPOCHS = 2000
PRETRAIN_SECONDS = 15 * 60
SMOOTH_BLOCK = 50
TRAIN_SECONDS = 30 * 60
RMSE_MAX = 0.05
CODEC_TOL = 0.01
DIVERGENCE_MIN = 0.1
SWEEP_TAUS = [30.0, 60.0, 90.0, 150.0, 210.0]


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def timed(argv):
    start = time.perf_counter()
    code = main(argv)
    return code, time.perf_counter() - start


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def gradcheck_run(runs):
    return timed(["gradcheck", "--config", "tiny", "--seed", "0", "--out", str(runs / "grad")])


@pytest.fixture(scope="module")
def pretrain_run(runs):
    return timed(["pretrain", "--config", "toy", "--seed", "0", "--out", str(runs / "pre")])


@pytest.fixture(scope="module")
def train_run(runs, pretrain_run):
    assert pretrain_run[0] == OK
    return timed(["train", "--checkpoint", str(runs / "pre" / "pretrained.ckpt"), "--seed", "0",
                  "--out", str(runs / "train")])


@pytest.fixture(scope="module")
def trained(runs, train_run):
    assert train_run[0] == OK
    params, cfg = load_checkpoint(runs / "train" / "trained.ckpt")
    seqs = make_branching_dataset(cfg.world, 0, sigma=cfg.sigma)
    trials = [run_trial(params, s.world_init, trial_steps(len(s)), cfg.world, cfg.sigma) for s in seqs]
    return params, cfg, seqs, trials


def test_criterion_01_gradient_oracle(runs, gradcheck_run):
    code, seconds = gradcheck_run
    report = rows(runs / "grad" / "gradcheck.csv")
    worst = max(float(r["worst"]) for r in report)
    strict_bad = sum(float(r["strict"]) > GRAD_TOL for r in report)
    unresolved = sum(int(r["unresolved"]) for r in report)
    groups = {r["group"] for r in report}
    kinds = {"vf.kernel", "pfc.kernel", "ms.rec"} <= groups
    n = build_network(tiny_config().network)[0].count()
    verdict(1, code == OK and worst <= GRAD_TOL and kinds and seconds <= GRAD_SECONDS,
            f"{len(report)} groups on {n} params, worst {worst:.2e} (strict misses in {strict_bad} groups, "
            f"{unresolved} entries below the difference noise), {seconds:.1f}s")


def test_criterion_02_full_size_shapes():
    cfg = paper_config().network
    params, _ = build_network(cfg)
    geo = cfg.geometry()
    chain = [geo["vi"], geo["vf"], geo["vs"], geo["pfc"], cfg.ms_units, cfg.mf_units, cfg.output_units]
    expected = [(1, 64, 48), (3, 22, 18), (6, 8, 7), (20, 1, 1), 30, 50, 110]
    kernels = [params["vf.kernel"].shape, params["vs.kernel"].shape, params["pfc.kernel"].shape]
    strides = (cfg.vf.stride, cfg.vs.stride, cfg.pfc_stride)
    ok = chain == expected and kernels == [(3, 1, 22, 14), (6, 3, 8, 6), (20, 6, 8, 7)] and strides == (2, 2, 1)

    perturbed = []
    for d in (-1, 1):
        perturbed.append(dataclasses.replace(cfg, retina=(64 + d, 48)))
        perturbed.append(dataclasses.replace(cfg, retina=(64, 48 + d)))
        perturbed.append(dataclasses.replace(cfg, pfc_kernel=(8 + d, 7)))
        perturbed.append(dataclasses.replace(cfg, pfc_kernel=(8, 7 + d)))
        perturbed.append(dataclasses.replace(cfg, pfc_stride=1 + d))
        for lvl in ("vf", "vs"):
            spec: ConvSpec = getattr(cfg, lvl)
            kx, ky = spec.kernel
            for change in ({"kernel": (kx + d, ky)}, {"kernel": (kx, ky + d)}, {"stride": spec.stride + d}):
                perturbed.append(dataclasses.replace(cfg, **{lvl: dataclasses.replace(spec, **change)}))
    accepted = 0
    for bad in perturbed:
        try:
            build_network(bad)
            accepted += 1
        except ConfigError:
            pass
    verdict(2, ok and accepted == 0,
            f"chain {' -> '.join(map(str, chain))}; {len(perturbed) - accepted}/{len(perturbed)} "
            "single-number perturbations rejected")


def test_criterion_03_activation_constants():
    mpmath.mp.dps = 50
    f1 = mpmath.mpf("1.7159") * mpmath.tanh(mpmath.mpf("0.6667"))
    d0 = mpmath.mpf("1.7159") * mpmath.mpf("0.6667")
    got_f1 = float(activation(np.array(1.0)))
    got_d0 = float(activation_derivative(np.array(0.0)))
    ok = abs(got_f1 - 1.0) <= 1e-3 and abs(got_f1 - float(f1)) <= 1e-15 and abs(got_d0 - float(d0)) <= 1e-6
    verdict(3, ok, f"f(1) = {got_f1:.6f}, f'(0) = {got_d0:.8f} (oracle {float(d0):.8f})")


def test_criterion_04_codec_roundtrip():
    codec = PopulationCodec(1, 10, 0.05)
    grid = np.round(np.arange(-19, 20) * 0.05, 2)
    err = np.abs(decode_analog(encode_analog(grid[:, None], codec), codec)[:, 0] - grid)
    bad = grid[err > CODEC_TOL]
    verdict(4, len(grid) == 39 and bad.size == 0,
            f"max error {err.max():.4f} at v = {grid[err.argmax()]:+.2f}; {bad.size}/39 values over {CODEC_TOL} "
            f"({', '.join(f'{v:+.2f}' for v in bad)}); interior |v| <= 0.8 max {err[np.abs(grid) <= 0.8].max():.4f}")


def test_criterion_05_pretraining(runs, pretrain_run):
    code, seconds = pretrain_run
    manifest = json.loads((runs / "pre" / "manifest.json").read_text())
    acc = manifest["results"]["accuracy"]
    loss = np.array([float(r["loss"]) for r in rows(runs / "pre" / "pretrain.csv")])
    blocks = loss[: len(loss) // SMOOTH_BLOCK * SMOOTH_BLOCK].reshape(-1, SMOOTH_BLOCK).mean(1)
    monotone = bool(np.all(np.diff(blocks) <= 0))
    ok = code == OK and acc >= PRETRAIN_ACCURACY and len(loss) <= PRETRAIN_MAX_EPOCHS and monotone \
        and seconds <= PRETRAIN_SECONDS
    verdict(5, ok, f"accuracy {acc:.3f} after {len(loss)} epochs; {SMOOTH_BLOCK}-epoch block means "
                   f"{'nonincreasing' if monotone else 'NOT monotone'} ({blocks[0]:.3g} -> {blocks[-1]:.3g}); "
                   f"{seconds:.0f}s")


def test_criterion_06_coupled_training(runs, train_run, trained):
    code, seconds = train_run
    pre, _ = load_checkpoint(runs / "pre" / "pretrained.ckpt")
    params, cfg, seqs, trials = trained
    vision = [n for n in pre.arrays if n.startswith(("vf.", "vs."))]
    frozen_same = all(np.array_equal(pre[n], params[n]) for n in vision) and set(vision) <= params.frozen
    x, valid = _pad([s.frames for s in seqs])
    targets, _ = _pad([s.targets for s in seqs])
    codec = PopulationCodec(cfg.network.dims, cfg.network.units_per_dim, cfg.sigma)
    decoded = decode_analog(run_sequence(params, x).outputs, codec)
    rmse = np.sqrt(((decoded - targets) ** 2 * valid[..., None]).sum((0, 1)) / valid.sum())
    wins = sum(t.success for t in trials)
    ok = code == OK and frozen_same and wins == len(seqs) == 8 and np.all(rmse <= RMSE_MAX) \
        and seconds <= TRAIN_SECONDS
    verdict(6, ok, f"{wins}/{len(seqs)} closed-loop successes; vision bit-identical: {frozen_same}; "
                   f"RMSE per channel {np.array2string(rmse, precision=4)}; {seconds:.0f}s")


def test_criterion_07_pfc_divergence(runs, trained):
    params, cfg, seqs, _ = trained
    a, b = 0, 4
    assert seqs[a].label % 4 == seqs[b].label % 4 and seqs[a].label != seqs[b].label
    assert main(["divergence", "--checkpoint", str(runs / "train" / "trained.ckpt"), "--cases", f"{a},{b}",
                 "--out", str(runs / "div")]) == OK
    table = rows(runs / "div" / "divergence.csv")
    dist = np.array([float(r["distance"]) for r in table])
    proj_a = np.array([[float(r["a_pc1"]), float(r["a_pc2"])] for r in table])
    proj_b = np.array([[float(r["b_pc1"]), float(r["b_pc2"])] for r in table])
    onset = seqs[a].world_init.cue.onset
    pre_zero = bool(np.all(dist[:onset] == 0.0))
    stages = [r["stage"] for r in table]
    after = np.array([i > onset and s != "cue" for i, s in enumerate(stages)])
    gap = np.linalg.norm(proj_a - proj_b, axis=1)
    separated = bool(np.all(gap[after] > 0)) and gap[after].mean() > DIVERGENCE_MIN
    ok = pre_zero and dist[onset:].max() > DIVERGENCE_MIN and separated
    verdict(7, ok, f"distance 0 for the {onset} pre-cue steps: {pre_zero}; max post-cue {dist[onset:].max():.3f}; "
                   f"2-PC gap after the cue stage min {gap[after].min():.3f} mean {gap[after].mean():.3f}")


def test_criterion_08_leak_bound(trained):
    params, cfg, _, trials = trained
    net = cfg.network
    taus = {"vf": net.vf.tau, "vs": net.vs.tau, "pfc": net.pfc_tau, "ms": net.ms_tau, "mf": net.mf_tau,
            "mo": net.mo_tau}
    init = reset_state(net).u
    worst = 0.0
    for trial in trials:
        for level, tau in taus.items():
            u = trial.u[level]
            prev = np.concatenate([init[level][:1], u[:-1]])
            step = np.abs(u - prev)
            bound = np.abs(trial.drive[level] - prev) / tau
            worst = max(worst, float((step - bound).max() / (1.0 + np.abs(bound).max())))
    mean_dy = {k: float(np.mean([np.abs(np.diff(t.y[k], axis=0)).mean() for t in trials])) for k in ("pfc", "mf")}
    verdict(8, worst <= 1e-12,
            f"max excess over |drive - u_prev|/tau {worst:.1e} across {len(trials)} trials x 6 levels; "
            f"mean |dy| per step PFC {mean_dy['pfc']:.4f} vs MF {mean_dy['mf']:.4f}")


def test_criterion_09_sweep(runs, pretrain_run):
    out = runs / "sweep"
    code = main(["sweep-tau", "--checkpoint", str(runs / "pre" / "pretrained.ckpt"), "--epochs", "300",
                 "--held-out", "5", "--out", str(out)])
    table = rows(out / "sweep.csv") if code == OK else []
    taus = [float(r["tau_pfc"]) for r in table]
    rates = ", ".join(f"{float(r['tau_pfc']):g}: {float(r['success_rate']):.2f}" for r in table)
    verdict(9, code == OK and taus == SWEEP_TAUS, f"five rows (reduced: 300 epochs, 5 held-out) {rates}")


def _strip_seconds(path):
    table = [r for r in csv.reader(open(path))]
    drop = table[0].index("seconds") if "seconds" in table[0] else None
    return [[v for i, v in enumerate(r) if i != drop] for r in table]


def _manifest(path):
    m = json.loads(path.read_text())
    for key in ("out", "argv"):
        m.pop(key)
    return m


def test_criterion_10_determinism(runs, gradcheck_run, pretrain_run, train_run):
    again = runs / "again"
    assert main(["gradcheck", "--config", "tiny", "--seed", "0", "--out", str(again / "grad")]) == OK
    assert main(["pretrain", "--config", "toy", "--seed", "0", "--out", str(again / "pre")]) == OK
    assert main(["train", "--checkpoint", str(again / "pre" / "pretrained.ckpt"), "--seed", "0",
                 "--out", str(again / "train")]) == OK
    diffs = []
    for sub, name in [("grad", "gradcheck.csv"), ("pre", "pretrain.csv"), ("train", "train.csv")]:
        if _strip_seconds(runs / sub / name) != _strip_seconds(again / sub / name):
            diffs.append(name)
    for sub, name in [("pre", "pretrained.ckpt"), ("train", "trained.ckpt")]:
        if (runs / sub / name).read_bytes() != (again / sub / name).read_bytes():
            diffs.append(name)
    for sub in ("grad", "pre", "train"):
        if _manifest(runs / sub / "manifest.json") != _manifest(again / sub / "manifest.json"):
            diffs.append(f"{sub}/manifest.json")
    verdict(10, not diffs, "checkpoints, CSVs (wall-clock column excluded) and manifests identical"
            if not diffs else f"differences in {diffs}")
