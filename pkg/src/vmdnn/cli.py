"""Command-line entry point: ``vmdnn <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .errors import NumericalDivergence, VMDNNError
from .gradcheck import check_gradients, random_problem, randomize
from .network import attach_pretraining_head, build_network, detach_pretraining_head, run_sequence
from .training import (EPS, bptt, classify, load_checkpoint, pretrain, save_checkpoint, train_coupled,
                       write_records)
from . import envsim

OK, VERIFY_FAILED, USAGE, DIVERGED = 0, 1, 2, 3
MAX_PARAMS = 50_000
SWEEP_TAUS = (30.0, 60.0, 90.0, 150.0, 210.0)


class UsageError(VMDNNError):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Outputs:
    """Tracks files written by a command so a failed run leaves nothing half-written behind."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created: list[Path] = []
        self.results: dict = {}  # headline numbers copied into the manifest
        self.made_dir = not self.dir.exists()

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        if not p.exists():
            self.created.append(p)
        return p

    def discard(self) -> None:
        for p in self.created:
            with contextlib.suppress(FileNotFoundError):
                p.unlink()
            with contextlib.suppress(FileNotFoundError):
                Path(str(p) + ".tmp").unlink()
        if self.made_dir and self.dir.exists() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _config(args) -> Config:
    return load_config(args.config)


def _write_manifest(outs: Outputs, args, argv, extra: dict | None = None) -> None:
    manifest = {"command": args.command, "argv": list(argv), "config": args.config, "seed": args.seed,
                "out": str(outs.dir), "version": version_string()}
    manifest.update(extra or {})
    outs.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _guard_size(params, force: bool) -> None:
    n = params.count()
    if n > MAX_PARAMS and not force:
        raise UsageError(f"network has {n} parameters (> {MAX_PARAMS}); pass --force to run anyway")


def _load_teachers(args, cfg: Config, kind: str):
    if args.dataset:
        return envsim.read_dataset(args.dataset)
    if kind == "reach":
        return envsim.make_reach_dataset(cfg.world, args.seed, cfg.sigma)[0]
    return envsim.make_branching_dataset(cfg.world, args.seed, sigma=cfg.sigma)


def _load_params(args, cfg: Config | None = None):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    params, stored = load_checkpoint(args.checkpoint, cfg.network if cfg is not None else None)
    return params, stored


# --- commands ----------------------------------------------------------------

def cmd_gradcheck(args, outs: Outputs, backward=bptt) -> int:
    cfg = load_config(args.config or "tiny")
    params, _ = build_network(cfg.network, args.seed)
    _guard_size(params, args.force)
    randomize(params, 1.0, args.seed)
    frames, targets, mask = random_problem(params, args.steps, batch=2, seed=args.seed)
    clamped = int(((run_sequence(params, frames).outputs < EPS) & (targets > 0)).sum())
    if clamped:
        # the y - target delta is not the derivative of the floored log, so mismatches are expected
        print(f"warning: {clamped} target-bearing outputs fall below the KL floor {EPS:g}; "
              "try a smaller network or fewer --steps", file=sys.stderr)
    reports = check_gradients(params, frames, targets, mask, backward=backward)
    rows = [["group", "worst", "strict", "index", "analytic", "numeric", "unresolved"]]
    failed = []
    for r in reports:
        print(f"{r.name:12s} worst {r.worst:.3e} strict {r.strict:.3e} at {r.index} "
              f"(analytic {r.analytic:+.6e}, numeric {r.numeric:+.6e})")
        rows.append([r.name, repr(r.worst), repr(r.strict), "/".join(map(str, r.index)), repr(r.analytic),
                     repr(r.numeric), r.unresolved])
        if not r.passed():
            failed.append(r)
    with open(outs.path("gradcheck.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    if failed:
        for r in failed:
            print(f"FAIL {r.name} index {r.index}: relative error {r.worst:.3e} > 1e-5", file=sys.stderr)
        return VERIFY_FAILED
    return OK


def cmd_make_dataset(args, outs: Outputs) -> int:
    cfg = _config(args)
    if args.kind == "reach":
        seqs = envsim.make_reach_dataset(cfg.world, args.seed, cfg.sigma)[0]
    else:
        seqs = envsim.make_branching_dataset(cfg.world, args.seed, sigma=cfg.sigma)
    envsim.write_dataset(outs.path(f"{args.kind}.vmds"), seqs, cfg.network.units_per_dim)
    print(f"wrote {len(seqs)} sequences to {outs.dir / (args.kind + '.vmds')}")
    return OK


def cmd_pretrain(args, outs: Outputs) -> int:
    cfg = _config(args)
    t = cfg.train
    params, _ = build_network(cfg.network, args.seed)
    _guard_size(params, args.force)
    attach_pretraining_head(params, 2, seed=args.seed)
    frames, labels = envsim.make_moving_dot_dataset(cfg.world, args.seed)
    epochs = t.pretrain_epochs if args.epochs is None else args.epochs
    lr = t.pretrain_lr if args.lr is None else args.lr
    params, records = pretrain(params, frames, labels, epochs, lr, t.window, t.pretrain_momentum,
                               t.pretrain_clip)
    acc = float(np.mean(classify(params, frames, t.window) == labels))
    write_records(records, outs.path("pretrain.csv"))
    detach_pretraining_head(params)
    save_checkpoint(params, cfg, outs.path("pretrained.ckpt"))
    outs.results.update(accuracy=acc, final_loss=records[-1].loss)
    print(f"pretraining: {epochs} epochs, final loss {records[-1].loss:.6g}, accuracy {acc:.3f}")
    return OK


def cmd_train(args, outs: Outputs) -> int:
    params, stored = _load_params(args)
    cfg = load_config(args.config) if args.config else stored
    if cfg.network != stored.network:
        raise UsageError("--config describes a different network than the checkpoint")
    t = cfg.train
    seqs = _load_teachers(args, cfg, args.kind)
    epochs = t.epochs if args.epochs is None else args.epochs
    lr = t.lr if args.lr is None else args.lr
    params, records = train_coupled(params, [s.frames for s in seqs], [s.targets for s in seqs], epochs, lr,
                                    cfg.sigma, t.momentum, t.clip)
    write_records(records, outs.path("train.csv"))
    save_checkpoint(params, cfg, outs.path("trained.ckpt"))
    outs.results["final_loss"] = records[-1].loss
    print(f"coupled training: {epochs} epochs, final loss {records[-1].loss:.6g}")
    return OK


def cmd_trial(args, outs: Outputs) -> int:
    params, cfg = _load_params(args)
    seqs = _load_teachers(args, cfg, args.kind)
    with open(outs.path("trials.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "name", "label", "success", "success_step", "steps", "failure"])
        wins = 0
        for i, s in enumerate(seqs):
            steps = envsim.trial_steps(len(s))
            r = envsim.run_trial(params, s.world_init, steps, cfg.world, cfg.sigma)
            wins += r.success
            w.writerow([i, s.name, s.label, int(r.success), r.success_step or "", steps, r.failure])
    outs.results.update(successes=wins, trials=len(seqs))
    print(f"{wins}/{len(seqs)} trials succeeded")
    return OK


def cmd_divergence(args, outs: Outputs) -> int:
    params, cfg = _load_params(args)
    seqs = _load_teachers(args, cfg, "branching")
    a, b = (int(c) for c in args.cases.split(","))
    steps = max(len(seqs[a]), len(seqs[b]))
    ta = envsim.run_trial(params, seqs[a].world_init, steps, cfg.world, cfg.sigma)
    tb = envsim.run_trial(params, seqs[b].world_init, steps, cfg.world, cfg.sigma)
    report = envsim.pfc_divergence_report(ta.pfc, tb.pfc, seqs[a].stages)
    report.write_csv(outs.path("divergence.csv"))
    print(f"max PFC distance {report.distance.max():.4f} between cases {a} and {b}")
    return OK


def cmd_sweep_tau(args, outs: Outputs) -> int:
    params0, cfg = _load_params(args)
    t = cfg.train
    train_seqs, held_out = envsim.make_reach_dataset(cfg.world, args.seed, cfg.sigma)
    worlds = held_out(args.held_out)
    steps = envsim.trial_steps(max(len(s) for s in train_seqs))
    epochs = t.epochs if args.epochs is None else args.epochs
    lr = t.lr if args.lr is None else args.lr
    taus = [float(v) for v in args.taus.split(",")] if args.taus else list(SWEEP_TAUS)
    with open(outs.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_pfc", "success_rate", "successes", "trials", "final_loss"])
        for tau in taus:
            net = dataclasses.replace(params0.config, pfc_tau=tau)
            params = params0.copy()
            params.config = net
            params, records = train_coupled(params, [s.frames for s in train_seqs],
                                            [s.targets for s in train_seqs], epochs, lr, cfg.sigma, t.momentum,
                                            t.clip)
            wins = sum(envsim.run_trial(params, world, steps, cfg.world, cfg.sigma).success for world in worlds)
            w.writerow([tau, repr(wins / len(worlds)), wins, len(worlds), repr(records[-1].loss)])
            fh.flush()
            print(f"tau_pfc {tau:g}: {wins}/{len(worlds)} held-out successes")
    return OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "make-dataset": cmd_make_dataset,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "trial": cmd_trial,
    "divergence": cmd_divergence,
    "sweep-tau": cmd_sweep_tau,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name (paper, toy, tiny); default toy")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--force", action="store_true", help=f"allow networks over {MAX_PARAMS} parameters")

    parser = argparse.ArgumentParser(prog="vmdnn", description="Train and evaluate the visuo-motor network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of BPTT (tiny config)")
    p.add_argument("--steps", type=int, default=10)

    p = sub.add_parser("make-dataset", parents=[common], help="write a teacher dataset file")
    p.add_argument("--kind", choices=["branching", "reach"], default="branching")

    p = sub.add_parser("pretrain", parents=[common], help="delay-response pretraining on the moving-dot set")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    for name, help_text in (("train", "coupled training from a pretrained checkpoint"),
                            ("trial", "closed-loop trials on every teacher case")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--dataset", help="dataset file; default generates the teacher set")
        p.add_argument("--kind", choices=["branching", "reach"], default="branching")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)

    p = sub.add_parser("divergence", parents=[common], help="PFC distance between two closed-loop trials")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--cases", default="0,4", help="two branching case indices differing only in cue")

    p = sub.add_parser("sweep-tau", parents=[common], help="retrain over PFC time constants on the reach set")
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--taus", help="comma-separated list; default 30,60,90,150,210")
    p.add_argument("--held-out", type=int, default=20)
    return parser


def _limit_threads():
    n = os.environ.get("VMDNN_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None, backward=bptt) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    outs = Outputs(args.out)
    try:
        with _limit_threads():
            if args.command == "gradcheck":
                code = cmd_gradcheck(args, outs, backward)
            else:
                code = COMMANDS[args.command](args, outs)
        _write_manifest(outs, args, argv, {"exit_code": code, "results": outs.results})
        return code
    except NumericalDivergence as exc:
        outs.discard()
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return DIVERGED
    except (VMDNNError, OSError, ValueError) as exc:
        outs.discard()
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except BaseException:
        outs.discard()
        raise


if __name__ == "__main__":
    sys.exit(main())
