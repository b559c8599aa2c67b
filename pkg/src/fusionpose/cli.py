"""``fusionpose`` command-line entry point.

Subcommands: generate, pseudolabel, train, eval, eval-pseudo, gradcheck.
Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

Every option can also come from a JSON file passed with ``--config``;
explicit flags win over the file, which wins over the built-in defaults.
The file may hold a flat object or one object per subcommand name.
``FUSIONPOSE_THREADS`` caps BLAS threads and generation workers.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from fusionpose import dataio, evaluation, nn, pseudolabel, synth, train
from fusionpose.model import N_JOINTS

THREADS_ENV = "FUSIONPOSE_THREADS"
GRADCHECK_TOL = 1e-4
GRADCHECK_EPS_WARN = 1e-2
WEIGHTING_FLAGS = {"3d": "three_d", "2d": "two_d_baseline"}
MODE_FLAGS = {"supervised": "supervised", "weak": "weakly_supervised"}

DEFAULTS = {
    "generate": {"n": 100, "seed": 42, "noise_profile": "nominal"},
    "pseudolabel": {"weighting": "3d", "radius_px": 10.0, "max_neighbors": 20, "threshold": 0.8},
    "train": {"mode": "supervised", "epochs": None, "lr": 5e-4, "seed": 42, "variant": "fusion",
              "batch_size": 64, "threshold": 0.8, "val": None, "log_out": None},
    "eval": {"variant": None, "seed": 42, "report_out": None, "per_sample_out": None},
    "eval-pseudo": {"weighting": "3d", "radius_px": 10.0, "max_neighbors": 20, "threshold": 0.8,
                    "report_out": None, "per_sample_out": None},
    "gradcheck": {"seed": [42], "batch": 8, "epsilon": 1e-5, "variant": "fusion", "inject_bug": False},
}


class UsageError(Exception):
    pass


def _d(cmd: str, key: str) -> str:
    v = DEFAULTS[cmd][key]
    return "per mode" if v is None and key == "epochs" else str(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusionpose", description="LiDAR + 2D keypoint 3D pose estimation pipeline.")
    p.add_argument("--config", type=Path, help="JSON file with option values (flags take precedence)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    S = argparse.SUPPRESS

    g = sub.add_parser("generate", help="write a synthetic dataset", argument_default=S)
    g.add_argument("--out", type=Path, required=True, help="output sample file (.jsonl or .jsonl.gz)")
    g.add_argument("--n", type=int, help=f"number of samples (default {_d('generate', 'n')})")
    g.add_argument("--seed", type=int, help=f"random seed (default {_d('generate', 'seed')})")
    g.add_argument("--noise-profile", choices=sorted(synth.NOISE_PROFILES),
                   help=f"sensor noise preset (default {_d('generate', 'noise_profile')})")
    g.add_argument("--manifest-out", type=Path, help="manifest path (default: <out>.manifest.json)")

    pl = sub.add_parser("pseudolabel", help="attach 3D pseudo-labels to a dataset", argument_default=S)
    pl.add_argument("--in", dest="inp", type=Path, required=True, help="input sample file")
    pl.add_argument("--out", type=Path, required=True, help="output sample file")
    _pseudo_flags(pl, "pseudolabel")

    t = sub.add_parser("train", help="train a model and write a checkpoint", argument_default=S)
    t.add_argument("--train", type=Path, required=True, help="training sample file")
    t.add_argument("--val", type=Path, help="validation file with gt3d, scored every epoch")
    t.add_argument("--mode", choices=sorted(MODE_FLAGS),
                   help="supervised uses gt3d, weak uses pseudo3d (default supervised)")
    t.add_argument("--epochs", type=int, help="epochs (default 250 supervised, 25 weak)")
    t.add_argument("--lr", type=float, help=f"Adam learning rate (default {_d('train', 'lr')})")
    t.add_argument("--seed", type=int, help=f"random seed (default {_d('train', 'seed')})")
    t.add_argument("--variant", choices=nn.VARIANTS, help=f"model variant (default {_d('train', 'variant')})")
    t.add_argument("--batch-size", type=int, help=f"mini-batch size (default {_d('train', 'batch_size')})")
    t.add_argument("--threshold", type=float,
                   help=f"confidence threshold t for weak targets (default {_d('train', 'threshold')})")
    t.add_argument("--checkpoint-out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--log-out", type=Path, help="per-epoch CSV log")

    e = sub.add_parser("eval", help="score a checkpoint on a test set", argument_default=S)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--test", type=Path, required=True, help="test sample file with gt3d")
    e.add_argument("--variant", choices=nn.VARIANTS, help="model variant (default: the one it was trained as)")
    e.add_argument("--seed", type=int, help=f"point resampling seed (default {_d('eval', 'seed')})")
    e.add_argument("--report-out", type=Path, help="CSV report path")
    e.add_argument("--per-sample-out", type=Path, help="per-sample errors, one JSON record per line")

    ep = sub.add_parser("eval-pseudo", help="score pseudo-labels against ground truth", argument_default=S)
    ep.add_argument("--test", type=Path, required=True, help="test sample file with gt3d")
    _pseudo_flags(ep, "eval-pseudo")
    ep.add_argument("--report-out", type=Path, help="CSV report path")
    ep.add_argument("--per-sample-out", type=Path, help="per-sample errors, one JSON record per line")

    gc = sub.add_parser("gradcheck", help="finite-difference check of backpropagation", argument_default=S)
    gc.add_argument("--seed", type=int, nargs="+", help="one or more seeds (default 42)")
    gc.add_argument("--batch", type=int, help=f"batch size (default {_d('gradcheck', 'batch')})")
    gc.add_argument("--epsilon", type=float, help=f"central-difference step (default {_d('gradcheck', 'epsilon')})")
    gc.add_argument("--variant", choices=nn.VARIANTS, help="model variant (default fusion)")
    gc.add_argument("--inject-bug", action="store_true", help=S)
    return p


def _pseudo_flags(p, cmd):
    p.add_argument("--weighting", choices=sorted(WEIGHTING_FLAGS),
                   help=f"3d: distance to neighborhood mean; 2d: pixel distance (default {_d(cmd, 'weighting')})")
    p.add_argument("--radius-px", type=float, help=f"neighborhood radius in pixels (default {_d(cmd, 'radius_px')})")
    p.add_argument("--max-neighbors", type=int, help=f"points per joint at most (default {_d(cmd, 'max_neighbors')})")
    p.add_argument("--threshold", type=float,
                   help=f"keypoint confidence needed for a label (default {_d(cmd, 'threshold')})")


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cmd = args.command
    opts = dict(DEFAULTS[cmd])
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        section = cfg.get(cmd, cfg)
        if not isinstance(section, dict):
            raise UsageError(f"config entry for {cmd!r} must be an object")
        for k, v in section.items():
            key = k.replace("-", "_")
            if key in opts:
                opts[key] = v
    opts.update({k: v for k, v in vars(args).items() if k not in ("command", "config")})
    if cmd == "gradcheck" and isinstance(opts["seed"], int):
        opts["seed"] = [opts["seed"]]
    return opts


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _pseudo_config(o) -> pseudolabel.PseudoLabelConfig:
    if o["weighting"] not in WEIGHTING_FLAGS:
        raise UsageError(f"--weighting must be one of {sorted(WEIGHTING_FLAGS)}")
    try:
        return pseudolabel.PseudoLabelConfig(radius_px=o["radius_px"], max_neighbors=o["max_neighbors"],
                                             weighting=WEIGHTING_FLAGS[o["weighting"]],
                                             confidence_threshold=o["threshold"])
    except ValueError as e:
        raise UsageError(str(e))


# --- commands -----------------------------------------------------------------------------

def cmd_generate(o) -> int:
    if o["n"] < 0:
        raise UsageError("--n must be non-negative")
    try:
        cfg = synth.profile_config(o["noise_profile"], n_samples=o["n"], rng_seed=o["seed"])
    except ValueError as e:
        raise UsageError(str(e))
    workers = o.get("_threads") or 1
    samples = synth.generate_dataset(cfg, workers=workers)
    entry = dataio.write_samples(samples, o["out"])
    manifest = dataio.DatasetManifest(
        stage_counts={"generated": len(samples)},
        split_sizes={},
        config_hash=dataio.config_hash(cfg),
        seed=o["seed"],
        extra={"noise_profile": o["noise_profile"], "synth_config": dataio.to_plain(cfg), "file": entry},
    )
    mpath = o.get("manifest_out") or Path(str(o["out"]) + ".manifest.json")
    manifest.write(mpath)
    print(f"wrote {len(samples)} samples ({o['noise_profile']}, seed {o['seed']}) to {o['out']}")
    return 0


def cmd_pseudolabel(o) -> int:
    cfg = _pseudo_config(o)
    samples = dataio.read_samples(o["inp"])
    labeled, cov = pseudolabel.label_dataset(samples, cfg)
    print(f"weighting={o['weighting']} radius_px={cfg.radius_px:g} max_neighbors={cfg.max_neighbors} "
          f"t={cfg.confidence_threshold:g}")
    print(f"confident joints: {cov.confident}  labeled: {cov.labeled}  coverage: {100 * cov.fraction:.2f}%  "
          f"samples with labels: {cov.samples_with_labels}/{cov.samples}")
    if cov.samples_with_labels == 0:
        print("error: no sample obtained a pseudo-label", file=sys.stderr)
        return 1
    dataio.write_samples(labeled, o["out"])
    return 0


def cmd_train(o) -> int:
    mode = MODE_FLAGS.get(o["mode"])
    if mode is None:
        raise UsageError(f"--mode must be one of {sorted(MODE_FLAGS)}")
    try:
        cfg = train.TrainConfig(mode=mode, epochs=o["epochs"], learning_rate=o["lr"], seed=o["seed"],
                                variant=o["variant"], batch_size=o["batch_size"],
                                confidence_threshold=o["threshold"])
    except ValueError as e:
        raise UsageError(str(e))
    print(f"mode={o['mode']} variant={cfg.variant} epochs={cfg.epochs} lr={cfg.learning_rate:g} "
          f"decay={cfg.lr_decay_per_epoch if mode == 'weakly_supervised' else 1.0:g} t={cfg.confidence_threshold:g} "
          f"batch={cfg.batch_size} seed={cfg.seed}")
    data = dataio.read_samples(o["train"])
    val = dataio.read_samples(o["val"]) if o["val"] else None
    t0 = time.perf_counter()

    def progress(row: train.EpochLog):
        print(f"epoch {row.epoch:4d}  lr {row.lr:.3g}  loss {row.train_loss:.5f}  val {row.val_mpjpe_cm:.2f} cm  "
              f"[{time.perf_counter() - t0:.0f}s]", flush=True)

    result = train.train(data, cfg, val=val, progress=progress)
    meta = {"mode": mode, "variant": cfg.variant, "epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
            "confidence_threshold": cfg.confidence_threshold, "batch_size": cfg.batch_size,
            "config_hash": dataio.config_hash(cfg), "train_file_sha256": dataio.file_digest(o["train"])}
    nn.save_checkpoint(o["checkpoint_out"], result.params, cfg.seed, meta)
    if o["log_out"]:
        train.write_log_csv(result.log, o["log_out"])
    print(f"wrote {o['checkpoint_out']}")
    return 0


def _emit(reports, o) -> None:
    print(evaluation.format_table(reports, per_joint=True))
    if o.get("report_out"):
        evaluation.write_report_csv(reports, o["report_out"])
    if o.get("per_sample_out"):
        evaluation.write_per_sample(reports[0], o["per_sample_out"])


def cmd_eval(o) -> int:
    params, _, meta = nn.load_checkpoint(o["checkpoint"])
    variant = o["variant"] or meta.get("variant", "fusion")
    test = dataio.read_samples(o["test"])
    _emit([evaluation.evaluate(params, test, variant, seed=o["seed"])], o)
    return 0


def cmd_eval_pseudo(o) -> int:
    cfg = _pseudo_config(o)
    test = dataio.read_samples(o["test"])
    _emit([evaluation.evaluate_pseudo_labels(test, cfg)], o)
    return 0


def random_batch(seed: int, batch: int, arch: nn.Architecture = nn.Architecture()) -> nn.Batch:
    rng = np.random.default_rng(seed)
    valid = rng.random((batch, N_JOINTS)) < 0.85
    valid[:, 0] = True
    return nn.Batch(
        x=rng.normal(size=(batch, arch.lift_in)),
        cloud=rng.normal(scale=0.5, size=(batch, arch.n_points, arch.point_in)),
        target=rng.normal(scale=0.5, size=(batch, N_JOINTS, 3)),
        valid=valid,
        beta=rng.uniform(0.2, 1.0, (batch, N_JOINTS)),
    )


def cmd_gradcheck(o) -> int:
    if o["batch"] < 1 or not o["epsilon"] > 0:
        raise UsageError("--batch must be >= 1 and --epsilon > 0")
    if o["epsilon"] >= GRADCHECK_EPS_WARN:
        print(f"warning: epsilon {o['epsilon']:g} is large; truncation error of the central difference "
              f"dominates and the check will likely fail. Use about 1e-5.", file=sys.stderr)
    failed = False
    for seed in o["seed"]:
        t0 = time.perf_counter()
        params = nn.init_params(seed)
        corrupt = params.slices["lift.out.W"][0] if o["inject_bug"] else None
        res = nn.grad_check(params, random_batch(seed, o["batch"]), o["epsilon"], o["variant"], seed=seed,
                            corrupt_index=corrupt)
        ok = res.passed(GRADCHECK_TOL)
        failed |= not ok
        print(f"seed {seed}: max relative error {res.max_rel_error:.3e} over {res.n_checked} coordinates "
              f"[{'PASS' if ok else 'FAIL'}] ({time.perf_counter() - t0:.1f}s)")
        if not ok:
            print(f"  worst parameter index {res.worst_index} ({res.worst_name})")
    return 1 if failed else 0


COMMANDS = {"generate": cmd_generate, "pseudolabel": cmd_pseudolabel, "train": cmd_train, "eval": cmd_eval,
            "eval-pseudo": cmd_eval_pseudo, "gradcheck": cmd_gradcheck}

RUNTIME_ERRORS = (OSError, dataio.DatasetFormatError, nn.CheckpointError, train.MissingTargetsError,
                  evaluation.EmptyTestSetError, evaluation.NoValidJointsError, synth.GenerationError,
                  FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        opts = resolve(args)
        threads = _threads()
        opts["_threads"] = threads
        limit = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
        with limit:
            return COMMANDS[args.command](opts)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"fusionpose {args.command}: error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
