"""Command-line entry point: ``milsurv <command> [options]``.

Commands: generate, mask, train, search, eval, explain and replay. Every
command except replay writes ``manifest.json`` into its output directory;
``milsurv replay <manifest> --out-dir <dir>`` re-runs it and checks the new
outputs hash identically.

Exit codes: 0 success, 1 replay mismatch, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from milsurv import __version__
from milsurv.errors import NumericalError, ValidationError

log = logging.getLogger("milsurv")

# argument names holding input paths; hashed into the manifest
PATH_ARGS = ("data", "masks", "models", "scores", "resume", "space", "truth")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", required=True, help="directory for outputs and manifest.json")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    common.add_argument("--config", default=None, help="JSON file with per-command option sections")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="milsurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"milsurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n-cases", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--censor-rate", type=float, default=None)
    p.add_argument("--tumor-only", action="store_true",
                   help="write only tumor patches (default: every block, for masking)")

    p = sub.add_parser("mask", parents=[common], help="heatmaps to ROI masks and patch inclusion")
    p.add_argument("--data", required=True, help="directory with heatmaps/ (and cohort.json, patches/)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, default=None)
    g.add_argument("--recall-target", type=float, default=None,
                   help="pick the threshold whose tune recall is closest from below")
    p.add_argument("--truth", default=None, help="ground-truth mask directory (default: <data>/truth_masks)")
    p.add_argument("--dilation", type=int, default=None)
    p.add_argument("--min-component", type=int, default=None)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=None)
    p.add_argument("--report-thresholds", type=_floats, default=[],
                   help="extra comma-separated thresholds for mask_metrics.csv")

    def data_args(p, models=False):
        p.add_argument("--data", required=True, help="directory with cohort.json and patches/")
        p.add_argument("--masks", default=None, help="output directory of the mask command")
        if models:
            p.add_argument("--models", nargs="+", required=False, default=None,
                           help="snapshot files or directories searched for best.snap")
            p.add_argument("--k", type=int, default=5, help="ensemble size (top-k by tune c-index)")

    def train_args(p):
        p.add_argument("--steps", type=int, default=None, help="total training steps")
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--bag-size", type=int, default=None)
        p.add_argument("--l2", type=float, default=None)
        p.add_argument("--eval-patches", type=int, default=None)
        p.add_argument("--window", type=int, default=None, help="checkpoint rolling window")
        p.add_argument("--per-slide", action="store_true", help="sample a slide first, then a patch")

    def clinico_args(p):
        p.add_argument("--numeric", type=_names, default=["age"])
        p.add_argument("--categorical", type=_names, default=["sex", "stage", "grade"])
        p.add_argument("--per-decade", type=_names, default=["age"])
        p.add_argument("--bootstrap", type=int, default=1000, help="bootstrap replicates")

    p = sub.add_parser("train", parents=[common], help="train MIL survival models")
    data_args(p)
    train_args(p)
    p.add_argument("--n-models", type=int, default=5, help="number of replicate models")
    p.add_argument("--resume", default=None, help="continue from a last.snap")

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    data_args(p)
    train_args(p)
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--exhaustive", action="store_true", help="train the full grid instead of sampling")
    p.add_argument("--space", default=None, help="JSON object: field -> list of candidate values")

    p = sub.add_parser("eval", parents=[common], help="performance, hazard ratio and KM tables")
    data_args(p, models=True)
    p.add_argument("--scores", default=None, help="CSV with case_id,score instead of models")
    p.add_argument("--horizon", type=int, default=60, help="AUC horizon in months")
    clinico_args(p)

    p = sub.add_parser("explain", parents=[common], help="cluster features and score regressions")
    data_args(p, models=True)
    p.add_argument("--k-clusters", type=int, default=None, help="fixed number of clusters")
    p.add_argument("--k-candidates", type=_ints, default=[4, 8, 16])
    p.add_argument("--n-select", type=int, default=10)
    p.add_argument("--embedding", choices=("features", "encoder"), default="features")
    p.add_argument("--sample-size", type=int, default=100_000)
    clinico_args(p)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest", help="manifest.json or the directory holding it")
    p.add_argument("--out-dir", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ValidationError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; --threads only affects new processes")


def _absolutize(args) -> None:
    for name in PATH_ARGS:
        v = getattr(args, name, None)
        if v is None:
            continue
        setattr(args, name, [str(Path(x).resolve()) for x in v] if isinstance(v, list) else str(Path(v).resolve()))


def _input_hashes(args) -> dict[str, dict[str, str]]:
    from milsurv.manifest import hash_tree

    out = {}
    for name in PATH_ARGS:
        v = getattr(args, name, None)
        for path in ([] if v is None else v if isinstance(v, list) else [v]):
            if not Path(path).exists():
                raise ValidationError(f"missing input: {path}")
            out[path] = hash_tree(path)
    return out


def run_command(args, config: dict, argv: list[str]):
    """Run one command into ``args.out_dir`` and write its manifest."""
    from milsurv import commands
    from milsurv.manifest import RunManifest

    fn = getattr(commands, f"cmd_{args.command}")
    inputs = _input_hashes(args)
    out = commands.Outputs(args.out_dir)
    effective = fn(args, config, out)
    stored = {k: v for k, v in vars(args).items() if k not in ("out_dir", "verbose")}
    manifest = RunManifest(
        tool="milsurv",
        version=__version__,
        command=args.command,
        argv=argv,
        config={"file": config, "args": stored, "effective": effective},
        seed=args.seed,
        threads=args.threads,
        inputs=inputs,
        outputs=out.hashes(),
    )
    manifest.save(args.out_dir)
    return manifest


def replay(manifest_path: str, out_dir: str) -> int:
    from milsurv.manifest import RunManifest, diff_hashes

    m = RunManifest.load(manifest_path)
    args = argparse.Namespace(**m.config["args"], out_dir=str(Path(out_dir).resolve()), verbose=False)
    changed = diff_hashes({k: v for d in m.inputs.values() for k, v in d.items()},
                          {k: v for d in _input_hashes(args).values() for k, v in d.items()})
    if changed:
        raise ValidationError("inputs changed since the manifest was written: " + "; ".join(changed[:5]))
    _set_threads(m.threads)
    new = run_command(args, m.config["file"], m.argv)
    diffs = diff_hashes(m.outputs, new.outputs)
    if diffs:
        for d in diffs:
            print(d, file=sys.stderr)
        print(f"replay: {len(diffs)} output(s) differ", file=sys.stderr)
        return 1
    print(f"replay: {len(new.outputs)} outputs identical")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out_dir)
        _set_threads(args.threads)
        config = {}
        if args.config:
            path = Path(args.config)
            try:
                config = json.loads(path.read_text())
            except FileNotFoundError:
                raise ValidationError(f"missing config: {path}") from None
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed config {path}: {exc}") from None
            if not isinstance(config, dict):
                raise ValidationError("config must be a JSON object")
        _absolutize(args)
        args.out_dir = str(Path(args.out_dir).resolve())
        run_command(args, config, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
