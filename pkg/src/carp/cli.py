"""Command-line entry point: ``carp {gen,train,predict,evaluate,sweep}``."""

from __future__ import annotations

import argparse
import csv
import logging
import shlex
import shutil
import sys
from pathlib import Path

import numpy as np

from .context import FeatureVector
from .data import DataError, SyntheticSpec, load_records, save_tensor, synth_generate
from .evaluation import make_approaches, run_experiment, write_reports
from .factorization import TrainConfig
from .predict import BundleError, carp_build, carp_predict, load_bundle, save_bundle

log = logging.getLogger("carp")


class UsageError(Exception):
    """Invalid configuration, detected before any work starts."""


def parse_densities(text: str) -> list[float]:
    """``lo:hi:step`` or a comma list, in percent; returns fractions."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise UsageError(f"bad density range {text!r}")
            count = int(np.floor((hi - lo) / step + 1e-9)) + 1
            pct = [lo + i * step for i in range(count)]
        else:
            pct = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse densities {text!r}") from None
    out = [round(p / 100.0, 12) for p in pct]
    if not out or any(not (0.0 < d <= 1.0) for d in out):
        raise UsageError(f"densities must lie in (0, 100] percent, got {text!r}")
    return out


def _add_train_flags(p):
    p.add_argument("--contexts", "-C", type=int, default=7, help="number of contexts (default 7)")
    p.add_argument("--d", type=int, default=2, help="latent dimensionality (default 2)")
    p.add_argument("--lam", type=float, default=0.01, help="regularization (default 0.01)")
    p.add_argument("--eta", type=float, default=0.01, help="learning rate (default 0.01)")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--n-init", type=int, default=10, help="k-means restarts (default 10)")
    p.add_argument("--no-clamp", action="store_true", help="do not clamp predictions to [0, 1]")
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    if args.contexts < 1:
        raise UsageError("--contexts must be >= 1")
    if args.n_init < 1:
        raise UsageError("--n-init must be >= 1")
    try:
        return TrainConfig(d=args.d, lam=args.lam, eta=args.eta, max_iters=args.max_iters,
                           tol=args.tol, seed=args.seed, clamp_predictions=not args.no_clamp)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carp", description="Context-aware reliability prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset with known truth")
    p.add_argument("--M", type=int, default=50)
    p.add_argument("--N", type=int, default=49)
    p.add_argument("--T", type=int, default=28)
    p.add_argument("--contexts", type=int, default=7)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--density", type=float, default=0.2, help="observed fraction in (0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")

    p = sub.add_parser("train", help="build a CARP model bundle")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="bundle directory")
    _add_train_flags(p)

    p = sub.add_parser("predict", help="answer (user, service) queries from a bundle")
    p.add_argument("--model", type=Path, required=True)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--queries", type=Path, help="CSV of user_id,service_id rows")
    q.add_argument("--all", action="store_true", help="query every (user, service) pair")
    w = p.add_mutually_exclusive_group(required=True)
    w.add_argument("--slice", type=int, help="training time slice index")
    w.add_argument("--features", type=Path,
                   help="CSV of service_id,value observations at the current slice")
    p.add_argument("--out", type=Path, help="output CSV (default stdout)")

    for name, dens, approaches, help_ in (
            ("evaluate", "5:25:5", "baseline,pmf,carp", "compare approaches across densities"),
            ("sweep", "5:50:5", "carp", "data-sparsity sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--approaches", default=approaches)
        p.add_argument("--densities", default=dens, help=f"percent, lo:hi:step or list (default {dens})")
        p.add_argument("--reps", type=int, default=20)
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--prefix", default=name)
        _add_train_flags(p)
    return parser


class Outputs:
    """Tracks created paths so a failed command can remove them."""

    def __init__(self):
        self.paths = []

    def add(self, path: Path) -> Path:
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self):
        for path in reversed(self.paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def _header(argv, seed):
    return [f"invocation: carp {shlex.join(argv)}", f"seed: {seed}"]


def cmd_gen(args, argv, outputs):
    try:
        spec = SyntheticSpec(args.M, args.N, args.T, args.contexts, args.rank,
                             args.noise, args.density, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    syn = synth_generate(spec)
    header = _header(argv, args.seed)
    outputs.add(args.out)
    args.out.mkdir(parents=True, exist_ok=True)
    save_tensor(syn.observed, outputs.add(args.out / "observed.csv"), header)
    with open(outputs.add(args.out / "truth.csv"), "w", encoding="utf-8", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(f"#dims {spec.M} {spec.N} {spec.T}\n")
        for (u, s, t), v in np.ndenumerate(syn.truth):
            fh.write(f"{u},{s},{t},{float(v)!r}\n")
    with open(outputs.add(args.out / "contexts.csv"), "w", encoding="utf-8", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("time_slice,context\n")
        for t, c in enumerate(syn.truth_contexts):
            fh.write(f"{t},{int(c)}\n")
    print(f"wrote {len(syn.observed)} observed entries to {args.out}")


def _load(path):
    try:
        return load_records(path)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_train(args, argv, outputs):
    config = _train_config(args)
    if not args.data.is_file():
        raise UsageError(f"{args.data}: no such file")
    train = _load(args.data)
    model = carp_build(train, args.contexts, config, n_init=args.n_init)
    outputs.add(args.out)
    manifest = save_bundle(model, args.out)
    for c, (loss, copied) in enumerate(zip(model.factors.losses, model.factors.copied)):
        note = " (no data; copied)" if copied else ""
        print(f"context {c}: final loss {loss:.6g}{note}")
    for key, part in manifest["parts"].items():
        print(f"{part['file']}: sha256 {part['sha256']}")


def _read_rows(path, ncols):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                if lineno == 1 or not rows:
                    continue  # column header
                raise DataError(f"{path}: line {lineno}: cannot parse {line!r}") from None
            if len(fields) != ncols:
                raise DataError(f"{path}: line {lineno}: expected {ncols} fields")
    return rows


def cmd_predict(args, argv, outputs):
    model = load_bundle(args.model)
    M, N, T = model.dims
    if args.all:
        queries = [(u, s) for u in range(M) for s in range(N)]
    else:
        queries = [(int(u), int(s)) for u, s in _read_rows(args.queries, 2)]
    for u, s in queries:
        if not (0 <= u < M and 0 <= s < N):
            raise DataError(f"query ({u}, {s}) outside the {M}x{N} grid")

    if args.slice is not None:
        if not 0 <= args.slice < T:
            raise UsageError(f"--slice must be in [0, {T})")
        c = int(model.context_model.assignment[args.slice])
        users = np.array([q[0] for q in queries], dtype=np.int64)
        services = np.array([q[1] for q in queries], dtype=np.int64)
        values = model.predict_at_slices(users, services, np.full(len(queries), args.slice))
        results = [(v, c, "factors") for v in values.tolist()]
    else:
        obs = _read_rows(args.features, 2)
        feature = FeatureVector.from_observations(
            N, [int(r[0]) for r in obs], [r[1] for r in obs])
        results = []
        for u, s in queries:
            p = carp_predict(model, u, s, feature)
            results.append((p.value, p.context, p.source))

    fh = open(outputs.add(args.out), "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        fh.write(f"# invocation: carp {shlex.join(argv)}\n")
        w.writerow(["user_id", "service_id", "value", "context", "source"])
        for (u, s), (v, c, src) in zip(queries, results):
            w.writerow([u, s, repr(float(v)), "" if c is None else c, src])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_experiment(args, argv, outputs):
    config = _train_config(args)
    densities = parse_densities(args.densities)
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    names = [n.strip() for n in args.approaches.split(",") if n.strip()]
    try:
        approaches = make_approaches(names, C=args.contexts, config=config, n_init=args.n_init)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not args.data.is_file():
        raise UsageError(f"{args.data}: no such file")
    tensor = _load(args.data)
    reports = run_experiment(tensor, approaches, densities, args.reps, base_seed=args.seed)
    outputs.add(args.out)
    args.out.mkdir(parents=True, exist_ok=True)
    detail = outputs.add(args.out / f"{args.prefix}_detail.csv")
    summary = outputs.add(args.out / f"{args.prefix}_summary.csv")
    write_reports(reports, detail, summary, _header(argv, args.seed))
    for r in reports:
        print(f"{r.approach:>8s} density={r.density:.2f} MAE={r.mae_mean:.4f}±{r.mae_ci:.4f} "
              f"RMSE={r.rmse_mean:.4f}±{r.rmse_ci:.4f} ({len(r.maes)}/{r.repetitions} ok)")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_experiment, "sweep": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = Outputs()
    try:
        COMMANDS[args.command](args, argv, outputs)
    except UsageError as exc:
        outputs.cleanup()
        print(f"carp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, BundleError, ValueError, RuntimeError, OSError) as exc:
        outputs.cleanup()
        print(f"carp {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
