"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("rnce")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_text(path, text):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _samples_csv(contexts, y, score=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["context_0"] + [f"y{i + 1}" for i in range(y.shape[1])]
    w.writerow(head + (["score"] if score is not None else []))
    for i in range(y.shape[0]):
        row = [repr(float(contexts[i]))] + [repr(float(v)) for v in y[i]]
        if score is not None:
            row.append(repr(float(score[i])))
        w.writerow(row)
    return buf.getvalue()


def _read_samples(path):
    import numpy as np

    try:
        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    if not rows or "context_0" not in rows[0]:
        raise UsageError(f"{path}: missing header with context_0")
    head = rows[0]
    yi = [i for i, h in enumerate(head) if h.startswith("y")]
    try:
        data = np.array([[float(r[0])] + [float(r[i]) for i in yi] for r in rows[1:]], dtype=np.float64)
    except (ValueError, IndexError):
        raise UsageError(f"{path}: malformed CSV row") from None
    if data.size == 0:
        data = np.zeros((0, 1 + len(yi)))
    return data[:, 0], data[:, 1:]


# --- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import autodiff as ad
    from . import pipeline as P
    from .config import load_config

    cfg = load_config(args.config, args.set)
    out = args.out or cfg.out_dir
    cfg.out_dir = out
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, P.CONFIG_NAME), cfg.to_json() + "\n")
    last_good = os.path.join(out, "last_good.bin")

    def on_ckpt(groups, step):
        from . import training as T

        T.save_checkpoint(last_good, groups, {"config": cfg.to_dict(), "step": step})

    try:
        tr = P.train(cfg, on_checkpoint=on_ckpt, checkpoint_every=args.checkpoint_every)
    except ad.NonFiniteError as e:
        print(f"numerical failure: {e}; last good checkpoint kept at {last_good}", file=sys.stderr)
        return EXIT_NUMERIC
    P.save(tr, out)
    print(os.path.join(out, P.CKPT_NAME))
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from . import datasets as D
    from . import pipeline as P

    tr = _load(args.ckpt)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    if args.context is not None:
        contexts = np.full(args.n, float(args.context))
    else:
        ctx = D.eval_contexts(tr.cfg.task)
        contexts = np.array([ctx[i % len(ctx)] for i in range(args.n)], dtype=np.float64)
    try:
        if args.best_of > 1:
            y, sc = P.sample_best_of(tr, contexts, args.sampler, args.seed, args.best_of)
        else:
            y = P.sample(tr, contexts, args.sampler, args.seed)
            sc = P.scores(tr, contexts, y) if args.scores else None
    except P.MethodMismatch as e:
        raise UsageError(str(e)) from None
    _write_text(args.out, _samples_csv(contexts, y, sc))
    return EXIT_OK


def cmd_eval_bc(args) -> int:
    import numpy as np

    from . import evaluation as ev
    from . import pipeline as P

    grid = ev.GridSpec(-args.box, args.box, args.grid_n)
    if args.ckpt:
        tr = _load(args.ckpt)
        rep = P.bc_report(tr, seed=args.seed, sampler=args.sampler, n=args.n, grid=grid)
    else:
        if not (args.samples and args.truth):
            raise UsageError("eval-bc needs --ckpt or both --samples and --truth")
        ca, ya = _read_samples(args.samples)
        cb, yb = _read_samples(args.truth)
        if ya.shape[1] != 2 or yb.shape[1] != 2:
            raise UsageError("BC evaluation needs 2-D events")
        per = {}
        for c in sorted(set(ca.tolist()) & set(cb.tolist())):
            a, b = ya[ca == c], yb[cb == c]
            if a.shape[0] < 2 or b.shape[0] < 2:
                raise UsageError(f"context {c}: need at least 2 samples in each file")
            per[repr(c)] = ev.bhattacharyya(a, b, grid)
        if not per:
            raise UsageError("no shared contexts between the two files")
        rep = {"per_context": per, "min": min(per.values()),
               "grid": {"lo": grid.lo, "hi": grid.hi, "n": grid.n}, "n": int(len(ya)), "seed": None}
    report = ev.report_json("bhattacharyya_min", {"grid": rep["grid"]}, rep["min"], None, rep.get("n"),
                            rep.get("seed"), per_context=rep["per_context"])
    if args.out:
        _write_text(args.out, report + "\n")
    print(report)
    return EXIT_OK


def cmd_landscape(args) -> int:
    import numpy as np

    from . import evaluation as ev

    ks = args.k or [10, 100]
    mu = np.linspace(args.mu_min, args.mu_max, args.mu_points)
    os.makedirs(args.out, exist_ok=True)
    allscans = []
    summary = {}
    for K in ks:
        scans = [ev.landscape_scan(kind, K, mu, draws=args.draws, seed=args.seed) for kind in ("mle", "rnce", "ibc")]
        _write_text(os.path.join(args.out, f"landscape_K{K}.csv"), ev.landscape_csv(scans))
        allscans += scans
        summary[str(K)] = {s.kind: s.maximizer for s in scans}
    _write_text(os.path.join(args.out, "landscape_shifted.csv"), ev.landscape_csv(allscans))
    _write_text(os.path.join(args.out, "maximizers.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_asymptotics(args) -> int:
    from . import evaluation as ev

    if args.reps < 100:
        raise UsageError("--reps must be >= 100")
    rep = ev.asymptotic_variance_mc(args.K, args.n, args.reps, args.seed)
    text = rep.to_json()
    if args.out:
        _write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


def cmd_logprob_check(args) -> int:
    """Linear field v = a y in 1-D: samples z e^{aT}, log-density log N(z) - a T."""
    import numpy as np

    from . import flow as fl

    a, T = args.a, args.t_end

    class Linear:
        def __call__(self, t, x, y):
            return a * y

        def divergence(self, t, x, y):
            return np.full(np.shape(y)[0], a * np.shape(y)[1])

    z = np.random.default_rng(args.seed).standard_normal((args.n, 1))
    sched = fl.StepSchedule.uniform(T, args.steps, args.lp)
    y, lp = fl.integrate_with_logprob(Linear(), None, z, np.asarray(sched.ts), sched.lp_idx, fl.std_normal_logpdf(z))
    err_lp = float(np.max(np.abs(lp - (fl.std_normal_logpdf(z) - a * T))))
    err_y = float(np.max(np.abs(y - z * np.exp(a * T)) / np.abs(z * np.exp(a * T))))
    print(json.dumps({"max_logprob_error": err_lp, "max_rel_sample_error": err_y}))
    return EXIT_OK


def _load(path):
    from . import pipeline as P
    from . import training as T  # noqa: F401

    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return P.load(path)
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rnce", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", default=None)
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--sampler", choices=["two_stage", "three_stage", "flow", "pflow", "langevin"], default=None)
    s.add_argument("--best-of", type=int, default=1)
    s.add_argument("--scores", action="store_true", help="append a relative log-likelihood column")
    s.add_argument("--context", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval-bc", help="Bhattacharyya overlap per context")
    e.add_argument("--samples")
    e.add_argument("--truth")
    e.add_argument("--ckpt")
    e.add_argument("--sampler", default=None)
    e.add_argument("--n", type=int, default=None)
    e.add_argument("--grid-n", type=int, default=256)
    e.add_argument("--box", type=float, default=4.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval_bc)

    la = sub.add_parser("landscape", help="population objective curves for the Gaussian-mean problem")
    la.add_argument("--k", type=int, action="append")
    la.add_argument("--mu-min", type=float, default=-1.0)
    la.add_argument("--mu-max", type=float, default=3.0)
    la.add_argument("--mu-points", type=int, default=41)
    la.add_argument("--draws", type=int, default=100_000)
    la.add_argument("--seed", type=int, default=0)
    la.add_argument("--out", required=True)
    la.set_defaults(func=cmd_landscape)

    a = sub.add_parser("asymptotics", help="sampling variance of the ranking estimator")
    a.add_argument("--K", type=int, required=True)
    a.add_argument("--n", type=int, default=2000)
    a.add_argument("--reps", type=int, default=500)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_asymptotics)

    lc = sub.add_parser("logprob-check", help="joint sample/log-density check on a linear field")
    lc.add_argument("--a", type=float, default=0.7)
    lc.add_argument("--t-end", type=float, default=1.0)
    lc.add_argument("--steps", type=int, default=256)
    lc.add_argument("--lp", type=int, default=16)
    lc.add_argument("--n", type=int, default=1000)
    lc.add_argument("--seed", type=int, default=0)
    lc.set_defaults(func=cmd_logprob_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        # effective only before the first numeric import in this process
        for v in _THREAD_VARS:
            os.environ[v] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .autodiff import NonFiniteError
    from .config import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
