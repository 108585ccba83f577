"""Command-line entry point: ``headscale <subcommand> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod
from .data import SAMPLE_CORPUS, Corpus, default_corpus_files, pretrain_toy, sequences
from .errors import DataError, HeadScaleError, UsageError
from .evaluate import EvalReport, eval_passkey, position_nll, sliding_window_nll
from .model import Model, ScaleVector
from .probe import (EntropyCurve, decimated_positions, entropy_sums, find_inflection, head_curves,
                    read_curves_csv, write_curves_csv, MODEL_SCOPE)
from .search import (DEFAULT_INIT, SweepResult, fit_from_sweep, init_head_scales, scale_entropy_correlation,
                     scale_grid, tune_head_scales, uniform_scale_sweep)
from .svg import line_plot

log = logging.getLogger("headscale")

OUT_ENV = "HEADSCALE_OUT"

CHECKPOINT = "model.ckpt"
TRAIN_LOSS = "train_loss.csv"
ENTROPY = "entropy.csv"
LOGPPL = "logppl.csv"
INFLECTION = "inflection.json"
SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
FIT = "fit.json"
SCALES = "scales.json"
TUNE_LOSS = "tune_loss.csv"
TUNE_CURVES = "tune_logppl.csv"
CORRELATION = "correlation.csv"
EVAL_CSV = "eval_ppl.csv"
EVAL_JSON = "eval_ppl.json"
PASSKEY_CSV = "passkey.csv"
PASSKEY_JSON = "passkey.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, run: cfgmod.RunConfig, inputs: list[Path], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "source_sha256": source_digest(),
        "config": run.to_dict(),
        "inputs": {str(p.name): file_digest(p) for p in inputs if p.exists()},
        "outputs": {name: file_digest(out / name) for name in outputs if (out / name).exists()},
    }
    (out / f"manifest-{command}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_corpus(run: cfgmod.RunConfig) -> Corpus:
    c = run.corpus
    if c.stdlib:
        files = default_corpus_files(c.max_bytes)
    elif c.paths:
        files = []
        for p in c.paths:
            path = Path(p)
            if not path.exists():
                raise DataError(f"corpus path {p} does not exist")
            files += [path] if path.is_file() else sorted(q for q in path.rglob("*") if q.is_file())
    else:
        files = [SAMPLE_CORPUS]
    return Corpus.from_files(files, c.val_fraction, c.seed, c.block_size)


def load_model(out: Path, args) -> Model:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / CHECKPOINT
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (run `pretrain` first or pass --checkpoint)")
    return Model.load(path)


def load_scales(run: cfgmod.RunConfig, args, model: Model):
    if getattr(args, "scale", None) is not None:
        return float(args.scale) / math.sqrt(model.config.d_head)
    path = getattr(args, "scales", None) or run.scales
    if path:
        return ScaleVector.load(path)
    return None


def val_windows(corpus: Corpus, length: int, count: int, seed: int) -> np.ndarray:
    return sequences(corpus.val, length, count=count, seed=seed)


def _series_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(run, args, out: Path) -> list[str]:
    corpus = load_corpus(run)
    model, history = pretrain_toy(run.model, corpus, run.train)
    model.save(out / CHECKPOINT)
    (out / TRAIN_LOSS).write_text(_series_csv(["step", "loss"], ((i + 1, repr(l)) for i, l in enumerate(history.losses))))
    print(f"parameters={model.num_parameters()} final_loss={history.losses[-1] if history.losses else float('nan'):.4f}")
    return [CHECKPOINT, TRAIN_LOSS]


def cmd_probe(run, args, out: Path) -> list[str]:
    model = load_model(out, args)
    L = model.config.train_len
    p = run.probe
    length = p.length or 4 * L
    corpus = load_corpus(run)
    data = val_windows(corpus, length + 1, p.n_sequences, p.seed)
    scales = load_scales(run, args, model)
    sums, n = entropy_sums(model, data[:, :length], scales, p.batch_size)
    positions = decimated_positions(length, p.every)
    curves = [EntropyCurve(positions, sums.mean(axis=(0, 1))[positions - 1] / n, n, MODEL_SCOPE)]
    curves += head_curves(sums, n, positions)
    if not all(c.within_bound() for c in curves):
        raise HeadScaleError("entropy curve exceeds the ln i bound")
    write_curves_csv(curves, out / ENTROPY)
    nll = position_nll(model, data, scales, p.batch_size)
    write_curves_csv([EntropyCurve(positions, nll[positions - 1], n, MODEL_SCOPE)], out / LOGPPL)
    ent_at = find_inflection(positions, curves[0].mean_entropy, L, p.window, p.threshold)
    ppl_at = find_inflection(positions, nll[positions - 1], L, p.window, p.threshold)
    (out / INFLECTION).write_text(json.dumps({"entropy_inflection": ent_at, "logppl_inflection": ppl_at,
                                              "train_len": L, "window": p.window, "threshold": p.threshold},
                                             sort_keys=True) + "\n")
    print(f"entropy inflection={ent_at} log-ppl inflection={ppl_at} (L={L})")
    return [ENTROPY, LOGPPL, INFLECTION]


def cmd_sweep(run, args, out: Path) -> list[str]:
    model = load_model(out, args)
    s = run.sweep
    L = model.config.train_len
    target = s.target_len or 4 * L
    corpus = load_corpus(run)
    data = val_windows(corpus, target + 1, s.n_sequences, s.seed)
    grid = scale_grid(model.config.d_head, s.start, s.stop, s.interval)
    sweep = uniform_scale_sweep(model, data, grid, target, s.bucket, s.batch_size)
    (out / SWEEP_CSV).write_text(sweep.to_csv())
    (out / SWEEP_JSON).write_text(sweep.to_json() + "\n")
    print(f"grid={grid.size} values, positions={sweep.positions.size}")
    return [SWEEP_CSV, SWEEP_JSON]


def _load_sweep(out: Path, args) -> SweepResult:
    path = Path(getattr(args, "sweep", None) or out / SWEEP_JSON)
    if not path.exists():
        raise DataError(f"sweep result {path} not found (run `sweep` first)")
    return SweepResult.from_json(path.read_text())


def cmd_fit(run, args, out: Path) -> list[str]:
    sweep = _load_sweep(out, args)
    fit = fit_from_sweep(sweep, run.sweep.fit_min, run.sweep.fit_max)
    (out / FIT).write_text(fit.to_json() + "\n")
    print(fit.render())
    return [FIT]


def cmd_tune(run, args, out: Path) -> list[str]:
    model = load_model(out, args)
    t = run.tune
    L = model.config.train_len
    target = t.target_len or 2 * L
    tune_len = int(round(target * t.len_slack))
    sweep = _load_sweep(out, args) if t.init != DEFAULT_INIT else None
    init = init_head_scales(model.config, sweep, target, t.init, t.focus_constraint)
    corpus = load_corpus(run)
    n_train = t.n_sequences or t.steps * t.batch_size
    train = sequences(corpus.train, tune_len + 1, count=max(n_train, 1), seed=t.seed + 1000)
    res = tune_head_scales(model, train, init, t.steps, t.lr, t.batch_size, t.warmup, t.final_lr_ratio,
                           constraint=t.focus_constraint, gradient=t.gradient, seed=t.seed)
    res.scales.save(out / SCALES)
    (out / TUNE_LOSS).write_text(_series_csv(["step", "loss", "lr"],
                                             ((i + 1, repr(l), repr(r)) for i, (l, r) in enumerate(zip(res.losses, res.lrs)))))
    val = val_windows(corpus, target + 1, t.val_sequences, run.sweep.seed)
    uni = position_nll(model, val, init.values)
    head = position_nll(model, val, res.scales)
    (out / TUNE_CURVES).write_text(_series_csv(["position", "init_log_ppl", "tuned_log_ppl"],
                                               ((i + 1, repr(float(a)), repr(float(b))) for i, (a, b) in enumerate(zip(uni, head)))))
    pos = t.corr_position or target
    corr = scale_entropy_correlation(model, res.scales, val[:, :target], min(pos, target))
    (out / CORRELATION).write_text(corr.to_csv())
    print(f"init loss={uni.mean():.4f} tuned loss={head.mean():.4f} min scale*sqrt(d)="
          f"{res.scales.values.min() * math.sqrt(model.config.d_head):.4f}")
    return [SCALES, TUNE_LOSS, TUNE_CURVES, CORRELATION]


def cmd_eval(run, args, out: Path) -> list[str]:
    model = load_model(out, args)
    e = run.eval
    L = model.config.train_len
    window = e.window or 2 * L
    stride = e.stride or max(1, window // 4)
    corpus = load_corpus(run)
    tokens = corpus.val[:e.n_tokens]
    scales = load_scales(run, args, model)
    res = sliding_window_nll(model, tokens, scales, window, stride)
    report = EvalReport.from_sliding(res, e.bucket, {"window": window, "stride": stride,
                                                      "checkpoint_sha256": model.digest(),
                                                      "scales": None if scales is None else str(getattr(args, "scales", None) or run.scales or args.scale)})
    (out / EVAL_CSV).write_text(report.to_csv())
    (out / EVAL_JSON).write_text(report.to_json() + "\n")
    print(f"sliding-window ppl={report.ppl:.4f} over {report.token_count} tokens (W={window}, S={stride})")
    return [EVAL_CSV, EVAL_JSON]


def cmd_passkey(run, args, out: Path) -> list[str]:
    model = load_model(out, args)
    pk = run.passkey
    L = model.config.train_len
    lengths = pk.lengths or [L, 2 * L, 4 * L]
    corpus = load_corpus(run)
    scales = load_scales(run, args, model)
    grid = eval_passkey(model, corpus.val, lengths, scales, pk.depths, pk.keys_per_depth, pk.seed)
    (out / PASSKEY_CSV).write_text(grid.to_csv())
    (out / PASSKEY_JSON).write_text(json.dumps({"mean_by_length": {str(k): v for k, v in grid.mean_by_length().items()},
                                                "in_domain_mean": float(grid.accuracy[[i for i, n in enumerate(lengths) if n <= L]].mean())
                                                if any(n <= L for n in lengths) else None},
                                               sort_keys=True) + "\n")
    print("passkey accuracy by length: " + ", ".join(f"{k}:{v:.2f}" for k, v in grid.mean_by_length().items()))
    return [PASSKEY_CSV, PASSKEY_JSON]


def cmd_report(run, args, out: Path) -> list[str]:
    made = []
    L = None
    if (out / INFLECTION).exists():
        L = json.loads((out / INFLECTION).read_text())["train_len"]
    vl = [L] if L else []
    if (out / ENTROPY).exists() and (out / LOGPPL).exists():
        ent = read_curves_csv(out / ENTROPY)[MODEL_SCOPE]
        ppl = read_curves_csv(out / LOGPPL)[MODEL_SCOPE]
        bound = (ent[0], np.log(ent[0].astype(float)))
        svg = line_plot({"entropy": ent, "log-PPL": ppl, "ln i bound": bound}, "Entropy and log-PPL by position",
                        "position", "nats", vl, dashed=["log-PPL", "ln i bound"])
        (out / "fig_entropy_logppl.svg").write_text(svg)
        made.append("fig_entropy_logppl.svg")
    if (out / SWEEP_CSV).exists():
        series: dict[str, tuple[list, list]] = {}
        best_x, best_y = [], []
        with open(out / SWEEP_CSV, newline="") as fh:
            rows = list(csv.DictReader(fh))
        scales_seen = sorted({float(r["scale_x_sqrt_d"]) for r in rows})
        picks = set(scales_seen[:: max(1, len(scales_seen) // 6)])
        for r in rows:
            lam = float(r["scale_x_sqrt_d"])
            if lam in picks:
                xs, ys = series.setdefault(f"λ√d={lam:.2f}", ([], []))
                xs.append(int(r["position"]))
                ys.append(float(r["log_ppl"]))
            if r["is_best"] == "1":
                best_x.append(int(r["position"]))
                best_y.append(lam)
        (out / "fig_uniform_scale.svg").write_text(line_plot(series, "log-PPL under uniform scales", "position",
                                                             "log-PPL", vl))
        fit_series = {"best λ√d": (best_x, best_y)}
        if (out / FIT).exists() and L:
            c = json.loads((out / FIT).read_text())["c"]
            fit_series["fitted"] = (best_x, [1 + c * math.log(x / L) if x > 0 else float("nan") for x in best_x])
        (out / "fig_fit.svg").write_text(line_plot(fit_series, "Optimal uniform scale by position", "position",
                                                   "λ·√d", vl, dashed=["fitted"]))
        made += ["fig_uniform_scale.svg", "fig_fit.svg"]
    if (out / TUNE_CURVES).exists():
        with open(out / TUNE_CURVES, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xs = [int(r["position"]) for r in rows]
        (out / "fig_head_vs_uniform.svg").write_text(line_plot(
            {"uniform (init)": (xs, [float(r["init_log_ppl"]) for r in rows]),
             "head-based": (xs, [float(r["tuned_log_ppl"]) for r in rows])},
            "Uniform vs head-based scale", "position", "log-PPL", vl))
        made.append("fig_head_vs_uniform.svg")
    if not made:
        raise DataError(f"no CSV artifacts found in {out}")
    print("wrote " + ", ".join(made))
    return made


COMMANDS = {
    "pretrain": (cmd_pretrain, "train a toy model from scratch"),
    "probe-entropy": (cmd_probe, "attention-entropy and log-PPL curves with inflection detection"),
    "sweep": (cmd_sweep, "uniform-scale grid sweep"),
    "fit-curve": (cmd_fit, "fit the log law to the sweep's per-position optima"),
    "tune-heads": (cmd_tune, "search per-head scales with the base model frozen"),
    "eval-ppl": (cmd_eval, "sliding-window perplexity"),
    "passkey": (cmd_passkey, "passkey retrieval accuracy grid"),
    "report": (cmd_report, "render SVG figures from stored CSVs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headscale", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="shortcut for model.seed and train.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "pretrain" and name not in ("fit-curve", "report"):
            p.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
        if name in ("probe-entropy", "eval-ppl", "passkey"):
            p.add_argument("--scales", help="ScaleVector JSON to evaluate with")
            p.add_argument("--scale", type=float, help="uniform scale in units of 1/sqrt(d)")
        if name == "pretrain":
            p.add_argument("--steps", type=int)
        if name in ("fit-curve", "tune-heads"):
            p.add_argument("--sweep", help="sweep.json (default: <out>/sweep.json)")
        if name == "tune-heads":
            p.add_argument("--steps", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--target-len", type=int)
            p.add_argument("--init", choices=["best-uniform", "default"])
            p.add_argument("--default-init", action="store_true", help="ablation: start every scale at 1/sqrt(d)")
            p.add_argument("--no-focus-constraint", action="store_true", help="ablation: allow scales below 1/sqrt(d)")
        if name == "sweep":
            p.add_argument("--grid", help="comma-separated scales in units of 1/sqrt(d) (replaces start/stop/interval)")
            p.add_argument("--target-len", type=int)
        if name == "probe-entropy":
            p.add_argument("--window", type=int)
            p.add_argument("--threshold", type=float)
    return parser


def _flag_overrides(args) -> list[str]:
    o = []
    if args.seed is not None:
        o += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    cmd = args.command
    if cmd == "pretrain" and args.steps is not None:
        o.append(f"train.steps={args.steps}")
    if cmd == "tune-heads":
        if args.steps is not None:
            o.append(f"tune.steps={args.steps}")
        if args.lr is not None:
            o.append(f"tune.lr={args.lr}")
        if args.target_len is not None:
            o.append(f"tune.target_len={args.target_len}")
        if args.init is not None:
            o.append(f"tune.init={args.init}")
        if args.default_init:
            o.append("tune.init=default")
        if args.no_focus_constraint:
            o.append("tune.focus_constraint=false")
    if cmd == "sweep" and args.target_len is not None:
        o.append(f"sweep.target_len={args.target_len}")
    if cmd == "probe-entropy":
        if args.window is not None:
            o.append(f"probe.window={args.window}")
        if args.threshold is not None:
            o.append(f"probe.threshold={args.threshold}")
    return o


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides) + _flag_overrides(args)
        run_cfg = cfgmod.load(args.config, overrides)
        if args.command == "sweep" and args.grid:
            vals = sorted(float(v) for v in args.grid.split(","))
            run_cfg.sweep.start, run_cfg.sweep.stop = vals[0], vals[-1]
            run_cfg.sweep.interval = (vals[-1] - vals[0]) / (len(vals) - 1) if len(vals) > 1 else 1.0
        out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command][0]
        outputs = fn(run_cfg, args, out)
        inputs = [out / CHECKPOINT] if args.command != "pretrain" else []
        write_manifest(out, args.command, run_cfg, inputs, outputs)
    except UsageError as exc:
        print(f"headscale {args.command}: usage error: {exc}", file=sys.stderr)
        return exc.exit_code
    except HeadScaleError as exc:
        kind = "data error" if exc.exit_code == 2 else "contract violation"
        print(f"headscale {args.command}: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
