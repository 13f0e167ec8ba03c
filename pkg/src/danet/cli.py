"""Command-line entry point: ``danet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error. Every
command writes a resolved-configuration file (``*.resolved.txt``) beside
its outputs.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, infer, net, plotting, train
from . import evaluation as ev
from . import signal as sig
from .tensorio import FormatError, save_tensors

log = logging.getLogger("danet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo(path, values: dict):
    lines = [f"{k}={_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def _resolved(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _beside(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


# --- synth -------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise data.DataError(f"{out} is not empty (use --force to write into it)")
    data.make_dataset(out, args.mixtures, C=args.speakers, chunk_len=args.chunk_len,
                      seed=args.seed, snr_range=(args.snr_lo, args.snr_hi),
                      n_valid=args.valid_mixtures, n_test=args.test_mixtures,
                      duration_s=args.duration)
    # the echo lives inside the dataset, so the output path is recorded as "."
    _echo(out / "synth.resolved.txt", dict(_resolved(args), out="."))
    print(f"wrote dataset to {out}")


# --- train -------------------------------------------------------------------

def cmd_train(args):
    if not Path(args.data).is_dir():
        raise data.DataError(f"data directory {args.data} does not exist")
    cfg = train.load_config(args.config) if args.config else train.TrainConfig()
    if args.curriculum and not cfg.curriculum_epochs:
        cfg = cfg.with_curriculum(400)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        res = train.train(args.data, cfg)
    except train.TrainingDiverged as exc:
        if exc.history:
            train.write_history_csv(_beside(out, ".history.csv"), exc.history)
        raise
    net.save_checkpoint(out, res.params, res.net_config, res.norm_stats,
                        {"data": str(args.data), "best_val_loss": res.best_val_loss,
                         "initial_train_loss": res.initial_train_loss})
    train.write_history_csv(_beside(out, ".history.csv"), res.history)
    plotting.plot_history(res.history, _beside(out, ".history.png"))
    _beside(out, ".resolved.txt").write_text(
        f"# data={args.data}\n# config={args.config or ''}\n" + train.dump_config(cfg),
        encoding="utf-8")
    print(f"initial_train_loss={res.initial_train_loss:.6g} "
          f"final_train_loss={res.history[-1]['train_loss']:.6g} "
          f"best_val_loss={res.best_val_loss:.6g} epochs={len(res.history)}")


# --- separate ----------------------------------------------------------------

def _check_strategy_flags(args, have_refs: bool):
    if args.strategy == "fixed" and not args.codebook:
        raise UsageError("--strategy fixed requires --codebook")
    if args.strategy != "fixed" and args.codebook:
        raise UsageError("--codebook is only used with --strategy fixed")
    if args.strategy == "oracle" and not have_refs:
        raise UsageError("--strategy oracle requires reference signals")


def cmd_separate(args):
    _check_strategy_flags(args, bool(args.refs))
    if args.refs and args.strategy != "oracle":
        raise UsageError("--refs is only used with --strategy oracle")
    if args.refs and len(args.refs) != args.speakers:
        raise UsageError(f"--refs needs {args.speakers} files, got {len(args.refs)}")
    model = infer.Model.load(args.model)
    mixture = sig.read_wav(args.input)
    refs = [sig.read_wav(p) for p in args.refs] if args.refs else None
    if refs and any(len(r) != len(mixture) for r in refs):
        raise sig.SignalError("reference lengths differ from the mixture length")
    cb = infer.AttractorCodebook.load(args.codebook) if args.codebook else None
    res = infer.separate(model, mixture, args.speakers, args.strategy, cb, refs, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for c, w in enumerate(res.sources):
        sig.write_wav(out / f"{stem}_est{c}.wav", w)
    save_tensors(out / f"{stem}_masks.bin",
                 {"masks": res.masks, "attractors": res.attractors},
                 {"kind": "separation", "strategy": args.strategy, "C": args.speakers})
    _echo(out / f"{stem}.resolved.txt", _resolved(args))
    print(f"wrote {len(res.sources)} sources to {out}")


# --- eval ----------------------------------------------------------------------

def _model_and_split(args):
    if not Path(args.data).is_dir():
        raise data.DataError(f"data directory {args.data} does not exist")
    model = infer.Model.load(args.model)
    recs = data.load_split(args.data, args.split)
    if not recs:
        raise data.DataError(f"split {args.split!r} of {args.data} is empty")
    return model, recs


def cmd_eval(args):
    model, recs = _model_and_split(args)
    cb = None
    if args.strategy == "fixed":
        if args.codebook:
            cb = infer.AttractorCodebook.load(args.codebook)
        else:
            cb = infer.build_codebook(model, data.load_split(args.data, "train"),
                                      args.clusters, args.seed, str(args.data))
    elif args.codebook:
        raise UsageError("--codebook is only used with --strategy fixed")
    reports = []
    for r in recs:
        res = infer.separate(model, r.mixture, len(r.sources), args.strategy, cb, r.sources,
                             args.seed)
        reports.append(ev.evaluate_mixture(res.sources, r.sources, r.mixture, r.id))
    summary = ev.aggregate(reports)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    ev.write_report_csv(report, reports, summary,
                        {"strategy": args.strategy, "model": args.model, "data": args.data,
                         "split": args.split})
    plotting.plot_metrics(summary, _beside(report, ".png"), args.strategy)
    _echo(_beside(report, ".resolved.txt"), _resolved(args))
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in summary.items()))


# --- inspect-attractors ------------------------------------------------------

def cmd_inspect(args):
    model, recs = _model_and_split(args)
    rows = []
    first = None
    for r in recs:
        res = infer.separate(model, r.mixture, len(r.sources), args.strategy,
                             references=r.sources, seed=args.seed)
        a = res.attractors
        dist = min(float(np.linalg.norm(a[i] - a[j]))
                   for i, j in itertools.combinations(range(len(a)), 2))
        rows.append((r.id, a, dist))
        if first is None:
            first = (r, res)
    population = np.vstack([a for _, a, _ in rows])
    pca = ev.pca_project(population) if len(population) >= 4 else None
    C = rows[0][1].shape[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        head = ["mixture", "min_pairwise_distance"]
        head += [f"a{c}_pc{k}" for c in range(C) for k in (1, 2, 3)]
        fh.write(",".join(head) + "\n")
        for mid, a, dist in rows:
            pcs = pca.transform(a) if pca else np.zeros((C, 3))
            fh.write(",".join([mid, f"{dist:.9g}"] + [f"{x:.9g}" for x in pcs.ravel()]) + "\n")
    if pca is not None:
        coords = np.stack([pca.transform(a) for _, a, _ in rows])
        plotting.plot_attractor_population(coords, _beside(out, ".png"))
    r, res = first
    S = np.stack([np.abs(sig.stft(s).bins) for s in r.sources], axis=-1)
    emb_csv = _beside(out, "_embedding.csv")
    ev.export_embedding_csv(res.embeddings, data.membership(S), res.attractors, None, emb_csv)
    pts, dom, flag = ev.read_embedding_csv(emb_csv)
    plotting.plot_embedding(pts, dom, flag, _beside(out, "_embedding.png"))
    _echo(_beside(out, ".resolved.txt"), _resolved(args))
    d = [x for _, _, x in rows]
    print(f"mixtures={len(rows)} min_distance={min(d):.4f} mean_distance={np.mean(d):.4f}")


# --- codebook ------------------------------------------------------------------

def cmd_codebook(args):
    if not Path(args.data).is_dir():
        raise data.DataError(f"data directory {args.data} does not exist")
    model = infer.Model.load(args.model)
    recs = data.load_split(args.data, "train")
    cb = infer.build_codebook(model, recs, args.clusters, args.seed, str(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cb.save(out)
    _echo(_beside(out, ".resolved.txt"), _resolved(args))
    print(f"wrote {len(cb.entries)} codebook entries to {out}")


def build_parser():
    p = _Parser(prog="danet", description="Attractor-network source separation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic mixture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--mixtures", type=int, required=True, help="training mixtures")
    s.add_argument("--speakers", type=int, default=2)
    s.add_argument("--chunk-len", type=int, default=100)
    s.add_argument("--snr-lo", type=float, default=0.0)
    s.add_argument("--snr-hi", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--valid-mixtures", type=int, default=None)
    s.add_argument("--test-mixtures", type=int, default=None)
    s.add_argument("--duration", type=float, default=4.0, help="seconds per mixture")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an attractor network")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key=value training config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curriculum", action="store_true",
                   help="add a second phase on 400-frame chunks")
    t.set_defaults(func=cmd_train)

    sp = sub.add_parser("separate", help="separate one mixture WAV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=2)
    sp.add_argument("--strategy", choices=infer.STRATEGIES, default="kmeans")
    sp.add_argument("--codebook", default=None)
    sp.add_argument("--refs", nargs="+", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="separate a dataset split and score it")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--strategy", choices=infer.STRATEGIES, default="kmeans")
    e.add_argument("--report", required=True)
    e.add_argument("--codebook", default=None,
                   help="fixed strategy; built from the training split when omitted")
    e.add_argument("--clusters", type=int, default=2)
    e.add_argument("--split", choices=data.SPLITS, default="test")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-attractors", help="export attractor geometry")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--strategy", choices=("oracle", "kmeans"), default="oracle")
    i.add_argument("--split", choices=data.SPLITS, default="test")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("codebook", help="build a fixed-attractor codebook")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--clusters", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_codebook)
    return p


RUNTIME_ERRORS = (data.DataError, sig.SignalError, FormatError, train.ConfigError,
                  train.TrainingDiverged, infer.SeparationError, ev.MetricError,
                  net.NumericalDivergence, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"danet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"danet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
