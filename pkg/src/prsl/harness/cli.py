"""Command-line entry point (``prsl``).

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or
training failure, 3 I/O or checkpoint failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from ..attacks import AttackConfig, bim_attack, write_pnm
from ..errors import AttackError, CheckpointError, NumericError, PRSLError, TrainingError
from ..losses import B_GRID, LossConfig, RankWindow
from ..models import CaptionerSpec, ClassifierSpec, TrainConfig, load_checkpoint, save_checkpoint, train
from ..textmetrics import (
    CorpusStats,
    best_reference,
    bleu,
    cider,
    greedy_align_score,
    load_embedding_table,
    meteor_exact,
    random_embedding_table,
    rouge_l,
    tokenize,
)
from . import experiment as ex
from . import report as rp
from .data import SyntheticDatasetSpec, generate_dataset, load_dataset, save_dataset, vocabulary

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _windows(text):
    return [RankWindow.parse(w) for w in text.split(",") if w.strip()]


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _read_tsv(path) -> dict:
    """``ID<TAB>text`` lines; repeated IDs accumulate (multiple references)."""
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise UsageError(f"{path}:{lineno}: expected ID<TAB>text")
            key, text = line.split("\t", 1)
            out.setdefault(key, []).append(text)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    spec = SyntheticDatasetSpec.from_dict(_read_json(args.spec)) if args.spec else SyntheticDatasetSpec(
        image_size=args.image_size, shape_size=args.shape_size, noise=args.noise,
        n_train=args.n_train, n_test=args.n_test, num_classes=args.num_classes,
        shapes_per_image=(args.min_shapes, args.max_shapes), seed=args.seed)
    save_dataset(generate_dataset(spec), args.out)
    print(f"wrote dataset to {args.out}")


def cmd_train(args):
    ds = load_dataset(args.data)
    size = ds.spec.image_size
    if args.model == "classifier":
        spec = ClassifierSpec(height=size, width=size, hidden=tuple(args.hidden), classes=args.classes)
    else:
        spec = CaptionerSpec(height=size, width=size)
    loss = LossConfig(b=args.b, window=RankWindow.parse(args.window))
    spec.validate_window(loss.window)
    config = TrainConfig(loss=loss, learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.seed)
    ckpt = train((ds.train.images, ds.train.targets(spec.kind)), config, spec)
    save_checkpoint(ckpt, args.out)
    print(f"final train loss {ckpt.metadata['final_train_loss']:.6g}; wrote {args.out}")


def cmd_attack(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    split = getattr(ds, args.split)
    n = len(split) if args.limit is None else min(args.limit, len(split))
    images = split.images[:n]
    refs = split.labels[:n] if ckpt.spec.kind == "classifier" else split.captions[:n]
    config = AttackConfig(eps=args.eps, alpha=args.alpha, iters_per_round=args.iters, rounds=args.rounds)
    trace = bim_attack(ckpt.spec, ckpt.params, images, refs, config)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "rounds.npy"), np.stack(trace.images))
    with open(os.path.join(args.out, "losses.json"), "w") as fh:
        json.dump({"config": config.to_dict(), "losses": [l.tolist() for l in trace.losses]}, fh, indent=1)
    for i in range(min(args.pnm, n)):
        for r, img in enumerate(trace.images):
            write_pnm(os.path.join(args.out, f"item{i}_round{r}.ppm"), img[i])
    print(f"attacked {n} images for {config.rounds} rounds; wrote {args.out}")


def _text_score(metric, cand, refs, stats, table, smoothing):
    if metric == "bleu":
        return bleu(cand, refs, smoothing=smoothing)
    if metric == "cider":
        return cider(cand, refs, stats)
    if metric == "rougeL":
        return best_reference(rouge_l, cand, refs)
    if metric == "meteor":
        return best_reference(meteor_exact, cand, refs)
    if metric == "align":
        return best_reference(greedy_align_score, cand, refs, table=table)
    raise UsageError(f"unknown metric {metric!r}")


def cmd_eval(args):
    cands = _read_tsv(args.candidates)
    refs = _read_tsv(args.references)
    missing = sorted(set(cands) - set(refs))
    if missing:
        raise UsageError(f"candidates without references: {', '.join(missing[:5])}")
    ids = sorted(cands)
    ref_tokens = {k: [tokenize(t) for t in refs[k]] for k in ids}
    stats = CorpusStats.build([ref_tokens[k] for k in ids])
    table = None
    if "align" in args.metric:
        table = load_embedding_table(args.embeddings) if args.embeddings else \
            random_embedding_table(vocabulary(), seed=args.embedding_seed)
    rows = []
    for k in ids:
        cand = tokenize(cands[k][0])
        for metric in args.metric:
            s = _text_score(metric, cand, ref_tokens[k], stats, table, args.bleu_smoothing)
            rows.append((k, metric, repr(float(s.value)), json.dumps(s.components, sort_keys=True)))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("id", "metric", "value", "components_json"))
        w.writerows(rows)
    finally:
        if args.out:
            out.close()


def _experiment(args):
    exp = ex.ExperimentSpec.from_dict(_read_json(args.experiment))
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = tuple(range(args.seeds))
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        from dataclasses import replace
        exp = replace(exp, **overrides)
    return exp


def _finish(result, out):
    files = rp.emit_report(result, out)
    failed = [c for c in result.cells if c.error]
    for c in failed:
        print(f"cell {c.arm.label}/seed {c.seed} failed: {c.error}", file=sys.stderr)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_NUMERIC if failed and len(failed) == len(result.cells) else EXIT_OK


def cmd_sweep_b(args):
    grid = _floats(args.grid) if args.grid else B_GRID
    window = RankWindow.parse(args.window) if args.window else None
    return _finish(ex.grid_search_b(_experiment(args), grid, window), args.out)


def cmd_sweep_k(args):
    return _finish(ex.k_sweep(_experiment(args), _windows(args.windows), args.b), args.out)


def cmd_run(args):
    return _finish(ex.run_arms(_experiment(args), args.threshold_rounds), args.out)


def cmd_report(args):
    if args.replay:
        return _finish(ex.replay(rp.read_manifest(args.input)), args.out)
    scores = rp.read_per_item(args.input)
    rows = rp.thresholds_from_scores(scores, _floats(args.thresholds), args.rounds, args.metric)
    rp.write_files({"thresholds.csv": rp.thresholds_csv(rows)}, args.out)
    for r in rows:
        print(f"{r.arm}\t{r.metric}\t{r.threshold:g}\t{r.proportion:.4f}")


def build_parser():
    p = _Parser(prog="prsl", description="Recentralized softmax training, attacks and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="dataset spec JSON (overrides the flags)")
    g.add_argument("--image-size", type=int, default=12)
    g.add_argument("--shape-size", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--num-classes", type=int, default=16)
    g.add_argument("--min-shapes", type=int, default=1)
    g.add_argument("--max-shapes", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=("classifier", "captioner"), default="classifier")
    t.add_argument("--b", type=float, default=0.0)
    t.add_argument("--window", default="2:6")
    t.add_argument("--hidden", type=int, nargs="+", default=[64])
    t.add_argument("--classes", type=int, default=16)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="BIM-attack a dataset split with a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", choices=("train", "test"), default="test")
    a.add_argument("--limit", type=int)
    a.add_argument("--eps", type=float, default=0.1)
    a.add_argument("--alpha", type=float, default=0.02)
    a.add_argument("--iters", type=int, default=1)
    a.add_argument("--rounds", type=int, default=10)
    a.add_argument("--pnm", type=int, default=0, help="export this many items as PPM images")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="score candidate captions against references")
    e.add_argument("--candidates", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--metric", nargs="+", default=["rougeL"], choices=ex.CAPTION_METRICS)
    e.add_argument("--embeddings")
    e.add_argument("--embedding-seed", type=int, default=0)
    e.add_argument("--bleu-smoothing", type=float, default=0.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("sweep-b", cmd_sweep_b, "grid search over b"),
                                 ("sweep-k", cmd_sweep_k, "compare rank windows"),
                                 ("run", cmd_run, "run the configured arms")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--experiment", required=True, help="experiment JSON")
        s.add_argument("--out", required=True)
        s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
        s.add_argument("--workers", type=int)
        s.set_defaults(func=func)
        if name == "sweep-b":
            s.add_argument("--grid", help="comma-separated b values (default 1e-1..1e-10)")
            s.add_argument("--window")
        elif name == "sweep-k":
            s.add_argument("--windows", default="2:3,2:6,2:10")
            s.add_argument("--b", type=float)
        else:
            s.add_argument("--threshold-rounds", type=int)

    r = sub.add_parser("report", help="threshold table from stored scores, or full replay")
    r.add_argument("--in", dest="input", required=True, help="report directory or manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--thresholds", default="0.9,0.8,0.75,0.7")
    r.add_argument("--rounds", type=int, default=2)
    r.add_argument("--metric")
    r.add_argument("--replay", action="store_true", help="re-run the experiment from the manifest")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"prsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"prsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError, AttackError) as exc:
        print(f"prsl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"prsl: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PRSLError, ValueError, KeyError) as exc:
        print(f"prsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
