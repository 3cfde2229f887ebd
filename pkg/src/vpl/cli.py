"""Command-line entry point: ``vpl <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import io
from . import report
from .autodiff import ContractError, ShapeError
from .model import VocabularyError, dims_from_params
from .perturb import contribution_scores, salient_set
from .synth import ConfigError, SynthConfig, generate
from .training import SALIENCY_MODES, TrainConfig, evaluate, train

log = logging.getLogger("vpl")

_EXPECTED = (ConfigError, io.FormatError, ContractError, ShapeError, VocabularyError, OSError)


def _check_model(params: dict, ds):
    dims = dims_from_params(params)
    cfg = ds.config
    if (dims.feature_dim, dims.num_answers, dims.vocab_size) != (cfg.feature_dim, cfg.num_answers, cfg.vocab_size):
        raise ConfigError(f"checkpoint (feature_dim={dims.feature_dim}, answers={dims.num_answers}, "
                          f"vocab={dims.vocab_size}) does not match dataset (feature_dim={cfg.feature_dim}, "
                          f"answers={cfg.num_answers}, vocab={cfg.vocab_size})")


def cmd_synth(a) -> int:
    cfg = io.load_dataclass_config(SynthConfig, Path(a.config) if a.config else "")
    out = io.write_dataset(generate(cfg), a.out)
    print(f"wrote dataset to {out} (seed={cfg.seed})")
    return 0


def cmd_train(a) -> int:
    ds = io.read_dataset(a.data)
    cfg = io.load_dataclass_config(TrainConfig, Path(a.config) if a.config else "")
    if a.order:
        cfg = replace(cfg, order=a.order)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(m):
        print(f"epoch {m.epoch:3d} {m.phase:<13} loss={m.loss_total:.4f} "
              f"train={m.train_acc:.4f} test={m.test_acc:.4f} lr={m.lr:.2e} K={m.k}", file=sys.stderr)

    result = train(cfg, ds, callback=progress)
    (out / "config.txt").write_text(io.dump_kv(cfg))
    io.write_checkpoint(result.params, out / "checkpoint.bin")
    report.export_report(result.history, result.params, ds.test, out)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_eval(a) -> int:
    ds = io.read_dataset(a.data)
    params = io.read_checkpoint(a.checkpoint)
    _check_model(params, ds)
    split = ds.split(a.split)
    rep = evaluate(params, split, num_types=ds.config.num_question_types)
    print(f"split: {a.split}")
    print(f"instances: {len(split)}")
    print(f"accuracy: {rep.overall:.6f}")
    for t, v in enumerate(rep.per_type):
        print(f"accuracy q{t}: {v:.6f}")
    out = Path(a.csv) if a.csv else Path(a.checkpoint).with_name(f"eval_{a.split}.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "question_type", "predicted_answer", "score"])
        for i, (q, p, s) in enumerate(zip(split.question_types, rep.predictions, rep.instance_scores)):
            w.writerow([i, int(q), int(p), repr(float(s))])
    print(f"per-instance csv: {out}")
    return 0


def cmd_gradcheck(a) -> int:
    errs = gc.run(a.module, a.eps)
    bad = False
    for name, e in errs.items():
        ok = e < gc.TOLERANCE
        bad |= not ok
        print(f"{name:<8} max_rel_err={e:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if bad else 0


def cmd_inspect(a) -> int:
    ds = io.read_dataset(a.data)
    params = io.read_checkpoint(a.checkpoint)
    _check_model(params, ds)
    split = ds.split(a.split)
    if a.limit is not None:
        split = split.subset(np.arange(min(a.limit, len(split))))
    n = len(split)
    X = split.features.astype(np.float64)
    weights = None if a.saliency == "all-signed" else split.scores.astype(np.float64)
    scores = np.concatenate([
        contribution_scores(params, X[s:s + 256], split.tokens[s:s + 256],
                            None if weights is None else weights[s:s + 256], rectify=a.saliency == "gt-abs")
        for s in range(0, n, 256)])
    sal = salient_set(scores, a.tau)
    report.write_scores_csv(a.out, scores, sal, range(n))
    hit = np.mean([split.salient[i] in sal[i] for i in range(n)])
    print(f"wrote {n * scores.shape[1]} rows to {a.out}; true salient region in top-{a.tau}: {hit:.4f}")
    return 0


def cmd_report(a) -> int:
    paths = report.regenerate(a.run)
    print(paths["summary"].read_text(), end="")
    print(f"curves: {paths['curves']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpl", description="Visual perturbation-aware VQA on synthetic data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="key=value file of generator settings")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="run the three training phases")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key=value file of trainer settings")
    s.add_argument("--out", required=True)
    s.add_argument("--order", choices=("algorithm1", "prose"))
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="vote-based accuracy of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--csv", help="per-instance output (default: eval_<split>.csv next to the checkpoint)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", choices=gc.MODULES, default="all")
    s.add_argument("--eps", type=float, default=gc.DEFAULT_EPS)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("inspect", help="dump region contribution scores and salient sets")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--tau", type=int, default=2)
    s.add_argument("--saliency", choices=SALIENCY_MODES, default="gt-abs")
    s.add_argument("--limit", type=int)
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("report", help="regenerate curves.svg and summary.txt for a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except _EXPECTED as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
