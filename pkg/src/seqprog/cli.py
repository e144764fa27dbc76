"""Command-line entry point: synth | pretrain | extract | train | eval | ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes ``config.json`` (all resolved flags) to its output
directory so that a run can be replayed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .aggregator import (AggregatorConfig, TrainConfig, config_dict, evaluate, load_aggregator, param_count,
                         save_aggregator, write_log)
from .data.manifest import load_manifest, write_manifest
from .data.preprocess import load_image, preprocess_image
from .data.records import PatientSequence
from .data.splits import kfold_plan, stratified_split
from .data.store import read_store, write_store
from .data.synth import SynthConfig, cohort_summary, generate_synthetic_cohort
from .errors import DataError, NonFiniteError
from .eval.ablation import (build_sequences, cross_validate, delta_t_sweep, lambda_ablation, significance,
                            width_ablation)
from .eval.metrics import roc_auc
from .eval.report import EvalReport, Table
from .mae import MAEConfig, extract_embeddings, load_mae, pretrain

logger = logging.getLogger("seqprog")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, args, **resolved) -> None:
    # the output directory is where this file lives, so it is left out to keep reruns comparable
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    payload = {"flags": flags, **resolved}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _load_cohort(paths) -> list[PatientSequence]:
    cohort = []
    for p in paths:
        cohort.extend(load_manifest(p))
    if not cohort:
        raise DataError("no sequences found in the given manifest(s)")
    return cohort


def _samples(args):
    cohort = _load_cohort(args.manifest)
    store = read_store(args.store)
    return cohort, build_sequences(cohort, store), store.dim


def _agg_config(args, dim: int) -> AggregatorConfig:
    return AggregatorConfig(dim=dim, proj_dim=args.proj_dim, lambda_single=args.lambda1,
                            lambda_seq=args.lambda2, variant=args.variant)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
                       lr_start=args.lr_start, lr_end=args.lr_end)


def _plan(args, cohort):
    if args.folds == 1:
        return [stratified_split(cohort, seed=args.seed)]
    return kfold_plan(cohort, args.folds, args.seed)


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_patients=args.patients, drift=args.drift, positive_fraction=args.positive_frac,
                      length_probs=(1.0 / args.max_len,) * args.max_len, seed=args.seed, mode=args.mode,
                      image_size=args.image_size, embed_dim=args.embed_dim,
                      **({} if args.noise is None else {"noise": args.noise}))
    out = _out_dir(args)
    cohort = generate_synthetic_cohort(cfg)
    if cfg.mode == "image":
        (out / "images").mkdir(exist_ok=True)
        for vid, img in cohort.images.items():
            Image.fromarray(img).save(out / "images" / f"{vid}.png")
    else:
        write_store(out / "embeddings.tsdf", cohort.embeddings)
    write_manifest(out / "manifest.csv", cohort.sequences)
    summary = cohort_summary(cohort.sequences)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _echo_config(out, args, synth=asdict(cfg))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cohort = _load_cohort(args.manifest)
    refs = [v.image_ref for seq in cohort for v in seq.visits]
    corpus = []
    for ref in refs:
        if not Path(ref).is_file():
            raise DataError(f"missing image {ref}")
        corpus.append(load_image(ref))
    cfg = MAEConfig(image_size=args.image_size, patch_size=args.patch_size, encoder_dim=args.encoder_dim,
                    mask_ratio=args.mask_ratio, base_lr=args.base_lr, batch_size=args.batch_size)
    out = _out_dir(args)
    _echo_config(out, args, mae=asdict(cfg), corpus_size=len(corpus))
    res = pretrain(corpus, cfg, args.epochs, args.seed, out_dir=out)
    print(json.dumps({"corpus_size": len(corpus), "epochs": args.epochs,
                      "final_loss": res.log[-1]["loss"] if res.log else None}))
    return EXIT_OK


def cmd_extract(args) -> int:
    model = load_mae(args.checkpoint)
    if args.dim is not None and args.dim != model.feature_dim:
        raise DataError(f"--dim {args.dim} does not match the checkpoint's feature dim {model.feature_dim}")
    cohort = _load_cohort(args.manifest)
    visits = [v for seq in cohort for v in seq.visits]
    images = []
    for v in visits:
        if not Path(v.image_ref).is_file():
            raise DataError(f"missing image {v.image_ref}")
        images.append(preprocess_image(load_image(v.image_ref), size=model.cfg.image_size))
    emb = extract_embeddings(images, model)
    out = _out_dir(args)
    path = out / "embeddings.tsdf"
    written = write_store(path, zip((v.visit_id for v in visits), emb))
    back = read_store(path)
    if back.ids != written.ids or not np.array_equal(back.vectors, written.vectors):
        raise DataError(f"{path}: store failed its round-trip check")
    _echo_config(out, args, feature_dim=model.feature_dim)
    print(json.dumps({"store": str(path), "count": len(back), "dim": back.dim}))
    return EXIT_OK


def cmd_train(args) -> int:
    cohort, samples, dim = _samples(args)
    cfg, tcfg = _agg_config(args, dim), _train_config(args)
    plan = _plan(args, cohort)
    out = _out_dir(args)
    _echo_config(out, args, aggregator=config_dict(cfg), training=asdict(tcfg))
    res = cross_validate(samples, plan, cfg, args.seed, tcfg, keep_models=True)
    for i, (model, log) in enumerate(zip(res.models, res.logs), start=1):
        save_aggregator(out / f"aggregator_fold{i}.ckpt", model)
        write_log(out / f"train_log_fold{i}.jsonl", log)
    report = res.report("train")
    report.notes.update({"lambda": f"{cfg.lambda_single:g}:{cfg.lambda_seq:g}", "variant": cfg.variant,
                         "proj_dim": cfg.proj_dim, "seed": args.seed})
    report.write(out)
    print(report.to_text(), end="")
    return EXIT_OK


def _chunks(labels: np.ndarray, n: int) -> list[np.ndarray]:
    """Deterministic class-stratified partition of indices into ``n`` chunks."""
    parts = [[] for _ in range(n)]
    pos = 0
    for c in np.unique(labels):
        for i in np.flatnonzero(labels == c):
            parts[pos % n].append(i)
            pos += 1
    return [np.array(sorted(p)) for p in parts]


def cmd_eval(args) -> int:
    cohort, samples, _ = _samples(args)
    model = load_aggregator(args.checkpoint)
    ev = evaluate(samples, model)
    auc = roc_auc(ev["scores"], ev["labels"])  # raises on a single-class set
    report = EvalReport("eval", [ev["acc"]], [auc], param_count(model)[0],
                        [{"test": len(samples)}], notes={"checkpoint": str(args.checkpoint)})
    if args.compare:
        other = evaluate(samples, load_aggregator(args.compare))
        chunks = _chunks(ev["labels"], args.chunks)
        a = [roc_auc(ev["scores"][c], ev["labels"][c]) for c in chunks]
        b = [roc_auc(other["scores"][c], other["labels"][c]) for c in chunks]
        report.significance = {**significance(a, b), "unit": "per-chunk AUC", "compare": str(args.compare)}
        t = Table("chunks", ["chunk", "auc_model", "auc_compare"])
        for i, (x, y) in enumerate(zip(a, b), start=1):
            t.add(i, x, y)
        report.tables.append(t)
    out = _out_dir(args)
    _echo_config(out, args)
    report.write(out, "eval")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cohort, samples, dim = _samples(args)
    cfg, tcfg = _agg_config(args, dim), _train_config(args)
    plan = _plan(args, cohort)
    out = _out_dir(args)
    _echo_config(out, args, aggregator=config_dict(cfg), training=asdict(tcfg))
    report = EvalReport("ablation", notes={"seed": args.seed, "folds": len(plan)})
    for grid in args.grid:
        if grid == "lambda":
            table, _ = lambda_ablation(samples, plan, cfg, args.seed, tcfg)
        elif grid == "width":
            table, _ = width_ablation(samples, plan, cfg, args.seed, tcfg)
        else:
            table, _ = delta_t_sweep(samples, plan, cfg, args.seed, range(args.min, args.max + 1), tcfg)
        report.tables.append(table)
    report.write(out, "ablation")
    print(report.to_text(), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _common(p, manifest=True, store=False, checkpoint=False):
    p.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise repeatability")
    if manifest:
        p.add_argument("--manifest", nargs="+", required=True, help="one or more cohort manifests")
    if store:
        p.add_argument("--store", required=True, help="embedding store (.tsdf)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True)


def _aggregator_flags(p):
    p.add_argument("--lambda1", type=float, default=1.5, help="weight of the per-frame loss")
    p.add_argument("--lambda2", type=float, default=1.0, help="weight of the sequence loss")
    p.add_argument("--proj-dim", type=int, default=None, help="projection width D' (default 2x input dim)")
    p.add_argument("--variant", choices=("bilinear", "self_attention"), default="bilinear")
    p.add_argument("--folds", type=int, default=5, help="CV folds; 1 = single 70/10/20 split")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr-start", type=float, default=1e-4)
    p.add_argument("--lr-end", type=float, default=5e-5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqprog", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p, manifest=False)
    p.add_argument("--patients", type=int, default=600)
    p.add_argument("--positive-frac", type=float, default=0.5)
    p.add_argument("--max-len", type=int, default=6, help="sequence lengths are uniform on 1..max-len")
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=None, help="observation noise (default: calibrated)")
    p.add_argument("--mode", choices=("image", "embedding"), default="image")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining on manifest images")
    _common(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--encoder-dim", type=int, default=64)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--base-lr", type=float, default=MAEConfig.base_lr)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="embed every visit with a pretrained encoder")
    _common(p, checkpoint=True)
    p.add_argument("--dim", type=int, default=None, help="expected embedding dim (checked against checkpoint)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="cross-validated aggregator training")
    _common(p, store=True)
    _aggregator_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved aggregator on a held-out manifest")
    _common(p, store=True, checkpoint=True)
    p.add_argument("--compare", default=None, help="second checkpoint; adds a Mann-Whitney U comparison")
    p.add_argument("--chunks", type=int, default=5, help="held-out chunks feeding the U test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-weight, width and sequence-length grids")
    _common(p, store=True)
    _aggregator_flags(p)
    p.add_argument("--grid", nargs="+", choices=("lambda", "width", "delta-t"), required=True)
    p.add_argument("--min", type=int, default=1, help="smallest Δt in the sweep")
    p.add_argument("--max", type=int, default=4, help="largest Δt in the sweep")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    guard = T.deterministic_mode() if args.deterministic else contextlib.nullcontext()
    try:
        with guard:
            return args.func(args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
