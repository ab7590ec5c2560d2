"""``contrastcat`` command line: train, build-reflib, attribute, evaluate, ablate, pca-export.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path


from . import __version__
from .attribution import write_jsonl
from .corpus import encode, load_csv, split_sample, synth_sentiment
from .encoder import (Encoder, TrainParams, forward, load_model, save_model, train)
from .errors import ContrastCatError, FormatError
from .evalharness import (K_GRID, METHODS, SWEEPS, Attributor, SweepContext, evaluate,
                          pca_activation_export, predicted_classes, write_csv)
from .reflib import build_library, load_library, save_library
from .refine import RHO_RULES, RefinementConfig
from .render import ansi_heatmap, html_heatmap

log = logging.getLogger("contrastcat")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_corpus_args(p):
    g = p.add_argument_group("corpus")
    g.add_argument("--csv", type=Path, help="CSV with text,label columns (default: synthetic corpus)")
    g.add_argument("--text-column", default="text")
    g.add_argument("--label-column", default="label")
    g.add_argument("--split-column", help="column holding train/test (default: seeded 80/20 split)")
    g.add_argument("--synth-seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--max-len", type=int, default=32)


def _add_refine_args(p):
    g = p.add_argument_group("refinement")
    g.add_argument("--deletion-fraction", type=float, default=RefinementConfig.fraction)
    g.add_argument("--rho-rule", choices=RHO_RULES, default=RefinementConfig.rule)
    g.add_argument("--removal", choices=("cumulative", "individual"), default="cumulative")
    g.add_argument("--gradient-target", choices=("logit", "prob"), default="logit")
    g.add_argument("--attention-aggregation", choices=("column", "row"), default="column")


def _add_output_args(p):
    p.add_argument("--out", type=Path, default=Path("runs"), help="base output directory")
    p.add_argument("--run-name", help="run directory name (default: <command>-<timestamp>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastcat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the encoder classifier")
    _add_corpus_args(p)
    _add_output_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainParams.epochs)
    p.add_argument("--batch-size", type=int, default=TrainParams.batch_size)
    p.add_argument("--lr", type=float, default=TrainParams.lr)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--ffn-dim", type=int, default=128)

    p = sub.add_parser("build-reflib", help="build the per-class reference library")
    p.add_argument("--model", type=Path, required=True)
    _add_corpus_args(p)
    _add_output_args(p)
    p.add_argument("--gamma", type=float, default=1e-3)
    p.add_argument("--K", type=int, default=30)

    p = sub.add_parser("attribute", help="attribution maps and heatmaps for text")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--library", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", action="append", help="input text (repeatable)")
    src.add_argument("--file", type=Path, help="one input text per line")
    p.add_argument("--methods", type=_str_list, default=["contrast-cat"],
                   help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--target-class", type=int, help="class to explain (default: predicted)")
    _add_refine_args(p)
    _add_output_args(p)

    p = sub.add_parser("evaluate", help="AOPC/LOdds curves for every method")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--library", type=Path, required=True)
    _add_corpus_args(p)
    _add_refine_args(p)
    _add_output_args(p)
    p.add_argument("-N", "--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-grid", type=_int_list, default=list(K_GRID))
    p.add_argument("--methods", type=_str_list, default=list(METHODS))

    p = sub.add_parser("ablate", help="gamma / layer / reference-count / rho / mode sweeps")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--library", type=Path, required=True)
    _add_corpus_args(p)
    _add_refine_args(p)
    _add_output_args(p)
    p.add_argument("-N", "--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-grid", type=_int_list, default=list(K_GRID))
    p.add_argument("--sweeps", type=_str_list, default=list(SWEEPS))

    p = sub.add_parser("pca-export", help="2-D PCA of token-averaged activations")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--library", type=Path, required=True)
    _add_corpus_args(p)
    _add_output_args(p)
    p.add_argument("-N", "--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=_int_list, help="1-based layers (default: all)")
    return parser


def _check_paths(args):
    for name in ("csv", "model", "library", "file"):
        path = getattr(args, name, None)
        if path is not None:
            if not path.exists():
                raise UsageError(f"--{name}: no such file: {path}")
            setattr(args, name, path.resolve())
    args.out = args.out.resolve()


def _run_dir(args) -> Path:
    name = args.run_name or f"{args.command}-{datetime.now().strftime('%Y%m%d-%H%M%S-%f')}"
    d = args.out / name
    d.mkdir(parents=True, exist_ok=True)
    manifest = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k not in ("func",)}
    manifest["version"] = __version__
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def _corpus(args):
    if args.csv is not None:
        return load_csv(args.csv, args.text_column, args.label_column, args.split_column,
                        max_len=args.max_len)
    return synth_sentiment(args.synth_seed, args.n_train, args.n_test, args.max_len)


def _model_and_corpus(args):
    model = load_model(args.model)
    corpus = _corpus(args)
    if model.vocab is not None and model.vocab != corpus.vocab:
        raise FormatError("corpus vocabulary does not match the model's; rebuild it with the training flags")
    return model, corpus


def _config(args) -> RefinementConfig:
    return RefinementConfig(args.deletion_fraction, args.rho_rule, args.removal,
                            args.gradient_target, args.attention_aggregation)


def cmd_train(args):
    corpus = _corpus(args)
    out = _run_dir(args)
    model = Encoder.for_corpus(corpus, layers=args.layers, heads=args.heads,
                               model_dim=args.heads * args.head_dim, head_dim=args.head_dim,
                               ffn_dim=args.ffn_dim, seed=args.seed)
    report = train(model, corpus, TrainParams(epochs=args.epochs, batch_size=args.batch_size,
                                              lr=args.lr, seed=args.seed))
    save_model(model, out / "model.bin")
    summary = report.to_dict()
    summary["fingerprint"] = model.fingerprint()
    (out / "training_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"test accuracy {report.test_accuracy:.4f}; model written to {out / 'model.bin'}")
    return out


def cmd_build_reflib(args):
    model, corpus = _model_and_corpus(args)
    lib = build_library(model, corpus, args.gamma, args.K)
    out = _run_dir(args)
    save_library(lib, out / "library.bin")
    info = {"gamma": lib.gamma, "K": lib.K, "fingerprint": lib.fingerprint,
            "entries": {str(c): len(v) for c, v in lib.entries.items()}, "warnings": lib.warnings}
    (out / "library.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"library with {info['entries']} entries written to {out / 'library.bin'}")
    return out


def cmd_attribute(args):
    model = load_model(args.model)
    if model.vocab is None:
        raise FormatError("model file carries no vocabulary")
    lib = load_library(args.library, model)
    unknown = set(args.methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown methods: {sorted(unknown)}")
    texts = args.text or [t for t in args.file.read_text(encoding="utf-8").splitlines() if t.strip()]
    out = _run_dir(args)
    att = Attributor(model, lib, _config(args))
    records, rows = [], []
    for text in texts:
        seq = encode(text, model.vocab, model.config.max_len).trimmed()
        c = args.target_class if args.target_class is not None else forward(model, seq).predicted
        tokens = [model.vocab.token(i) for i in seq.ids]
        for name, amap in att.maps(seq, c, args.methods).items():
            records.append((tokens, amap, text))
            rows.append((f"{name} [class {c}]", tokens, amap.normalized_view, amap.rankable))
            print(f"{name:>13} c={c}: {ansi_heatmap(tokens, amap.normalized_view, amap.rankable)}")
    write_jsonl(records, out / "attributions.jsonl")
    (out / "heatmap.html").write_text(html_heatmap(rows), encoding="utf-8")
    return out


def cmd_evaluate(args):
    model, corpus = _model_and_corpus(args)
    lib = load_library(args.library, model)
    unknown = set(args.methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown methods: {sorted(unknown)}")
    out = _run_dir(args)
    samples = split_sample(corpus, args.samples, args.seed)
    report = evaluate(model, samples, Attributor(model, lib, _config(args)),
                      tuple(args.methods), tuple(args.k_grid))
    write_csv(report.curve_rows(), out / "curves.csv")
    write_csv(report.auc_rows(), out / "auc.csv")
    summary = {"samples": report.n_samples, "fingerprints": report.fingerprints,
               "seconds": report.seconds,
               "auc": {f"{r['method']}/{r['metric']}/{r['order']}": r["auc"] for r in report.auc_rows()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for m in args.methods:
        print(f"{m:>13}  MoRF AOPC {report.auc(m):.4f}  LeRF AOPC {report.auc(m, 'aopc', 'lerf'):.4f}")
    return out


def cmd_ablate(args):
    model, corpus = _model_and_corpus(args)
    lib = load_library(args.library, model)
    unknown = set(args.sweeps) - set(SWEEPS)
    if unknown:
        raise UsageError(f"unknown sweeps: {sorted(unknown)}")
    out = _run_dir(args)
    samples = split_sample(corpus, args.samples, args.seed)
    ctx = SweepContext(model, corpus, samples, predicted_classes(model, samples), lib,
                       _config(args), tuple(args.k_grid))
    timings = {}
    for name in args.sweeps:
        t0 = time.perf_counter()
        rows = SWEEPS[name](ctx)
        timings[name] = time.perf_counter() - t0
        write_csv(rows, out / f"sweep_{name}.csv")
        print(f"sweep {name}: {len(rows)} rows")
    (out / "summary.json").write_text(json.dumps({"seconds": timings}, indent=2) + "\n")
    return out


def cmd_pca_export(args):
    model, corpus = _model_and_corpus(args)
    lib = load_library(args.library, model)
    layers = [l - 1 for l in (args.layers or range(1, model.config.layers + 1))]
    if any(not 0 <= l < model.config.layers for l in layers):
        raise UsageError(f"layers must lie in 1..{model.config.layers}")
    out = _run_dir(args)
    samples = [s.trimmed() for s in split_sample(corpus, args.samples, args.seed)]
    write_csv(pca_activation_export(model, samples, layers), out / "pca_original.csv")
    write_csv(pca_activation_export(model, samples, layers, True, lib), out / "pca_contrasted.csv")
    return out


COMMANDS = {
    "train": cmd_train,
    "build-reflib": cmd_build_reflib,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "pca-export": cmd_pca_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_paths(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"contrastcat: error: {exc}", file=sys.stderr)
        return 2
    except ContrastCatError as exc:
        print(f"contrastcat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
