"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from gslab import combos
from gslab.errors import GslabError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _manifest_arg(p):
    p.add_argument("--manifest", required=True, help="experiment manifest (JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gslab", description="Augmentation and representation-learning experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("enumerate-augs", help="write the augmentation combination pool")
    p.add_argument("--base", default=combos.BASE_TOKEN)
    p.add_argument("--max-extra", type=int, default=3)
    p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("gen-data", help="render synthetic glyphs into root/<label>/<id>.png")
    p.add_argument("--class-count", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--side", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, help_ in (("train", "baseline training or embedding pretraining"),
                        ("finetune", "train a classifier on a pretrained checkpoint")):
        p = sub.add_parser(name, help=help_)
        _manifest_arg(p)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--ledger", help="results CSV to append to (default: <out-dir>/results.csv)")
        p.add_argument("--seed", type=int, help="override the manifest seed")
        p.add_argument("--aug-spec", help="override the manifest augmentation spec")
        if name == "finetune":
            p.add_argument("--checkpoint", help="override finetune.checkpoint")
            p.add_argument("--freeze-backbone", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    _manifest_arg(p)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")

    p = sub.add_parser("select-top", help="rank augmentation specs from a ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--strategy", choices=("ttest", "mean"), default="ttest")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--baseline", default=combos.BASE_TOKEN)
    p.add_argument("--method")
    p.add_argument("--stage")

    p = sub.add_parser("embed", help="export penultimate-layer embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    _manifest_arg(p)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--sample-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tsne", help="2-D t-SNE of an embedding CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="SVG scatter plot")
    p.add_argument("--points", help="CSV of id,label,x,y (default: next to --out)")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="appendix-style table from a ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method")
    p.add_argument("--stage")
    return parser


def _load_manifest(args):
    from gslab.trainer import ExperimentManifest

    if not Path(args.manifest).is_file():
        raise UsageError(f"--manifest: file not found: {args.manifest}")
    m = ExperimentManifest.load(args.manifest)
    overrides = {}
    if getattr(args, "seed", None) is not None and args.command in ("train", "finetune"):
        overrides["seed"] = args.seed
    if getattr(args, "aug_spec", None):
        overrides["aug_spec"] = args.aug_spec
    if getattr(args, "checkpoint", None) and args.command == "finetune":
        overrides["finetune"] = dict(m.finetune or {}, checkpoint=args.checkpoint)
    if getattr(args, "freeze_backbone", None):
        ft = overrides.get("finetune", dict(m.finetune or {}))
        overrides["finetune"] = dict(ft, freeze_backbone=True)
    if overrides:
        d = json.loads(m.to_json())
        d.update(overrides)
        m = ExperimentManifest.from_dict(d)
    return m


def _split_of(m, name):
    from gslab.trainer import load_splits

    return dict(zip(("train", "valid", "test"), load_splits(m)))[name]


def cmd_enumerate(args):
    specs = combos.enumerate_combinations(args.base, max_extra=args.max_extra)
    if args.out:
        combos.write_specs(specs, args.out)
    else:
        sys.stdout.write("".join(s.format() + "\n" for s in specs))


def cmd_gen_data(args):
    from gslab.data import generate_glyphs, save_image_folder

    ds = generate_glyphs(args.class_count, args.per_class, args.side, args.seed)
    save_image_folder(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.class_count} classes to {args.out}")


def cmd_train(args):
    from gslab import trainer

    m = _load_manifest(args)
    if args.command == "train" and m.stage == "finetune":
        raise UsageError("--manifest: finetune manifests go through the 'finetune' command")
    if args.command == "finetune" and m.stage != "finetune":
        raise UsageError("--manifest: stage must be 'finetune'")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.run(m, out)
    result.monitors.pop("model", None)
    trainer.append_ledger(args.ledger or out / "results.csv", result)
    summary = {k: v for k, v in vars(result).items() if k != "monitors"}
    summary["monitors"] = {k: v for k, v in result.monitors.items() if isinstance(v, (int, float, list, bool))}
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    m.save(out / "manifest.json")
    acc = "" if result.test_acc is None else f" test_acc={result.test_acc:.4f}"
    print(f"{m.method}/{m.stage} {result.aug_spec} seed={m.seed}{acc} checkpoint={result.checkpoint}")


def cmd_evaluate(args):
    from gslab import trainer

    m = _load_manifest(args)
    acc = trainer.evaluate(args.checkpoint, _split_of(m, args.split), m.geometry_obj)
    print(f"{acc:.6f}")


def cmd_select_top(args):
    from gslab.analysis.stats import AugRunTable, select_top_k

    table = AugRunTable.from_ledger(args.ledger, args.method, args.stage)
    for spec in select_top_k(table, args.strategy, args.k, args.baseline):
        print(spec)


def cmd_embed(args):
    from gslab.analysis.embed import export_embeddings

    m = _load_manifest(args)
    ids, _, _ = export_embeddings(args.checkpoint, _split_of(m, args.split), args.sample_n, args.seed,
                                  args.out, m.geometry_obj)
    print(f"wrote {len(ids)} embeddings to {args.out}")


def cmd_tsne(args):
    from gslab.analysis.report import read_embeddings_csv, scatter_svg, write_points_csv
    from gslab.analysis.tsne import TsneConfig, tsne

    ids, labels, values = read_embeddings_csv(args.embeddings)
    cfg = TsneConfig(args.perplexity, args.iterations, args.learning_rate, seed=args.seed)
    res = tsne(values, cfg)
    for it, kl in res.kl_history:
        print(f"iter {it:5d}  KL {kl:.6f}")
    Path(args.out).write_text(scatter_svg(res.points, labels))
    write_points_csv(args.points or Path(args.out).with_suffix(".csv"), ids, labels, res.points)


def cmd_report(args):
    from gslab.analysis.report import write_report

    rows = write_report(args.ledger, args.out, args.method, args.stage)
    print(f"wrote {len(rows)} rows to {args.out}")


COMMANDS = {
    "enumerate-augs": cmd_enumerate, "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_train,
    "evaluate": cmd_evaluate, "select-top": cmd_select_top, "embed": cmd_embed, "tsne": cmd_tsne,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (GslabError, OSError, ValueError, KeyError) as exc:
        print(f"gslab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
