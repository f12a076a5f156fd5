"""Command-line surface: gen / train / eval / ablate / verify.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Every run
logs its fully resolved configuration into its output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

__all__ = ["main"]


class CliValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


# ---------------------------------------------------------------------------
# gen


def _cmd_gen(args):
    from .data import GenConfig, build_vocab, generate_dataset, write_dataset, \
        reserved_subject_triples

    if args.config:
        with open(args.config) as fh:
            cfg = GenConfig.from_dict(json.load(fh))
    else:
        cfg = GenConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ambiguity is not None:
        cfg.ambiguity = args.ambiguity
    cfg.validate()

    os.makedirs(args.out, exist_ok=True)
    records = generate_dataset(cfg)
    write_dataset(records, args.out)
    build_vocab(cfg).to_file(os.path.join(args.out, "vocab.txt"))
    resolved = {
        "genconfig": cfg.to_dict(),
        "reserved_subject_triples": sorted(reserved_subject_triples(cfg)),
    }
    with open(os.path.join(args.out, "genconfig.json"), "w") as fh:
        json.dump(resolved, fh, indent=1)
    print(json.dumps(resolved["genconfig"]))
    counts = {}
    for rec in records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    for split in ("train", "val", "test", "heldout"):
        print(f"{split}: {counts.get(split, 0)} records")
    return 0


# ---------------------------------------------------------------------------
# train


def _apply_toggles(cfg, toggle_args):
    valid = {"mc", "md", "rg_itc", "rg_itm"}
    for item in toggle_args or []:
        if "=" not in item:
            raise CliValidationError(f"--toggle expects name=on|off, got {item!r}")
        name, _, value = item.partition("=")
        name = name.strip().lower().replace("-", "_")
        if name not in valid:
            raise CliValidationError(f"unknown toggle {name!r} (one of {sorted(valid)})")
        if value.strip().lower() not in ("on", "off"):
            raise CliValidationError(f"toggle value must be on/off, got {value!r}")
        setattr(cfg.toggles, name, value.strip().lower() == "on")


def _load_train_config(args):
    from .train import TrainConfig

    if args.config:
        with open(args.config) as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    else:
        cfg = TrainConfig()
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "batch_size", None) is not None:
        cfg.batch_size = args.batch_size
    _apply_toggles(cfg, getattr(args, "toggle", None))
    return cfg.validate()


def _cmd_train(args):
    from . import evaluate as ev
    from .data import BatchLoader, load_vocab, read_dataset
    from .train import fit, load_checkpoint

    cfg = _load_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    print(json.dumps(cfg.to_dict()))
    summary = fit(cfg, args.data, args.out, resume=args.resume,
                  dry_run=args.dry_run, quiet=args.quiet)
    print(json.dumps(summary))
    if args.dry_run:
        return 0

    # final report on the test split with the best checkpoint
    records = read_dataset(args.data)
    vocab = load_vocab(args.data)
    test_records = [r for r in records if r.split == "test"]
    if test_records:
        trainer = load_checkpoint(summary["best_checkpoint"])
        loader = BatchLoader(test_records, vocab,
                             max_text_len=cfg.encoder.max_text_len,
                             with_regions=False)
        corpus = ev.embed_corpus_loader(loader, trainer.params)
        report = ev.retrieval_report(corpus, rerank_top=cfg.eval_rerank,
                                     params=trainer.params)
        print(report.to_table())
        with open(os.path.join(args.out, "report_test.json"), "w") as fh:
            fh.write(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args):
    from . import evaluate as ev
    from .data import BatchLoader, load_vocab, read_dataset
    from .train import load_checkpoint

    if not os.path.exists(os.path.join(args.checkpoint, "index.json")):
        raise CliValidationError(f"missing checkpoint at {args.checkpoint}")
    trainer = load_checkpoint(args.checkpoint)
    records = [r for r in read_dataset(args.data) if r.split == args.split]
    if not records:
        raise CliValidationError(f"no records for split {args.split!r} in {args.data}")
    vocab = load_vocab(args.data)
    loader = BatchLoader(records, vocab,
                         max_text_len=trainer.cfg.encoder.max_text_len,
                         with_regions=False)
    corpus = ev.embed_corpus_loader(loader, trainer.params)
    report = ev.retrieval_report(corpus, rerank_top=args.rerank,
                                 params=trainer.params)
    print(report.to_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# ablate


ABLATION_ROWS = [
    ("baseline", {"mc": False, "md": False, "rg_itc": False, "rg_itm": False}),
    ("mc", {"mc": True, "md": False, "rg_itc": False, "rg_itm": False}),
    ("mc_md", {"mc": True, "md": True, "rg_itc": False, "rg_itm": False}),
    ("rg_itc", {"mc": False, "md": False, "rg_itc": True, "rg_itm": False}),
    ("rg_itc_rg_itm", {"mc": False, "md": False, "rg_itc": True, "rg_itm": True}),
    ("mc_md_rg_itc", {"mc": True, "md": True, "rg_itc": True, "rg_itm": False}),
    ("mc_md_rg_itm", {"mc": True, "md": True, "rg_itc": False, "rg_itm": True}),
    ("full", {"mc": True, "md": True, "rg_itc": True, "rg_itm": True}),
]

CORE_ROW_NAMES = ("baseline", "mc_md", "rg_itc_rg_itm", "full")


def run_ablation(cfg, data_dir, out_dir, seeds, rows="paper8", quiet=True,
                 warm_epochs=0):
    """Train the toggle grid x seeds; consolidate test and heldout metrics.

    The same per-seed base seed is used across rows (paired comparisons);
    cell seed = config seed + 1000 * seed index. With `warm_epochs` > 0,
    each seed first trains a shared warm start with the plain objective
    (all components off) and every row fine-tunes that same checkpoint,
    mirroring how component ablations share one pretrained initialization.
    """
    from . import evaluate as ev
    from .data import BatchLoader, load_vocab, read_dataset
    from .train import TrainConfig, fit, load_checkpoint

    grid = ABLATION_ROWS if rows == "paper8" else \
        [r for r in ABLATION_ROWS if r[0] in CORE_ROW_NAMES]
    os.makedirs(out_dir, exist_ok=True)
    records = read_dataset(data_dir)
    vocab = load_vocab(data_dir)
    eval_loaders = {}
    for split in ("test", "heldout"):
        split_records = [r for r in records if r.split == split]
        if split_records:
            eval_loaders[split] = BatchLoader(
                split_records, vocab, max_text_len=cfg.encoder.max_text_len,
                with_regions=False)

    results = {name: [] for name, _ in grid}
    failures = []
    for seed_idx in range(seeds):
        cell_seed = cfg.seed + 1000 * seed_idx
        warm_ckpt = None
        if warm_epochs > 0:
            warm_cfg = TrainConfig.from_dict(cfg.to_dict())
            warm_cfg.seed = cell_seed
            warm_cfg.epochs = warm_epochs
            warm_cfg.toggles = _toggles_from(
                {"mc": False, "md": False, "rg_itc": False, "rg_itm": False})
            warm_dir = os.path.join(out_dir, f"warm_seed{seed_idx}")
            try:
                warm_summary = fit(warm_cfg, data_dir, warm_dir, quiet=quiet)
                warm_ckpt = warm_summary["last_checkpoint"]
            except Exception as exc:
                failures.append({"row": "warm", "seed_index": seed_idx,
                                 "error": f"{type(exc).__name__}: {exc}"})
                continue
        for name, toggles in grid:
            cell_cfg = TrainConfig.from_dict(cfg.to_dict())
            cell_cfg.seed = cell_seed
            for k, v in toggles.items():
                setattr(cell_cfg.toggles, k, v)
            cell_dir = os.path.join(out_dir, f"{name}_seed{seed_idx}")
            try:
                summary = fit(cell_cfg, data_dir, cell_dir, quiet=quiet,
                              init_from=warm_ckpt)
                trainer = load_checkpoint(summary["best_checkpoint"])
                cell = {"row": name, "seed_index": seed_idx,
                        "cell_seed": cell_cfg.seed}
                for split, loader in eval_loaders.items():
                    corpus = ev.embed_corpus_loader(loader, trainer.params)
                    report = ev.retrieval_report(
                        corpus, rerank_top=cfg.eval_rerank, params=trainer.params)
                    cell[split] = report.to_dict()
                results[name].append(cell)
                with open(os.path.join(cell_dir, "eval.json"), "w") as fh:
                    json.dump(cell, fh, indent=1)
            except Exception as exc:
                failures.append({"row": name, "seed_index": seed_idx,
                                 "error": f"{type(exc).__name__}: {exc}"})
    consolidated = _consolidate_ablation(results, grid, failures)
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(consolidated, fh, indent=1)
    return consolidated


def _toggles_from(d):
    from .train import Toggles
    return Toggles(**d)


def _consolidate_ablation(results, grid, failures):
    rows = []
    for name, toggles in grid:
        cells = results[name]
        if not cells:
            rows.append({"row": name, "toggles": toggles, "seeds": 0})
            continue
        agg = {"row": name, "toggles": toggles, "seeds": len(cells)}
        for split in ("test", "heldout"):
            if split in cells[0]:
                for metric in cells[0][split]:
                    if metric in ("n_queries", "n_gallery"):
                        agg[f"{split}_{metric}"] = cells[0][split][metric]
                    else:
                        vals = [c[split][metric] for c in cells]
                        agg[f"{split}_{metric}"] = float(np.mean(vals))
        rows.append(agg)
    return {"rows": rows, "failures": failures}


def format_ablation_table(consolidated):
    header = (f"{'row':<16}{'tQ R@1':>8}{'tQ R@5':>8}{'tQ R@10':>9}"
              f"{'iQ R@1':>8}{'iQ R@5':>8}{'iQ R@10':>9}{'held mR':>9}")
    lines = [header]
    for row in consolidated["rows"]:
        if row.get("seeds", 0) == 0:
            lines.append(f"{row['row']:<16}{'(no completed cells)':>20}")
            continue
        lines.append(
            f"{row['row']:<16}"
            f"{row.get('test_text_query_r1', float('nan')):>8.2f}"
            f"{row.get('test_text_query_r5', float('nan')):>8.2f}"
            f"{row.get('test_text_query_r10', float('nan')):>9.2f}"
            f"{row.get('test_image_query_r1', float('nan')):>8.2f}"
            f"{row.get('test_image_query_r5', float('nan')):>8.2f}"
            f"{row.get('test_image_query_r10', float('nan')):>9.2f}"
            f"{row.get('heldout_mR', float('nan')):>9.2f}")
    return "\n".join(lines)


def _cmd_ablate(args):
    cfg = _load_train_config(args)
    print(json.dumps({"train_config": cfg.to_dict(), "seeds": args.seeds,
                      "rows": args.rows, "warm_epochs": args.warm_epochs}))
    consolidated = run_ablation(cfg, args.data, args.out, args.seeds,
                                rows=args.rows, quiet=True,
                                warm_epochs=args.warm_epochs)
    print(format_ablation_table(consolidated))
    if consolidated["failures"]:
        for f in consolidated["failures"]:
            print(f"FAILED cell {f['row']} seed {f['seed_index']}: {f['error']}",
                  file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# verify


def _cmd_verify(args):
    from .verify import run_suite

    ok = run_suite(args.suite)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="rgalign",
                description="Region-global vision-language alignment toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--config", help="GenConfig JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--ambiguity", type=float)
    g.set_defaults(fn=_cmd_gen)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--toggle", action="append",
                   help="component toggle, e.g. --toggle rg_itc=off")
    t.add_argument("--dry-run", action="store_true")
    t.add_argument("--resume", help="run directory to resume from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test",
                   choices=("train", "val", "test", "heldout"))
    e.add_argument("--rerank", type=int, default=0)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="train the component toggle grid")
    a.add_argument("--config", help="base TrainConfig JSON file")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--batch-size", type=int, dest="batch_size")
    a.add_argument("--rows", default="paper8", choices=("paper8", "core4"))
    a.add_argument("--warm-epochs", type=int, default=2, dest="warm_epochs",
                   help="shared plain-objective warm start every row fine-tunes")
    a.set_defaults(fn=_cmd_ablate)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", default="all",
                   choices=("gradients", "oracles", "sampling", "momentum", "all"))
    v.set_defaults(fn=_cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
