"""``phyloadapt`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Logs go to stderr; set ``PHYLOADAPT_LOG_LEVEL`` to change verbosity. Every
command writes only below its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint
from .adapters import AdapterSpec, load_bank, param_count, save_bank
from .corpus.generate import LanguageCorpus, generate_family, load_genspec
from .corpus.io import read_corpus, write_corpus, write_nli
from .corpus.vocab import Vocab, build_vocab
from .encoder import EncoderConfig, load_backbone, mlm_pretrain_backbone, save_backbone
from .phylogeny import FAMILY, PhyloTree, builtin_tree, load_tree, parse_tree, random_tree
from .suite import ManifestError, SuiteError, load_manifest, rows_to_csv, run_experiment_suite, summary_table
from .tasks import TASKS
from .training import (
    REGIMES,
    StackConfig,
    TrainConfig,
    assemble_stack,
    evaluate,
    load_task_adapter,
    pretrain_joint,
    save_task_adapter,
    train_task_adapter,
)

log = logging.getLogger("phyloadapt")


class UsageError(Exception):
    pass


# -- shared helpers -------------------------------------------------------------------
def _isos(values) -> list[str]:
    out: list[str] = []
    for v in values or ():
        out.extend(x for x in v.split(",") if x)
    return out


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline="\n")


def read_corpus_dir(root: str | Path, split: str) -> dict[str, LanguageCorpus]:
    """Corpora written by ``generate``: ``<root>/<split>/<iso>.jsonl`` plus optional ``<iso>.nli.jsonl``."""
    folder = Path(root) / split
    if not folder.is_dir():
        raise UsageError(f"no {split!r} corpora under {root}")
    out = {}
    for path in sorted(folder.glob("*.jsonl")):
        if path.name.endswith(".nli.jsonl"):
            continue
        iso = path.name[: -len(".jsonl")]
        nli = folder / f"{iso}.nli.jsonl"
        out[iso] = read_corpus(path, nli if nli.exists() else None)
    if not out:
        raise UsageError(f"{folder} holds no corpus files")
    return out


def _tree(arg: str | None, corpus_dir: str | None) -> PhyloTree:
    """Tree from a file, a builtin name, or the generator spec echoed next to the corpora."""
    if arg:
        if Path(arg).exists():
            return load_tree(arg)
        try:
            return builtin_tree(arg)
        except OSError as exc:
            raise UsageError(f"{arg!r} is neither a tree file nor a builtin tree") from exc
    if corpus_dir and (Path(corpus_dir) / "genspec.json").exists():
        return parse_tree(_read_json(Path(corpus_dir) / "genspec.json")["tree"])
    raise UsageError("no tree given; pass --tree")


def _load_foundation(backbone_dir: str):
    root = Path(backbone_dir)
    if not (root / "backbone.ckpt").exists():
        raise UsageError(f"{root} has no backbone.ckpt; run pretrain-backbone first")
    vocab = Vocab.from_dict(_read_json(root / "vocab.json"))
    return load_backbone(root / "backbone.ckpt"), vocab


def _train_config(args, **extra) -> TrainConfig:
    doc = _read_json(args.config) if getattr(args, "config", None) else {}
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            doc[f.name] = flag
    doc.update(extra)
    try:
        return TrainConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------
def cmd_generate(args) -> int:
    try:
        spec = load_genspec(args.spec)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad generator spec {args.spec}: {exc}") from exc
    out = _out(args)
    counts = {}
    for split in ("train", "test"):
        folder = out / split
        folder.mkdir(exist_ok=True)
        for iso, corpus in generate_family(spec, args.seed, split).items():
            counts[f"{split}/{iso}"] = write_corpus(corpus, folder / f"{iso}.jsonl")
            if corpus.nli:
                write_nli(corpus, folder / f"{iso}.nli.jsonl")
    echo = spec.to_dict()
    echo["seed"] = args.seed
    _write_json(out / "genspec.json", echo)
    log.info("wrote %d corpus files to %s", len(counts), out)
    return 0


def cmd_pretrain_backbone(args) -> int:
    corpora = read_corpus_dir(args.corpus, "train")
    excluded = set(_isos(args.exclude))
    pool = {k: v for k, v in corpora.items() if k not in excluded}
    if not pool:
        raise UsageError("every language is excluded from the pretraining pool")
    vocab = build_vocab(pool, min_freq=args.min_freq)
    enc = _read_json(args.encoder) if args.encoder else {}
    try:
        cfg = EncoderConfig(vocab_size=len(vocab), **enc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad encoder configuration: {exc}") from exc
    backbone = mlm_pretrain_backbone(cfg, pool, vocab, args.steps, args.seed, lr=args.lr)
    out = _out(args)
    _write_json(out / "vocab.json", vocab.to_dict())
    digest = save_backbone(backbone, out / "backbone.ckpt")
    print(f"backbone.ckpt sha256={digest} languages={','.join(backbone.pretrain_languages)}")
    return 0


def cmd_pretrain_adapters(args) -> int:
    backbone, vocab = _load_foundation(args.backbone)
    tree = _tree(args.tree, args.corpus)
    if args.random_groups:
        sizes = [int(x) for x in args.random_groups.split(",")]
        fam = tree.of_kind(FAMILY)
        tree = random_tree(tree.languages, sizes, args.seed or 0, _isos(args.probe), family=tree.nodes[fam[0]].label)
    excluded = set(_isos(args.exclude))
    corpora = {k: v for k, v in read_corpus_dir(args.corpus, "train").items() if k not in excluded}
    cfg = _train_config(args)
    bank = pretrain_joint(tree, corpora, backbone, vocab, cfg, args.routing)
    out = _out(args)
    digest = save_bank(bank, out / "adapters.ckpt")
    (out / "tree.json").write_text(tree.serialize(), encoding="utf-8")
    _write_json(out / "history.json", bank.history)
    print(f"adapters.ckpt sha256={digest} nodes={len(bank.adapters)} params={bank.param_count()}")
    return 0


def _bank_and_tree(args, backbone):
    bank = load_bank(args.adapters, backbone) if args.adapters else None
    tree_arg = args.tree
    if tree_arg is None and args.adapters and (Path(args.adapters).parent / "tree.json").exists():
        tree_arg = str(Path(args.adapters).parent / "tree.json")
    return bank, _tree(tree_arg, args.corpus)


def cmd_train_task(args) -> int:
    backbone, vocab = _load_foundation(args.backbone)
    bank, tree = _bank_and_tree(args, backbone)
    stack = StackConfig.parse(args.stack)
    corpora = read_corpus_dir(args.corpus, "train")
    if args.source not in corpora:
        raise UsageError(f"no training corpus for source language {args.source!r}")
    cfg = _train_config(args)
    ta = train_task_adapter(bank, tree, corpora[args.source], args.task, cfg, stack, vocab, backbone)
    out = _out(args)
    digest = save_task_adapter(ta, out / f"task-{args.task}.ckpt")
    print(f"task-{args.task}.ckpt sha256={digest} final_loss={ta.losses[-1] if ta.losses else float('nan'):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    backbone, vocab = _load_foundation(args.backbone)
    bank, tree = _bank_and_tree(args, backbone)
    ta = load_task_adapter(args.task_adapter)
    stack = StackConfig.parse(args.stack) if args.stack else ta.stack
    test = read_corpus_dir(args.corpus, "test")
    if args.languages:
        wanted = _isos(args.languages)
        missing = [x for x in wanted if x not in test]
        if missing:
            raise UsageError(f"no test corpus for {missing}")
        test = {k: test[k] for k in wanted}
    unseen = set(_isos(args.unseen))
    chains = {iso: assemble_stack(stack, iso, bank, ta, tree) for iso in test}
    report = evaluate(
        backbone, chains, ta.head, ta.task, test, vocab,
        config=stack.label, seen=[x for x in test if x not in unseen], seed=args.seed, mst=args.mst,
    )
    for row in report.rows:
        fam = tree.ancestor(row["iso"], FAMILY)
        row["family"] = tree.nodes[fam].label if fam else ""
    out = _out(args)
    (out / "results.csv").write_text(rows_to_csv(report.rows), encoding="utf-8", newline="\n")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(summary_table(report, [stack.label], [ta.task]))
    return 0


def cmd_suite(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        raise UsageError(str(exc)) from exc
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    result = run_experiment_suite(manifest, args.out, jobs=args.jobs, cache_dir=args.cache_dir)
    sys.stdout.write(result.summary)
    return 0


def _inspect_lines(path: str) -> list[str]:
    kind, meta, tensors, digest = checkpoint.load(path)
    lines = [f"file: {path}", f"kind: {kind}", f"sha256: {digest}"]
    if kind == "adapter-bank":
        lines.append("node                 hidden  bottleneck  layers  params    checksum")
        total = 0
        for node, spec_doc in sorted(meta["adapters"].items()):
            spec = AdapterSpec(**spec_doc)
            state = {k[len(node) + 1 :]: v for k, v in tensors.items() if k.startswith(node + "/")}
            stored = int(sum(v.size for v in state.values()))
            if stored != param_count(spec):
                raise checkpoint.CheckpointError(f"{node}: stored {stored} parameters, spec implies {param_count(spec)}")
            total += stored
            lines.append(
                f"{node:<20} {spec.hidden_dim:>6}  {spec.bottleneck_dim:>10}  {spec.num_layers:>6}  {stored:<8}  "
                f"{checkpoint.tensor_checksum(state)[:16]}"
            )
        lines.append(f"total params: {total}")
        counts = meta.get("update_counts") or {}
        if counts:
            lines.append("updates: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    else:
        for key, value in sorted(meta.items()):
            lines.append(f"{key}: {json.dumps(value, sort_keys=True)}")
        lines.append("tensor                          shape           params")
        for name, arr in tensors.items():
            lines.append(f"{name:<31} {str(tuple(arr.shape)):<15} {arr.size}")
        lines.append(f"total params: {int(sum(a.size for a in tensors.values()))}")
    return lines


def cmd_inspect(args) -> int:
    sys.stdout.write("\n".join(_inspect_lines(args.checkpoint)) + "\n")
    return 0


# -- argument parsing -----------------------------------------------------------------
def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TrainConfig JSON; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--task-steps", dest="task_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--task-lr", dest="task_lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--reduction", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phyloadapt", description="Phylogeny-structured adapter experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic corpora for a generator spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain-backbone", help="MLM-pretrain the shared encoder")
    p.add_argument("--corpus", required=True, help="directory written by generate")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--min-freq", dest="min_freq", type=int, default=2)
    p.add_argument("--exclude", action="append", help="languages kept out of pretraining (comma separated)")
    p.add_argument("--encoder", help="EncoderConfig JSON")
    p.set_defaults(func=cmd_pretrain_backbone)

    p = sub.add_parser("pretrain-adapters", help="MLM-train language adapters on a frozen backbone")
    p.add_argument("--corpus", required=True)
    p.add_argument("--backbone", required=True, help="directory written by pretrain-backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--tree", help="tree file or builtin name (default: the corpus genspec tree)")
    p.add_argument("--routing", choices=REGIMES, default="FGL")
    p.add_argument("--exclude", action="append", help="languages without adapter text")
    p.add_argument("--random-groups", dest="random_groups", help="replace the tree by a random one with these group sizes")
    p.add_argument("--probe", action="append", help="languages pinned to separate random groups")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain_adapters)

    p = sub.add_parser("train-task", help="train a task adapter and head on a source language")
    p.add_argument("--corpus", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapters", help="adapters.ckpt (omit for the T stack)")
    p.add_argument("--tree")
    p.add_argument("--source", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--stack", default="FGLT")
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("evaluate", help="score a stack on the test corpora")
    p.add_argument("--corpus", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapters")
    p.add_argument("--task-adapter", dest="task_adapter", required=True)
    p.add_argument("--tree")
    p.add_argument("--stack", help="stack label; defaults to the one the task adapter was trained with")
    p.add_argument("--languages", action="append")
    p.add_argument("--unseen", action="append")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mst", action="store_true", help="maximum-spanning-tree decoding for dep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suite", help="run a manifest's full experiment grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache-dir", dest="cache_dir", help="reuse pretrained backbones across runs")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("inspect", help="dump a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("PHYLOADAPT_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"phyloadapt {args.command}: {exc}", file=sys.stderr)
        return 2
    except SuiteError as exc:
        print(f"phyloadapt {args.command}: {exc}", file=sys.stderr)
        return 1
    except checkpoint.CheckpointError as exc:
        print(f"phyloadapt {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: one line on stderr, no traceback
        print(f"phyloadapt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


__all__ = ["build_parser", "main", "read_corpus_dir"]
