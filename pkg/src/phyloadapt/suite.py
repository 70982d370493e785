"""Experiment grid: corpora, backbone, adapter banks, task adapters, scores.

A manifest names a generator spec, the languages withheld from backbone
pretraining, the stack configurations and the seeds. Work splits in two
phases. Phase one builds a *foundation* per seed (corpora, vocabulary,
pretrained backbone). Phase two trains one adapter bank per
(seed, regime, tree, bottleneck) and, on top of it, every configuration that
shares that bank. Both phases fan out over worker processes; every unit is a
pure function of its inputs, so the merged CSV does not depend on ``jobs``.

Results bundle layout::

    out/manifest.json           the normalised manifest
    out/results.csv             merged rows, sorted
    out/cells/s{seed}/{config}.json   one EvalReport per (config, seed)
    out/summary.txt             (unseen / all) averages per config
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from statistics import mean
from typing import Mapping

from threadpoolctl import threadpool_limits

from .adapters import AdapterSpec, ChainError, param_count
from .corpus.generate import FamilyGenSpec, LanguageCorpus, generate_family
from .corpus.vocab import Vocab, build_vocab
from .encoder import Backbone, EncoderConfig, load_backbone, mlm_pretrain_backbone, save_backbone
from .phylogeny import FAMILY, PhyloTree, random_tree
from .tasks import TASKS
from .training import (
    STACK_LEVELS,
    EvalReport,
    StackConfig,
    TrainConfig,
    assemble_stack,
    evaluate,
    pretrain_joint,
    regime_bottleneck,
    train_task_adapter,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "phyloadapt-manifest/1"
PRIMARY_METRIC = {"pos": "pos_f1_micro", "dep": "uas", "nli": "accuracy"}
STAGES = ("validate", "generate", "pretrain-backbone", "pretrain-adapters", "train-task", "evaluate", "write")


class ManifestError(ValueError):
    pass


class SuiteError(RuntimeError):
    """A stage of the pipeline failed; ``stage`` names which one."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage {stage!r} failed: {detail}")
        self.stage = stage
        self.detail = detail


@dataclass
class Manifest:
    genspec: FamilyGenSpec
    configs: list[StackConfig]
    seeds: list[int]
    source: str
    unseen: list[str] = field(default_factory=list)
    held_out: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=lambda: ["pos", "dep"])
    encoder: dict = field(default_factory=dict)
    backbone_steps: int = 1500
    backbone_lr: float = 1e-3
    vocab_min_freq: int = 2
    vocab_from: str = "seen"
    train: dict = field(default_factory=dict)
    random_tree: dict = field(default_factory=dict)
    eval_languages: list[str] | None = None
    mst: bool = False
    name: str = "suite"

    @property
    def tree(self) -> PhyloTree:
        return self.genspec.tree

    def train_config(self, seed: int, reduction: int = 1) -> TrainConfig:
        kw = dict(self.train)
        kw.setdefault("high_resource", [self.source])
        return TrainConfig(**{**kw, "seed": seed, "reduction": reduction})

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["genspec"] = self.genspec.to_dict()
        doc["configs"] = [c.label for c in self.configs]
        doc["format"] = MANIFEST_FORMAT
        return doc


def parse_manifest(doc: Mapping, base_dir: str | Path | None = None) -> Manifest:
    """Validate a manifest document; raises ManifestError with every problem found."""
    doc = dict(doc)
    fmt = doc.pop("format", MANIFEST_FORMAT)
    if fmt != MANIFEST_FORMAT:
        raise ManifestError(f"unsupported manifest format {fmt!r}")
    known = {f.name for f in fields(Manifest)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ManifestError(f"unknown manifest fields: {extra}")
    for key in ("genspec", "configs", "seeds", "source"):
        if key not in doc:
            raise ManifestError(f"manifest is missing {key!r}")
    spec_doc = doc.pop("genspec")
    try:
        if isinstance(spec_doc, str):
            path = Path(spec_doc)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            spec_doc = json.loads(path.read_text(encoding="utf-8"))
            base_dir = path.parent
        genspec = FamilyGenSpec.from_dict(spec_doc, base_dir=base_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise ManifestError(f"bad generator spec: {exc}") from exc
    if not doc["configs"]:
        raise ManifestError("manifest lists no configurations")
    if not doc["seeds"]:
        raise ManifestError("manifest lists no seeds")
    try:
        configs = [StackConfig.parse(c) for c in doc.pop("configs")]
    except (ValueError, TypeError) as exc:
        raise ManifestError(str(exc)) from exc
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ManifestError(f"duplicate configurations: {labels}")
    m = Manifest(genspec=genspec, configs=configs, **doc)
    langs = set(m.tree.languages)
    problems = []
    for key in ("unseen", "held_out"):
        bad = [x for x in getattr(m, key) if x not in langs]
        if bad:
            problems.append(f"{key} languages not in the tree: {bad}")
    if m.source not in langs:
        problems.append(f"source language {m.source!r} is not in the tree")
    if m.source in m.held_out or m.source in m.unseen:
        problems.append("the source language must be seen and not held out")
    bad_tasks = [t for t in m.tasks if t not in TASKS]
    if bad_tasks or not m.tasks:
        problems.append(f"tasks must be a non-empty subset of {TASKS}, got {m.tasks}")
    if m.vocab_from not in ("seen", "all"):
        problems.append("vocab_from must be 'seen' or 'all'")
    if m.eval_languages is not None and not set(m.eval_languages) <= langs:
        problems.append("eval_languages must be tree languages")
    for c in configs:
        if c.language_override and c.language_override in m.held_out:
            problems.append(f"{c.label}: override language {c.language_override!r} is held out")
        if c.language_override and c.language_override not in langs:
            problems.append(f"{c.label}: override language {c.language_override!r} is not in the tree")
    if any(c.tree_kind == "random" for c in configs) and not m.random_tree.get("group_sizes"):
        problems.append("random-tree configurations need random_tree.group_sizes")
    if problems:
        raise ManifestError("; ".join(problems))
    try:
        for seed in m.seeds:
            m.train_config(int(seed))
            for c in configs:
                m.train_config(int(seed), c.reduction)
        EncoderConfig(vocab_size=16, **m.encoder)
    except (ValueError, TypeError) as exc:
        raise ManifestError(str(exc)) from exc
    return m


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(doc, base_dir=path.parent)


# -- phase one: per-seed foundations ------------------------------------------------
@dataclass
class Foundation:
    seed: int
    train: dict[str, LanguageCorpus]
    test: dict[str, LanguageCorpus]
    vocab: Vocab
    backbone: Backbone


def _foundation_key(m: Manifest, seed: int) -> str:
    doc = {
        "genspec": m.genspec.to_dict(),
        "seed": seed,
        "encoder": m.encoder,
        "steps": m.backbone_steps,
        "lr": m.backbone_lr,
        "vocab": [m.vocab_from, m.vocab_min_freq],
        "excluded": sorted(set(m.unseen) | set(m.held_out)),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def build_foundation(m: Manifest, seed: int, cache_dir: str | Path | None = None) -> Foundation:
    stage = "generate"
    try:
        train = generate_family(m.genspec, seed, "train")
        test = generate_family(m.genspec, seed, "test")
        no_text = set(m.held_out)
        backbone_pool = {k: v for k, v in train.items() if k not in no_text and k not in m.unseen}
        vocab_pool = backbone_pool if m.vocab_from == "seen" else {k: v for k, v in train.items() if k not in no_text}
        cache = Path(cache_dir) / f"foundation-{_foundation_key(m, seed)}" if cache_dir else None
        if cache is not None and (cache / "backbone.ckpt").exists():
            vocab = Vocab.from_dict(json.loads((cache / "vocab.json").read_text(encoding="utf-8")))
            stage = "pretrain-backbone"
            backbone = load_backbone(cache / "backbone.ckpt")
            return Foundation(seed, train, test, vocab, backbone)
        vocab = build_vocab(vocab_pool, min_freq=m.vocab_min_freq)
        stage = "pretrain-backbone"
        cfg = EncoderConfig(vocab_size=len(vocab), **m.encoder)
        backbone = mlm_pretrain_backbone(cfg, backbone_pool, vocab, m.backbone_steps, seed, lr=m.backbone_lr)
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
            (cache / "vocab.json").write_text(json.dumps(vocab.to_dict()), encoding="utf-8")
            save_backbone(backbone, cache / "backbone.ckpt")
    except SuiteError:
        raise
    except Exception as exc:
        raise SuiteError(stage, f"seed {seed}: {type(exc).__name__}: {exc}") from exc
    return Foundation(seed, train, test, vocab, backbone)


# -- phase two: one adapter bank and the configurations that share it -----------
def tree_for(m: Manifest, kind: str, seed: int) -> PhyloTree:
    if kind == "phylo":
        return m.tree
    spec = m.random_tree
    families = m.tree.of_kind(FAMILY)
    family = m.tree.nodes[families[0]].label if families else "Random"
    return random_tree(
        m.tree.languages,
        spec["group_sizes"],
        seed,
        probes=spec.get("probes", ()),
        family=family,
        genus_prefix=spec.get("genus_prefix", "R"),
    )


def bank_key(stack: StackConfig) -> tuple[str, str, int] | None:
    if stack.regime is None:
        return None
    reduction = 1 if stack.regime == "LLL" else stack.reduction
    return (stack.regime, stack.tree_kind, reduction)


def check_param_identity(m: Manifest, stack: StackConfig, hidden_dim: int, num_layers: int) -> dict | None:
    """Equal-budget check for reduced stacks: k adapters at d/k hold as much as one at d."""
    cfg = m.train_config(0, stack.reduction)
    if stack.regime is None:
        return None
    d_member = regime_bottleneck(cfg, stack.regime)
    levels = len(STACK_LEVELS[stack.code])
    if d_member == cfg.bottleneck:
        return None
    reduced = param_count([AdapterSpec(hidden_dim, d_member, num_layers)] * levels)
    full = param_count(AdapterSpec(hidden_dim, cfg.bottleneck, num_layers))
    if reduced != full:
        raise SuiteError(
            "validate",
            f"{stack.label}: {levels} adapters at d={d_member} hold {reduced} parameters, "
            f"one adapter at d={cfg.bottleneck} holds {full}",
        )
    return {"config": stack.label, "reduced": reduced, "full": full}


def _family_of(tree: PhyloTree, iso: str) -> str:
    nid = tree.ancestor(iso, FAMILY)
    return tree.nodes[nid].label if nid else ""


def run_unit(m: Manifest, found: Foundation, key, stacks: list[StackConfig]) -> dict[str, EvalReport]:
    """Train the bank for ``key`` (None: no bank) and score every stack in ``stacks``."""
    seed = found.seed
    backbone = found.backbone
    trainable = {k: v for k, v in found.train.items() if k not in m.held_out}
    evals = m.eval_languages or m.tree.languages
    test = {iso: found.test[iso] for iso in evals}
    seen = [iso for iso in evals if iso not in m.unseen and iso not in m.held_out]
    bank = None
    tree = m.tree
    if key is not None:
        regime, kind, reduction = key
        tree = tree_for(m, kind, seed)
        try:
            bank = pretrain_joint(tree, trainable, backbone, found.vocab, m.train_config(seed, reduction), regime)
        except Exception as exc:
            raise SuiteError("pretrain-adapters", f"seed {seed} {regime}/{kind}: {type(exc).__name__}: {exc}") from exc
    out: dict[str, EvalReport] = {}
    for stack in stacks:
        report = EvalReport(notes={"bank": list(key) if key else None, "skipped": []})
        cfg = m.train_config(seed, stack.reduction)
        for task in m.tasks:
            try:
                ta = train_task_adapter(bank, tree, found.train[m.source], task, cfg, stack, found.vocab, backbone)
            except Exception as exc:
                raise SuiteError("train-task", f"seed {seed} {stack.label}/{task}: {type(exc).__name__}: {exc}") from exc
            try:
                chains = {}
                for iso in test:
                    try:
                        chains[iso] = assemble_stack(stack, iso, bank, ta, tree)
                    except ChainError:
                        if iso not in m.held_out:
                            raise
                        report.notes["skipped"].append(f"{task}:{iso}")
                scored = {iso: test[iso] for iso in chains}
                part = evaluate(
                    backbone, chains, ta.head, task, scored, found.vocab,
                    config=stack.label, seen=seen, seed=seed, mst=m.mst,
                )
            except Exception as exc:
                raise SuiteError("evaluate", f"seed {seed} {stack.label}/{task}: {type(exc).__name__}: {exc}") from exc
            for row in part.rows:
                row["family"] = _family_of(m.tree, row["iso"])
            report.extend(part)
            report.notes[f"{task}_final_loss"] = ta.losses[-1] if ta.losses else None
        out[stack.label] = report
    return out


# -- process plumbing ---------------------------------------------------------------
def _init_worker() -> None:
    threadpool_limits(1)


def _foundation_job(args):
    m, seed, cache_dir = args
    with threadpool_limits(1):
        return build_foundation(m, seed, cache_dir)


def _unit_job(args):
    m, found, key, stacks = args
    with threadpool_limits(1):
        return found.seed, run_unit(m, found, key, stacks)


def _map(fn, jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs)), initializer=_init_worker) as pool:
        return list(pool.map(fn, jobs))


# -- outputs ------------------------------------------------------------------------
def _sort_key(row: dict):
    return (row["family"], row["iso"], row["config"], row["task"], row["metric"], row["seed"])


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalReport.COLUMNS)
    for r in sorted(rows, key=_sort_key):
        writer.writerow(
            [r["family"], r["iso"], "true" if r["seen"] else "false", r["config"], r["task"], r["metric"], repr(float(r["value"])), r["seed"], r["param_count"]]
        )
    return buf.getvalue()


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seen"] = r["seen"] == "true"
        r["value"] = float(r["value"])
        r["seed"] = int(r["seed"])
        r["param_count"] = int(r["param_count"])
    return rows


def summary_table(report: EvalReport, configs: list[str], tasks: list[str]) -> str:
    """Per-config (unseen / all) averages of each task's headline metric."""
    header = ["config"] + [f"{t}:{PRIMARY_METRIC[t]} (unseen / all)" for t in tasks]
    lines = [header]
    for label in configs:
        cells = [label]
        for t in tasks:
            metric = PRIMARY_METRIC[t]
            try:
                allv = report.average(label, t, metric)
            except KeyError:
                cells.append("-")
                continue
            try:
                unseen = f"{report.average(label, t, metric, 'unseen'):.4f}"
            except KeyError:
                unseen = "-"
            cells.append(f"{unseen} / {allv:.4f}")
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines) + "\n"


@dataclass
class SuiteResult:
    report: EvalReport
    cells: dict[tuple[str, int], EvalReport]
    summary: str
    checks: dict
    out_dir: Path | None = None


def run_experiment_suite(
    manifest: Manifest | Mapping,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    cache_dir: str | Path | None = None,
) -> SuiteResult:
    """Run every (config, seed) cell of ``manifest``; writes the results bundle when ``out_dir`` is given."""
    m = manifest if isinstance(manifest, Manifest) else parse_manifest(manifest)
    seeds = [int(s) for s in m.seeds]
    t0 = time.time()
    h = m.encoder.get("hidden_dim", EncoderConfig.__dataclass_fields__["hidden_dim"].default)
    n_layers = m.encoder.get("num_layers", EncoderConfig.__dataclass_fields__["num_layers"].default)
    identity = [c for c in (check_param_identity(m, s, h, n_layers) for s in m.configs) if c]

    foundations = _map(_foundation_job, [(m, s, cache_dir) for s in seeds], jobs)
    log.info("foundations ready for seeds %s (%.0fs)", seeds, time.time() - t0)

    groups: dict = {}
    for stack in m.configs:
        groups.setdefault(bank_key(stack), []).append(stack)
    units = [(m, f, key, stacks) for f in foundations for key, stacks in groups.items()]
    results = _map(_unit_job, units, jobs)
    log.info("%d units done (%.0fs)", len(units), time.time() - t0)

    cells: dict[tuple[str, int], EvalReport] = {}
    for seed, by_label in results:
        for label, rep in by_label.items():
            cells[(label, seed)] = rep
    merged = EvalReport(notes={"param_identity": identity})
    for label in [c.label for c in m.configs]:
        for seed in seeds:
            merged.rows.extend(cells[(label, seed)].rows)
    merged.rows.sort(key=_sort_key)
    summary = summary_table(merged, [c.label for c in m.configs], m.tasks)
    result = SuiteResult(merged, cells, summary, {"param_identity": identity})
    if out_dir is not None:
        try:
            write_bundle(result, m, out_dir)
        except OSError as exc:
            raise SuiteError("write", str(exc)) from exc
    return result


def write_bundle(result: SuiteResult, m: Manifest, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(m.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for (label, seed), rep in sorted(result.cells.items()):
        cell_dir = out / "cells" / f"s{seed}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        safe = label.replace(":", "_").replace("/", "-").replace("=", "-")
        (cell_dir / f"{safe}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(result.report.rows))
    (out / "summary.txt").write_text(result.summary, encoding="utf-8")
    result.out_dir = out


def seed_means(report: EvalReport, config: str, task: str, subset: str = "unseen") -> dict[int, float]:
    """Per-seed subset average of a config's headline metric."""
    metric = PRIMARY_METRIC[task]
    seeds = sorted({r["seed"] for r in report.select(config=config, task=task, metric=metric)})
    return {s: report.average(config, task, metric, subset, seed=s) for s in seeds}


def grand_mean(report: EvalReport, config: str, task: str, subset: str = "unseen") -> float:
    return mean(seed_means(report, config, task, subset).values())


def cpu_count() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


__all__ = [
    "Foundation",
    "Manifest",
    "ManifestError",
    "SuiteError",
    "SuiteResult",
    "build_foundation",
    "grand_mean",
    "load_manifest",
    "parse_manifest",
    "read_results_csv",
    "rows_to_csv",
    "run_experiment_suite",
    "seed_means",
    "summary_table",
]
