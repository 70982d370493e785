"""Language hierarchies used to route batches through adapter stacks.

A tree has up to four levels, ``Root -> Family -> Genus -> Language``. Node ids
are derived from labels (``F:Uralic``, ``G:Finnic``, ``L:krl``) so that two
parses of the same file always agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


from ._rng import derive_rng

ROOT, FAMILY, GENUS, LANGUAGE = "Root", "Family", "Genus", "Language"
_RANK = {ROOT: 0, FAMILY: 1, GENUS: 2, LANGUAGE: 3}
_PREFIX = {ROOT: "R", FAMILY: "F", GENUS: "G", LANGUAGE: "L"}
TREE_FORMAT = "phylotree/1"


class TreeValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RoutingError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "routing error"


@dataclass
class Node:
    id: str
    kind: str
    label: str
    parent: str | None = None
    children: list[str] = field(default_factory=list)
    iso: str | None = None


def node_id(kind: str, label: str) -> str:
    return f"{_PREFIX[kind]}:{label}"


class PhyloTree:
    """Mutable container of nodes; call :func:`validate` before relying on it."""

    def __init__(self) -> None:
        self.nodes: dict[str, Node] = {}
        self.leaf_index: dict[str, str] = {}

    def add_node(self, kind: str, label: str, parent: str | None = None, iso: str | None = None) -> str:
        if kind not in _RANK:
            raise ValueError(f"unknown node kind {kind!r}")
        nid = node_id(kind, iso if kind == LANGUAGE else label)
        if nid in self.nodes:
            what = "duplicate language code" if kind == LANGUAGE else "duplicate label"
            raise TreeValidationError([f"{what}: {iso if kind == LANGUAGE else label!r}"])
        self.nodes[nid] = Node(nid, kind, label, parent, [], iso)
        if parent is not None and parent in self.nodes:
            self.nodes[parent].children.append(nid)
        if kind == LANGUAGE:
            self.leaf_index[iso] = nid
        return nid

    # -- queries -------------------------------------------------------------
    @property
    def tops(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.parent is None]

    @property
    def languages(self) -> list[str]:
        return list(self.leaf_index)

    def __contains__(self, iso: str) -> bool:
        return iso in self.leaf_index

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhyloTree):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def of_kind(self, kind: str) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind == kind]

    def ancestor(self, iso: str, kind: str) -> str | None:
        for nid in self.path(iso):
            if self.nodes[nid].kind == kind:
                return nid
        return None

    def path(self, iso: str) -> list[str]:
        if iso not in self.leaf_index:
            raise RoutingError(f"language {iso!r} is not in the tree")
        out = []
        nid: str | None = self.leaf_index[iso]
        while nid is not None:
            out.append(nid)
            nid = self.nodes[nid].parent
        return out[::-1]

    def siblings(self, iso: str) -> list[str]:
        genus = self.nodes[self.leaf_index[iso]].parent
        return [self.nodes[c].iso for c in self.nodes[genus].children if self.nodes[c].iso != iso]

    def tree_distance(self, a: str, b: str) -> int:
        """Number of edges between two leaves."""
        pa, pb = self.path(a), self.path(b)
        common = 0
        for x, y in zip(pa, pb):
            if x != y:
                break
            common += 1
        return (len(pa) - common) + (len(pb) - common)

    def restrict(self, isos: Iterable[str]) -> "PhyloTree":
        """Copy keeping only the given languages; empty internal nodes are dropped."""
        keep = set(isos)
        needed: set[str] = set()
        for iso in keep:
            needed.update(self.path(iso))
        out = PhyloTree()
        for n in self.nodes.values():
            if n.id in needed:
                out.add_node(n.kind, n.label, n.parent, n.iso)
        return out

    # -- serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        tops = self.tops
        root_label = None
        families = tops
        if len(tops) == 1 and self.nodes[tops[0]].kind == ROOT:
            root_label = self.nodes[tops[0]].label
            families = self.nodes[tops[0]].children
        fam_out: dict[str, dict[str, list[dict[str, str]]]] = {}
        for fid in families:
            fam = self.nodes[fid]
            genera: dict[str, list[dict[str, str]]] = {}
            for gid in fam.children:
                genus = self.nodes[gid]
                genera[genus.label] = [
                    {"iso": self.nodes[lid].iso, "label": self.nodes[lid].label} for lid in genus.children
                ]
            fam_out[fam.label] = genera
        out: dict = {"format": TREE_FORMAT}
        if root_label is not None:
            out["root"] = root_label
        out["families"] = fam_out
        return out

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


# -- parsing & validation ---------------------------------------------------------
def parse_tree(spec: str | dict) -> PhyloTree:
    """Build and validate a tree from its JSON text (or already-decoded dict)."""
    doc = json.loads(spec) if isinstance(spec, str) else spec
    if not isinstance(doc, dict):
        raise TreeValidationError(["tree spec must be a JSON object"])
    fmt = doc.get("format", TREE_FORMAT)
    if fmt != TREE_FORMAT:
        raise TreeValidationError([f"unsupported tree format {fmt!r}"])
    families = doc.get("families")
    if not isinstance(families, dict) or not families:
        raise TreeValidationError(["tree spec needs a non-empty 'families' object"])
    tree = PhyloTree()
    errors: list[str] = []
    root = None
    if doc.get("root"):
        root = tree.add_node(ROOT, str(doc["root"]))
    seen_iso: dict[str, str] = {}
    for fam_label, genera in families.items():
        try:
            fid = tree.add_node(FAMILY, fam_label, root)
        except TreeValidationError as exc:
            errors.extend(exc.violations)
            continue
        if isinstance(genera, list):
            labels = [str(e.get("iso", e)) if isinstance(e, dict) else str(e) for e in genera]
            errors.append(f"orphan language: {', '.join(labels)} listed directly under family {fam_label!r} without a genus")
            continue
        if not isinstance(genera, dict):
            errors.append(f"family {fam_label!r} must map genus labels to language lists")
            continue
        for genus_label, langs in genera.items():
            if isinstance(langs, dict):
                errors.append(f"kind order: {genus_label!r} nests further groups inside a genus")
                continue
            if not isinstance(langs, list):
                errors.append(f"genus {genus_label!r} must list languages")
                continue
            try:
                gid = tree.add_node(GENUS, genus_label, fid)
            except TreeValidationError as exc:
                errors.extend(exc.violations)
                continue
            for entry in langs:
                if isinstance(entry, str):
                    entry = {"iso": entry, "label": entry}
                iso = entry.get("iso") if isinstance(entry, dict) else None
                if not iso:
                    errors.append(f"orphan language: entry {entry!r} in genus {genus_label!r} has no iso code")
                    continue
                if iso in seen_iso:
                    errors.append(f"duplicate language code: {iso!r} in genus {genus_label!r} and {seen_iso[iso]!r}")
                    continue
                seen_iso[iso] = genus_label
                tree.add_node(LANGUAGE, entry.get("label", iso), gid, iso)
    errors.extend(validate(tree))
    if errors:
        raise TreeValidationError(errors)
    return tree


def load_tree(path: str | Path) -> PhyloTree:
    return parse_tree(Path(path).read_text(encoding="utf-8"))


def validate(tree: PhyloTree) -> list[str]:
    """Return every structural violation; an empty list means the tree is valid."""
    out: list[str] = []
    tops = tree.tops
    if len(tops) != 1:
        out.append(f"expected exactly one top-level node, found {len(tops)}")
    for n in tree.nodes.values():
        if n.parent is not None and n.parent not in tree.nodes:
            out.append(f"orphan: {n.label!r} points at missing parent {n.parent!r}")
            continue
        if n.parent is None:
            if n.kind not in (ROOT, FAMILY):
                out.append(f"kind order: {n.kind.lower()} {n.label!r} has no parent")
        else:
            parent = tree.nodes[n.parent]
            if _RANK[parent.kind] != _RANK[n.kind] - 1:
                out.append(f"kind order: {n.kind.lower()} {n.label!r} under {parent.kind.lower()} {parent.label!r}")
        if n.kind == LANGUAGE:
            if n.children:
                out.append(f"language {n.iso!r} is not a leaf")
            if tree.leaf_index.get(n.iso) != n.id:
                out.append(f"leaf index out of sync for {n.iso!r}")
        elif not n.children:
            out.append(f"empty internal node: {n.kind.lower()} {n.label!r}")
    return out


def route(tree: PhyloTree, iso: str, include_root: bool = False) -> list[str]:
    """Root-first node path for ``iso``; the Root node only when requested."""
    path = tree.path(iso)
    has_root = tree.nodes[path[0]].kind == ROOT
    if include_root and not has_root:
        raise RoutingError(f"tree has no root node; cannot route {iso!r} with include_root")
    if has_root and not include_root:
        path = path[1:]
    return path


def random_tree(
    languages: Sequence[str],
    group_sizes: Sequence[int],
    seed: int,
    probes: Sequence[str] = (),
    family: str = "Random",
    genus_prefix: str = "R",
) -> PhyloTree:
    """Counterfactual single-family tree with seeded uniform group assignment.

    Each probe language is pinned to its own group; the remaining languages
    fill the free slots in a uniformly random order.
    """
    languages = list(languages)
    sizes = [int(s) for s in group_sizes]
    if sum(sizes) != len(languages):
        raise ValueError(f"group sizes sum to {sum(sizes)} but {len(languages)} languages were given")
    if any(s < 1 for s in sizes):
        raise ValueError("every group needs at least one language")
    if len(set(languages)) != len(languages):
        raise ValueError("duplicate languages")
    probes = list(probes)
    missing = [p for p in probes if p not in languages]
    if missing:
        raise ValueError(f"probe languages not in the language list: {missing}")
    if len(probes) > len(sizes):
        raise ValueError("more probe languages than groups")
    rng = derive_rng(seed, "random-tree")
    groups: list[list[str]] = [[] for _ in sizes]
    probe_groups = rng.permutation(len(sizes))[: len(probes)]
    for p, g in zip(probes, probe_groups):
        groups[int(g)].append(p)
    rest = [x for x in languages if x not in probes]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    slots = [g for g, s in enumerate(sizes) for _ in range(s - len(groups[g]))]
    for lang, g in zip(rest, slots):
        groups[g].append(lang)
    tree = PhyloTree()
    fid = tree.add_node(FAMILY, family)
    for i, members in enumerate(groups):
        gid = tree.add_node(GENUS, f"{genus_prefix}{i + 1}", fid)
        for iso in members:
            tree.add_node(LANGUAGE, iso, gid, iso)
    return tree


def data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def builtin_tree(name: str) -> PhyloTree:
    """One of the shipped trees: germanic, uralic, tupian, uto_aztecan, indo_european."""
    return load_tree(data_path(f"{name}.json"))
