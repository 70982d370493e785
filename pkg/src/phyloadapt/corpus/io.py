"""JSON-Lines corpus files.

Sentence files hold one object per line, ``{"format", "iso", "tokens", "pos",
"heads"}``; NLI files hold ``{"format", "iso", "premise_tokens",
"hypothesis_tokens", "label"}``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .generate import LanguageCorpus

SENTENCE_FORMAT = "phyloadapt-sentences/1"
NLI_FORMAT = "phyloadapt-nli/1"


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_corpus(corpus: LanguageCorpus, path: str | Path) -> int:
    lines = []
    for i, sent in enumerate(corpus.sentences):
        row = {"format": SENTENCE_FORMAT, "iso": corpus.iso, "tokens": sent}
        if corpus.pos is not None:
            row["pos"] = corpus.pos[i]
        if corpus.heads is not None:
            row["heads"] = corpus.heads[i]
        lines.append(_dump(row))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")
    return len(lines)


def write_nli(corpus: LanguageCorpus, path: str | Path) -> int:
    lines = [
        _dump(
            {
                "format": NLI_FORMAT,
                "iso": corpus.iso,
                "premise_tokens": p["premise"],
                "hypothesis_tokens": p["hypothesis"],
                "label": p["label"],
            }
        )
        for p in corpus.nli or ()
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")
    return len(lines)


def _rows(path: str | Path, fmt: str) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("format") != fmt:
                raise ValueError(f"{path}:{n}: expected format {fmt!r}, got {row.get('format')!r}")
            yield row


def read_corpus(path: str | Path, nli_path: str | Path | None = None) -> LanguageCorpus:
    rows = list(_rows(path, SENTENCE_FORMAT))
    isos = {r["iso"] for r in rows}
    if len(isos) > 1:
        raise ValueError(f"{path}: mixes languages {sorted(isos)}")
    iso = isos.pop() if isos else Path(path).stem.split(".")[0]
    pos = [r["pos"] for r in rows] if rows and all("pos" in r for r in rows) else None
    heads = [r["heads"] for r in rows] if rows and all("heads" in r for r in rows) else None
    nli = None
    if nli_path is not None:
        nli = [
            {"premise": r["premise_tokens"], "hypothesis": r["hypothesis_tokens"], "label": r["label"]}
            for r in _rows(nli_path, NLI_FORMAT)
        ]
    return LanguageCorpus(iso, [r["tokens"] for r in rows], pos, heads, nli, {"path": str(path)})
