from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from phyloadapt.corpus import FamilyGenSpec, build_vocab, generate_family
from phyloadapt.encoder import EncoderConfig, init_backbone
from phyloadapt.phylogeny import parse_tree

settings.register_profile("repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

TOY_TREE = {
    "format": "phylotree/1",
    "families": {
        "Toy": {
            "Alpha": ["aaa", "aab", "aac"],
            "Beta": ["bba", "bbb"],
        }
    },
}


@pytest.fixture(scope="session")
def toy_tree():
    return parse_tree(TOY_TREE)


@pytest.fixture(scope="session")
def toy_spec(toy_tree):
    return FamilyGenSpec(
        tree=toy_tree,
        rates={"family": 0.0, "genus": 0.1, "language": 0.05},
        sentence_counts={"aaa": 200, "aab": 120, "aac": 60, "bba": 120, "bbb": 40},
        eval_sentences=30,
        nli_languages=["aaa"],
        nli_pairs=60,
    )


@pytest.fixture(scope="session")
def toy_corpora(toy_spec):
    return generate_family(toy_spec, 0)


@pytest.fixture(scope="session")
def toy_vocab(toy_corpora):
    return build_vocab(toy_corpora)


def tiny_config(vocab_size: int, **kw) -> EncoderConfig:
    base = dict(hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32, max_seq_len=48)
    base.update(kw)
    return EncoderConfig(vocab_size=vocab_size, **base)


@pytest.fixture()
def tiny_backbone(toy_vocab):
    return init_backbone(tiny_config(len(toy_vocab)), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one pass/fail line per criterion,
# printed at the end of the run whatever the capture mode.
def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion the test belongs to")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" and not rep.failed:
        return
    number, title = mark.args
    entry = item.config._criteria.setdefault(number, {"title": title, "ok": True, "notes": [], "seconds": 0.0})
    entry["ok"] = entry["ok"] and not rep.failed
    # setup time counts too: the expensive suite runs live in fixtures
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["notes"].extend(v for k, v in item.user_properties if k == "detail")
    if rep.failed and rep.when != "call":
        entry["notes"].append(f"{item.name}: error during {rep.when}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        c = criteria[number]
        status = "PASS" if c["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(c["notes"]))
        line = f"criterion {number:>2} {status}  {c['title']} ({c['seconds']:.1f}s)"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
