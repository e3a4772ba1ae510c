import contextlib
import functools
import random

import pytest

from taforge.corpusgen import generate, guarded_overflow_spec, hdcp_spec, random_corpus
from taforge.analysis import analyze
from taforge.fuzzer import Campaign, Session
from taforge.loader import load_ta
from taforge.profiles import PROFILES

CORPUS_SEED = 11

# criterion number -> (passed, description, detail), filled by test_acceptance
CRITERIA: dict[int, tuple[bool, str, str]] = {}


class _Outcome:
    detail = ""


@contextlib.contextmanager
def criterion(n, text):
    """Record whether the enclosed block raised, for the end-of-run summary."""
    out = _Outcome()
    CRITERIA[n] = (False, text, "")
    try:
        yield out
    except BaseException as e:
        CRITERIA[n] = (False, text, out.detail or f"{type(e).__name__}: {e}".splitlines()[0])
        raise
    CRITERIA[n] = (True, text, out.detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text} [{detail}]")


@functools.lru_cache(maxsize=None)
def built(spec_key):
    """Generate once per (fixture name, args) key; specs are rebuilt from the key."""
    name, *args = spec_key
    spec = {"hdcp": hdcp_spec, "guarded": guarded_overflow_spec}[name](*args)
    return spec, generate(spec)


def load(g, spec, layout=None):
    return load_ta(g.elf, PROFILES[spec.profile], layout, libs=g.libs)


def hdcp_campaign(config, session=None):
    """A campaign on the HDCP fixture driven by its own analysis."""
    spec, g = built(("hdcp", "TEEGRIS"))
    s = session or Session(g.elf, PROFILES[spec.profile], g.libs)
    an = analyze(s.image)
    return Campaign(s, an.ids.values, an.model, an.command_blocks(), config)


@pytest.fixture(scope="session")
def hdcp():
    return built(("hdcp", "TEEGRIS"))


@pytest.fixture(scope="session")
def guarded():
    return built(("guarded", "OPTEE"))


@pytest.fixture(scope="session")
def corpus():
    """A 20-TA randomized corpus, generated once: list of (spec, Generated)."""
    return [(s, generate(s)) for s in random_corpus(CORPUS_SEED, 20)]


@pytest.fixture
def hdcp_image(hdcp):
    spec, g = hdcp
    return load(g, spec)


@pytest.fixture
def hdcp_session(hdcp):
    spec, g = hdcp
    return Session(g.elf, PROFILES[spec.profile], g.libs)


@pytest.fixture
def rng():
    return random.Random(1234)
