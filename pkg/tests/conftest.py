import pytest

from calcascade.datamodel import InferenceRecord, TokenStats


def make_record(rid, tokens=((0.9, 0.1),), small=None, large=None, gold=None, entropy=None):
    toks = tuple(
        TokenStats(p1, p2, None if entropy is None else entropy[i])
        for i, (p1, p2) in enumerate(tokens)
    )
    gold = {"camera": "X"} if gold is None else gold
    return InferenceRecord(
        rid,
        toks,
        dict(gold) if small is None else small,
        dict(gold) if large is None else large,
        gold,
    )


def toy(rid, u, small_ok, large_ok, entropy=None):
    """Single-entity record whose margin uncertainty is exactly ``u``."""
    m = 1.0 - u
    return make_record(
        rid,
        tokens=(((1 + m) / 2, (1 - m) / 2),),
        small={"camera": "X" if small_ok else "Y"},
        large={"camera": "X" if large_ok else "Z"},
        gold={"camera": "X"},
        entropy=None if entropy is None else (entropy,),
    )


@pytest.fixture
def rec():
    return make_record


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        self.lines.append((self.number, f"criterion {self.number:2d} {status}  {self.title}: {self.detail}"))
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
