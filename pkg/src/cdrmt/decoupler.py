"""Rule-based split of a referring expression into static-object and spatial-motion streams.

Phrase rules, applied left to right over lexicon-tagged tokens:

* a colour/appearance word, category noun or unknown word is a one-token
  STATIC phrase (unknown words default to the static pathway);
* a bare direction word is a one-token MOTION phrase;
* a motion or state verb is a MOTION phrase that absorbs trailing direction
  adverbs ("turning right");
* a preposition opens a phrase running over following function words,
  prepositions, direction, colour and unknown words. It is MOTION if it holds
  a direction ("in the right", "in front of us"), STATIC if it holds an
  appearance word ("in light color"), and dropped otherwise;
* a relative marker opens a clause that runs to the end of the expression.
  It is MOTION if it holds a motion, state or direction word ("who are
  walking"), STATIC if it holds other content, and dropped otherwise.

Function words travel with the phrase that follows them; trailing ones are
dropped.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import EmptyExpressionError, ValidationError

STATIC = "STATIC"
MOTION = "MOTION"
DROPPED = "DROPPED-FUNCTION"

SECTIONS = ("colors", "categories", "directions", "motion", "state", "prepositions", "relative", "function")
CONTENT_SECTIONS = SECTIONS[:5]

_TOKEN = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


@dataclass(frozen=True)
class Lexicon:
    colors: frozenset[str]
    categories: frozenset[str]
    directions: frozenset[str]
    motion: frozenset[str]
    state: frozenset[str]
    prepositions: frozenset[str]
    relative: frozenset[str]
    function: frozenset[str]
    version: str = "unversioned"
    _kinds: dict = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        kinds = {}
        for section in SECTIONS:
            for term in getattr(self, section):
                if term in kinds:
                    raise ValidationError(f"lexicon term {term!r} listed under both [{kinds[term]}] and [{section}]")
                kinds[term] = section
        object.__setattr__(self, "_kinds", kinds)

    def kind(self, token: str) -> str:
        """Section a token belongs to, or ``"unknown"``."""
        return self._kinds.get(token.lower(), "unknown")

    @classmethod
    def parse(cls, text: str) -> "Lexicon":
        sections: dict[str, set[str]] = {s: set() for s in SECTIONS}
        current = None
        version = "unversioned"
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            m = re.search(r"version\s+(\S+)", raw) if raw.lstrip().startswith("#") else None
            if m and version == "unversioned":
                version = m.group(1)
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in sections:
                    raise ValidationError(f"line {lineno}: unknown lexicon section [{current}]")
                continue
            if current is None:
                raise ValidationError(f"line {lineno}: term {line!r} before any section header")
            sections[current].add(line.lower())
        return cls(**{k: frozenset(v) for k, v in sections.items()}, version=version)

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    text = resources.files("cdrmt").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return Lexicon.parse(text)


@dataclass(frozen=True)
class DecoupledExpression:
    original: tuple[str, ...]
    static_stream: tuple[str, ...]
    motion_stream: tuple[str, ...]
    assignment: tuple[str, ...]

    @property
    def static_text(self) -> str:
        return " ".join(self.static_stream)

    @property
    def motion_text(self) -> str:
        return " ".join(self.motion_stream)


def tokenize(expression: str) -> list[str]:
    """Lower-case word tokens with punctuation removed; hyphenated compounds stay whole."""
    tokens = _TOKEN.findall(expression.lower())
    if not tokens:
        raise EmptyExpressionError("expression is empty or has no word tokens")
    return tokens


def _prep_phrase(kinds: list[str], i: int) -> tuple[int, str | None]:
    j = i + 1
    while j < len(kinds) and kinds[j] in ("function", "prepositions", "directions", "colors", "unknown"):
        j += 1
    span = kinds[i:j]
    if "directions" in span:
        return j, MOTION
    if "colors" in span or "unknown" in span:
        return j, STATIC
    return j, None


def _relative_clause(kinds: list[str], i: int) -> tuple[int, str | None]:
    span = kinds[i:]
    if any(k in ("motion", "state", "directions") for k in span):
        return len(kinds), MOTION
    if any(k in ("colors", "categories", "unknown") for k in span):
        return len(kinds), STATIC
    return len(kinds), None


def decouple(expression: str, lexicon: Lexicon | None = None) -> DecoupledExpression:
    lexicon = lexicon or default_lexicon()
    tokens = tokenize(expression)
    kinds = [lexicon.kind(t) for t in tokens]
    labels: list[str] = [DROPPED] * len(tokens)
    pending: list[int] = []
    i = 0
    while i < len(tokens):
        k = kinds[i]
        if k == "function":
            pending.append(i)
            i += 1
            continue
        if k == "relative":
            j, label = _relative_clause(kinds, i)
        elif k == "prepositions":
            j, label = _prep_phrase(kinds, i)
        elif k in ("motion", "state"):
            j = i + 1
            while j < len(tokens) and kinds[j] == "directions":
                j += 1
            label = MOTION
        elif k == "directions":
            j, label = i + 1, MOTION
        else:
            j, label = i + 1, STATIC
        for idx in pending + list(range(i, j)):
            labels[idx] = label or DROPPED
        pending = []
        i = j

    return DecoupledExpression(
        original=tuple(tokens),
        static_stream=tuple(t for t, l in zip(tokens, labels) if l == STATIC),
        motion_stream=tuple(t for t, l in zip(tokens, labels) if l == MOTION),
        assignment=tuple(labels),
    )


# --- corpus evaluation --------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    expression: str
    static: tuple[str, ...]
    motion: tuple[str, ...]


@dataclass
class CorpusReport:
    total: int
    static_exact: float
    motion_exact: float
    exact: float
    token_accuracy: float
    mismatches: list[dict]


def load_corpus(path: str | Path) -> list[CorpusEntry]:
    """Read a JSONL golden file of ``{"expr", "static", "motion"}`` rows (streams as text)."""
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        entries.append(CorpusEntry(row["expr"], tuple(row["static"].split()), tuple(row["motion"].split())))
    return entries


def bundled_corpus(name: str) -> list[CorpusEntry]:
    """``"reference"`` (five hand-checked expressions) or ``"templates"``."""
    ref = resources.files("cdrmt").joinpath(f"data/decoupler_{name}.jsonl")
    with resources.as_file(ref) as path:
        return load_corpus(path)


def _expected_labels(tokens: tuple[str, ...], static: tuple[str, ...], motion: tuple[str, ...]) -> list[str]:
    # first interleaving (preference STATIC, MOTION, DROPPED) reproducing both streams
    memo: dict[tuple[int, int, int], list[str] | None] = {}

    def solve(i, s, m):
        if i == len(tokens):
            return [] if s == len(static) and m == len(motion) else None
        key = (i, s, m)
        if key in memo:
            return memo[key]
        result = None
        if s < len(static) and tokens[i] == static[s]:
            rest = solve(i + 1, s + 1, m)
            result = None if rest is None else [STATIC] + rest
        if result is None and m < len(motion) and tokens[i] == motion[m]:
            rest = solve(i + 1, s, m + 1)
            result = None if rest is None else [MOTION] + rest
        if result is None:
            rest = solve(i + 1, s, m)
            result = None if rest is None else [DROPPED] + rest
        memo[key] = result
        return result

    labels = solve(0, 0, 0)
    if labels is None:
        raise ValidationError(f"expected streams {static} / {motion} are not subsequences of {tokens}")
    return labels


def corpus_eval(corpus: list[CorpusEntry], lexicon: Lexicon | None = None) -> CorpusReport:
    if not corpus:
        raise ValidationError("corpus is empty")
    lexicon = lexicon or default_lexicon()
    static_hits = motion_hits = exact_hits = 0
    correct_tokens = total_tokens = 0
    mismatches = []
    for entry in corpus:
        got = decouple(entry.expression, lexicon)
        s_ok = got.static_stream == entry.static
        m_ok = got.motion_stream == entry.motion
        static_hits += s_ok
        motion_hits += m_ok
        exact_hits += s_ok and m_ok
        if s_ok and m_ok:
            correct_tokens += len(got.original)
        else:
            expected = _expected_labels(got.original, entry.static, entry.motion)
            correct_tokens += sum(a == b for a, b in zip(expected, got.assignment))
            mismatches.append(
                {
                    "expr": entry.expression,
                    "expected": {"static": " ".join(entry.static), "motion": " ".join(entry.motion)},
                    "got": {"static": got.static_text, "motion": got.motion_text},
                }
            )
        total_tokens += len(got.original)
    n = len(corpus)
    return CorpusReport(
        total=n,
        static_exact=static_hits / n,
        motion_exact=motion_hits / n,
        exact=exact_hits / n,
        token_accuracy=correct_tokens / total_tokens,
        mismatches=mismatches,
    )
