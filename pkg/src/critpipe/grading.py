"""Final-answer extraction, normalization, and equivalence grading.

The reward function is binary and total: it never raises on arbitrary
response text. Canonical answer forms are integer, reduced rational p/q,
decimal (kept inexact, compared under a 1e-6 relative tolerance), and a
whitespace-insensitive symbolic string fallback.

Normalization is deliberately light: surrounding "$", thousands separators,
trailing periods, a tiny list of currency words, and frac{a}{b}-style
fractions. "%" stays literal; no symbolic algebra.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Optional, TYPE_CHECKING

from .errors import ConfigError

if TYPE_CHECKING:  # pragma: no cover
    from .core import Query, ReasoningPath

KIND_INTEGER = "integer"
KIND_RATIONAL = "rational"
KIND_DECIMAL = "decimal"
KIND_SYMBOLIC = "symbolic"

RELATIVE_TOLERANCE = Fraction(1, 10**6)

_UNIT_WORDS = ("dollars", "dollar", "cents", "cent")

_INT_RE = re.compile(r"^[+-]?\d+$")
_RATIONAL_RE = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?$|^[+-]?\d+[eE][+-]?\d+$")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")
_FRAC_RE = re.compile(r"\\?[dt]?frac\s*\{([^{}]+)\}\s*\{([^{}]+)\}")
_TEXT_CMD_RE = re.compile(r"\\text\s*\{([^{}]*)\}")
_NUMBER_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?")


@dataclass(frozen=True)
class Answer:
    """A graded answer: the raw string plus its canonical interpretation."""

    raw: str
    kind: str
    value: Optional[Fraction] = None  # exact value; None for symbolic
    symbol: Optional[str] = None  # whitespace-stripped form; symbolic only

    @property
    def inexact(self) -> bool:
        return self.kind == KIND_DECIMAL

    @property
    def canonical(self) -> str:
        """Canonical text; canonicalizing it again yields an equal Answer."""
        if self.kind == KIND_INTEGER:
            return str(self.value.numerator)
        if self.kind == KIND_RATIONAL:
            return f"{self.value.numerator}/{self.value.denominator}"
        if self.kind == KIND_DECIMAL:
            return _normalize_decimal_literal(self.raw)
        return self.symbol or ""


def _strip_latex(s: str) -> str:
    s = s.replace("\\left", "").replace("\\right", "")
    s = s.replace("\\!", "").replace("\\,", " ").replace("\\;", " ").replace("\\:", " ")
    s = s.replace("\\$", "$").replace("\\%", "%")
    s = _TEXT_CMD_RE.sub(r"\1", s)
    s = _FRAC_RE.sub(r"\1/\2", s)
    return s


def normalize_answer_text(raw: str) -> str:
    """Light normalization shared by every parse path."""
    s = raw.strip()
    s = s.strip("$").strip()
    s = _strip_latex(s)
    s = s.strip().strip("$").strip()
    # drop trailing currency words ("7 dollars" -> "7")
    lowered = s.lower()
    for unit in _UNIT_WORDS:
        if lowered.endswith(unit):
            s = s[: len(s) - len(unit)]
            break
    s = s.strip().rstrip(".").strip()
    s = _THOUSANDS_RE.sub("", s)
    s = re.sub(r"\s+", " ", s)
    return s


def _normalize_decimal_literal(raw: str) -> str:
    s = normalize_answer_text(raw)
    if s.startswith("+"):
        s = s[1:]
    return s.lower()


def _decimal_to_fraction(literal: str) -> Optional[Fraction]:
    try:
        return Fraction(Decimal(literal))
    except (InvalidOperation, ValueError):
        return None


def canonicalize(raw: str) -> Answer:
    """Parse a raw answer string into its canonical Answer.

    Total: anything that is not an integer, rational, or decimal literal
    falls back to the symbolic kind. Idempotent on the canonical text.
    """
    s = normalize_answer_text(raw)
    if _INT_RE.match(s):
        return Answer(raw=raw, kind=KIND_INTEGER, value=Fraction(int(s)))
    m = _RATIONAL_RE.match(s)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        if den != 0:
            value = Fraction(num, den)
            if value.denominator == 1:
                return Answer(raw=raw, kind=KIND_INTEGER, value=value)
            return Answer(raw=raw, kind=KIND_RATIONAL, value=value)
    if _DECIMAL_RE.match(s):
        value = _decimal_to_fraction(s)
        if value is not None:
            return Answer(raw=raw, kind=KIND_DECIMAL, value=value)
    return Answer(raw=raw, kind=KIND_SYMBOLIC, symbol=re.sub(r"\s+", "", s))


def equivalent(a: Answer, b: Answer) -> bool:
    """True iff the canonical forms denote the same value.

    Exact forms compare exactly; a decimal side is accepted within 1e-6
    relative to the exact side's magnitude (floored at 1); two decimals use
    the larger magnitude. Symbolic forms compare as whitespace-stripped
    strings; symbolic never equals numeric.
    """
    a_sym = a.kind == KIND_SYMBOLIC
    b_sym = b.kind == KIND_SYMBOLIC
    if a_sym or b_sym:
        return a_sym and b_sym and a.symbol == b.symbol
    if not a.inexact and not b.inexact:
        return a.value == b.value
    if a.inexact and b.inexact:
        scale = max(Fraction(1), abs(a.value), abs(b.value))
    else:
        exact = b.value if a.inexact else a.value
        scale = max(Fraction(1), abs(exact))
    return abs(a.value - b.value) <= RELATIVE_TOLERANCE * scale


def _extract_boxed(text: str) -> Optional[str]:
    """Brace-balanced content of the last \\boxed{...} span."""
    starts = [m.start() for m in re.finditer(r"\\boxed", text)]
    for idx in reversed(starts):
        scan = idx + len("\\boxed")
        while scan < len(text) and text[scan].isspace():
            scan += 1
        if scan >= len(text) or text[scan] != "{":
            continue
        depth, scan = 1, scan + 1
        content = []
        while scan < len(text):
            ch = text[scan]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return "".join(content).strip()
            content.append(ch)
            scan += 1
    return None


def extract_answer_from_text(text: str) -> Optional[Answer]:
    """Extract the final answer from raw response text.

    Priority: (1) text after the last "####" marker, (2) the last boxed
    span, (3) the last standalone numeric literal. None when nothing
    matches (counted as incorrect downstream).
    """
    marker = text.rfind("####")
    if marker != -1:
        rest = text[marker + 4 :]
        line = rest.splitlines()[0] if rest.splitlines() else ""
        candidate = line.strip()
        if candidate:
            return canonicalize(candidate)
    boxed = _extract_boxed(text)
    if boxed is not None and boxed.strip():
        return canonicalize(boxed)
    numbers = _NUMBER_RE.findall(text)
    if numbers:
        return canonicalize(numbers[-1])
    return None


def extract_final_answer(path: "ReasoningPath") -> Optional[Answer]:
    """Extract the final answer from a reasoning path's concatenated steps."""
    return extract_answer_from_text("\n".join(s.text for s in path.steps))


def parse_gold_answer(gold: str) -> Answer:
    """Canonicalize a gold answer; an empty gold is a configuration error."""
    if not gold or not gold.strip():
        raise ConfigError("gold answer is empty")
    ans = canonicalize(gold)
    if ans.kind == KIND_SYMBOLIC and not ans.symbol:
        raise ConfigError(f"gold answer {gold!r} normalizes to nothing")
    return ans


def reward(query: "Query", path: "ReasoningPath") -> int:
    """Binary oracle reward: 1 iff the extracted answer matches gold."""
    gold = parse_gold_answer(query.gold_answer)
    extracted = extract_final_answer(path)
    if extracted is None:
        return 0
    return 1 if equivalent(extracted, gold) else 0


def reward_text(query: "Query", response_text: str) -> int:
    """Reward over raw response text (without building a path)."""
    gold = parse_gold_answer(query.gold_answer)
    extracted = extract_answer_from_text(response_text)
    if extracted is None:
        return 0
    return 1 if equivalent(extracted, gold) else 0
