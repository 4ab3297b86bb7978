"""Fixed-column input decks: parsing, rendering, templating and cycle copies.

A card line is laid out in 10-column fields::

    cols  1-10  keyword (left aligned)
    cols 11-70  WHAT(1)..WHAT(6), each right aligned in 10 columns
    cols 71-78  SDUM (left aligned)

Templates may carry ``{name}`` placeholders inside fields.  A placeholder
longer than its field pushes the following fields to the right; the parser
applies the same shift so templates survive a parse/render round trip.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    DeckError,
    DuplicateName,
    EmptyCSV,
    FieldOverflow,
    InvalidParameterName,
    MissingFile,
    UnboundPlaceholder,
)

log = logging.getLogger(__name__)

FIELD_WIDTH = 10
N_WHATS = 6
SDUM_COLUMN = 70
SDUM_WIDTH = 8

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
KEYWORD_RE = re.compile(r"[A-Za-z][A-Za-z0-9_\-]*\Z")
NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\Z")

# Line kinds
CARD = "card"
COMMENT = "comment"
FREE_TEXT = "geometry-free-text"
BLANK = "blank"
DIRECTIVE = "directive"


def is_number(token: str) -> bool:
    return bool(NUMBER_RE.match(token))


def _compact_exponent(s: str) -> str:
    if "e" not in s:
        return s
    mantissa, exp = s.split("e")
    return f"{mantissa}e{int(exp)}"


def format_number(value: float | int | str, width: int = FIELD_WIDTH) -> str:
    """Format a number into at most ``width`` characters.

    Plain decimal is used when it fits; otherwise the exponent form keeping the
    most significant digits is chosen.
    """
    if isinstance(value, str):
        if len(value) <= width:
            return value
        value = float(value)
    if isinstance(value, int) and not isinstance(value, bool):
        s = str(value)
        if len(s) <= width:
            return s
        value = float(value)
    value = float(value)
    s = repr(value)
    if len(s) <= width:
        return s
    for precision in range(17, 0, -1):
        s = _compact_exponent(f"{value:.{precision}g}")
        candidates = [s]
        if s.startswith("0."):
            candidates.append(s[1:])
        elif s.startswith("-0."):
            candidates.append("-" + s[2:])
        for c in candidates:
            if len(c) <= width:
                return c
    raise FieldOverflow(f"number {value!r} cannot be written in {width} columns")


def _normalize_what(value) -> str | None:
    if value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return format_number(value)
    token = str(value).strip()
    if not token:
        return None
    if is_number(token) and len(token) > FIELD_WIDTH:
        return format_number(token)
    return token


def _fits(token: str, width: int) -> bool:
    return len(token) <= width or bool(PLACEHOLDER_RE.search(token))


@dataclass(frozen=True)
class Card:
    """One fixed-column card. WHAT values are kept as text tokens."""

    keyword: str
    whats: tuple = (None,) * N_WHATS
    sdum: str | None = None
    raw: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        whats = list(self.whats)
        if len(whats) > N_WHATS:
            raise DeckError(f"{self.keyword}: at most {N_WHATS} WHAT values, got {len(whats)}")
        whats += [None] * (N_WHATS - len(whats))
        object.__setattr__(self, "whats", tuple(_normalize_what(w) for w in whats))
        sdum = self.sdum.strip() if isinstance(self.sdum, str) else self.sdum
        object.__setattr__(self, "sdum", sdum or None)

    def what(self, i: int) -> str | None:
        """WHAT(i), 1-based."""
        return self.whats[i - 1]

    def number(self, i: int) -> float | None:
        tok = self.whats[i - 1]
        if tok is None or not is_number(tok):
            return None
        return float(tok)

    def placeholders(self) -> set[str]:
        found = set()
        for tok in (*self.whats, self.sdum):
            if tok:
                found.update(PLACEHOLDER_RE.findall(tok))
        return found

    def render(self) -> str:
        if self.raw is not None and _split_card(self.raw) == (self.keyword, self.whats, self.sdum):
            return self.raw.rstrip()
        return render_card(self.keyword, self.whats, self.sdum)


def render_card(keyword: str, whats, sdum: str | None = None) -> str:
    if len(keyword) > FIELD_WIDTH:
        raise FieldOverflow(f"keyword {keyword!r} exceeds {FIELD_WIDTH} columns")
    parts = [keyword.ljust(FIELD_WIDTH)]
    for tok in whats:
        tok = tok or ""
        if not _fits(tok, FIELD_WIDTH):
            raise FieldOverflow(f"{keyword}: WHAT value {tok!r} exceeds {FIELD_WIDTH} columns")
        parts.append(tok.rjust(FIELD_WIDTH))
    if sdum:
        if not _fits(sdum, SDUM_WIDTH):
            raise FieldOverflow(f"{keyword}: SDUM {sdum!r} exceeds {SDUM_WIDTH} columns")
        parts.append(sdum)
    return "".join(parts).rstrip()


def _field_token(text: str) -> tuple[bool, str | None]:
    tok = text.strip()
    if any(ch.isspace() for ch in tok):
        return False, None
    return True, tok or None


def _split_card(line: str):
    """Split a card line into (keyword, whats, sdum), or None if it is not one."""
    keyword = line[:FIELD_WIDTH].strip()
    if not keyword or len(keyword) > FIELD_WIDTH or not KEYWORD_RE.match(keyword):
        return None
    pos = FIELD_WIDTH
    whats = []
    for _ in range(N_WHATS):
        end = pos + FIELD_WIDTH
        for m in PLACEHOLDER_RE.finditer(line, pos):
            if m.start() >= end:
                break
            end = max(end, m.end())
        ok, tok = _field_token(line[pos:end])
        if not ok:
            return None
        whats.append(_normalize_what(tok))
        pos = end
    rest = line[pos:].rstrip()
    ok, sdum = _field_token(rest)
    if not ok or (sdum and not _fits(sdum, SDUM_WIDTH)):
        return None
    return keyword, tuple(whats), sdum


def parse_card(line: str) -> Card | None:
    parts = _split_card(line)
    if parts is None:
        return None
    keyword, whats, sdum = parts
    return Card(keyword, whats, sdum, raw=line)


@dataclass(frozen=True)
class DeckLine:
    kind: str
    content: Card | str

    def render(self) -> str:
        if self.kind == CARD:
            return self.content.render()
        return self.content


@dataclass(frozen=True)
class ParseWarning:
    line_no: int
    message: str


@dataclass(frozen=True)
class InputDeck:
    lines: tuple[DeckLine, ...] = ()
    source_path: str | None = field(default=None, compare=False)
    warnings: tuple[ParseWarning, ...] = field(default=(), compare=False, repr=False)
    trailing_newline: bool = field(default=True, compare=False, repr=False)

    def cards(self, keyword: str | None = None) -> Iterator[Card]:
        for line in self.lines:
            if line.kind == CARD and (keyword is None or _same_keyword(line.content.keyword, keyword)):
                yield line.content

    def placeholders(self) -> set[str]:
        names = set()
        for line in self.lines:
            if line.kind == CARD:
                names |= line.content.placeholders()
            elif line.kind in (DIRECTIVE, FREE_TEXT):
                names.update(PLACEHOLDER_RE.findall(line.content))
        return names


def _same_keyword(a: str, b: str) -> bool:
    # only the first 8 characters of a keyword are significant (RESNUCLEi, RANDOMIZe)
    return a[:8].upper() == b[:8].upper()


def parse_deck(text: str, source_path: str | None = None) -> InputDeck:
    """Classify every line of a deck. Never raises; problems become warnings."""
    lines: list[DeckLine] = []
    warnings: list[ParseWarning] = []
    in_geometry = False
    expect_title = False
    for no, raw in enumerate(text.splitlines(), start=1):
        if expect_title:
            expect_title = False
            lines.append(DeckLine(FREE_TEXT, raw))
            continue
        if not raw.strip():
            lines.append(DeckLine(BLANK, raw))
        elif raw.startswith("*"):
            lines.append(DeckLine(COMMENT, raw))
        elif raw.startswith(("@", "#")):
            lines.append(DeckLine(DIRECTIVE, raw))
        elif in_geometry:
            card = parse_card(raw)
            if card is not None and _same_keyword(card.keyword, "GEOEND"):
                in_geometry = False
                lines.append(DeckLine(CARD, card))
            else:
                lines.append(DeckLine(FREE_TEXT, raw))
        else:
            card = parse_card(raw)
            if card is None:
                warnings.append(ParseWarning(no, "line is not in fixed-column card layout; kept verbatim"))
                lines.append(DeckLine(FREE_TEXT, raw))
                continue
            lines.append(DeckLine(CARD, card))
            if _same_keyword(card.keyword, "TITLE"):
                expect_title = True
            elif _same_keyword(card.keyword, "GEOBEGIN"):
                in_geometry = True
    for w in warnings:
        log.debug("line %d: %s", w.line_no, w.message)
    return InputDeck(
        tuple(lines),
        source_path=source_path,
        warnings=tuple(warnings),
        trailing_newline=text.endswith(("\n", "\r")) or not text,
    )


def read_deck(path: str | Path) -> InputDeck:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"deck file not found: {path}")
    return parse_deck(path.read_text(encoding="utf-8"), source_path=str(path))


def render_deck(deck: InputDeck) -> str:
    text = "\n".join(line.render() for line in deck.lines)
    if deck.lines and deck.trailing_newline:
        text += "\n"
    return text


# ---------------------------------------------------------------- parameters


class ParameterSet(Mapping):
    """Ordered name -> string value mapping loaded from a parameters CSV."""

    def __init__(self, entries: Mapping[str, str] | None = None):
        self._entries: dict[str, str] = {}
        for name, value in (entries or {}).items():
            if not NAME_RE.match(name):
                raise InvalidParameterName(f"invalid parameter name {name!r}")
            self._entries[name] = str(value)

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"ParameterSet({self._entries!r})"

    def __eq__(self, other):
        if isinstance(other, ParameterSet):
            return list(self._entries.items()) == list(other._entries.items())
        return NotImplemented

    def with_value(self, name: str, value) -> ParameterSet:
        entries = dict(self._entries)
        entries[name] = str(value)
        return ParameterSet(entries)


def _csv_rows(text: str) -> list[list[str]]:
    rows = []
    for row in csv.reader(io.StringIO(text)):
        cells = [c.strip() for c in row]
        if any(cells):
            rows.append(cells)
    return rows


def parameter_layout(rows: list[list[str]]) -> str:
    """Return ``"pairs"``, ``"pairs-with-header"`` or ``"header"``."""
    if rows and [c.lower() for c in rows[0]] == ["name", "value"]:
        return "pairs-with-header"
    all_pairs = all(len(r) == 2 and NAME_RE.match(r[0]) for r in rows)
    if all_pairs and (len(rows) != 2 or NAME_RE.match(rows[1][0])):
        return "pairs"
    return "header"


def parse_parameters(text: str) -> ParameterSet:
    rows = _csv_rows(text)
    if not rows:
        raise EmptyCSV("parameters CSV is empty")
    layout = parameter_layout(rows)
    if layout == "header":
        if len(rows) < 2:
            raise EmptyCSV("parameters CSV has a header row but no values")
        pairs = list(zip(rows[0], rows[1]))
        if len(rows[0]) != len(rows[1]):
            raise DeckError("header and value rows differ in length")
    else:
        body = rows[1:] if layout == "pairs-with-header" else rows
        pairs = [(r[0], r[1]) for r in body]
    entries: dict[str, str] = {}
    for name, value in pairs:
        if name in entries:
            raise DuplicateName(f"parameter {name!r} appears more than once", name=name)
        entries[name] = value
    return ParameterSet(entries)


def load_parameters(path: str | Path) -> ParameterSet:
    """Read a parameters CSV: either ``name,value`` rows or a header row plus one value row."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"parameters file not found: {path}")
    return parse_parameters(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------- templating


def _fill(text: str, params: Mapping[str, str], used: set, missing: set) -> str:
    def sub(m):
        name = m.group(1)
        if name not in params:
            missing.add(name)
            return m.group(0)
        used.add(name)
        return params[name]

    return PLACEHOLDER_RE.sub(sub, text)


def _refit(token: str | None, width: int, where: str) -> str | None:
    if token is None:
        return None
    if len(token) <= width:
        return token
    if is_number(token):
        return format_number(token, width)
    raise FieldOverflow(f"{where}: value {token!r} exceeds {width} columns")


def substitute(template: InputDeck, params: Mapping[str, str]) -> InputDeck:
    """Replace every ``{name}`` in cards, directives and free text by its value."""
    used: set[str] = set()
    missing: set[str] = set()
    out: list[DeckLine] = []
    for line in template.lines:
        if line.kind == CARD:
            card = line.content
            if not card.placeholders():
                out.append(line)
                continue
            whats = tuple(
                _refit(_fill(w, params, used, missing), FIELD_WIDTH, card.keyword) if w else w
                for w in card.whats
            )
            sdum = card.sdum
            if sdum:
                sdum = _refit(_fill(sdum, params, used, missing), SDUM_WIDTH, card.keyword)
            out.append(DeckLine(CARD, replace(card, whats=whats, sdum=sdum, raw=None)))
        elif line.kind in (DIRECTIVE, FREE_TEXT) and PLACEHOLDER_RE.search(line.content):
            out.append(DeckLine(line.kind, _fill(line.content, params, used, missing)))
        else:
            out.append(line)
    if missing:
        names = ", ".join(sorted(missing))
        raise UnboundPlaceholder(f"no parameter for placeholder(s): {names}", names=sorted(missing))
    warnings = list(template.warnings)
    for name in params:
        if name not in used:
            warnings.append(ParseWarning(0, f"UnusedParameter: {name}"))
    return replace(template, lines=tuple(out), warnings=tuple(warnings))


@dataclass(frozen=True)
class CyclePlan:
    prefix: str
    count: int
    base_seed: int
    output_dir: Path

    def __post_init__(self):
        if self.count < 1:
            raise DeckError(f"cycle count must be >= 1, got {self.count}")
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    def file_name(self, i: int) -> str:
        return f"{self.prefix}_{i:02d}.inp"

    def seed(self, i: int) -> int:
        return self.base_seed + (i - 1)


def _has_seed_placeholder(template: InputDeck) -> bool:
    return any("seed" in card.placeholders() for card in template.cards("RANDOMIZ"))


def generate_cycles(template: InputDeck, params: Mapping[str, str], plan: CyclePlan) -> list[Path]:
    """Write ``plan.count`` decks that differ only in the RANDOMIZ seed."""
    if not _has_seed_placeholder(template):
        raise DeckError("template needs a {seed} placeholder on its RANDOMIZ card")
    params = ParameterSet(params) if not isinstance(params, ParameterSet) else params
    plan.output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(1, plan.count + 1):
        deck = substitute(template, params.with_value("seed", plan.seed(i)))
        path = plan.output_dir / plan.file_name(i)
        path.write_text(render_deck(deck), encoding="utf-8")
        written.append(path)
    return written
