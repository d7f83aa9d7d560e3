"""Tibetan orthographic segmentation and vocabularies.

Three modeling-unit granularities are supported:

* ``SYLLABLE``: tsheg-delimited syllables.
* ``SYLLABLE_UNIT``: horizontal positions inside a syllable (prefix, root
  stack, suffix, secondary suffix, trailing vowel-bearing stack).
* ``COMPONENT``: single codepoints (base letter, subjoined letter, vowel sign).

No Unicode normalization is applied; stacks are taken exactly as encoded.
"""

from __future__ import annotations

import enum
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

TSHEG = "་"
UNK_TEXT = "⟨unk⟩"

BLANK, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED = ("<blank>", "<unk>", "<sos>", "<eos>")

# tsheg, non-breaking tsheg, shad family, gter tsheg
_DELIMS = {"་", "༌", "།", "༎", "༏", "༐", "༑", "༒", "༔"}

PREFIXES = set("གདབམའ")
SUFFIXES = set("གངདནབམའརལས")
SECONDARY_SUFFIXES = set("སད")
# suffixes that may be followed by a secondary ས
_TAKES_SA = set("གངབམ")
# suffixes that may be followed by the archaic secondary ད
_TAKES_DA = set("ནརལ")


class Granularity(enum.Enum):
    SYLLABLE = "syllable"
    SYLLABLE_UNIT = "unit"
    COMPONENT = "component"


class ComponentError(ValueError):
    def __init__(self, syllable: str, offset: int):
        self.syllable = syllable
        self.offset = offset
        ch = syllable[offset]
        super().__init__(f"codepoint U+{ord(ch):04X} at offset {offset} of {syllable!r} "
                         "is not a base letter, subjoined letter or vowel sign")


class UnitParseError(ValueError):
    def __init__(self, syllable: str, attempt: list, reason: str):
        self.syllable = syllable
        self.attempt = attempt
        super().__init__(f"cannot group {syllable!r}: {reason} (stacks: {attempt})")


@dataclass(frozen=True)
class Component:
    char: str
    kind: str  # "base" | "subjoined" | "vowel"


@dataclass(frozen=True)
class Unit:
    role: str  # prefix | root | suffix | secondary_suffix | vowel_stack
    components: tuple[Component, ...]

    @property
    def text(self) -> str:
        return "".join(c.char for c in self.components)


@dataclass(frozen=True)
class SyllableParse:
    source: str
    units: tuple[Unit, ...]

    @property
    def components(self) -> list[Component]:
        return [c for u in self.units for c in u.components]

    @property
    def root(self) -> Unit:
        return next(u for u in self.units if u.role == "root")


def is_tibetan(ch: str) -> bool:
    return "ༀ" <= ch <= "࿿"


def component_kind(ch: str) -> str | None:
    o = ord(ch)
    if 0x0F40 <= o <= 0x0F6C:
        return "base"
    if 0x0F90 <= o <= 0x0FBC:
        return "subjoined"
    if 0x0F71 <= o <= 0x0F84:
        return "vowel"
    return None


def segment_syllables(text: str) -> list[str]:
    """Split on tsheg, shad punctuation and whitespace.

    A run of non-Tibetan codepoints inside a segment becomes its own opaque
    segment (see :func:`is_tibetan_syllable`).
    """
    out: list[str] = []
    cur: list[str] = []
    cur_tib: bool | None = None

    def flush():
        if cur:
            out.append("".join(cur))
            cur.clear()

    for ch in text:
        if ch in _DELIMS or ch.isspace():
            flush()
            cur_tib = None
            continue
        tib = is_tibetan(ch)
        if cur_tib is not None and tib != cur_tib:
            flush()
        cur.append(ch)
        cur_tib = tib
    flush()
    return out


def is_tibetan_syllable(segment: str) -> bool:
    return bool(segment) and all(component_kind(ch) is not None for ch in segment)


def decompose_components(syllable: str) -> list[Component]:
    comps = []
    for i, ch in enumerate(syllable):
        kind = component_kind(ch)
        if kind is None:
            raise ComponentError(syllable, i)
        comps.append(Component(ch, kind))
    return comps


def _stacks(comps: list[Component]) -> list[list[Component]]:
    stacks: list[list[Component]] = []
    for c in comps:
        if c.kind == "base" or not stacks:
            stacks.append([c])
        else:
            stacks[-1].append(c)
    return stacks


def _is_simple(stack: list[Component]) -> bool:
    return len(stack) == 1 and stack[0].kind == "base"


def decompose_units(syllable: str) -> SyllableParse:
    """Group a syllable's components into horizontal positions.

    The root is the first stack that carries a subjoined letter or vowel
    sign. When every stack is a bare letter the root is picked by the
    classical prefix/suffix tables: a three-letter syllable ending in a
    valid suffix + secondary-suffix pair takes its first letter as root,
    otherwise a leading prefix letter is split off.
    """
    comps = decompose_components(syllable)
    stacks = _stacks(comps)
    attempt = ["".join(c.char for c in s) for s in stacks]
    if not stacks or stacks[0][0].kind != "base":
        raise UnitParseError(syllable, attempt, "syllable does not start with a base letter")

    tail_vowel = None
    if len(stacks) > 1 and stacks[-1][0].char == "འ" and all(
            c.kind == "vowel" for c in stacks[-1][1:]) and len(stacks[-1]) > 1:
        tail_vowel = stacks.pop()

    marked = [i for i, s in enumerate(stacks) if not _is_simple(s)]
    if marked:
        r = marked[0]
        if len(marked) > 1:
            raise UnitParseError(syllable, attempt, "more than one stacked or vowel-bearing root")
    else:
        r = _bare_root(stacks, syllable, attempt)

    roles: list[str] = []
    if r > 1:
        raise UnitParseError(syllable, attempt, "more than one letter before the root")
    if r == 1:
        if stacks[0][0].char not in PREFIXES:
            raise UnitParseError(syllable, attempt, f"{attempt[0]} cannot be a prefix")
        roles.append("prefix")
    roles.append("root")
    after = stacks[r + 1:]
    if len(after) > 2:
        raise UnitParseError(syllable, attempt, "too many letters after the root")
    if after:
        if after[0][0].char not in SUFFIXES:
            raise UnitParseError(syllable, attempt, f"{attempt[r + 1]} is not a suffix")
        roles.append("suffix")
    if len(after) == 2:
        if after[1][0].char not in SECONDARY_SUFFIXES:
            raise UnitParseError(syllable, attempt, f"{attempt[r + 2]} is not a secondary suffix")
        roles.append("secondary_suffix")

    units = [Unit(role, tuple(s)) for role, s in zip(roles, stacks)]
    if tail_vowel is not None:
        units.append(Unit("vowel_stack", tuple(tail_vowel)))
    return SyllableParse(syllable, tuple(units))


def _bare_root(stacks, syllable, attempt) -> int:
    n = len(stacks)
    ch = [s[0].char for s in stacks]
    if n <= 2:
        return 0
    if n == 3:
        if ch[2] == "ས" and ch[1] in _TAKES_SA or ch[2] == "ད" and ch[1] in _TAKES_DA:
            return 0
        if ch[0] in PREFIXES:
            return 1
        raise UnitParseError(syllable, attempt, "no identifiable root among bare letters")
    if n == 4:
        return 1
    raise UnitParseError(syllable, attempt, "too many bare letters")


def units_of(syllable: str, g: Granularity) -> list[str]:
    """Modeling units of one syllable at granularity ``g``; raises on unparseable input."""
    if g is Granularity.SYLLABLE:
        return [syllable]
    if g is Granularity.SYLLABLE_UNIT:
        return [u.text for u in decompose_units(syllable).units]
    return [c.char for c in decompose_components(syllable)]


@dataclass
class Vocabulary:
    granularity: Granularity
    units: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.units)}
        if len(self.index) != len(self.units):
            raise ValueError("vocabulary units must be distinct")

    def __len__(self) -> int:
        return len(self.units)

    def __contains__(self, unit: str) -> bool:
        return unit in self.index

    def id_of(self, unit: str) -> int:
        return self.index.get(unit, UNK)

    def unit_of(self, i: int) -> str:
        if not 0 <= i < len(self.units):
            raise IndexError(f"id {i} outside vocabulary of size {len(self.units)}")
        return self.units[i]

    def save(self, path) -> None:
        g = self.granularity.value
        lines = [f"{i}\t{u}\t{g}" for i, u in enumerate(self.units)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        rows.sort(key=lambda r: int(r[0]))
        if [int(r[0]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not dense")
        return cls(Granularity(rows[0][2]), [r[1] for r in rows])


def _tokenize(text: str, g: Granularity, boundary: bool = False) -> list[str | None]:
    """Units of ``text``; ``None`` marks an opaque or unparseable segment.

    With ``boundary`` a tsheg unit separates syllables at sub-syllable
    granularities so decoded unit strings can be re-split into syllables.
    """
    out: list[str | None] = []
    for k, seg in enumerate(segment_syllables(text)):
        if k and boundary and g is not Granularity.SYLLABLE:
            out.append(TSHEG)
        if not is_tibetan_syllable(seg):
            out.append(None)
            continue
        try:
            out.extend(units_of(seg, g))
        except UnitParseError:
            out.append(None)
    return out


def build_vocab(corpus: Iterable[str] | str, g: Granularity,
                boundary_token: bool = False) -> Vocabulary:
    """Vocabulary of every distinct unit, most frequent first, ties by codepoint.

    ``boundary_token`` adds the tsheg as a syllable-separator unit (ignored
    at syllable granularity).
    """
    lines = [corpus] if isinstance(corpus, str) else corpus
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(u for u in _tokenize(line, g, boundary_token) if u is not None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda u: (-counts[u], u))
    return Vocabulary(g, list(RESERVED) + ordered)


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    boundary = TSHEG in vocab
    return [UNK if u is None else vocab.id_of(u) for u in _tokenize(text, vocab.granularity, boundary)]


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> str:
    parts = []
    for i in ids:
        unit = vocab.unit_of(int(i))
        if i == UNK:
            unit = UNK_TEXT
        elif i in (BLANK, SOS, EOS):
            continue
        parts.append(unit)
    if vocab.granularity is Granularity.SYLLABLE:
        return TSHEG.join(parts)
    return "".join(parts)


def lexicon_rows(syllables: Iterable[str]) -> list[tuple[str, str, str]]:
    """(syllable, unit segmentation, component segmentation) for parseable syllables."""
    rows = []
    for syl in sorted(set(syllables)):
        try:
            parse = decompose_units(syl)
        except (UnitParseError, ComponentError):
            continue
        rows.append((syl, "|".join(u.text for u in parse.units),
                     "|".join(c.char for c in parse.components)))
    return rows


def dump_lexicon(syllables: Iterable[str], path) -> int:
    rows = lexicon_rows(syllables)
    Path(path).write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
    return len(rows)


def describe(ch: str) -> str:
    return unicodedata.name(ch, f"U+{ord(ch):04X}")
