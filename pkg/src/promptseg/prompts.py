"""Organ lexicon and the prompt parsing function producing presence vectors.

Matching is case-insensitive, word-boundary delimited, and longest-alias
first: once "right kidney" claims a span, the bare "kidney" alias cannot
re-match inside it.  Family aliases ("kidney", "renal structure") map to
every member class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

from .errors import BadLexicon
from .grids import DEFAULT_NUM_CLASSES

# BTCV organ classes; 0 is background.
ORGAN_NAMES = {
    1: "spleen",
    2: "right kidney",
    3: "left kidney",
    4: "gallbladder",
    5: "esophagus",
    6: "liver",
    7: "stomach",
    8: "aorta",
    9: "inferior vena cava",
    10: "portal and splenic vein",
    11: "pancreas",
    12: "right adrenal gland",
    13: "left adrenal gland",
}

_DEFAULT_SYNONYMS = {
    1: ("spleenic organ", "splenic organ"),
    2: ("right renal organ",),
    3: ("left renal organ",),
    4: ("gall bladder",),
    5: ("oesophagus", "gullet"),
    6: ("hepatic organ",),
    7: ("gastric organ",),
    8: ("aortic vessel",),
    9: ("vena cava", "ivc"),
    10: ("portal vein", "splenic vein", "portal and splenic veins"),
    11: ("pancreatic gland",),
    12: ("right suprarenal gland",),
    13: ("left suprarenal gland",),
}

# Aliases that name a whole organ family and expand to every member class.
_DEFAULT_FAMILIES = {
    "kidney": (2, 3),
    "kidneys": (2, 3),
    "renal structure": (2, 3),
    "renal structures": (2, 3),
    "adrenal gland": (12, 13),
    "adrenal glands": (12, 13),
}

# Relation grammar; {anchor}/{target} holes are filled with organ aliases.
DEFAULT_RELATION_TEMPLATES = (
    "region around the {anchor} that belongs to the {target}",
    "area around the {anchor} that belongs to the {target}",
    "the {target} near the {anchor}",
)


@dataclass(frozen=True)
class OrganClass:
    id: int
    canonical_name: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class ParsedPrompt:
    presence: tuple[int, ...]
    relations: tuple[tuple[int, int], ...]
    raw_text: str

    def mentioned(self) -> tuple[int, ...]:
        return tuple(c for c, v in enumerate(self.presence) if v)


@dataclass(eq=False)
class Lexicon:
    entries: tuple[OrganClass, ...]
    families: dict[str, tuple[int, ...]] = field(default_factory=dict)
    relation_templates: tuple[str, ...] = DEFAULT_RELATION_TEMPLATES
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        seen_ids = set()
        seen_aliases: dict[str, tuple[int, ...]] = {}
        for entry in self.entries:
            if entry.id in seen_ids:
                raise BadLexicon(f"duplicate organ id {entry.id}")
            if not 1 <= entry.id < self.num_classes:
                raise BadLexicon(f"organ id {entry.id} outside 1..{self.num_classes - 1}")
            seen_ids.add(entry.id)
            for alias in (entry.canonical_name, *entry.synonyms):
                if alias != alias.lower():
                    raise BadLexicon(f"alias {alias!r} must be lowercase")
                ids = (entry.id,)
                if alias in seen_aliases and seen_aliases[alias] != ids:
                    raise BadLexicon(f"alias {alias!r} maps to two class sets")
                seen_aliases[alias] = ids
        for alias, ids in self.families.items():
            if alias in seen_aliases and seen_aliases[alias] != tuple(ids):
                raise BadLexicon(f"family alias {alias!r} clashes with an organ alias")

    def entry(self, class_id: int) -> OrganClass:
        for e in self.entries:
            if e.id == class_id:
                return e
        raise BadLexicon(f"no organ with id {class_id}")

    def alias_map(self) -> dict[str, tuple[int, ...]]:
        """Every alias -> class-id tuple, families included."""
        out: dict[str, tuple[int, ...]] = {}
        for entry in self.entries:
            for alias in (entry.canonical_name, *entry.synonyms):
                out[alias] = (entry.id,)
        out.update({k: tuple(v) for k, v in self.families.items()})
        return out

    @cached_property
    def _aliases_by_length(self) -> list[tuple[str, tuple[int, ...], re.Pattern]]:
        items = sorted(self.alias_map().items(), key=lambda kv: (-len(kv[0]), kv[0]))
        return [
            (alias, ids, re.compile(r"\b" + re.escape(alias) + r"\b"))
            for alias, ids in items
        ]

    @cached_property
    def _alias_alternation(self) -> str:
        ordered = sorted(self.alias_map(), key=lambda a: (-len(a), a))
        return "(?:" + "|".join(re.escape(a) for a in ordered) + ")"

    @cached_property
    def _relation_patterns(self) -> list[re.Pattern]:
        patterns = []
        for template in self.relation_templates:
            regex = re.escape(template)
            regex = regex.replace(r"\{anchor\}", f"(?P<anchor>{self._alias_alternation})")
            regex = regex.replace(r"\{target\}", f"(?P<target>{self._alias_alternation})")
            regex = regex.replace(r"\ ", r"\s+")
            patterns.append(re.compile(r"\b" + regex + r"\b"))
        return patterns


def default_lexicon(num_classes: int = DEFAULT_NUM_CLASSES) -> Lexicon:
    entries = tuple(
        OrganClass(cid, name, _DEFAULT_SYNONYMS.get(cid, ()))
        for cid, name in ORGAN_NAMES.items()
    )
    return Lexicon(entries, dict(_DEFAULT_FAMILIES), num_classes=num_classes)


def _find_mentions(text: str, lex: Lexicon) -> list[tuple[int, int, tuple[int, ...]]]:
    """Non-overlapping alias matches, longest alias first: (start, end, ids)."""
    lowered = text.lower()
    taken = [False] * len(lowered)
    found = []
    for _, ids, pattern in lex._aliases_by_length:
        for m in pattern.finditer(lowered):
            if any(taken[m.start() : m.end()]):
                continue
            for i in range(m.start(), m.end()):
                taken[i] = True
            found.append((m.start(), m.end(), ids))
    found.sort()
    return found


def extract_relations(text: str, lex: Lexicon) -> list[tuple[int, int]]:
    """Match relation templates and resolve the organ holes.

    Family aliases in either hole expand to one pair per member class.
    """
    lowered = text.lower()
    alias_map = lex.alias_map()
    pairs: list[tuple[int, int]] = []
    for pattern in lex._relation_patterns:
        for m in pattern.finditer(lowered):
            anchors = alias_map[m.group("anchor")]
            targets = alias_map[m.group("target")]
            for a in anchors:
                for t in targets:
                    if (a, t) not in pairs:
                        pairs.append((a, t))
    return pairs


def parse_prompt(text: str, lex: Lexicon) -> ParsedPrompt:
    """Map a prompt to its presence vector and anchor/target relations.

    A prompt mentioning no organ yields the all-zero presence vector; callers
    decide the fallback.
    """
    presence = [0] * lex.num_classes
    for _, _, ids in _find_mentions(text, lex):
        for cid in ids:
            presence[cid] = 1
    relations = extract_relations(text, lex)
    for _, target in relations:
        presence[target] = 1
    return ParsedPrompt(tuple(presence), tuple(relations), text)


# --- lexicon file format -------------------------------------------------
# organ line:   id|canonical|syn1,syn2,...
# family line:  id1,id2|alias|alias2,alias3    (multiple ids in field one)
# template line: template|<pattern with {anchor} and {target}>

def save_lexicon(lex: Lexicon, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in lex.entries:
            fh.write(f"{e.id}|{e.canonical_name}|{','.join(e.synonyms)}\n")
        grouped: dict[tuple[int, ...], list[str]] = {}
        for alias, ids in lex.families.items():
            grouped.setdefault(tuple(ids), []).append(alias)
        for ids, aliases in grouped.items():
            fh.write(
                ",".join(str(i) for i in ids)
                + "|" + aliases[0] + "|" + ",".join(aliases[1:]) + "\n"
            )
        for template in lex.relation_templates:
            fh.write(f"template|{template}\n")


def load_lexicon(path: str, num_classes: int = DEFAULT_NUM_CLASSES) -> Lexicon:
    entries = []
    families: dict[str, tuple[int, ...]] = {}
    templates: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if parts[0] == "template":
                templates.append("|".join(parts[1:]))
                continue
            if len(parts) != 3:
                raise BadLexicon(f"{path}:{lineno}: expected id|name|synonyms")
            ids_field, name, syns = parts
            try:
                ids = tuple(int(v) for v in ids_field.split(","))
            except ValueError as exc:
                raise BadLexicon(f"{path}:{lineno}: bad id field {ids_field!r}") from exc
            aliases = [name] + [s for s in syns.split(",") if s]
            if len(ids) == 1:
                entries.append(OrganClass(ids[0], name, tuple(aliases[1:])))
            else:
                for alias in aliases:
                    families[alias] = ids
    return Lexicon(
        tuple(entries),
        families,
        tuple(templates) or DEFAULT_RELATION_TEMPLATES,
        num_classes,
    )
