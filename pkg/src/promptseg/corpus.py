"""Synthetic prompt corpus generation and the tab-separated corpus file format.

Prompt i is bound to label map ``i % len(labels)``; training code relies on
the same rule, so a corpus can be regenerated or shipped as a file and still
align with its volumes.  Every organ a prompt mentions is guaranteed present
in its source label map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadTableFormat, EmptyForeground
from .grids import LabelMap
from .prompts import Lexicon, ParsedPrompt, parse_prompt

INSTRUCTION_TEMPLATES = (
    "segment the {organs}",
    "segment {organs}",
    "create a segmentation mask of {organs}",
    "please segment the {organs}",
    "delineate the {organs}",
)

_RELATION_JOINERS = (
    "{base}, including the {phrase}",
    "{base}; focus on the {phrase}",
)
_NEAR_JOINERS = (
    "{base}, especially {phrase}",
    "{base}; pay attention to {phrase}",
)


@dataclass
class PromptCorpusConfig:
    n_train: int = 650
    n_val: int = 130
    organs_min: int = 1
    organs_max: int = 3
    relation_probability: float = 0.3
    synonym_probability: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_val <= 0:
            raise EmptyForeground("corpus counts must be positive")
        if not (1 <= self.organs_min <= self.organs_max):
            raise EmptyForeground("organs_per_prompt range invalid")
        for p in (self.relation_probability, self.synonym_probability):
            if not 0.0 <= p <= 1.0:
                raise EmptyForeground("probabilities must lie in [0, 1]")


def _join_names(names: list[str], rng: np.random.Generator) -> str:
    if len(names) == 1:
        return names[0]
    if len(names) == 2:
        return f"{names[0]} and {names[1]}"
    head = ", ".join(names[:-1])
    oxford = "," if rng.random() < 0.5 else ""
    return f"{head}{oxford} and {names[-1]}"


def _render_mentions(chosen: list[int], lex: Lexicon, rng: np.random.Generator,
                     synonym_probability: float) -> list[str]:
    """Organ names for the chosen ids, with optional synonym substitution.

    When every member of a family is chosen, the whole family may collapse
    into one family alias ("the kidneys"), which parses back to all members.
    """
    remaining = list(chosen)
    names = []
    families = {}
    for alias, ids in lex.families.items():
        families.setdefault(tuple(sorted(ids)), []).append(alias)
    for ids, aliases in families.items():
        if all(i in remaining for i in ids) and rng.random() < synonym_probability:
            names.append(str(rng.choice(sorted(aliases))))
            for i in ids:
                remaining.remove(i)
    for cid in remaining:
        entry = lex.entry(cid)
        if entry.synonyms and rng.random() < synonym_probability:
            names.append(str(rng.choice(entry.synonyms)))
        else:
            names.append(entry.canonical_name)
    return names


def generate_prompt_corpus(
    labels: list[LabelMap],
    cfg: PromptCorpusConfig,
    lex: Lexicon,
) -> list[tuple[str, ParsedPrompt]]:
    """Build n_train + n_val prompts, each aligned with labels[i % n]."""
    if not labels:
        raise EmptyForeground("need at least one label map")
    present_per_volume = []
    for i, lm in enumerate(labels):
        fg = sorted(lm.classes_present() - {0})
        if not fg:
            raise EmptyForeground(f"label map {i} has no foreground class")
        present_per_volume.append(fg)

    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_val
    records = []
    for i in range(total):
        present = present_per_volume[i % len(labels)]
        k = int(rng.integers(cfg.organs_min, cfg.organs_max + 1))
        k = min(k, len(present))
        chosen = sorted(int(c) for c in rng.choice(present, size=k, replace=False))
        names = _render_mentions(chosen, lex, rng, cfg.synonym_probability)
        template = str(rng.choice(INSTRUCTION_TEMPLATES))
        text = template.format(organs=_join_names(names, rng))

        if len(present) >= 2 and rng.random() < cfg.relation_probability:
            target = int(rng.choice(chosen))
            anchor = int(rng.choice([c for c in present if c != target]))
            rel_template = str(rng.choice(lex.relation_templates))
            phrase = rel_template.format(
                anchor=lex.entry(anchor).canonical_name,
                target=lex.entry(target).canonical_name,
            )
            if phrase.startswith("the "):
                joiner = str(rng.choice(_NEAR_JOINERS))
            else:
                joiner = str(rng.choice(_RELATION_JOINERS))
            text = joiner.format(base=text, phrase=phrase)

        parsed = parse_prompt(text, lex)
        mentioned = set(parsed.mentioned())
        if not mentioned <= set(present):
            raise EmptyForeground(
                f"generated prompt mentions organs absent from its volume: {text!r}"
            )
        records.append((text, parsed))
    return records


def save_corpus(records: list[tuple[str, ParsedPrompt]], path: str) -> None:
    """One record per line: prompt_text<TAB>presence_bits<TAB>relations."""
    with open(path, "w", encoding="utf-8") as fh:
        for text, parsed in records:
            bits = "".join(str(v) for v in parsed.presence)
            rels = ",".join(f"{a}>{t}" for a, t in parsed.relations)
            fh.write(f"{text}\t{bits}\t{rels}\n")


def load_corpus(path: str) -> list[tuple[str, ParsedPrompt]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise BadTableFormat(f"{path}:{lineno}: expected 3 tab-separated fields")
            text, bits, rels = parts
            presence = tuple(int(ch) for ch in bits)
            relations = tuple(
                (int(a), int(t))
                for a, t in (pair.split(">") for pair in rels.split(",") if pair)
            )
            records.append((text, ParsedPrompt(presence, relations, text)))
    return records
