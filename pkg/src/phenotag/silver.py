"""Weak ground-truth labels and the comparison baselines.

The silver standard composes two curated tab-separated tables, diagnosis
code to disease entry and disease entry to ontology term, then propagates
the terms to category indices through the subclass closure.  The keyword
baseline matches term names and synonyms as contiguous token subsequences
using the corpus normalizer, so matching is case- and punctuation-
insensitive exactly where tokenization is.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

from .corpus import Document, normalize_tokenize, three_digit
from .errors import MappingError
from .ontology import OntologyTerm, PhenotypeCategories

logger = logging.getLogger(__name__)


def read_pair_table(stream: Iterable[str], name: str = "mapping") -> dict[str, set[str]]:
    """Read a two-column tab-separated table; '#' lines are comments.

    Raises MappingError with the line number on malformed rows (wrong
    column count or empty fields).
    """
    table: dict[str, set[str]] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise MappingError(
                f"{name} line {lineno}: expected 2 tab-separated columns, "
                f"got {len(cols)}"
            )
        left, right = cols[0].strip(), cols[1].strip()
        if not left or not right or any(c.isspace() for c in left + right):
            raise MappingError(f"{name} line {lineno}: malformed code pair")
        table.setdefault(left, set()).add(right)
    return table


def load_pair_table(path, name: str = "mapping") -> dict[str, set[str]]:
    with open(path, encoding="utf-8") as fh:
        return read_pair_table(fh, name=name)


@dataclass
class MappingTable:
    """Composed diagnosis-code to category-index mapping."""

    icd_to_omim: dict[str, frozenset[str]]
    omim_to_hpo: dict[str, frozenset[str]]
    icd_to_categories: dict[str, frozenset[int]]
    unmapped_hpo_ids: tuple[str, ...] = ()


def compose_mapping(
    icd_to_omim: Mapping[str, set[str]],
    omim_to_hpo: Mapping[str, set[str]],
    categories: PhenotypeCategories,
    aliases: Mapping[str, str] | None = None,
) -> MappingTable:
    """Union the two hops into code -> category indices.

    Ontology ids are resolved through the alias map first; ids still
    absent from the closure are dropped with a logged warning and reported
    on the returned table.  Codes that reach zero categories are retained
    with empty sets.
    """
    aliases = aliases or {}
    unmapped: set[str] = set()
    composed: dict[str, frozenset[int]] = {}
    for code, omims in icd_to_omim.items():
        indices: set[int] = set()
        for omim in omims:
            for hpo_id in omim_to_hpo.get(omim, ()):
                resolved = aliases.get(hpo_id, hpo_id)
                members = categories.closure.get(resolved)
                if members is None:
                    unmapped.add(hpo_id)
                else:
                    indices |= members
        composed[three_digit(code)] = frozenset(indices)
    for hpo_id in sorted(unmapped):
        logger.warning(
            "ontology id %s from the mapping is outside the category closure; "
            "dropped",
            hpo_id,
        )
    return MappingTable(
        icd_to_omim={k: frozenset(v) for k, v in icd_to_omim.items()},
        omim_to_hpo={k: frozenset(v) for k, v in omim_to_hpo.items()},
        icd_to_categories=composed,
        unmapped_hpo_ids=tuple(sorted(unmapped)),
    )


@dataclass
class SilverLabels:
    """Per-document category labels derived from diagnosis codes."""

    labels: dict[str, frozenset[int]]
    documents_without_codes: int = 0
    documents_unmapped: int = 0


def silver_labels(
    documents: Iterable[Document], table: MappingTable
) -> SilverLabels:
    labels: dict[str, frozenset[int]] = {}
    no_codes = 0
    unmapped = 0
    for doc in documents:
        if not doc.icd_codes:
            no_codes += 1
        indices: set[int] = set()
        for code in doc.icd_codes:
            indices |= table.icd_to_categories.get(three_digit(code), frozenset())
        if doc.icd_codes and not indices:
            unmapped += 1
        labels[doc.doc_id] = frozenset(indices)
    return SilverLabels(
        labels=labels,
        documents_without_codes=no_codes,
        documents_unmapped=unmapped,
    )


def write_label_file(
    labels: Mapping[str, frozenset[int]],
    category_ids: Sequence[str],
    out: IO[str],
) -> None:
    """Newline-delimited {doc_id, category ids} records."""
    for doc_id in labels:
        rec = {
            "doc_id": doc_id,
            "categories": sorted(category_ids[j] for j in labels[doc_id]),
        }
        out.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class KeywordIndex:
    """Token-subsequence index over term names and synonyms."""

    by_first_token: dict[str, list[tuple[tuple[str, ...], str]]]
    closure: dict[str, frozenset[int]]
    num_terms: int = field(default=0)


def build_keyword_index(
    terms: Iterable[OntologyTerm], categories: PhenotypeCategories
) -> KeywordIndex:
    """Index every non-obsolete closure member (categories included)."""
    by_first: dict[str, list[tuple[tuple[str, ...], str]]] = {}
    count = 0
    for term in terms:
        if term.obsolete or term.id not in categories.closure:
            continue
        count += 1
        for phrase_text in (term.name, *term.synonyms):
            phrase = tuple(normalize_tokenize(phrase_text))
            if not phrase:
                continue
            by_first.setdefault(phrase[0], []).append((phrase, term.id))
    return KeywordIndex(
        by_first_token=by_first, closure=dict(categories.closure), num_terms=count
    )


def match_terms(index: KeywordIndex, tokens: Sequence[str]) -> set[str]:
    """Ids of terms whose name or a synonym occurs as a contiguous token
    subsequence."""
    matched: set[str] = set()
    n = len(tokens)
    for i, tok in enumerate(tokens):
        for phrase, term_id in index.by_first_token.get(tok, ()):
            if term_id in matched:
                continue
            if i + len(phrase) <= n and tuple(tokens[i : i + len(phrase)]) == phrase:
                matched.add(term_id)
    return matched


def keyword_annotate(text: str, index: KeywordIndex) -> set[int]:
    """Categories reached by any matched term through the closure."""
    tokens = normalize_tokenize(text)
    result: set[int] = set()
    for term_id in match_terms(index, tokens):
        result |= index.closure[term_id]
    return result


def random_annotate(
    num_categories: int, rng: random.Random, rate: float = 0.5
) -> set[int]:
    """Include each category independently with the given probability."""
    if not 0.0 <= rate <= 1.0:
        raise MappingError(f"inclusion rate {rate} outside [0, 1]")
    return {j for j in range(num_categories) if rng.random() < rate}


def read_label_file(stream: Iterable[str]) -> dict[str, set[str]]:
    """doc_id -> category-id set, the inverse of write_label_file."""
    out: dict[str, set[str]] = {}
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        out[rec["doc_id"]] = set(rec["categories"])
    return out
