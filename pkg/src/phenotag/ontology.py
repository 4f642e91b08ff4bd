"""Ontology ingestion: OBO parsing, category selection and subclass closure.

The ontology is consumed as an OBO 1.2 flat file.  Only ``[Term]`` stanzas
are read and only the keys ``id``, ``name``, ``alt_id``, ``synonym``,
``def``, ``is_a`` and ``is_obsolete`` are interpreted; every other key is
ignored.  Subclass structure is defined exclusively by ``is_a`` edges.

The annotation label set is the ordered list of non-obsolete direct
children of a configurable root term (for HPO releases this is the
"Phenotypic abnormality" term, ``HP:0000118``).  The closure maps every
term reachable downward from a category to the set of category indices it
belongs to; a term may belong to several categories because the ontology
is a DAG.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator

from .errors import ConfigError, OboParseError, OntologyError

DEFAULT_ROOT_ID = "HP:0000118"

_QUOTED = re.compile(r'"((?:\\.|[^"\\])*)"')


@dataclass(frozen=True)
class OntologyTerm:
    """One ontology term as read from a ``[Term]`` stanza."""

    id: str
    name: str
    synonyms: tuple[str, ...] = ()
    definition: str = ""
    parents: tuple[str, ...] = ()
    alt_ids: tuple[str, ...] = ()
    obsolete: bool = False


@dataclass
class PhenotypeCategories:
    """The ordered category terms under ``root_id`` and their closure.

    ``categories[j]`` is the term whose label class index is ``j``.
    ``closure`` maps a term id to the set of category indices it descends
    from (each category maps at least to its own index).
    """

    root_id: str
    categories: tuple[OntologyTerm, ...]
    closure: dict[str, frozenset[int]] = field(default_factory=dict)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def category_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.categories)

    @property
    def num_subclasses(self) -> int:
        """Closure entries that are not category terms themselves."""
        ids = set(self.category_ids)
        return sum(1 for t in self.closure if t not in ids)

    def index_of(self, category_id: str) -> int:
        return self.category_ids.index(category_id)


def _unquote(value: str) -> str:
    """Strip surrounding quotes and trailing provenance brackets."""
    m = _QUOTED.search(value)
    if m:
        return m.group(1).replace('\\"', '"')
    return value.split("[", 1)[0].strip()


def _isa_target(value: str) -> str:
    """Keep only the identifier: drop '!' comments and '{...}' qualifiers."""
    head = value.split("!", 1)[0].strip()
    return head.split()[0] if head else ""


def parse_obo(stream: IO[str] | Iterable[str]) -> list[OntologyTerm]:
    """Parse OBO term stanzas into a list of terms.

    Raises OboParseError on a stanza missing its id, on a non-obsolete
    stanza missing its name, and on duplicate primary ids; messages carry
    the 1-based line number of the stanza header.
    """
    terms: list[OntologyTerm] = []
    seen: set[str] = set()
    for start_line, fields in _iter_stanzas(stream):
        term_id = fields.get("id")
        obsolete = fields.get("obsolete", False)
        if not term_id:
            raise OboParseError(f"line {start_line}: [Term] stanza without id")
        if not obsolete and not fields.get("name"):
            raise OboParseError(
                f"line {start_line}: term {term_id} has no name"
            )
        if term_id in seen:
            raise OboParseError(
                f"line {start_line}: duplicate term id {term_id}"
            )
        seen.add(term_id)
        terms.append(
            OntologyTerm(
                id=term_id,
                name=fields.get("name", ""),
                synonyms=tuple(fields.get("synonyms", ())),
                definition=fields.get("definition", ""),
                parents=tuple(fields.get("parents", ())),
                alt_ids=tuple(fields.get("alt_ids", ())),
                obsolete=obsolete,
            )
        )
    return terms


def _iter_stanzas(stream: Iterable[str]) -> Iterator[tuple[int, dict]]:
    in_term = False
    start_line = 0
    fields: dict = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if line.startswith("["):
            if in_term:
                yield start_line, fields
            in_term = line == "[Term]"
            start_line = lineno
            fields = {}
            continue
        if not in_term or not line or line.startswith("!"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            continue
        key = key.strip()
        value = value.strip()
        if key == "id":
            fields["id"] = value.split("!", 1)[0].strip()
        elif key == "name":
            fields["name"] = value
        elif key == "alt_id":
            fields.setdefault("alt_ids", []).append(value)
        elif key == "synonym":
            fields.setdefault("synonyms", []).append(_unquote(value))
        elif key == "def":
            fields["definition"] = _unquote(value)
        elif key == "is_a":
            target = _isa_target(value)
            if target:
                fields.setdefault("parents", []).append(target)
        elif key == "is_obsolete":
            fields["obsolete"] = value.split("!", 1)[0].strip().lower() == "true"
    if in_term:
        yield start_line, fields


def validate_terms(terms: Iterable[OntologyTerm]) -> dict[str, OntologyTerm]:
    """Index terms by id, rejecting dangling is_a references."""
    by_id = {t.id: t for t in terms}
    for t in by_id.values():
        for p in t.parents:
            if p not in by_id:
                raise OntologyError(
                    f"term {t.id} references absent parent {p}"
                )
    return by_id


def alias_map(terms: Iterable[OntologyTerm]) -> dict[str, str]:
    """Resolve alt_ids (and primary ids) to primary ids."""
    out: dict[str, str] = {}
    for t in terms:
        out[t.id] = t.id
        for a in t.alt_ids:
            out.setdefault(a, t.id)
    return out


def term_text(term: OntologyTerm) -> str:
    """Name, synonyms in file order, then definition, space-separated."""
    parts = [term.name, *term.synonyms, term.definition]
    return " ".join(p for p in parts if p)


def select_general_categories(
    terms: Iterable[OntologyTerm], root_id: str = DEFAULT_ROOT_ID
) -> PhenotypeCategories:
    """Pick the non-obsolete direct children of ``root_id`` as categories.

    Categories are ordered by identifier so class indices are stable
    across runs.  The returned closure holds only the categories' own
    self-memberships; run subclass_closure to populate it.
    """
    by_id = validate_terms(terms)
    if root_id not in by_id:
        raise ConfigError(f"category root {root_id} not found in ontology")
    children = sorted(
        (t for t in by_id.values() if not t.obsolete and root_id in t.parents),
        key=lambda t: t.id,
    )
    if not children:
        raise ConfigError(f"category root {root_id} has no live children")
    closure = {t.id: frozenset({j}) for j, t in enumerate(children)}
    return PhenotypeCategories(
        root_id=root_id, categories=tuple(children), closure=closure
    )


def subclass_closure(
    terms: Iterable[OntologyTerm], categories: PhenotypeCategories
) -> PhenotypeCategories:
    """Populate the closure with every term reachable below each category.

    closure[t] = { j : t is the category term H_j or lies one or more is_a
    hops below it }.  Obsolete terms take no part: they are neither closure
    members nor edge endpoints.  Raises OntologyError if the is_a graph has
    a cycle, naming one term on it.
    """
    by_id = validate_terms(terms)
    live = {i: t for i, t in by_id.items() if not t.obsolete}
    children: dict[str, list[str]] = {i: [] for i in live}
    for t in live.values():
        for p in t.parents:
            if p in live:
                children[p].append(t.id)
    _check_acyclic(live, children)

    membership: dict[str, set[int]] = {}
    for j, cat in enumerate(categories.categories):
        stack = [cat.id]
        seen: set[str] = set()
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            membership.setdefault(node, set()).add(j)
            stack.extend(children.get(node, ()))
    closure = {t: frozenset(js) for t, js in membership.items()}
    return replace(categories, closure=closure)


def _check_acyclic(
    live: dict[str, OntologyTerm], children: dict[str, list[str]]
) -> None:
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(live, WHITE)
    for root in live:
        if color[root] != WHITE:
            continue
        stack: list[tuple[str, Iterator[str]]] = [(root, iter(children[root]))]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            for child in it:
                if color[child] == GREY:
                    raise OntologyError(f"is_a cycle involving term {child}")
                if color[child] == WHITE:
                    color[child] = GREY
                    stack.append((child, iter(children[child])))
                    break
            else:
                color[node] = BLACK
                stack.pop()


SNAPSHOT_HEADER = "#phenotag ontology snapshot v1"
_LIST_SEP = "|"


def _clean_field(value: str) -> str:
    """Snapshot fields may not contain tabs, newlines or the list separator."""
    for bad in ("\t", "\n", "\r", _LIST_SEP):
        value = value.replace(bad, " ")
    return value


def write_snapshot(terms: Iterable[OntologyTerm], out: IO[str]) -> None:
    """Write the canonical line-oriented snapshot: one term per record.

    Columns: id, obsolete flag, name, pipe-joined parents, pipe-joined
    alt_ids, pipe-joined synonyms, definition.
    """
    out.write(SNAPSHOT_HEADER + "\n")
    for t in terms:
        row = [
            t.id,
            "1" if t.obsolete else "0",
            _clean_field(t.name),
            _LIST_SEP.join(t.parents),
            _LIST_SEP.join(t.alt_ids),
            _LIST_SEP.join(_clean_field(s) for s in t.synonyms),
            _clean_field(t.definition),
        ]
        out.write("\t".join(row) + "\n")


def read_snapshot(stream: Iterable[str]) -> list[OntologyTerm]:
    """Read a snapshot produced by write_snapshot."""
    terms = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise OntologyError(
                f"snapshot line {lineno}: expected 7 columns, got {len(cols)}"
            )
        ident, obsolete, name, parents, alt_ids, synonyms, definition = cols
        terms.append(
            OntologyTerm(
                id=ident,
                name=name,
                synonyms=tuple(s for s in synonyms.split(_LIST_SEP) if s),
                definition=definition,
                parents=tuple(p for p in parents.split(_LIST_SEP) if p),
                alt_ids=tuple(a for a in alt_ids.split(_LIST_SEP) if a),
                obsolete=obsolete == "1",
            )
        )
    return terms


def load_obo(path) -> list[OntologyTerm]:
    """Parse an OBO file from disk."""
    with open(path, encoding="utf-8") as fh:
        return parse_obo(fh)


def load_snapshot(path) -> list[OntologyTerm]:
    with open(path, encoding="utf-8") as fh:
        return read_snapshot(fh)


def load_terms(path) -> list[OntologyTerm]:
    """Load terms from either an OBO file or a snapshot, by sniffing."""
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
        fh.seek(0)
        if head.startswith(SNAPSHOT_HEADER):
            return read_snapshot(fh)
        return parse_obo(fh)
