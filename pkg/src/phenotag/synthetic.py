"""Desk-scale synthetic data: demo ontology, notes with injected labels.

The generator composes template notes by sampling subclass term texts from
chosen categories and records the injected category indices as ground
truth.  Each demo category owns two disjoint vocabularies: naming words
(used in term names and synonyms, which the keyword baseline can match)
and descriptive words (used only in definitions, so an injected
definition is invisible to exact name matching but carries category
signal a trained encoder can pick up).  Notes also carry masked-PHI
brackets and numeric vitals to exercise the normalizer, and synthetic
3-digit diagnosis codes wired to the demo mapping tables so the whole
silver-standard path runs end to end.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

from .corpus import Document, KIND_EHR, write_jsonl_corpus
from .ontology import (
    DEFAULT_ROOT_ID,
    OntologyTerm,
    PhenotypeCategories,
    select_general_categories,
    subclass_closure,
)
from .silver import write_label_file

DEMO_ROOT_ID = DEFAULT_ROOT_ID

_ORGAN_ADJS = (
    "cardiac", "pulmonary", "renal", "hepatic", "neural", "dermal",
    "skeletal", "ocular", "gastric", "vascular", "endocrine", "lymphatic",
)
_ORGAN_PREFIXES = (
    "cardio", "pulmo", "nephro", "hepato", "neuro", "dermo",
    "osteo", "oculo", "gastro", "angio", "endocrino", "lympho",
)
_NAME_SUFFIXES = (
    "spasmitis", "malacia", "sclerosis", "dystrophy", "plegia",
    "ectasia", "megaly", "ptosis", "rrhexis", "stenosis",
)
_NAME_QUALIFIERS = ("primary", "secondary", "refractory", "relapsing")
_DEF_SUFFIXES = (
    "flux", "stasis", "tremor", "laxity", "pallor", "rigor",
    "surge", "drift", "quiver", "erosion", "bloom", "creep",
    "fatigue", "swelling", "blanching", "cramping",
)

_FILLER_SENTENCES = (
    "Admitted to [**Hospital1 2020**] for management.",
    "Hospital course uneventful, vitals stable.",
    "Medications reconciled on discharge.",
    "Tolerating diet, ambulating independently.",
    "Follow up arranged in 2 weeks.",
    "Labs on [**2019-03-04**] normal, bp 120/80, hr 72.",
    "Denies acute complaints at discharge.",
    "Review of systems otherwise unremarkable.",
)

NOISE_ICD_CODE = "799"


def category_icd_code(j: int) -> str:
    """Synthetic 3-digit diagnosis code assigned to demo category j."""
    return f"9{j:02d}"


def category_omim_id(j: int) -> str:
    return f"OMIM:7{j:05d}"


def build_demo_ontology(
    num_categories: int = 6, subclasses_per_category: int = 8
) -> list[OntologyTerm]:
    """Deterministic demo ontology under the standard category root.

    Includes one obsolete term, one alt_id alias and one diamond subclass
    (a child of two categories) so downstream paths see realistic shapes.
    """
    if not 2 <= num_categories <= len(_ORGAN_ADJS):
        raise ValueError(
            f"num_categories must be in [2, {len(_ORGAN_ADJS)}]"
        )
    terms = [
        OntologyTerm(
            id=DEMO_ROOT_ID,
            name="Phenotypic abnormality",
            definition="A deviation from normal morphology physiology or behavior.",
        )
    ]
    for j in range(num_categories):
        adj = _ORGAN_ADJS[j]
        terms.append(
            OntologyTerm(
                id=f"HP:90000{j:02d}",
                name=f"Abnormality of the {adj} system",
                synonyms=(f"{adj} system disease",),
                definition=f"Any anomaly involving the {adj} system.",
                parents=(DEMO_ROOT_ID,),
            )
        )
        prefix = _ORGAN_PREFIXES[j]
        for k in range(subclasses_per_category):
            name_word = prefix + _NAME_SUFFIXES[k % len(_NAME_SUFFIXES)]
            if k < len(_NAME_SUFFIXES):
                name = f"{adj} {name_word}"
                synonym = f"chronic {name_word}"
            else:
                qual = _NAME_QUALIFIERS[(k // len(_NAME_SUFFIXES) - 1) % len(_NAME_QUALIFIERS)]
                name = f"{adj} {qual} {name_word}"
                synonym = f"chronic {qual} {name_word}"
            w = [
                prefix + _DEF_SUFFIXES[(3 * k + d) % len(_DEF_SUFFIXES)]
                for d in range(5)
            ]
            terms.append(
                OntologyTerm(
                    id=f"HP:91{j:02d}{k:02d}",
                    name=name,
                    synonyms=(synonym,),
                    definition=(
                        f"A {adj} condition marked by {w[0]} and {w[1]} "
                        f"with progressive {w[2]} causing {w[3]} and "
                        f"intermittent {w[4]}."
                    ),
                    parents=(f"HP:90000{j:02d}",),
                    alt_ids=(f"HP:93{j:02d}{k:02d}",) if k == 0 else (),
                )
            )
    # Diamond: one deep term under the first two categories.
    if num_categories >= 2:
        terms.append(
            OntologyTerm(
                id="HP:9200000",
                name=f"{_ORGAN_ADJS[0]} {_ORGAN_ADJS[1]} overlap syndrome",
                synonyms=(),
                definition=(
                    f"A combined disorder producing {_ORGAN_PREFIXES[0]}drift "
                    f"together with {_ORGAN_PREFIXES[1]}surge."
                ),
                parents=("HP:910000", "HP:910100"),
            )
        )
    terms.append(
        OntologyTerm(
            id="HP:9999999",
            name="Retired demo term",
            parents=(DEMO_ROOT_ID,),
            obsolete=True,
        )
    )
    return terms


def demo_categories(terms: Sequence[OntologyTerm]) -> PhenotypeCategories:
    categories = select_general_categories(terms, DEMO_ROOT_ID)
    return subclass_closure(terms, categories)


def demo_mapping_tables(
    categories: PhenotypeCategories,
) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    """Synthetic ICD->OMIM and OMIM->HPO hops, one disease per category."""
    icd_to_omim = {}
    omim_to_hpo = {}
    for j, cid in enumerate(categories.category_ids):
        icd_to_omim[category_icd_code(j)] = {category_omim_id(j)}
        omim_to_hpo[category_omim_id(j)] = {cid}
    icd_to_omim[NOISE_ICD_CODE] = {"OMIM:000000"}
    return icd_to_omim, omim_to_hpo


@dataclass
class SyntheticCorpus:
    documents: list[Document]
    labels: dict[str, frozenset[int]]


def generate_corpus(
    terms: Sequence[OntologyTerm],
    categories: PhenotypeCategories,
    num_documents: int,
    seed: int,
    p_definition: float = 0.6,
) -> SyntheticCorpus:
    """Compose notes by injecting subclass term texts from chosen categories.

    Each chosen subclass contributes either a naming sentence (term name
    plus synonym, matchable by keyword search) or its definition sentence,
    with probability p_definition for the latter.  The recorded label set
    is the union of the injected terms' closure memberships, so a diamond
    subclass labels both of its categories.  Diagnosis codes follow the
    labels, with occasional unmappable noise codes.
    """
    by_id = {t.id: t for t in terms}
    category_ids = set(categories.category_ids)
    per_category: dict[int, list[OntologyTerm]] = {}
    for term_id, members in categories.closure.items():
        if term_id in category_ids:
            continue
        term = by_id[term_id]
        if term.obsolete:
            continue
        for j in members:
            per_category.setdefault(j, []).append(term)
    for j in per_category:
        per_category[j].sort(key=lambda t: t.id)

    rng = random.Random(seed)
    m = categories.num_categories
    documents: list[Document] = []
    labels: dict[str, frozenset[int]] = {}
    for i in range(num_documents):
        n_cats = rng.choices((0, 1, 2, 3), weights=(5, 45, 35, 15))[0]
        n_cats = min(n_cats, m, len(per_category))
        chosen = rng.sample(sorted(per_category), n_cats) if n_cats else []
        # Keep notes finding-dense: one filler sentence per note, two for
        # empty notes, so fragments stay dominated by category content.
        sentences = [rng.choice(_FILLER_SENTENCES)]
        if not chosen:
            sentences.append(rng.choice(_FILLER_SENTENCES))
        injected: set[int] = set()
        for j in chosen:
            for _ in range(1 if rng.random() < 0.7 else 2):
                subclass = rng.choice(per_category[j])
                injected |= categories.closure[subclass.id]
                if rng.random() < p_definition:
                    sentences.append(subclass.definition)
                else:
                    syn = f", also known as {subclass.synonyms[0]}," if subclass.synonyms else ""
                    sentences.append(f"Patient presents with {subclass.name}{syn}.")
        rng.shuffle(sentences)
        codes = [category_icd_code(j) for j in sorted(injected)]
        if rng.random() < 0.15:
            codes.append(NOISE_ICD_CODE)
        doc_id = f"note-{i:05d}"
        documents.append(
            Document(
                doc_id=doc_id,
                kind=KIND_EHR,
                text=" ".join(sentences),
                icd_codes=tuple(codes),
            )
        )
        labels[doc_id] = frozenset(injected)
    return SyntheticCorpus(documents=documents, labels=labels)


def write_obo(terms: Sequence[OntologyTerm], out: IO[str]) -> None:
    """Serialize terms as OBO stanzas (enough for the package's own parser
    and for external OBO tooling)."""
    out.write("format-version: 1.2\n")
    for t in terms:
        out.write("\n[Term]\n")
        out.write(f"id: {t.id}\n")
        if t.name:
            out.write(f"name: {t.name}\n")
        for alt in t.alt_ids:
            out.write(f"alt_id: {alt}\n")
        if t.definition:
            out.write(f'def: "{t.definition}" []\n')
        for syn in t.synonyms:
            out.write(f'synonym: "{syn}" EXACT []\n')
        for p in t.parents:
            out.write(f"is_a: {p}\n")
        if t.obsolete:
            out.write("is_obsolete: true\n")


def write_pair_table(table: dict[str, set[str]], out: IO[str], comment: str) -> None:
    out.write(f"# {comment}\n")
    for left in sorted(table):
        for right in sorted(table[left]):
            out.write(f"{left}\t{right}\n")


def write_demo_bundle(
    out_dir,
    num_documents: int = 500,
    num_categories: int = 6,
    subclasses_per_category: int = 8,
    seed: int = 0,
    p_definition: float = 0.6,
    terms: Sequence[OntologyTerm] | None = None,
) -> dict[str, Path]:
    """Write ontology, corpus, labels and mapping tables into a directory.

    Returns the paths keyed by artifact name.  When an ontology is passed
    in, the bundle reuses it instead of the demo one (mapping tables are
    only emitted for the demo ontology's code scheme).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    demo = terms is None
    if demo:
        terms = build_demo_ontology(num_categories, subclasses_per_category)
        paths["ontology"] = out_dir / "ontology.obo"
        with open(paths["ontology"], "w", encoding="utf-8") as fh:
            write_obo(terms, fh)
    categories = demo_categories(terms)

    corpus = generate_corpus(
        terms, categories, num_documents, seed=seed, p_definition=p_definition
    )
    paths["corpus"] = out_dir / "corpus.jsonl"
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        write_jsonl_corpus(corpus.documents, fh)
    paths["labels"] = out_dir / "labels.jsonl"
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        write_label_file(corpus.labels, categories.category_ids, fh)

    if demo:
        icd_to_omim, omim_to_hpo = demo_mapping_tables(categories)
        paths["icd_to_omim"] = out_dir / "icd_to_omim.tsv"
        with open(paths["icd_to_omim"], "w", encoding="utf-8") as fh:
            write_pair_table(icd_to_omim, fh, "3-digit ICD-9 code\tOMIM id")
        paths["omim_to_hpo"] = out_dir / "omim_to_hpo.tsv"
        with open(paths["omim_to_hpo"], "w", encoding="utf-8") as fh:
            write_pair_table(omim_to_hpo, fh, "OMIM id\tHPO id")
    return paths
