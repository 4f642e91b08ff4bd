"""Text normalization, vocabulary, fragmenting and corpus loading.

Narratives and ontology term texts go through one shared normalizer:
lowercase, whitespace split, leading/trailing punctuation stripped, masked
PHI brackets ("[**...**]") removed as units, and number-like tokens
dropped (a token with at least one digit and no letters, which covers
integers, decimals and compounds such as blood-pressure readings).

Documents are windowed into fixed-length fragments over a bounded
vocabulary with reserved PAD and UNK ids.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
import string
from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

from .errors import CorpusError
from .ontology import OntologyTerm, PhenotypeCategories, term_text

KIND_EHR = "EHR"
KIND_CATEGORY = "CATEGORY"
KIND_SUBCLASS = "SUBCLASS"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

DEFAULT_VOCAB_SIZE = 30_000
DEFAULT_WINDOW = 32


def _strip_phi_masks(text: str) -> str:
    # Remove "[**...**]" spans as units; no regex needed for this shape.
    out = []
    i = 0
    while i < len(text):
        if text.startswith("[**", i):
            end = text.find("**]", i + 3)
            if end != -1:
                out.append(" ")
                i = end + 3
                continue
        out.append(text[i])
        i += 1
    return "".join(out)


def _is_number_like(token: str) -> bool:
    has_digit = any(c.isdigit() for c in token)
    has_alpha = any(c.isalpha() for c in token)
    return has_digit and not has_alpha


def normalize_tokenize(text: str) -> list[str]:
    """Normalize raw text to the token stream shared by every component."""
    tokens = []
    for raw in _strip_phi_masks(text).lower().split():
        tok = raw.strip(string.punctuation)
        if not tok or _is_number_like(tok):
            continue
        tokens.append(tok)
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Bounded token inventory with reserved PAD (0) and UNK (1) ids."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise CorpusError("vocabulary must start with the reserved tokens")
        object.__setattr__(
            self, "_ids", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id_of(self, token: str) -> int:
        return self._ids.get(token, 1)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        ids = self._ids
        return [ids.get(t, 1) for t in tokens]

    def write(self, out: IO[str]) -> None:
        for tok in self.tokens:
            out.write(tok + "\n")

    @classmethod
    def read(cls, stream: Iterable[str]) -> "Vocabulary":
        return cls(tokens=tuple(line.rstrip("\n") for line in stream if line.strip()))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.read(fh)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            self.write(fh)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for tok in self.tokens:
            h.update(tok.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class Document:
    """A unit of text: an EHR narrative, a category text or a subclass text."""

    doc_id: str
    kind: str
    text: str
    icd_codes: tuple[str, ...] = ()
    category_indices: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.kind not in (KIND_EHR, KIND_CATEGORY, KIND_SUBCLASS):
            raise CorpusError(f"unknown document kind {self.kind!r}")
        if self.kind == KIND_CATEGORY and len(self.category_indices) != 1:
            raise CorpusError(
                f"category document {self.doc_id} needs exactly one index"
            )
        if self.kind == KIND_SUBCLASS and not self.category_indices:
            raise CorpusError(
                f"subclass document {self.doc_id} has no category membership"
            )


@dataclass(frozen=True)
class Fragment:
    """One fixed-length token window of a document."""

    doc_id: str
    position: int
    token_ids: tuple[int, ...]
    true_length: int


def fragment_document(
    document: Document, vocab: Vocabulary, window: int = DEFAULT_WINDOW
) -> list[Fragment]:
    """Window a document into consecutive non-overlapping fragments.

    The final window is PAD-padded; a document shorter than one window
    (including the empty document) yields exactly one fragment.
    """
    if window < 1:
        raise CorpusError("window must be at least 1")
    ids = vocab.encode(normalize_tokenize(document.text))
    fragments = []
    for pos, start in enumerate(range(0, max(len(ids), 1), window)):
        chunk = ids[start : start + window]
        true_length = len(chunk)
        chunk = chunk + [vocab.pad_id] * (window - true_length)
        fragments.append(
            Fragment(
                doc_id=document.doc_id,
                position=pos,
                token_ids=tuple(chunk),
                true_length=true_length,
            )
        )
    return fragments


def defragment(fragments: Sequence[Fragment]) -> list[int]:
    """Reassemble a document's token ids from its fragments."""
    out: list[int] = []
    for frag in sorted(fragments, key=lambda f: f.position):
        out.extend(frag.token_ids[: frag.true_length])
    return out


def build_vocabulary(
    documents: Iterable[Document], max_size: int = DEFAULT_VOCAB_SIZE
) -> Vocabulary:
    """Rank tokens by total frequency and keep the most frequent max_size.

    Ties break lexicographically (the smaller token gets the smaller id).
    Reserved ids come first in the vocabulary.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in documents:
        n_docs += 1
        counts.update(normalize_tokenize(doc.text))
    if n_docs == 0:
        raise CorpusError("cannot build a vocabulary from zero documents")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[:max_size]]
    return Vocabulary(tokens=(PAD_TOKEN, UNK_TOKEN, *kept))


def split_train_test(
    documents: Sequence[Document], ratio: float = 0.7, seed: int = 0
) -> tuple[list[Document], list[Document]]:
    """Random document-level partition, reproducible from the seed."""
    if not 0.0 < ratio < 1.0:
        raise CorpusError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(documents)
    if n < 2:
        raise CorpusError(f"cannot split {n} document(s)")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = int(math.floor(n * ratio + 1e-9))
    train_idx = set(order[:n_train])
    train = [d for i, d in enumerate(documents) if i in train_idx]
    test = [d for i, d in enumerate(documents) if i not in train_idx]
    return train, test


def three_digit(code: str) -> str:
    """Truncate an ICD-9 code to its 3-character category level."""
    return code.strip().upper()[:3]


def is_ve_code(code: str) -> bool:
    c = code.strip().upper()
    return c.startswith("V") or c.startswith("E")


def _dedupe(codes: Iterable[str]) -> tuple[str, ...]:
    seen: set[str] = set()
    out = []
    for c in codes:
        if c and c not in seen:
            seen.add(c)
            out.append(c)
    return tuple(out)


def read_jsonl_corpus(path_or_stream) -> list[Document]:
    """Read EHR documents from JSON Lines: doc_id, text, icd9 (optional).

    ICD codes are truncated to the 3-digit level and de-duplicated,
    preserving first occurrence order.
    """
    if hasattr(path_or_stream, "read"):
        return _read_jsonl(path_or_stream)
    with open(path_or_stream, encoding="utf-8") as fh:
        return _read_jsonl(fh)


def _read_jsonl(stream: Iterable[str]) -> list[Document]:
    docs = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"corpus line {lineno}: invalid JSON ({exc})")
        if "doc_id" not in rec or "text" not in rec:
            raise CorpusError(f"corpus line {lineno}: needs doc_id and text")
        codes = _dedupe(three_digit(c) for c in rec.get("icd9", ()))
        docs.append(
            Document(
                doc_id=str(rec["doc_id"]),
                kind=KIND_EHR,
                text=rec["text"],
                icd_codes=codes,
            )
        )
    return docs


def write_jsonl_corpus(documents: Iterable[Document], out: IO[str]) -> None:
    for doc in documents:
        rec = {"doc_id": doc.doc_id, "text": doc.text, "icd9": list(doc.icd_codes)}
        out.write(json.dumps(rec, sort_keys=True) + "\n")


def load_mimic_export(noteevents_csv, diagnoses_csv) -> list[Document]:
    """Adapt MIMIC-III NOTEEVENTS/DIAGNOSES_ICD CSV exports to documents.

    One document per discharge-summary note row, carrying the 3-digit ICD
    codes of its admission.  Ships no data; callers supply their own
    access-controlled exports.
    """
    codes_by_adm: dict[str, list[str]] = {}
    with open(diagnoses_csv, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            row = {k.upper(): v for k, v in row.items()}
            adm, code = row.get("HADM_ID", ""), row.get("ICD9_CODE", "")
            if adm and code:
                codes_by_adm.setdefault(adm, []).append(code)
    docs = []
    with open(noteevents_csv, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            row = {k.upper(): v for k, v in row.items()}
            if row.get("CATEGORY", "").strip().lower() != "discharge summary":
                continue
            adm = row.get("HADM_ID", "")
            codes = _dedupe(three_digit(c) for c in codes_by_adm.get(adm, ()))
            docs.append(
                Document(
                    doc_id=row.get("ROW_ID") or f"{adm}-{len(docs)}",
                    kind=KIND_EHR,
                    text=row.get("TEXT", ""),
                    icd_codes=codes,
                )
            )
    return docs


def ontology_documents(
    terms: Iterable[OntologyTerm], categories: PhenotypeCategories
) -> list[Document]:
    """Category and subclass documents from the ontology closure.

    Each category term yields a CATEGORY document with its singleton
    index; every other closure member yields a SUBCLASS document with its
    full membership set.
    """
    by_id = {t.id: t for t in terms}
    category_ids = set(categories.category_ids)
    docs = []
    for j, cat in enumerate(categories.categories):
        docs.append(
            Document(
                doc_id=cat.id,
                kind=KIND_CATEGORY,
                text=term_text(cat),
                category_indices=frozenset({j}),
            )
        )
    for term_id in sorted(categories.closure):
        if term_id in category_ids:
            continue
        term = by_id.get(term_id)
        if term is None or term.obsolete:
            continue
        docs.append(
            Document(
                doc_id=term_id,
                kind=KIND_SUBCLASS,
                text=term_text(term),
                category_indices=frozenset(categories.closure[term_id]),
            )
        )
    return docs
