"""Threshold calibration and document annotation.

Per-category cutoffs are percentiles of the composition weights observed
on the training fragments.  A fragment is annotated with every category
whose weight strictly exceeds its cutoff, and a document is annotated with
the union of its fragments' annotations.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np
import torch

from .corpus import Document, Fragment, Vocabulary, fragment_document
from .errors import CalibrationError, ConfigError
from .model import PhenotypeModel, fragments_to_tensors

PERCENTILE_RANGE = (70.0, 95.0)


@dataclass(frozen=True)
class ThresholdSet:
    """Per-category cutoffs and the percentile they were calibrated at."""

    tau: tuple[float, ...]
    percentile: float
    category_ids: tuple[str, ...]
    calibration_hash: str = ""

    def __post_init__(self):
        if len(self.tau) != len(self.category_ids):
            raise ConfigError("one threshold per category required")
        for t in self.tau:
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"threshold {t} outside [0, 1]")


@dataclass(frozen=True)
class AnnotationResult:
    doc_id: str
    categories: frozenset[int]
    per_fragment_alpha: np.ndarray | None = None


def alphas_for_fragments(
    model: PhenotypeModel, fragments: Sequence[Fragment], batch_size: int = 128
) -> np.ndarray:
    """Composition-weight matrix (fragments x categories)."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(fragments), batch_size):
            chunk = fragments[start : start + batch_size]
            ids, lengths = fragments_to_tensors(chunk)
            comp = model.encode(ids, lengths)
            rows.append(comp.alpha.cpu().numpy())
    if not rows:
        return np.zeros((0, model.config.num_categories))
    return np.concatenate(rows, axis=0)


def fragment_set_hash(fragments: Iterable[Fragment]) -> str:
    h = hashlib.sha256()
    for key in sorted((f.doc_id, f.position, f.true_length) for f in fragments):
        h.update(repr(key).encode("utf-8"))
    return h.hexdigest()


def calibrate_thresholds(
    model: PhenotypeModel,
    fragments: Sequence[Fragment],
    percentile: float,
    category_ids: Sequence[str],
    batch_size: int = 128,
) -> ThresholdSet:
    """Set each cutoff to the given percentile (linear interpolation) of
    the training fragments' weights for that category."""
    lo, hi = PERCENTILE_RANGE
    if not lo <= percentile <= hi:
        raise CalibrationError(
            f"percentile {percentile} outside calibration range [{lo}, {hi}]"
        )
    if not fragments:
        raise CalibrationError("cannot calibrate on an empty fragment set")
    alphas = alphas_for_fragments(model, fragments, batch_size=batch_size)
    tau = np.percentile(alphas, percentile, axis=0)
    return ThresholdSet(
        tau=tuple(float(t) for t in tau),
        percentile=float(percentile),
        category_ids=tuple(category_ids),
        calibration_hash=fragment_set_hash(fragments),
    )


def threshold_alpha(alpha_row: Sequence[float], tau: Sequence[float]) -> set[int]:
    """Categories whose weight strictly exceeds the cutoff."""
    return {j for j, (a, t) in enumerate(zip(alpha_row, tau)) if a > t}


def annotate_fragment(
    model: PhenotypeModel, fragment: Fragment, thresholds: ThresholdSet
) -> set[int]:
    alphas = alphas_for_fragments(model, [fragment])
    return threshold_alpha(alphas[0], thresholds.tau)


def annotate_document(
    model: PhenotypeModel,
    fragments: Sequence[Fragment],
    thresholds: ThresholdSet,
    aggregate: str = "union",
    keep_alphas: bool = False,
) -> AnnotationResult:
    """Aggregate fragment annotations over one document.

    "union" ORs the per-fragment category sets; "max" thresholds the
    per-document maximum weight per category.
    """
    if not fragments:
        return AnnotationResult(doc_id="", categories=frozenset())
    doc_id = fragments[0].doc_id
    alphas = alphas_for_fragments(model, fragments)
    if aggregate == "union":
        cats: set[int] = set()
        for row in alphas:
            cats |= threshold_alpha(row, thresholds.tau)
    elif aggregate == "max":
        cats = threshold_alpha(alphas.max(axis=0), thresholds.tau)
    else:
        raise ConfigError(f"unknown aggregation {aggregate!r}")
    return AnnotationResult(
        doc_id=doc_id,
        categories=frozenset(cats),
        per_fragment_alpha=alphas if keep_alphas else None,
    )


_WORKER = {}


def _worker_init(model, vocab, thresholds, window, aggregate, keep_alphas):
    torch.set_num_threads(1)
    _WORKER.update(
        model=model,
        vocab=vocab,
        thresholds=thresholds,
        window=window,
        aggregate=aggregate,
        keep_alphas=keep_alphas,
    )


def _annotate_one(document: Document) -> AnnotationResult:
    frags = fragment_document(document, _WORKER["vocab"], _WORKER["window"])
    result = annotate_document(
        _WORKER["model"],
        frags,
        _WORKER["thresholds"],
        aggregate=_WORKER["aggregate"],
        keep_alphas=_WORKER["keep_alphas"],
    )
    return AnnotationResult(
        doc_id=document.doc_id,
        categories=result.categories,
        per_fragment_alpha=result.per_fragment_alpha,
    )


def annotate_corpus(
    model: PhenotypeModel,
    documents: Sequence[Document],
    vocab: Vocabulary,
    thresholds: ThresholdSet,
    window: int,
    workers: int = 1,
    aggregate: str = "union",
    keep_alphas: bool = False,
) -> list[AnnotationResult]:
    """Annotate every document; read-only over the model, so documents can
    be fanned out across worker processes."""
    if workers <= 1:
        _worker_init(model, vocab, thresholds, window, aggregate, keep_alphas)
        return [_annotate_one(doc) for doc in documents]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(
        processes=workers,
        initializer=_worker_init,
        initargs=(model, vocab, thresholds, window, aggregate, keep_alphas),
    ) as pool:
        chunk = max(1, len(documents) // (workers * 4))
        return list(pool.imap(_annotate_one, documents, chunksize=chunk))


def write_thresholds(thresholds: ThresholdSet, out: IO[str]) -> None:
    """M lines of "category-id <tab> tau" under a header recording the
    percentile and the calibration-set hash."""
    out.write(f"# percentile: {thresholds.percentile:g}\n")
    out.write(f"# calibration_sha256: {thresholds.calibration_hash}\n")
    for cid, tau in zip(thresholds.category_ids, thresholds.tau):
        out.write(f"{cid}\t{tau:.10f}\n")


def read_thresholds(stream: Iterable[str]) -> ThresholdSet:
    percentile = 0.0
    calibration_hash = ""
    ids: list[str] = []
    taus: list[float] = []
    for line in stream:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line.lstrip("# ").partition(":")
            if key.strip() == "percentile":
                percentile = float(value)
            elif key.strip() == "calibration_sha256":
                calibration_hash = value.strip()
            continue
        cid, _, tau = line.partition("\t")
        ids.append(cid)
        taus.append(float(tau))
    return ThresholdSet(
        tau=tuple(taus),
        percentile=percentile,
        category_ids=tuple(ids),
        calibration_hash=calibration_hash,
    )


def write_annotations(
    results: Iterable[AnnotationResult],
    category_ids: Sequence[str],
    out: IO[str],
    alpha_paths: dict[str, str] | None = None,
) -> None:
    """Newline-delimited records carrying ontology ids, not indices."""
    for res in results:
        rec = {
            "doc_id": res.doc_id,
            "categories": sorted(category_ids[j] for j in res.categories),
        }
        if alpha_paths and res.doc_id in alpha_paths:
            rec["alpha_path"] = alpha_paths[res.doc_id]
        out.write(json.dumps(rec, sort_keys=True) + "\n")


def read_annotations(stream: Iterable[str]) -> dict[str, set[str]]:
    """doc_id -> set of category ids, as written by write_annotations."""
    out: dict[str, set[str]] = {}
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        out[rec["doc_id"]] = set(rec["categories"])
    return out
