"""Scoring predicted annotations against reference label sets.

Scores are example-based: precision, recall and F1 are computed per
document and averaged unweighted over the documents that have a nonempty
reference set (documents with empty references are skipped and counted).
A globally pooled mode is also reported for comparison tables.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Hashable, Iterable, Mapping

from .corpus import Document, is_ve_code


@dataclass(frozen=True)
class DocumentScore:
    doc_id: str
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    per_document: list[DocumentScore] = field(default_factory=list)
    mean_precision: float = 0.0
    mean_recall: float = 0.0
    mean_f1: float = 0.0
    pooled_precision: float = 0.0
    pooled_recall: float = 0.0
    pooled_f1: float = 0.0
    documents_scored: int = 0
    documents_skipped: int = 0


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def score_document(
    predicted: set[Hashable], silver: set[Hashable]
) -> tuple[float, float, float]:
    """Example-based precision/recall/F1 for one document.

    Empty predictions score zero precision by convention; the reference
    set must be nonempty (callers skip those documents).
    """
    hits = len(predicted & silver)
    precision = hits / len(predicted) if predicted else 0.0
    recall = hits / len(silver)
    return precision, recall, _f1(precision, recall)


def evaluate(
    predictions: Mapping[str, set[Hashable]],
    silver: Mapping[str, set[Hashable]],
) -> EvalReport:
    """Score every labeled document; missing predictions count as empty."""
    report = EvalReport()
    hits_total = predicted_total = silver_total = 0
    for doc_id in silver:
        truth = silver[doc_id]
        if not truth:
            report.documents_skipped += 1
            continue
        pred = predictions.get(doc_id, set())
        p, r, f = score_document(pred, truth)
        report.per_document.append(DocumentScore(doc_id, p, r, f))
        hits_total += len(pred & truth)
        predicted_total += len(pred)
        silver_total += len(truth)
    n = len(report.per_document)
    report.documents_scored = n
    if n:
        report.mean_precision = sum(s.precision for s in report.per_document) / n
        report.mean_recall = sum(s.recall for s in report.per_document) / n
        report.mean_f1 = sum(s.f1 for s in report.per_document) / n
    report.pooled_precision = hits_total / predicted_total if predicted_total else 0.0
    report.pooled_recall = hits_total / silver_total if silver_total else 0.0
    report.pooled_f1 = _f1(report.pooled_precision, report.pooled_recall)
    return report


def write_report_text(report: EvalReport, out: IO[str], title: str = "evaluation") -> None:
    out.write(f"{title}\n")
    out.write(f"documents scored : {report.documents_scored}\n")
    out.write(f"documents skipped: {report.documents_skipped} (empty reference)\n")
    out.write(
        "example-based mean: "
        f"precision={report.mean_precision:.4f} "
        f"recall={report.mean_recall:.4f} "
        f"f1={report.mean_f1:.4f}\n"
    )
    out.write(
        "globally pooled   : "
        f"precision={report.pooled_precision:.4f} "
        f"recall={report.pooled_recall:.4f} "
        f"f1={report.pooled_f1:.4f}\n"
    )


def write_report_tsv(report: EvalReport, out: IO[str]) -> None:
    out.write("doc_id\tprecision\trecall\tf1\n")
    for s in report.per_document:
        out.write(f"{s.doc_id}\t{s.precision:.6f}\t{s.recall:.6f}\t{s.f1:.6f}\n")
    out.write(
        f"MEAN\t{report.mean_precision:.6f}"
        f"\t{report.mean_recall:.6f}\t{report.mean_f1:.6f}\n"
    )
    out.write(
        f"POOLED\t{report.pooled_precision:.6f}"
        f"\t{report.pooled_recall:.6f}\t{report.pooled_f1:.6f}\n"
    )


@dataclass
class CorpusStats:
    documents: int = 0
    mean_icd_per_document: float = 0.0
    mean_matched_terms_per_document: float = 0.0
    documents_with_ve_codes: int = 0
    per_disease_term_range: dict[str, tuple[int, int]] = field(default_factory=dict)


def corpus_stats(
    documents: Iterable[Document],
    matched_term_counts: Mapping[str, int],
) -> CorpusStats:
    """Corpus-level analysis: diagnosis-code and keyword-match densities,
    plus per-disease (per 3-digit code) min/max matched-term counts."""
    stats = CorpusStats()
    icd_total = 0
    match_total = 0
    per_code: dict[str, list[int]] = defaultdict(list)
    for doc in documents:
        stats.documents += 1
        icd_total += len(doc.icd_codes)
        matches = matched_term_counts.get(doc.doc_id, 0)
        match_total += matches
        if any(is_ve_code(c) for c in doc.icd_codes):
            stats.documents_with_ve_codes += 1
        for code in doc.icd_codes:
            per_code[code].append(matches)
    if stats.documents:
        stats.mean_icd_per_document = icd_total / stats.documents
        stats.mean_matched_terms_per_document = match_total / stats.documents
    stats.per_disease_term_range = {
        code: (min(counts), max(counts)) for code, counts in sorted(per_code.items())
    }
    return stats


def write_stats_text(stats: CorpusStats, out: IO[str]) -> None:
    out.write(f"documents               : {stats.documents}\n")
    out.write(f"mean ICD per document   : {stats.mean_icd_per_document:.2f}\n")
    out.write(
        f"mean matched terms/doc  : {stats.mean_matched_terms_per_document:.2f}\n"
    )
    out.write(f"documents with V/E codes: {stats.documents_with_ve_codes}\n")
    for code, (lo, hi) in stats.per_disease_term_range.items():
        out.write(f"disease {code}: matched terms range {lo}..{hi}\n")
