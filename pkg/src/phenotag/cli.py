"""Command-line pipeline: ontology parsing through evaluation.

Every subcommand reads declared inputs, writes its artifacts into an
output directory together with a run manifest (config snapshot, seed,
input hashes, artifact paths, tool version), and exits nonzero on any
module error.  Artifacts are deterministic given identical inputs and
seed; when --out is omitted a run directory named by the manifest hash is
created under ./runs.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotate import (
    annotate_corpus,
    calibrate_thresholds,
    read_annotations,
    read_thresholds,
    write_annotations,
    write_thresholds,
)
from .corpus import (
    Vocabulary,
    build_vocabulary,
    fragment_document,
    normalize_tokenize,
    ontology_documents,
    read_jsonl_corpus,
    split_train_test,
    write_jsonl_corpus,
)
from .errors import ConfigError, PhenotagError
from .evaluate import (
    corpus_stats,
    evaluate,
    write_report_text,
    write_report_tsv,
    write_stats_text,
)
from .model import (
    ModelConfig,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
)
from .ontology import (
    DEFAULT_ROOT_ID,
    alias_map,
    load_terms,
    select_general_categories,
    subclass_closure,
    write_snapshot,
)
from .silver import (
    build_keyword_index,
    compose_mapping,
    load_pair_table,
    match_terms,
    read_label_file,
    silver_labels,
    write_label_file,
)
from .synthetic import write_demo_bundle
from .training import LossWeights, TrainSettings, build_pools, train


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _require(value, flag: str, what: str) -> Path:
    """Exit 1 (not a usage error) when a needed artifact is absent."""
    if value is None:
        raise PhenotagError(f"missing required artifact: {flag} ({what})")
    path = Path(value)
    if not path.exists():
        raise PhenotagError(f"{what} not found: {path}")
    return path


def _manifest(command: str, seed, config: dict, inputs: dict[str, Path]) -> dict:
    return {
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {
            name: {"path": str(p), "sha256": file_sha256(p)}
            for name, p in inputs.items()
        },
        "artifacts": {},
    }


def _resolve_out(out_arg, manifest: dict) -> Path:
    if out_arg is not None:
        out = Path(out_arg)
    else:
        digest = hashlib.sha256(
            json.dumps(manifest, sort_keys=True).encode("utf-8")
        ).hexdigest()
        out = Path("runs") / digest[:12]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out_dir: Path, manifest: dict, artifacts: dict[str, Path]) -> None:
    manifest["artifacts"] = {k: str(v) for k, v in artifacts.items()}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_categories(terms, root_id: str):
    return subclass_closure(terms, select_general_categories(terms, root_id))


# ---------------------------------------------------------------------------
# training config file


_MODEL_KEYS = {
    "window": int,
    "encoder_layers": int,
    "hidden": int,
    "intermediate": int,
    "attention_heads": int,
    "latent_dim": int,
    "dropout": float,
}
_WEIGHT_KEYS = {
    "lambda_ehr": "ehr",
    "lambda_category": "category",
    "lambda_subclass": "subclass",
    "lambda_prior": "prior",
}
_TRAIN_KEYS = {
    "batch_size": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "max_steps": int,
    "seed": int,
    "mix_policy": str,
    "convergence_window": int,
    "convergence_horizon": int,
    "convergence_tol": float,
}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _parse_int_list(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.replace(",", " ").split())


def read_train_config(path) -> tuple[dict, dict, dict]:
    """Flat declarative key=value file split into model, loss-weight and
    loop settings.  Unknown keys are rejected."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[run]\n" + fh.read())
    model: dict = {}
    weights: dict = {}
    loop: dict = {}
    quotas: dict[str, int] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in _MODEL_KEYS:
                model[key] = _MODEL_KEYS[key](value)
            elif key in ("classifier_widths", "classifier_channels"):
                model[key] = _parse_int_list(value)
            elif key in _WEIGHT_KEYS:
                weights[_WEIGHT_KEYS[key]] = float(value)
            elif key in _TRAIN_KEYS:
                loop[key] = _TRAIN_KEYS[key](value)
            elif key == "prior_ontology_only":
                loop[key] = _parse_bool(value)
            elif key in ("quota_ehr", "quota_category", "quota_subclass"):
                quotas[key.removeprefix("quota_").upper()] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r} in {path}")
    if quotas:
        loop["quotas"] = quotas
    return model, weights, loop


# ---------------------------------------------------------------------------
# subcommands


def cmd_parse_ontology(args) -> int:
    obo = _require(args.ontology, "--ontology", "OBO ontology file")
    terms = load_terms(obo)
    categories = _load_categories(terms, args.root)
    manifest = _manifest(
        "parse-ontology", _seed(args), {"root": args.root}, {"ontology": obo}
    )
    out = _resolve_out(args.out, manifest)
    snapshot = out / "ontology.tsv"
    with open(snapshot, "w", encoding="utf-8") as fh:
        write_snapshot(terms, fh)
    cat_table = out / "categories.tsv"
    with open(cat_table, "w", encoding="utf-8") as fh:
        fh.write("index\tid\tname\n")
        for j, term in enumerate(categories.categories):
            fh.write(f"{j}\t{term.id}\t{term.name}\n")
    _finish(out, manifest, {"snapshot": snapshot, "categories": cat_table})
    print(
        f"parsed {len(terms)} terms: {categories.num_categories} categories, "
        f"{categories.num_subclasses} subclasses under {args.root}"
    )
    return 0


def cmd_build_corpus(args) -> int:
    corpus_path = _require(args.corpus, "--corpus", "EHR corpus (JSON Lines)")
    onto_path = _require(args.ontology, "--ontology", "ontology file")
    terms = load_terms(onto_path)
    categories = _load_categories(terms, args.root)
    documents = read_jsonl_corpus(corpus_path)
    train_docs, test_docs = split_train_test(documents, args.ratio, _seed(args))
    onto_docs = ontology_documents(terms, categories)
    vocab = build_vocabulary(train_docs + onto_docs, max_size=args.vocab_size)
    manifest = _manifest(
        "build-corpus",
        _seed(args),
        {"ratio": args.ratio, "vocab_size": args.vocab_size, "root": args.root},
        {"corpus": corpus_path, "ontology": onto_path},
    )
    out = _resolve_out(args.out, manifest)
    artifacts = {
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "vocab": out / "vocab.txt",
    }
    with open(artifacts["train"], "w", encoding="utf-8") as fh:
        write_jsonl_corpus(train_docs, fh)
    with open(artifacts["test"], "w", encoding="utf-8") as fh:
        write_jsonl_corpus(test_docs, fh)
    vocab.save(artifacts["vocab"])
    _finish(out, manifest, artifacts)
    print(
        f"split {len(documents)} documents into {len(train_docs)} train / "
        f"{len(test_docs)} test; vocabulary size {vocab.size}"
    )
    return 0


def cmd_gen_synthetic(args) -> int:
    terms = None
    inputs = {}
    if args.ontology is not None:
        onto_path = _require(args.ontology, "--ontology", "ontology file")
        terms = load_terms(onto_path)
        inputs["ontology"] = onto_path
    manifest = _manifest(
        "gen-synthetic",
        _seed(args),
        {
            "docs": args.docs,
            "categories": args.categories,
            "subclasses": args.subclasses,
            "p_definition": args.p_definition,
        },
        inputs,
    )
    out = _resolve_out(args.out, manifest)
    paths = write_demo_bundle(
        out,
        num_documents=args.docs,
        num_categories=args.categories,
        subclasses_per_category=args.subclasses,
        seed=_seed(args),
        p_definition=args.p_definition,
        terms=terms,
    )
    _finish(out, manifest, paths)
    print(f"wrote synthetic bundle to {out} ({args.docs} documents)")
    return 0


def cmd_train(args) -> int:
    corpus_path = _require(args.corpus, "--corpus", "training corpus (JSON Lines)")
    onto_path = _require(args.ontology, "--ontology", "ontology file")
    vocab_path = _require(args.vocab, "--vocab", "vocabulary file")
    model_over, weight_over, loop_over = (
        read_train_config(_require(args.config, "--config", "training config"))
        if args.config
        else ({}, {}, {})
    )
    if args.seed is not None:
        loop_over["seed"] = args.seed

    terms = load_terms(onto_path)
    categories = _load_categories(terms, args.root)
    vocab = Vocabulary.load(vocab_path)
    ehr_docs = read_jsonl_corpus(corpus_path)
    onto_docs = ontology_documents(terms, categories)

    config = ModelConfig(
        vocab_size=vocab.size,
        num_categories=categories.num_categories,
        **model_over,
    )
    weights = LossWeights(**weight_over)
    settings = TrainSettings(**loop_over)
    pools = build_pools(
        ehr_docs, onto_docs, vocab, categories.num_categories, config.window
    )

    manifest = _manifest(
        "train",
        settings.seed,
        {
            "model": dataclasses.asdict(config),
            "weights": dataclasses.asdict(weights),
            "settings": dataclasses.asdict(settings),
            "root": args.root,
        },
        {"corpus": corpus_path, "ontology": onto_path, "vocab": vocab_path},
    )
    out = _resolve_out(args.out, manifest)
    log_path = out / "training_log.tsv"
    with open(log_path, "w", encoding="utf-8") as log_out:
        result = train(config, pools, weights, settings, log_out=log_out)
    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(
        ckpt_path,
        result.model,
        vocab.content_hash(),
        categories.category_ids,
        settings.seed,
    )
    _finish(out, manifest, {"checkpoint": ckpt_path, "training_log": log_path})
    last = result.history[-1]
    print(
        f"trained {int(last['step'])} steps "
        f"(converged={result.converged}); final loss {last['loss_total']:.4f}"
    )
    return 0


def cmd_calibrate(args) -> int:
    ckpt_path = _require(args.checkpoint, "--checkpoint", "model checkpoint")
    corpus_path = _require(args.corpus, "--corpus", "calibration corpus")
    vocab_path = _require(args.vocab, "--vocab", "vocabulary file")
    vocab = Vocabulary.load(vocab_path)
    model, meta = load_checkpoint(ckpt_path, vocab.content_hash())
    documents = read_jsonl_corpus(corpus_path)
    fragments = []
    for doc in documents:
        fragments.extend(fragment_document(doc, vocab, model.config.window))
    thresholds = calibrate_thresholds(
        model, fragments, args.percentile, meta["category_ids"]
    )
    manifest = _manifest(
        "calibrate",
        _seed(args),
        {"percentile": args.percentile},
        {"checkpoint": ckpt_path, "corpus": corpus_path, "vocab": vocab_path},
    )
    out = _resolve_out(args.out, manifest)
    tau_path = out / "thresholds.tsv"
    with open(tau_path, "w", encoding="utf-8") as fh:
        write_thresholds(thresholds, fh)
    _finish(out, manifest, {"thresholds": tau_path})
    print(
        f"calibrated {len(thresholds.tau)} thresholds at the "
        f"{args.percentile:g}th percentile over {len(fragments)} fragments"
    )
    return 0


def cmd_annotate(args) -> int:
    ckpt_path = _require(args.checkpoint, "--checkpoint", "model checkpoint")
    tau_path = _require(args.thresholds, "--thresholds", "threshold file")
    corpus_path = _require(args.corpus, "--corpus", "corpus to annotate")
    vocab_path = _require(args.vocab, "--vocab", "vocabulary file")
    vocab = Vocabulary.load(vocab_path)
    model, meta = load_checkpoint(ckpt_path, vocab.content_hash())
    with open(tau_path, encoding="utf-8") as fh:
        thresholds = read_thresholds(fh)
    if thresholds.category_ids != tuple(meta["category_ids"]):
        raise ConfigError(
            "threshold file categories do not match the checkpoint"
        )
    documents = read_jsonl_corpus(corpus_path)
    results = annotate_corpus(
        model,
        documents,
        vocab,
        thresholds,
        model.config.window,
        workers=args.workers,
        aggregate=args.aggregate,
        keep_alphas=args.dump_alphas,
    )
    manifest = _manifest(
        "annotate",
        _seed(args),
        {"workers": args.workers, "aggregate": args.aggregate},
        {
            "checkpoint": ckpt_path,
            "thresholds": tau_path,
            "corpus": corpus_path,
            "vocab": vocab_path,
        },
    )
    out = _resolve_out(args.out, manifest)
    alpha_paths = {}
    if args.dump_alphas:
        alpha_dir = out / "alphas"
        alpha_dir.mkdir(exist_ok=True)
        for res in results:
            path = alpha_dir / f"{res.doc_id}.npy"
            np.save(path, res.per_fragment_alpha)
            alpha_paths[res.doc_id] = str(path)
    ann_path = out / "annotations.jsonl"
    with open(ann_path, "w", encoding="utf-8") as fh:
        write_annotations(results, meta["category_ids"], fh, alpha_paths or None)
    _finish(out, manifest, {"annotations": ann_path})
    mean_cats = (
        sum(len(r.categories) for r in results) / len(results) if results else 0.0
    )
    print(
        f"annotated {len(results)} documents "
        f"(mean {mean_cats:.2f} categories per document)"
    )
    return 0


def cmd_build_silver(args) -> int:
    corpus_path = _require(args.corpus, "--corpus", "corpus with ICD codes")
    icd_omim_path = _require(
        args.mapping_icd_omim, "--mapping-icd-omim", "ICD-to-OMIM table"
    )
    omim_hpo_path = _require(
        args.mapping_omim_hpo, "--mapping-omim-hpo", "OMIM-to-HPO table"
    )
    onto_path = _require(args.ontology, "--ontology", "ontology file")
    terms = load_terms(onto_path)
    categories = _load_categories(terms, args.root)
    icd_to_omim = load_pair_table(icd_omim_path, "icd-to-omim")
    omim_to_hpo = load_pair_table(omim_hpo_path, "omim-to-hpo")
    table = compose_mapping(
        icd_to_omim, omim_to_hpo, categories, aliases=alias_map(terms)
    )
    documents = read_jsonl_corpus(corpus_path)
    silver = silver_labels(documents, table)
    manifest = _manifest(
        "build-silver",
        _seed(args),
        {"root": args.root},
        {
            "corpus": corpus_path,
            "icd_to_omim": icd_omim_path,
            "omim_to_hpo": omim_hpo_path,
            "ontology": onto_path,
        },
    )
    out = _resolve_out(args.out, manifest)
    silver_path = out / "silver.jsonl"
    with open(silver_path, "w", encoding="utf-8") as fh:
        write_label_file(silver.labels, categories.category_ids, fh)
    coverage_path = out / "coverage.txt"
    with open(coverage_path, "w", encoding="utf-8") as fh:
        fh.write(f"documents            : {len(documents)}\n")
        fh.write(f"without ICD codes    : {silver.documents_without_codes}\n")
        fh.write(f"codes mapped nowhere : {silver.documents_unmapped}\n")
        fh.write(f"unmapped ontology ids: {len(table.unmapped_hpo_ids)}\n")
        for hpo_id in table.unmapped_hpo_ids:
            fh.write(f"  {hpo_id}\n")
    _finish(out, manifest, {"silver": silver_path, "coverage": coverage_path})
    print(
        f"silver labels for {len(documents)} documents "
        f"({silver.documents_without_codes} without codes)"
    )
    return 0


def cmd_evaluate(args) -> int:
    pred_path = _require(args.predictions, "--predictions", "prediction file")
    silver_path = _require(args.silver, "--silver", "label file")
    with open(pred_path, encoding="utf-8") as fh:
        predictions = read_annotations(fh)
    with open(silver_path, encoding="utf-8") as fh:
        silver = read_label_file(fh)
    report = evaluate(predictions, silver)
    manifest = _manifest(
        "evaluate",
        _seed(args),
        {},
        {"predictions": pred_path, "silver": silver_path},
    )
    out = _resolve_out(args.out, manifest)
    txt_path = out / "report.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        write_report_text(report, fh)
    tsv_path = out / "report.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        write_report_tsv(report, fh)
    _finish(out, manifest, {"report_text": txt_path, "report_tsv": tsv_path})
    print(
        f"scored {report.documents_scored} documents: "
        f"P={report.mean_precision:.4f} R={report.mean_recall:.4f} "
        f"F1={report.mean_f1:.4f} "
        f"({report.documents_skipped} skipped, empty reference)"
    )
    return 0


def cmd_stats(args) -> int:
    corpus_path = _require(args.corpus, "--corpus", "corpus file")
    onto_path = _require(args.ontology, "--ontology", "ontology file")
    terms = load_terms(onto_path)
    categories = _load_categories(terms, args.root)
    documents = read_jsonl_corpus(corpus_path)
    index = build_keyword_index(terms, categories)
    matched = {
        doc.doc_id: len(match_terms(index, normalize_tokenize(doc.text)))
        for doc in documents
    }
    stats = corpus_stats(documents, matched)
    manifest = _manifest(
        "stats",
        _seed(args),
        {"root": args.root},
        {"corpus": corpus_path, "ontology": onto_path},
    )
    out = _resolve_out(args.out, manifest)
    txt_path = out / "stats.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        write_stats_text(stats, fh)
    json_path = out / "stats.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "documents": stats.documents,
                "mean_icd_per_document": stats.mean_icd_per_document,
                "mean_matched_terms_per_document": stats.mean_matched_terms_per_document,
                "documents_with_ve_codes": stats.documents_with_ve_codes,
                "per_disease_term_range": {
                    k: list(v) for k, v in stats.per_disease_term_range.items()
                },
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    _finish(out, manifest, {"stats_text": txt_path, "stats_json": json_path})
    print(
        f"{stats.documents} documents, mean ICD {stats.mean_icd_per_document:.2f}, "
        f"mean matched terms {stats.mean_matched_terms_per_document:.2f}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenotag",
        description="Unsupervised phenotype-category annotation pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="global random seed")
        p.add_argument("--out", default=None, help="output directory")
        return p

    p = add("parse-ontology", cmd_parse_ontology, "parse an OBO file to a snapshot")
    p.add_argument("--ontology")
    p.add_argument("--root", default=DEFAULT_ROOT_ID)

    p = add("build-corpus", cmd_build_corpus, "split corpus and build vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--ontology")
    p.add_argument("--root", default=DEFAULT_ROOT_ID)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--vocab-size", type=int, default=30_000)

    p = add("gen-synthetic", cmd_gen_synthetic, "generate the synthetic bundle")
    p.add_argument("--ontology", help="reuse an existing ontology (optional)")
    p.add_argument("--docs", type=int, default=500)
    p.add_argument("--categories", type=int, default=6)
    p.add_argument("--subclasses", type=int, default=8)
    p.add_argument("--p-definition", type=float, default=0.6)

    p = add("train", cmd_train, "train the encoder/generator/classifier")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--ontology")
    p.add_argument("--root", default=DEFAULT_ROOT_ID)
    p.add_argument("--vocab")

    p = add("calibrate", cmd_calibrate, "calibrate per-category thresholds")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--percentile", type=float, default=90.0)

    p = add("annotate", cmd_annotate, "annotate documents with categories")
    p.add_argument("--checkpoint")
    p.add_argument("--thresholds")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--aggregate", choices=("union", "max"), default="union")
    p.add_argument("--dump-alphas", action="store_true")

    p = add("build-silver", cmd_build_silver, "compose the silver standard")
    p.add_argument("--corpus")
    p.add_argument("--mapping-icd-omim")
    p.add_argument("--mapping-omim-hpo")
    p.add_argument("--ontology")
    p.add_argument("--root", default=DEFAULT_ROOT_ID)

    p = add("evaluate", cmd_evaluate, "score predictions against labels")
    p.add_argument("--predictions")
    p.add_argument("--silver")

    p = add("stats", cmd_stats, "corpus statistics report")
    p.add_argument("--corpus")
    p.add_argument("--ontology")
    p.add_argument("--root", default=DEFAULT_ROOT_ID)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PhenotagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
