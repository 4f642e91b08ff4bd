"""Loss functions and the joint optimization loop.

Four losses over mixed batches of narrative fragments, category texts and
subclass texts:

* narrative reconstruction: per-token cross-entropy on non-PAD positions;
* category reconstruction: the same term plus a weight penalty pushing the
  category's own alpha toward 1 and every other alpha toward 0;
* subclass reconstruction: the same with the multi-membership set given by
  the ontology closure;
* prior constraint: each of the M latent components of every example must
  be classified as its own category class.

One optimizer step descends the weighted sum of the four on all three
parameter groups jointly.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import torch
from torch import Tensor

from .corpus import (
    KIND_CATEGORY,
    KIND_EHR,
    KIND_SUBCLASS,
    Document,
    Fragment,
    Vocabulary,
    fragment_document,
)
from .errors import ConfigError, TrainingDivergedError
from .model import ModelConfig, PhenotypeModel, fragments_to_tensors

PROB_EPS = 1e-7

LOG_COLUMNS = (
    "step",
    "loss_ehr",
    "loss_category",
    "loss_subclass",
    "loss_prior",
    "loss_total",
    "elapsed_s",
)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients combining the four losses."""

    ehr: float = 10.0
    category: float = 10.0
    subclass: float = 10.0
    prior: float = 1.0

    def __post_init__(self):
        for name in ("ehr", "category", "subclass", "prior"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass
class TrainingBatch:
    """A mixed mini-batch: stacked fragments plus kind and membership rows."""

    token_ids: Tensor
    true_lengths: Tensor
    kinds: tuple[str, ...]
    membership: Tensor

    def __len__(self) -> int:
        return len(self.kinds)

    def rows_of_kind(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def subset(self, rows: Sequence[int]) -> "TrainingBatch":
        idx = torch.tensor(list(rows), dtype=torch.long)
        return TrainingBatch(
            token_ids=self.token_ids[idx],
            true_lengths=self.true_lengths[idx],
            kinds=tuple(self.kinds[i] for i in rows),
            membership=self.membership[idx],
        )


def _zero(model: PhenotypeModel) -> Tensor:
    p = next(model.parameters())
    return torch.zeros((), dtype=p.dtype, device=p.device)


def _reconstruction_nll(model, token_ids, true_lengths):
    """Encoder output and per-fragment mean token NLL on non-PAD positions."""
    comp = model.encode(token_ids, true_lengths)
    logits = model.generator(comp.composite, token_ids)
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp.gather(-1, token_ids.unsqueeze(-1)).squeeze(-1)
    positions = torch.arange(token_ids.shape[1], device=token_ids.device)
    keep = (positions.unsqueeze(0) < true_lengths.unsqueeze(1)).to(token_logp.dtype)
    denom = true_lengths.clamp(min=1).to(token_logp.dtype)
    nll = -(token_logp * keep).sum(dim=1) / denom
    return comp, nll


def alpha_penalty(alpha: Tensor, membership: Tensor) -> Tensor:
    """Per-row weight penalty: -log(alpha) on member categories and
    -log(1 - alpha) on the rest, divided by the category count."""
    a = alpha.clamp(PROB_EPS, 1.0 - PROB_EPS)
    member = membership.to(a.dtype)
    bracket = -(torch.log(a) * member + torch.log1p(-a) * (1.0 - member)).sum(dim=1)
    return bracket / alpha.shape[1]


def loss_reconstruction_ehr(model: PhenotypeModel, batch: TrainingBatch) -> Tensor:
    """Mean reconstruction NLL over the EHR rows; 0 if the batch has none."""
    rows = batch.rows_of_kind(KIND_EHR)
    if not rows:
        return _zero(model)
    sub = batch.subset(rows)
    _, nll = _reconstruction_nll(model, sub.token_ids, sub.true_lengths)
    return nll.mean()


def loss_reconstruction_category(model: PhenotypeModel, batch: TrainingBatch) -> Tensor:
    """Reconstruction plus singleton-membership weight penalty."""
    rows = batch.rows_of_kind(KIND_CATEGORY)
    if not rows:
        return _zero(model)
    sub = batch.subset(rows)
    comp, nll = _reconstruction_nll(model, sub.token_ids, sub.true_lengths)
    return (nll + alpha_penalty(comp.alpha, sub.membership)).mean()


def loss_reconstruction_subclass(model: PhenotypeModel, batch: TrainingBatch) -> Tensor:
    """Reconstruction plus closure-membership weight penalty."""
    rows = batch.rows_of_kind(KIND_SUBCLASS)
    if not rows:
        return _zero(model)
    sub = batch.subset(rows)
    if not bool(sub.membership.any(dim=1).all()):
        raise ConfigError("subclass row with empty category membership")
    comp, nll = _reconstruction_nll(model, sub.token_ids, sub.true_lengths)
    return (nll + alpha_penalty(comp.alpha, sub.membership)).mean()


def loss_prior(
    model: PhenotypeModel, batch: TrainingBatch, ontology_only: bool = False
) -> Tensor:
    """Classifier constraint: every latent component must land on its own
    class.  Each example contributes M cross-entropy terms."""
    if ontology_only:
        rows = [i for i, k in enumerate(batch.kinds) if k != KIND_EHR]
        if not rows:
            return _zero(model)
        batch = batch.subset(rows)
    comp = model.encode(batch.token_ids, batch.true_lengths)
    b, m, d = comp.components.shape
    probs = model.classifier.probabilities(comp.components.reshape(b * m, d))
    probs = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    targets = torch.arange(m, device=probs.device).repeat(b)
    picked = probs.gather(1, targets.unsqueeze(1)).squeeze(1)
    return -torch.log(picked).view(b, m).sum(dim=1).mean()


def combined_loss(
    model: PhenotypeModel,
    batch: TrainingBatch,
    weights: LossWeights = LossWeights(),
    prior_ontology_only: bool = False,
) -> dict[str, Tensor]:
    """The four raw losses and their weighted combination."""
    parts = {
        "ehr": loss_reconstruction_ehr(model, batch),
        "category": loss_reconstruction_category(model, batch),
        "subclass": loss_reconstruction_subclass(model, batch),
        "prior": loss_prior(model, batch, ontology_only=prior_ontology_only),
    }
    parts["total"] = (
        weights.ehr * parts["ehr"]
        + weights.category * parts["category"]
        + weights.subclass * parts["subclass"]
        + weights.prior * parts["prior"]
    )
    return parts


@dataclass
class CorpusPools:
    """Sampling pools: narrative fragments plus ontology documents with
    their fragments (ontology texts longer than one window are fragmented
    like narratives; every fragment inherits the document's membership)."""

    ehr_fragments: list[Fragment]
    category_docs: list[tuple[Document, list[Fragment]]]
    subclass_docs: list[tuple[Document, list[Fragment]]]
    num_categories: int


def build_pools(
    ehr_documents: Sequence[Document],
    ontology_docs: Sequence[Document],
    vocab: Vocabulary,
    num_categories: int,
    window: int,
) -> CorpusPools:
    ehr_fragments: list[Fragment] = []
    for doc in ehr_documents:
        ehr_fragments.extend(fragment_document(doc, vocab, window))
    category_docs = []
    subclass_docs = []
    for doc in ontology_docs:
        frags = fragment_document(doc, vocab, window)
        if doc.kind == KIND_CATEGORY:
            category_docs.append((doc, frags))
        elif doc.kind == KIND_SUBCLASS:
            subclass_docs.append((doc, frags))
    return CorpusPools(
        ehr_fragments=ehr_fragments,
        category_docs=category_docs,
        subclass_docs=subclass_docs,
        num_categories=num_categories,
    )


def sample_batch(
    pools: CorpusPools,
    batch_size: int,
    rng: random.Random,
    policy: str = "uniform",
    quotas: dict[str, int] | None = None,
) -> TrainingBatch:
    """Draw a mixed batch.

    The default policy draws uniformly over the union of narrative
    fragments and ontology documents (with replacement, so batches larger
    than the union are well defined).  The quota policy draws fixed
    per-kind counts.  When a sampled ontology document has several
    fragments, one of them is drawn uniformly.
    """
    n_e = len(pools.ehr_fragments)
    n_c = len(pools.category_docs)
    n_s = len(pools.subclass_docs)
    if min(n_e, n_c, n_s) == 0:
        raise ConfigError(
            "sampling pools must all be nonempty "
            f"(EHR={n_e}, CATEGORY={n_c}, SUBCLASS={n_s})"
        )

    picks: list[tuple[str, int]] = []
    if policy == "uniform":
        total = n_e + n_c + n_s
        for _ in range(batch_size):
            u = rng.randrange(total)
            if u < n_e:
                picks.append((KIND_EHR, u))
            elif u < n_e + n_c:
                picks.append((KIND_CATEGORY, u - n_e))
            else:
                picks.append((KIND_SUBCLASS, u - n_e - n_c))
    elif policy == "quota":
        if quotas is None or sum(quotas.values()) != batch_size:
            raise ConfigError("quota policy needs per-kind counts summing to B")
        pool_sizes = {KIND_EHR: n_e, KIND_CATEGORY: n_c, KIND_SUBCLASS: n_s}
        for kind in (KIND_EHR, KIND_CATEGORY, KIND_SUBCLASS):
            for _ in range(quotas.get(kind, 0)):
                picks.append((kind, rng.randrange(pool_sizes[kind])))
    else:
        raise ConfigError(f"unknown mix policy {policy!r}")

    m = pools.num_categories
    fragments: list[Fragment] = []
    kinds: list[str] = []
    membership = torch.zeros(batch_size, m, dtype=torch.bool)
    for row, (kind, idx) in enumerate(picks):
        if kind == KIND_EHR:
            fragments.append(pools.ehr_fragments[idx])
        else:
            doc, frags = (
                pools.category_docs[idx]
                if kind == KIND_CATEGORY
                else pools.subclass_docs[idx]
            )
            fragments.append(frags[rng.randrange(len(frags))])
            for j in doc.category_indices:
                membership[row, j] = True
        kinds.append(kind)
    token_ids, true_lengths = fragments_to_tensors(fragments)
    return TrainingBatch(
        token_ids=token_ids,
        true_lengths=true_lengths,
        kinds=tuple(kinds),
        membership=membership,
    )


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer and loop settings; defaults are the desk-scale choices."""

    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 2000
    seed: int = 0
    mix_policy: str = "uniform"
    quotas: dict[str, int] | None = None
    prior_ontology_only: bool = False
    convergence_window: int = 100
    convergence_horizon: int = 500
    convergence_tol: float = 1e-3


@dataclass
class TrainResult:
    model: PhenotypeModel
    history: list[dict[str, float]] = field(default_factory=list)
    converged: bool = False


def _write_log_row(out: IO[str], entry: dict[str, float]) -> None:
    cells = [str(int(entry["step"]))]
    cells += [f"{entry[k]:.6f}" for k in LOG_COLUMNS[1:-1]]
    cells.append(f"{entry['elapsed_s']:.3f}")
    out.write("\t".join(cells) + "\n")


def train(
    config: ModelConfig,
    pools: CorpusPools,
    weights: LossWeights = LossWeights(),
    settings: TrainSettings = TrainSettings(),
    log_out: IO[str] | None = None,
) -> TrainResult:
    """Run the joint optimization until convergence or the step cap.

    Convergence: the moving average of the combined loss over the last
    convergence_window steps improves by less than convergence_tol
    relative to the same average one convergence_horizon earlier.

    Raises TrainingDivergedError when any loss goes NaN/Inf, reporting the
    last finite values.
    """
    torch.manual_seed(settings.seed)
    rng = random.Random(settings.seed)
    model = PhenotypeModel(config)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=settings.learning_rate,
        betas=(settings.beta1, settings.beta2),
    )

    if log_out is not None:
        log_out.write("\t".join(LOG_COLUMNS) + "\n")

    result = TrainResult(model=model)
    totals: list[float] = []
    started = time.monotonic()
    for step in range(1, settings.max_steps + 1):
        batch = sample_batch(
            pools,
            settings.batch_size,
            rng,
            policy=settings.mix_policy,
            quotas=settings.quotas,
        )
        parts = combined_loss(
            model, batch, weights, prior_ontology_only=settings.prior_ontology_only
        )
        total = parts["total"]
        if not bool(torch.isfinite(total)):
            last = result.history[-1] if result.history else None
            raise TrainingDivergedError(
                f"non-finite loss at step {step}; last finite losses: {last}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        entry = {
            "step": float(step),
            "loss_ehr": float(parts["ehr"].detach()),
            "loss_category": float(parts["category"].detach()),
            "loss_subclass": float(parts["subclass"].detach()),
            "loss_prior": float(parts["prior"].detach()),
            "loss_total": float(total.detach()),
            "elapsed_s": time.monotonic() - started,
        }
        result.history.append(entry)
        totals.append(entry["loss_total"])
        if log_out is not None:
            _write_log_row(log_out, entry)

        w, h = settings.convergence_window, settings.convergence_horizon
        if len(totals) >= w + h:
            now = sum(totals[-w:]) / w
            then = sum(totals[-w - h : -h]) / w
            if then != 0 and (then - now) / abs(then) < settings.convergence_tol:
                result.converged = True
                break

    model.eval()
    return result
