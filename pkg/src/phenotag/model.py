"""The three networks: fragment encoder, text generator and latent classifier.

The encoder maps a fixed-length token window to a latent composition: a
weight vector alpha over the categories, one latent component per
category, and the composite latent equal to the alpha-weighted sum of the
components.  The generator reconstructs the window from the composite
latent alone (teacher-forced), and the classifier assigns each latent
component to its category class.  All dimensions live in ModelConfig and
scale down proportionally for desk-scale runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .corpus import Fragment
from .errors import CheckpointError, ConfigError, ModelInputError

ALPHA_EPS = 1e-7

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions; defaults mirror the full-scale configuration."""

    vocab_size: int
    num_categories: int = 24
    window: int = 32
    encoder_layers: int = 6
    hidden: int = 768
    intermediate: int = 3072
    attention_heads: int = 12
    latent_dim: int = 1536
    classifier_widths: tuple[int, ...] = (8, 4, 2)
    classifier_channels: tuple[int, ...] = (4, 8, 16)
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover PAD, UNK and a token")
        if self.hidden % self.attention_heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by "
                f"attention_heads ({self.attention_heads})"
            )
        if len(self.classifier_widths) != len(self.classifier_channels):
            raise ConfigError("classifier widths and channels differ in length")
        for name in ("num_categories", "window", "encoder_layers", "hidden",
                     "intermediate", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.classifier_flat_dim()

    def classifier_stage_lengths(self) -> list[int]:
        """Signal length after each conv+pool stage; all must stay >= 1."""
        length = self.latent_dim
        lengths = []
        for width in self.classifier_widths:
            length = length - width + 1
            if length < 1:
                raise ConfigError(
                    f"classifier conv of width {width} collapses a signal "
                    f"of length {length + width - 1}"
                )
            length //= 2
            if length < 1:
                raise ConfigError(
                    "classifier pooling collapses the signal; use smaller "
                    "conv widths or a larger latent_dim"
                )
            lengths.append(length)
        return lengths

    def classifier_flat_dim(self) -> int:
        return self.classifier_channels[-1] * self.classifier_stage_lengths()[-1]


@dataclass
class LatentComposition:
    """Per-fragment encoder output: alpha (B, M), components (B, M, d_z),
    composite (B, d_z) with composite = sum_j alpha_j * components_j."""

    alpha: Tensor
    components: Tensor
    composite: Tensor


def composition_residual(comp: LatentComposition) -> float:
    """Relative residual of the composition identity, for invariant checks."""
    with torch.no_grad():
        recomposed = (comp.alpha.unsqueeze(-1) * comp.components).sum(dim=1)
        num = torch.linalg.vector_norm(comp.composite - recomposed)
        den = torch.linalg.vector_norm(comp.composite)
        return float(num / den.clamp(min=1e-30))


class FragmentEncoder(nn.Module):
    """Word+position embeddings, stacked transformer encoders, mean pooling
    over non-PAD positions, then the alpha head and per-category latent heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.word_embedding = nn.Embedding(config.vocab_size, config.hidden)
        self.position_embedding = nn.Embedding(config.window, config.hidden)
        layer = nn.TransformerEncoderLayer(
            d_model=config.hidden,
            nhead=config.attention_heads,
            dim_feedforward=config.intermediate,
            dropout=config.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=config.encoder_layers, enable_nested_tensor=False
        )
        self.alpha_head = nn.Linear(config.hidden, config.num_categories)
        self.latent_heads = nn.Linear(
            config.hidden, config.num_categories * config.latent_dim
        )

    def forward(self, token_ids: Tensor, true_lengths: Tensor) -> LatentComposition:
        cfg = self.config
        if token_ids.dim() != 2 or token_ids.shape[1] != cfg.window:
            raise ModelInputError(
                f"expected token ids of shape (B, {cfg.window}), "
                f"got {tuple(token_ids.shape)}"
            )
        if token_ids.numel() and (
            token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size
        ):
            raise ModelInputError("token id out of vocabulary range")

        batch, window = token_ids.shape
        device = token_ids.device
        positions = torch.arange(window, device=device)
        states = self.word_embedding(token_ids) + self.position_embedding(positions)

        pad_mask = positions.unsqueeze(0) >= true_lengths.unsqueeze(1)
        # A fully padded row would make attention softmax NaN; let it attend
        # anywhere, pooling below excludes it regardless.
        attn_mask = pad_mask & (true_lengths > 0).unsqueeze(1)
        states = self.encoder(states, src_key_padding_mask=attn_mask)

        keep = (~pad_mask).to(states.dtype).unsqueeze(-1)
        denom = true_lengths.clamp(min=1).to(states.dtype).unsqueeze(-1)
        pooled = (states * keep).sum(dim=1) / denom

        alpha = torch.sigmoid(self.alpha_head(pooled))
        alpha = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)
        components = self.latent_heads(pooled).view(
            batch, cfg.num_categories, cfg.latent_dim
        )
        composite = (alpha.unsqueeze(-1) * components).sum(dim=1)
        return LatentComposition(alpha=alpha, components=components, composite=composite)


class FragmentGenerator(nn.Module):
    """Transformer stack mirroring the encoder, reconstructing the window.

    The composite latent is projected to a 2-vector memory consumed through
    cross-attention; decoding is teacher-forced on the target fragment with
    PAD as the start symbol.
    """

    MEMORY_SLOTS = 2

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.word_embedding = nn.Embedding(config.vocab_size, config.hidden)
        self.position_embedding = nn.Embedding(config.window, config.hidden)
        self.memory_projection = nn.Linear(
            config.latent_dim, self.MEMORY_SLOTS * config.hidden
        )
        layer = nn.TransformerDecoderLayer(
            d_model=config.hidden,
            nhead=config.attention_heads,
            dim_feedforward=config.intermediate,
            dropout=config.dropout,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=config.encoder_layers)
        self.output_head = nn.Linear(config.hidden, config.vocab_size)

    def forward(self, composite: Tensor, target_ids: Tensor) -> Tensor:
        """Per-position vocabulary logits, shape (B, W, vocab_size)."""
        cfg = self.config
        if composite.dim() != 2 or composite.shape[1] != cfg.latent_dim:
            raise ModelInputError(
                f"expected composite of shape (B, {cfg.latent_dim}), "
                f"got {tuple(composite.shape)}"
            )
        if target_ids.shape[1] != cfg.window or target_ids.shape[0] != composite.shape[0]:
            raise ModelInputError("target fragment does not match the composite batch")

        batch, window = target_ids.shape
        device = target_ids.device
        start = target_ids.new_zeros(batch, 1)
        shifted = torch.cat([start, target_ids[:, :-1]], dim=1)
        positions = torch.arange(window, device=device)
        states = self.word_embedding(shifted) + self.position_embedding(positions)

        memory = self.memory_projection(composite).view(
            batch, self.MEMORY_SLOTS, cfg.hidden
        )
        causal = torch.triu(
            torch.ones(window, window, dtype=torch.bool, device=device), diagonal=1
        )
        states = self.decoder(tgt=states, memory=memory, tgt_mask=causal)
        return self.output_head(states)

    def distributions(self, composite: Tensor, target_ids: Tensor) -> Tensor:
        """Normalized per-position distributions over the vocabulary."""
        return torch.softmax(self.forward(composite, target_ids), dim=-1)


class LatentClassifier(nn.Module):
    """1-D CNN over a latent vector, softmax over the category classes."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stages = []
        in_channels = 1
        for width, channels in zip(config.classifier_widths, config.classifier_channels):
            stages.append(nn.Conv1d(in_channels, channels, kernel_size=width))
            stages.append(nn.ReLU())
            stages.append(nn.MaxPool1d(kernel_size=2, stride=2))
            in_channels = channels
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(config.classifier_flat_dim(), config.num_categories)

    def forward(self, latents: Tensor) -> Tensor:
        """Class logits, shape (B, M)."""
        if latents.dim() != 2 or latents.shape[1] != self.config.latent_dim:
            raise ModelInputError(
                f"expected latents of shape (B, {self.config.latent_dim}), "
                f"got {tuple(latents.shape)}"
            )
        signal = latents.unsqueeze(1)
        features = self.stages(signal)
        return self.head(features.flatten(start_dim=1))

    def probabilities(self, latents: Tensor) -> Tensor:
        return torch.softmax(self.forward(latents), dim=-1)


class PhenotypeModel(nn.Module):
    """Encoder, generator and classifier trained jointly."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = FragmentEncoder(config)
        self.generator = FragmentGenerator(config)
        self.classifier = LatentClassifier(config)
        self.apply(_init_weights)

    def encode(self, token_ids: Tensor, true_lengths: Tensor) -> LatentComposition:
        return self.encoder(token_ids, true_lengths)


def _init_weights(module: nn.Module) -> None:
    # Small-variance init keeps fresh softmax heads near uniform; conv
    # stages keep the torch default weights (zero bias) so classifier
    # features stay alive at every scale.
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv1d):
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)
    elif isinstance(module, nn.MultiheadAttention):
        nn.init.normal_(module.in_proj_weight, std=0.02)
        if module.in_proj_bias is not None:
            nn.init.zeros_(module.in_proj_bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def fragments_to_tensors(
    fragments: Sequence[Fragment], device=None
) -> tuple[Tensor, Tensor]:
    """Stack fragments into (token_ids, true_lengths) tensors."""
    ids = torch.tensor([f.token_ids for f in fragments], dtype=torch.long, device=device)
    lengths = torch.tensor(
        [f.true_length for f in fragments], dtype=torch.long, device=device
    )
    return ids, lengths


def save_checkpoint(
    path,
    model: PhenotypeModel,
    vocab_sha256: str,
    category_ids: Sequence[str],
    seed: int,
) -> None:
    """Self-describing checkpoint: config, vocabulary hash, category order,
    every parameter tensor and the training seed."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab_sha256": vocab_sha256,
        "category_ids": list(category_ids),
        "seed": seed,
        "state": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(
    path, expected_vocab_sha256: str | None = None
) -> tuple[PhenotypeModel, dict]:
    """Rebuild the model from a checkpoint, rejecting mismatched vocabularies."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if (
        expected_vocab_sha256 is not None
        and payload["vocab_sha256"] != expected_vocab_sha256
    ):
        raise CheckpointError(
            "checkpoint was trained with a different vocabulary "
            f"({payload['vocab_sha256'][:12]}... != {expected_vocab_sha256[:12]}...)"
        )
    raw = dict(payload["config"])
    raw["classifier_widths"] = tuple(raw["classifier_widths"])
    raw["classifier_channels"] = tuple(raw["classifier_channels"])
    config = ModelConfig(**raw)
    model = PhenotypeModel(config)
    model.load_state_dict(payload["state"])
    model.eval()
    meta = {k: payload[k] for k in ("vocab_sha256", "category_ids", "seed")}
    return model, meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
