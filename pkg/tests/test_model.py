import math

import pytest
import torch

from phenotag.corpus import Fragment
from phenotag.errors import CheckpointError, ConfigError, ModelInputError
from phenotag.model import (
    ModelConfig,
    PhenotypeModel,
    composition_residual,
    fragments_to_tensors,
    load_checkpoint,
    save_checkpoint,
)
from conftest import tiny_config


def random_batch(cfg, batch=4, generator=None, min_len=1):
    g = generator or torch.Generator().manual_seed(0)
    ids = torch.randint(0, cfg.vocab_size, (batch, cfg.window), generator=g)
    lengths = torch.randint(min_len, cfg.window + 1, (batch,), generator=g)
    pos = torch.arange(cfg.window).unsqueeze(0)
    ids[pos >= lengths.unsqueeze(1)] = 0
    return ids, lengths


class TestEncoder:
    def test_composition_identity(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = PhenotypeModel(cfg)
        ids, lengths = random_batch(cfg, batch=6)
        comp = model.encode(ids, lengths)
        assert composition_residual(comp) < 1e-5

    def test_alpha_strictly_inside_unit_interval(self):
        cfg = tiny_config()
        torch.manual_seed(1)
        model = PhenotypeModel(cfg)
        ids, lengths = random_batch(cfg, batch=16)
        comp = model.encode(ids, lengths)
        assert bool((comp.alpha > 0).all()) and bool((comp.alpha < 1).all())

    def test_all_pad_fragment_is_finite_bias_composition(self):
        cfg = tiny_config()
        torch.manual_seed(2)
        model = PhenotypeModel(cfg)
        ids = torch.zeros(1, cfg.window, dtype=torch.long)
        lengths = torch.zeros(1, dtype=torch.long)
        comp = model.encode(ids, lengths)
        for t in (comp.alpha, comp.components, comp.composite):
            assert bool(torch.isfinite(t).all())
        # zero pooled state leaves only the head biases
        expected_alpha = torch.sigmoid(model.encoder.alpha_head.bias)
        assert torch.allclose(comp.alpha[0], expected_alpha, atol=1e-6)

    def test_two_calls_bitwise_equal(self):
        cfg = tiny_config()
        torch.manual_seed(3)
        model = PhenotypeModel(cfg)
        model.eval()
        ids, lengths = random_batch(cfg)
        with torch.no_grad():
            a = model.encode(ids, lengths)
            b = model.encode(ids, lengths)
        assert torch.equal(a.alpha, b.alpha)
        assert torch.equal(a.composite, b.composite)

    def test_pad_region_content_is_ignored(self):
        cfg = tiny_config()
        torch.manual_seed(4)
        model = PhenotypeModel(cfg)
        model.eval()
        ids, lengths = random_batch(cfg, batch=5)
        garbage = ids.clone()
        pos = torch.arange(cfg.window).unsqueeze(0)
        pad_region = pos >= lengths.unsqueeze(1)
        garbage[pad_region] = (garbage[pad_region] + 7) % cfg.vocab_size
        with torch.no_grad():
            a = model.encode(ids, lengths)
            b = model.encode(garbage, lengths)
        assert torch.allclose(a.composite, b.composite, atol=1e-5)
        assert torch.allclose(a.alpha, b.alpha, atol=1e-5)

    def test_out_of_range_id_rejected(self):
        cfg = tiny_config()
        model = PhenotypeModel(cfg)
        ids = torch.full((1, cfg.window), cfg.vocab_size, dtype=torch.long)
        with pytest.raises(ModelInputError):
            model.encode(ids, torch.tensor([cfg.window]))

    def test_wrong_window_rejected(self):
        cfg = tiny_config()
        model = PhenotypeModel(cfg)
        ids = torch.zeros(1, cfg.window + 1, dtype=torch.long)
        with pytest.raises(ModelInputError):
            model.encode(ids, torch.tensor([1]))


class TestGenerator:
    def test_rows_are_distributions(self):
        cfg = tiny_config()
        torch.manual_seed(5)
        model = PhenotypeModel(cfg)
        ids, lengths = random_batch(cfg)
        comp = model.encode(ids, lengths)
        probs = model.generator.distributions(comp.composite, ids)
        sums = probs.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_zero_composite_is_finite(self):
        cfg = tiny_config()
        torch.manual_seed(6)
        model = PhenotypeModel(cfg)
        ids, _ = random_batch(cfg)
        zero = torch.zeros(ids.shape[0], cfg.latent_dim)
        probs = model.generator.distributions(zero, ids)
        assert bool(torch.isfinite(probs).all())

    def test_fresh_model_nll_near_log_vocab(self):
        cfg = tiny_config(vocab_size=50)
        torch.manual_seed(7)
        model = PhenotypeModel(cfg)
        g = torch.Generator().manual_seed(7)
        ids = torch.randint(0, cfg.vocab_size, (32, cfg.window), generator=g)
        lengths = torch.full((32,), cfg.window, dtype=torch.long)
        with torch.no_grad():
            comp = model.encode(ids, lengths)
            logits = model.generator(comp.composite, ids)
            logp = torch.log_softmax(logits, dim=-1)
            nll = -logp.gather(-1, ids.unsqueeze(-1)).squeeze(-1).mean()
        assert abs(float(nll) - math.log(cfg.vocab_size)) < 0.05 * math.log(
            cfg.vocab_size
        )

    def test_dimension_mismatch_rejected(self):
        cfg = tiny_config()
        model = PhenotypeModel(cfg)
        ids, _ = random_batch(cfg)
        with pytest.raises(ModelInputError):
            model.generator(torch.zeros(ids.shape[0], cfg.latent_dim + 1), ids)


class TestClassifier:
    def test_probabilities_sum_to_one(self):
        cfg = tiny_config()
        torch.manual_seed(8)
        model = PhenotypeModel(cfg)
        z = torch.randn(9, cfg.latent_dim)
        probs = model.classifier.probabilities(z)
        assert torch.allclose(probs.sum(-1), torch.ones(9), atol=1e-6)

    def test_identical_inputs_identical_outputs(self):
        cfg = tiny_config()
        torch.manual_seed(9)
        model = PhenotypeModel(cfg)
        z = torch.randn(1, cfg.latent_dim).repeat(2, 1)
        probs = model.classifier.probabilities(z)
        assert torch.equal(probs[0], probs[1])

    def test_uniform_cross_entropy_is_log_m(self):
        cfg = tiny_config(
            num_categories=24, latent_dim=256, classifier_widths=(8, 4, 2),
            classifier_channels=(4, 8, 16),
        )
        torch.manual_seed(10)
        model = PhenotypeModel(cfg)
        with torch.no_grad():
            model.classifier.head.weight.zero_()
            model.classifier.head.bias.zero_()
        z = torch.randn(5, cfg.latent_dim)
        probs = model.classifier.probabilities(z)
        ce = -torch.log(probs[:, 0])
        expected = math.log(24)
        assert torch.allclose(ce, torch.full((5,), expected), atol=1e-6)
        assert abs(expected - 3.17805) < 1e-5

    def test_dimension_mismatch_rejected(self):
        cfg = tiny_config()
        model = PhenotypeModel(cfg)
        with pytest.raises(ModelInputError):
            model.classifier(torch.zeros(1, cfg.latent_dim * 2))


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            tiny_config(hidden=10, attention_heads=3)

    def test_classifier_collapse_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(latent_dim=16, classifier_widths=(8, 4, 2),
                        classifier_channels=(4, 8, 16))

    def test_default_full_scale_config_is_valid(self):
        cfg = ModelConfig(vocab_size=30_002)
        assert cfg.hidden == 768
        assert cfg.classifier_flat_dim() > 0

    def test_scaled_down_config_runs_everywhere(self):
        cfg = ModelConfig(
            vocab_size=120,
            num_categories=6,
            window=32,
            encoder_layers=2,
            hidden=64,
            intermediate=128,
            attention_heads=4,
            latent_dim=32,
        )
        torch.manual_seed(11)
        model = PhenotypeModel(cfg)
        ids, lengths = random_batch(cfg, batch=3)
        comp = model.encode(ids, lengths)
        assert composition_residual(comp) < 1e-5
        probs = model.generator.distributions(comp.composite, ids)
        assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-6)
        cls = model.classifier.probabilities(comp.components.reshape(-1, cfg.latent_dim))
        assert torch.allclose(cls.sum(-1), torch.ones_like(cls.sum(-1)), atol=1e-6)


class TestCheckpoint:
    def make_model(self):
        cfg = tiny_config()
        torch.manual_seed(12)
        return PhenotypeModel(cfg)

    def test_round_trip_preserves_outputs(self, tmp_path):
        model = self.make_model()
        model.eval()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, "hash123", ("HP:1", "HP:2", "HP:3"), seed=7)
        loaded, meta = load_checkpoint(path, "hash123")
        assert meta["category_ids"] == ["HP:1", "HP:2", "HP:3"]
        assert meta["seed"] == 7
        ids, lengths = random_batch(model.config)
        with torch.no_grad():
            a = model.encode(ids, lengths)
            b = loaded.encode(ids, lengths)
        assert torch.equal(a.alpha, b.alpha)
        assert torch.equal(a.composite, b.composite)

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, "hash123", ("a", "b", "c"), seed=0)
        with pytest.raises(CheckpointError, match="vocabulary"):
            load_checkpoint(path, "otherhash")

    def test_unknown_version_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, "h", ("a", "b", "c"), seed=0)
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_fragments_to_tensors():
    frags = [
        Fragment("a", 0, (1, 2, 3, 0, 0, 0, 0, 0), 3),
        Fragment("a", 1, (4, 5, 6, 7, 8, 9, 1, 2), 8),
    ]
    ids, lengths = fragments_to_tensors(frags)
    assert ids.shape == (2, 8)
    assert lengths.tolist() == [3, 8]
