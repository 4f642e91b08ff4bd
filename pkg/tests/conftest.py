import random

import pytest
import torch

from phenotag.model import ModelConfig
from phenotag.ontology import (
    parse_obo,
    select_general_categories,
    subclass_closure,
)
from phenotag.synthetic import build_demo_ontology, demo_categories

TOY_OBO = """format-version: 1.2

[Term]
id: HP:0000118
name: Phenotypic abnormality

[Term]
id: HP:0000001
name: Blood abnormality
is_a: HP:0000118 ! Phenotypic abnormality
synonym: "Abnormal blood" EXACT []
def: "Any anomaly of blood." [curator:one]

[Term]
id: HP:0000002
name: Nervous abnormality
is_a: HP:0000118

[Term]
id: HP:0000010
name: Anemia
alt_id: HP:0009999
synonym: "Anaemia" EXACT [legacy]
def: "Reduced red cells." []
is_a: HP:0000001

[Term]
id: HP:0000011
name: Mild headache
is_a: HP:0000002
"""


@pytest.fixture
def toy_terms():
    return parse_obo(TOY_OBO.splitlines())


@pytest.fixture
def toy_categories(toy_terms):
    cats = select_general_categories(toy_terms, "HP:0000118")
    return subclass_closure(toy_terms, cats)


@pytest.fixture(scope="session")
def demo_terms():
    return build_demo_ontology(num_categories=4, subclasses_per_category=4)


@pytest.fixture(scope="session")
def demo_cats(demo_terms):
    return demo_categories(demo_terms)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config on which every network still runs."""
    base = dict(
        vocab_size=50,
        num_categories=3,
        window=8,
        encoder_layers=1,
        hidden=16,
        intermediate=32,
        attention_heads=2,
        latent_dim=16,
        classifier_widths=(2, 2, 2),
        classifier_channels=(2, 2, 2),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def seeded():
    torch.manual_seed(1234)
    return random.Random(1234)
