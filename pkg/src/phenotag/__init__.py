"""Unsupervised phenotype-category annotation of clinical narratives.

The package learns, without labeled annotations, to represent each text
fragment as a weighted composition of general phenotype categories taken
from an ontology, and annotates documents with the categories whose
composition weights exceed calibrated thresholds.
"""

__version__ = "0.1.0"
