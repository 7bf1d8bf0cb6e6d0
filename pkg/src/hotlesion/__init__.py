"""Hierarchical skin-lesion triage toolkit.

Library surface: taxonomy/splits, synthetic paired-image generation, the
hierarchical classifier with prototype learning, mixup training, threshold
calibration, the decision engine with its triage loop, evaluation reports,
and the HTTP service. The ``hot`` CLI wires all of it together.
"""

__version__ = "0.1.0"

from .taxonomy import (  # noqa: F401
    LabelPath,
    LesionRecord,
    SubsetPartition,
    Taxonomy,
    load_taxonomy,
    partition_subsets,
    split_id_ood,
    split_train_test,
)
