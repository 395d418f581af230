"""Trust-discounted evidential fusion for multi-view classification.

Subjective-logic opinions and belief constraint fusion (``sl_core``),
evidential losses (``losses``), small numpy networks (``neural``), the
stage-wise trainer (``training``), datasets (``data``), reliability metrics
(``metrics``) and a command line (``cli``).
"""

from .data import MultiViewDataset, SynthSpec, conflict_fixture, load_dataset, synth_conflict
from .sl_core import (
    DirichletEvidence,
    MultinomialOpinion,
    ReferralOpinion,
    bcf_fuse_all,
    degree_of_trust,
    discounted_fuse,
    evidence_to_opinion,
    trust_discount,
)
from .training import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "DirichletEvidence",
    "MultiViewDataset",
    "MultinomialOpinion",
    "ReferralOpinion",
    "SynthSpec",
    "TrainConfig",
    "bcf_fuse_all",
    "conflict_fixture",
    "degree_of_trust",
    "discounted_fuse",
    "evaluate",
    "evidence_to_opinion",
    "load_dataset",
    "predict",
    "synth_conflict",
    "train",
    "trust_discount",
]
