"""Abelian group/semigroup networks over invertible maps.

Binary operations of the form phi^{-1}(phi(x) + phi(y)) (group) and
phi^{-1}(phi(x) * phi(y)) (semigroup), their multiset folds, the
associative-symmetric-polynomial classifier, a DeepSets baseline, and the
training/evaluation harness around them.
"""

from .abelian import (
    AbelianOp,
    EmptyMultisetError,
    NotAGroupError,
    SizeGenBound,
    estimate_lipschitz,
    size_generalization_bound,
    size_generalization_check,
)
from .algebra import CanonicalForm, NotAssociative, SymPoly2, classify, is_associative
from .baseline import DeepSetsModel
from .checkpoint import load_checkpoint, save_checkpoint
from .invertible import CouplingFlow, InversionError, MonotonicNet
from .numcore import DivergedError, ParamStore, Tape, adam_step, cosine, mse_loss

__all__ = [
    "AbelianOp",
    "CanonicalForm",
    "CouplingFlow",
    "DeepSetsModel",
    "DivergedError",
    "EmptyMultisetError",
    "InversionError",
    "MonotonicNet",
    "NotAGroupError",
    "NotAssociative",
    "ParamStore",
    "SizeGenBound",
    "SymPoly2",
    "Tape",
    "adam_step",
    "classify",
    "cosine",
    "estimate_lipschitz",
    "is_associative",
    "load_checkpoint",
    "mse_loss",
    "save_checkpoint",
    "size_generalization_bound",
    "size_generalization_check",
]

__version__ = "0.1.0"
