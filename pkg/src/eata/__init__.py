"""Online test-time adaptation of batch-norm classifiers.

Entropy minimisation over BN affine parameters, with reliability and
redundancy gates on the samples that get a backward pass and a Fisher-weighted
penalty that keeps the adapted model close to the original.
"""

from .engine import AdaptConfig, Engine, RunMetrics, run_stream
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateVectorError,
    DivergenceError,
    EataError,
    FormatError,
    InsufficientBatchError,
    NumericDomainError,
)
from .fisher import FisherDiag, estimate_fisher, fisher_for, pseudo_label, reg_grad, reg_penalty
from .network import ArchSpec, ParamSet, TrainHyper, forward, init_params, train_base
from .selection import EmaTracker, SelectionConfig, select_batch
from .shiftgen import ShiftSpec, ShiftStream, SourceSpec, make_source, make_stream

__version__ = "0.1.0"
