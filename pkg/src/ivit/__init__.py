"""Interaction vision transformer with teacher-map supervised attention."""

import os

# Single-threaded BLAS wins on the small stacked matmuls this model is made
# of; only takes effect if numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .autodiff import (  # noqa: E402
    GradientReport,
    Tensor,
    grad_check,
    kl_rows,
    reverse_gradients,
    softmax_rows,
)
from .interactions import (  # noqa: E402
    HarsanyiTable,
    attention,
    factorize_attention,
    harsanyi_and,
    reconstruct_value,
    sparsify,
)
from .model import (  # noqa: E402
    CheckpointFormatError,
    ModelConfig,
    forward,
    freeze_mask,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .teacher import (  # noqa: E402
    TeacherMap,
    TimFormatError,
    classification_teacher,
    dense_teacher,
    mask_teacher,
    read_tim,
    write_tim,
)

__all__ = [
    "GradientReport",
    "Tensor",
    "grad_check",
    "kl_rows",
    "reverse_gradients",
    "softmax_rows",
    "HarsanyiTable",
    "attention",
    "factorize_attention",
    "harsanyi_and",
    "reconstruct_value",
    "sparsify",
    "CheckpointFormatError",
    "ModelConfig",
    "forward",
    "freeze_mask",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "TeacherMap",
    "TimFormatError",
    "classification_teacher",
    "dense_teacher",
    "mask_teacher",
    "read_tim",
    "write_tim",
]

__version__ = "0.1.0"
