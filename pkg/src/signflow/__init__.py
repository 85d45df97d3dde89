"""signflow: sign-language translation from dense motion fields.

A desk-scale, fully self-contained stack: a recorded-tape autodiff engine,
variational optical flow, a volumetric feature extractor, a transformer
encoder with a CTC gloss head, a transformer decoder for sentences, plus
decoding, metrics, synthetic data, and a training CLI.
"""

from .tensor import (Tensor, backward, no_grad, set_default_dtype,
                     get_default_dtype, set_finite_checks)
from .gradcheck import grad_check, GradCheckReport

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "set_default_dtype", "get_default_dtype",
    "set_finite_checks", "grad_check", "GradCheckReport", "__version__",
]
