"""latentloop: iterative latent refinement for frozen dual-encoder classifiers.

A tiny trainable projector feeds "thought tokens" back into the upper blocks
of a frozen two-tower encoder, refining its pooled representation over K
steps.  The package bundles the float64 autodiff core, the toy pretrained
towers, the refinement loop, few-shot adaptation, synthetic evaluation
protocols, and per-step reasoning-dynamics instrumentation behind the
`latent-loop` CLI.
"""

__version__ = "0.1.0"

from .encoder import EncoderConfig, TokenSequence  # noqa: F401
from .refinement import RefineConfig  # noqa: F401
from .tasks import SyntheticTaskSpec  # noqa: F401
from .tensor import Tensor, backward, no_grad  # noqa: F401
from .training import TrainConfig  # noqa: F401
