"""promptseg: text-guided 3D segmentation fusion at desk scale.

Frozen per-voxel visual logits are modulated by a trainable text-to-class
bias head and relation-aware spatial priors; synthetic phantoms with a
corruptible logit oracle make the mechanism's contribution measurable.
"""

from .grids import (
    DEFAULT_NUM_CLASSES,
    LabelMap,
    LogitTensor,
    SliceImage,
    Volume,
    argmax_channels,
    extract_slice,
    one_hot,
    sliding_window_apply,
    softmax_channels,
)
from .prompts import Lexicon, OrganClass, ParsedPrompt, default_lexicon, parse_prompt
from .fusion import FusionParams, class_bias, fuse_logits, init_fusion
from .pipelines import InferenceConfig, InferenceResult, TrainRunConfig, infer, train_fusion

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_NUM_CLASSES",
    "Volume",
    "LabelMap",
    "LogitTensor",
    "SliceImage",
    "softmax_channels",
    "argmax_channels",
    "one_hot",
    "sliding_window_apply",
    "extract_slice",
    "Lexicon",
    "OrganClass",
    "ParsedPrompt",
    "default_lexicon",
    "parse_prompt",
    "FusionParams",
    "init_fusion",
    "class_bias",
    "fuse_logits",
    "TrainRunConfig",
    "InferenceConfig",
    "InferenceResult",
    "train_fusion",
    "infer",
    "__version__",
]
