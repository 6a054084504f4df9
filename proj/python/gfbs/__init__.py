"""Channel saliency scoring and structured pruning for Conv-BN networks."""

from gfbs._core import (
    ConfigError,
    Dataset,
    FormatError,
    Network,
    NumericError,
    SaliencyRecord,
    apply_prune,
    evaluate,
    oracle,
    plan,
    psnr,
    saliency,
    spearman,
    train,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "FormatError",
    "Network",
    "NumericError",
    "SaliencyRecord",
    "apply_prune",
    "evaluate",
    "oracle",
    "plan",
    "psnr",
    "saliency",
    "spearman",
    "train",
]
