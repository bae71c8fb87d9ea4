"""Python surface of the zoom-out-and-in proposal network.

The heavy lifting lives in the compiled ``_zipnet`` extension; this package
re-exports it so ``import zipnet`` works both from an installed wheel and
from a CMake build tree (with the build directory on ``PYTHONPATH``).
"""

from _zipnet import (  # noqa: F401
    PredictorF32,
    PredictorF64,
    anchor_stats,
    decode_offset,
    default_config_json,
    encode_offset,
    evaluate,
    fit_ratio_stats,
    gen_data,
    grad_check,
    iou,
    make_templates,
    nms,
    propose,
    train,
)

__all__ = [
    "PredictorF32",
    "PredictorF64",
    "anchor_stats",
    "decode_offset",
    "default_config_json",
    "encode_offset",
    "evaluate",
    "fit_ratio_stats",
    "gen_data",
    "grad_check",
    "iou",
    "make_templates",
    "nms",
    "propose",
    "train",
]
