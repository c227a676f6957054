"""Two-branch image dehazing: thin Python wrapper over the C++ core."""

try:
    from ._igdh import *  # noqa: F401,F403  (installed package layout)
except ImportError:  # pragma: no cover - development build
    from _igdh import *  # noqa: F401,F403

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "ParamStore",
    "init_params",
    "model_forward",
    "save_checkpoint",
    "load_checkpoint",
    "synth_dataset",
    "train",
    "psnr",
    "ssim",
    "entropy",
    "read_png",
    "write_png",
    "count_params_macs",
]
