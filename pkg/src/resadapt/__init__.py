"""Resolution-adaptive 3D convolutions: physically parameterized steerable kernels,
a U-Net built from them, and the surrounding data/training/evaluation tooling."""

__version__ = "0.1.0"

from .data import (
    Volume,
    VolumeFormatError,
    generate_dataset,
    load_manifest,
    load_split,
    make_scene,
    normalize_volume,
    rasterize,
    read_volume,
    resample,
    write_volume,
)
from .evaluation import bonferroni, dice, report, wilcoxon_signed_rank
from .harmonics import Irrep, IrrepsSignature, cg_coefficients, sh_eval, wigner_rotation
from .inference import sliding_window_predict
from .kernels import (
    PhysicalKernelSpec,
    kernel_extent,
    read_kernel_dump,
    realize,
    write_kernel_dump,
)
from .network import (
    BaselineUNet,
    ResAdaptiveUNet,
    UNetConfig,
    build_baseline,
    build_resadaptive,
    count_parameters,
    load_model,
    save_model,
)
from .pooling import plan_levels, pool_plan
from .training import TrainConfig, soft_dice_loss, train

__all__ = [
    "Volume",
    "VolumeFormatError",
    "generate_dataset",
    "load_manifest",
    "load_split",
    "make_scene",
    "normalize_volume",
    "rasterize",
    "read_volume",
    "resample",
    "write_volume",
    "bonferroni",
    "dice",
    "report",
    "wilcoxon_signed_rank",
    "Irrep",
    "IrrepsSignature",
    "cg_coefficients",
    "sh_eval",
    "wigner_rotation",
    "sliding_window_predict",
    "PhysicalKernelSpec",
    "kernel_extent",
    "read_kernel_dump",
    "realize",
    "write_kernel_dump",
    "BaselineUNet",
    "ResAdaptiveUNet",
    "UNetConfig",
    "build_baseline",
    "build_resadaptive",
    "count_parameters",
    "load_model",
    "save_model",
    "plan_levels",
    "pool_plan",
    "TrainConfig",
    "soft_dice_loss",
    "train",
]
