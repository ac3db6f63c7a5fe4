"""In-context image-to-image generalist for 2-D medical-style slices.

One conditional-generation model covers segmentation, cross-modal
synthesis, denoising and inpainting; the task is specified entirely by a
prompt image/label pair.  Outputs live on a single-channel canvas in
[0, 1]; segmentation labels are colorized onto that canvas and decoded
back after prediction.
"""

from .canvas import (
    Canvas,
    ClassRegistry,
    LabelMap,
    Palette,
    assign_predefined_value,
    colorize_binary,
    colorize_random,
    decode_canvas,
    default_value_pool,
    sample_palette,
)
from .data import (
    DatasetManifest,
    SliceDataset,
    SynthSpec,
    Volume,
    build_synthetic_suite,
    ct_window,
    gen_synthetic,
    load_manifest,
    resize_crop,
    write_dataset,
)
from .infer import evaluate_dataset, predict, predict_volume, select_prompt_slice
from .metrics import MetricReport, mae, mean_ssim, miou, psnr, ssim
from .net import ModelConfig, PromptCompletionNet, load_checkpoint, save_checkpoint
from .seqbuild import (
    PatchMask,
    QuadrantGrid,
    VisualSequence,
    build_ar_sequence,
    compose_grid,
    extract_quadrants,
    sample_patch_mask,
)
from .train import (
    TaskDescriptor,
    TrainConfig,
    choose_objective,
    fit,
    lr_at,
    pretrain_mim,
    sample_task,
)

__version__ = "0.1.0"
