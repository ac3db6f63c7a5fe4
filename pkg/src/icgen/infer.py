"""Inference: prompt selection, conditional generation, volume sweeps.

For a test volume, each slice is paired with the train-volume slice at the
matching relative position (floor(n * N_TR / N_TE), clamped into range),
the prompt label is colorized under the evaluation palette, and the model
completes the task-label position.  Segmentation canvases are decoded back
to label maps; the binary scheme runs one pass per class and merges masks
with the lowest class id winning overlaps.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from .canvas import (
    ClassRegistry,
    LabelMap,
    Palette,
    decode_canvas,
    default_value_pool,
    sample_palette,
)
from .data import SliceDataset, Volume, write_png16
from .metrics import MetricReport, generation_report, segmentation_report
from .net import PromptCompletionNet
from .seqbuild import build_ar_sequence, compose_grid, quadrant_patch_mask, term_layout

MODES = ("ar", "mim")


def select_prompt_slice(n: int, n_te: int, n_tr: int) -> int:
    """Position-matched prompt slice index (0-based, clamped into range)."""
    if n_te < 1:
        raise ValueError("test volume has no slices")
    if n_tr < 1:
        raise ValueError("train volume has no slices")
    if not (0 <= n < n_te):
        raise ValueError(f"slice index {n} outside [0, {n_te})")
    return int(min(max(math.floor(n * n_tr / n_te), 0), n_tr - 1))


def predict(
    model: PromptCompletionNet,
    prompt: tuple[np.ndarray, np.ndarray],
    task_img: np.ndarray,
    mode: str = "ar",
) -> np.ndarray:
    """Model completion at the task-label position, clamped to [0, 1].

    AR mode runs the final sequence term ([P_x, P_y, X, placeholder]); MIM
    mode masks the entire lower-right quadrant of the composed grid.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    p_img, p_lbl = (np.asarray(a, dtype=np.float32) for a in prompt)
    task_img = np.asarray(task_img, dtype=np.float32)
    if not (p_img.shape == p_lbl.shape == task_img.shape):
        raise ValueError("prompt image, prompt label and task image must share H x W")
    patch = model.cfg.patch_size
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    h, w = task_img.shape

    was_training = model.training
    model.eval()
    try:
        if mode == "ar":
            seq = build_ar_sequence([(p_img, p_lbl)], task_img, None, patch_size=patch)
            canvas, attn, ph = term_layout(seq, 3)
            x = torch.as_tensor(canvas, dtype=dtype, device=device)[None, None]
            with torch.no_grad():
                out = model(x, attn, ph)[0, 0].cpu().numpy()
        else:
            grid = compose_grid(p_img, p_lbl, task_img, np.zeros_like(task_img))
            mask = quadrant_patch_mask((h, w), patch, "LR")
            x = torch.as_tensor(grid.pixels, dtype=dtype, device=device)[None, None]
            with torch.no_grad():
                out = model(x, None, mask)[0, 0].cpu().numpy()
    finally:
        model.train(was_training)
    return np.clip(out[h : 2 * h, w : 2 * w], 0.0, 1.0)


def _binary_predict(model, p_img, p_lbl, task_img, class_ids, mode) -> LabelMap:
    """One forward pass per class; lowest class id wins overlapping claims."""
    merged = np.zeros(task_img.shape, dtype=np.int64)
    for c in sorted(class_ids, reverse=True):
        prompt_canvas = (np.asarray(p_lbl) == c).astype(np.float32)
        out = predict(model, (p_img, prompt_canvas), task_img, mode)
        mask = decode_canvas(out, Palette({c: 1.0}, "binary")).pixels == c
        merged[mask] = c
    return LabelMap(merged, class_count=max(class_ids))


def predict_volume(
    model: PromptCompletionNet,
    test_vol: Volume,
    train_vol: Volume,
    scheme: str | None = None,
    mode: str = "ar",
    palette: Palette | None = None,
    class_count: int | None = None,
    registry: ClassRegistry | None = None,
    dataset_id: int = 1,
    value_pool=None,
    seed: int = 0,
    keep_canvases: bool = False,
):
    """Sweep a test volume with position-matched prompts from a train volume.

    Segmentation (scheme given) returns LabelMap per slice; generation
    tasks return raw canvases.  The palette for the random scheme is drawn
    once per call from the value pool under ``seed`` unless given.
    """
    n_te, n_tr = len(test_vol), len(train_vol)
    segmentation = scheme is not None
    if segmentation:
        if train_vol.labels is None:
            raise ValueError("segmentation prompts need train-volume labels")
        if class_count is None:
            raise ValueError("segmentation needs the dataset class count")
        class_ids = list(range(1, class_count + 1))
        if palette is None:
            if scheme == "random":
                pool = default_value_pool() if value_pool is None else value_pool
                palette = sample_palette(class_ids, np.random.default_rng(seed), pool, seed=seed)
            elif scheme == "predefined":
                if registry is None:
                    raise ValueError("predefined scheme needs a class registry")
                palette = registry.palette(dataset_id, class_ids)
            elif scheme != "binary":
                raise ValueError(f"unknown scheme {scheme!r}")
    elif train_vol.targets is None:
        raise ValueError("generation prompts need train-volume targets")

    outputs, canvases = [], []
    for n in range(n_te):
        m = select_prompt_slice(n, n_te, n_tr)
        p_img = train_vol.slices[m]
        task_img = test_vol.slices[n]
        if not segmentation:
            outputs.append(predict(model, (p_img, train_vol.targets[m]), task_img, mode))
            continue
        if scheme == "binary":
            outputs.append(
                _binary_predict(model, p_img, train_vol.labels[m], task_img, class_ids, mode)
            )
            continue
        p_canvas = palette.apply(train_vol.labels[m])
        out = predict(model, (p_img, p_canvas), task_img, mode)
        if keep_canvases:
            canvases.append(out)
        outputs.append(decode_canvas(out, palette, dataset_id=dataset_id))

    extras = {"palette": palette, "prompt_instance_id": train_vol.instance_id}
    if keep_canvases:
        extras["canvases"] = canvases
    return outputs, extras


def evaluate_dataset(
    model: PromptCompletionNet,
    test_ds: SliceDataset,
    train_ds: SliceDataset,
    mode: str = "ar",
    scheme: str | None = None,
    seed: int = 0,
    registry: ClassRegistry | None = None,
    value_pool=None,
    keep_canvases: bool = False,
) -> MetricReport:
    """Evaluate every test volume against a seed-selected prompt instance.

    The prompt instance is drawn once per run with ``seed`` and recorded in
    the report, so reported numbers are reproducible.
    """
    rng = np.random.default_rng(seed)
    train_vol = train_ds.volumes[int(rng.integers(len(train_ds.volumes)))]
    segmentation = test_ds.task_kind == "segmentation"
    if segmentation and scheme is None:
        raise ValueError("segmentation evaluation needs a colorization scheme")

    preds, refs, canvases, canvas_refs = [], [], [], []
    shared_palette = None
    for vol in test_ds.volumes:
        outputs, extras = predict_volume(
            model, vol, train_vol,
            scheme=scheme if segmentation else None,
            mode=mode,
            palette=shared_palette,
            class_count=test_ds.class_count,
            registry=registry,
            dataset_id=test_ds.dataset_id,
            value_pool=value_pool,
            seed=seed,
            keep_canvases=keep_canvases and segmentation and scheme != "binary",
        )
        if segmentation:
            shared_palette = extras["palette"] or shared_palette
            preds.extend(o.pixels for o in outputs)
            refs.extend(vol.labels)
            if "canvases" in extras:
                canvases.extend(extras["canvases"])
                canvas_refs.extend(extras["palette"].apply(l) for l in vol.labels)
        else:
            preds.extend(outputs)
            refs.extend(vol.targets)

    if segmentation:
        report = segmentation_report(
            preds, refs, list(range(1, test_ds.class_count + 1)),
            dataset=test_ds.name, volumes=len(test_ds.volumes),
        )
        if canvases:
            canvas_quality = generation_report(canvases, canvas_refs, test_ds.name, "segmentation")
            report.extra["canvas_psnr"] = canvas_quality.psnr
            report.extra["canvas_psnr_infinite_count"] = canvas_quality.psnr_infinite_count
    else:
        report = generation_report(
            preds, refs, dataset=test_ds.name, task_kind=test_ds.task_kind,
            volumes=len(test_ds.volumes),
        )
    report.extra["prompt_instance_id"] = str(train_vol.instance_id)
    report.extra["mode"] = mode
    if scheme:
        report.extra["scheme"] = scheme
    return report


def write_predictions(
    out_dir,
    test_vol: Volume,
    outputs: list,
    extras: dict,
    scheme: str | None,
    canvases: list | None = None,
) -> Path:
    """Prediction directory layout for one volume.

    16-bit canvases plus (for segmentation) decoded label PNGs, the
    serialized palette, and a manifest naming the prompt instance.
    """
    vol_dir = Path(out_dir) / str(test_vol.instance_id)
    vol_dir.mkdir(parents=True, exist_ok=True)
    for i, out in enumerate(outputs):
        if isinstance(out, LabelMap):
            write_png16(vol_dir / f"label_{i:03d}.png", out.pixels, is_label=True)
            if canvases:
                write_png16(vol_dir / f"canvas_{i:03d}.png", canvases[i])
        else:
            write_png16(vol_dir / f"canvas_{i:03d}.png", out)
    palette = extras.get("palette")
    if palette is not None:
        (vol_dir / "palette.json").write_text(palette.to_json())
    manifest = {
        "instance_id": str(test_vol.instance_id),
        "prompt_instance_id": str(extras.get("prompt_instance_id")),
        "slice_count": len(outputs),
        "scheme": scheme,
    }
    (vol_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return vol_dir
