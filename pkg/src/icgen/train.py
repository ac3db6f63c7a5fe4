"""Training orchestration for the hybrid conditional-generation model.

One optimization step draws a task (segmentation weighted against the
generation tasks), picks the objective for that step (segmentation trains
purely autoregressively; other tasks mix masked-image-modeling and
autoregression per the configured fraction), assembles a homogeneous
batch, and applies one AdamW update under a warmup + half-cosine learning
rate schedule.  Runs log one JSON line per step and are bit-reproducible
for a fixed seed on a single device.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .canvas import ClassRegistry, Palette, default_value_pool, sample_palette
from .data import SliceDataset
from .net import (
    ModelConfig,
    PromptCompletionNet,
    load_checkpoint,
    masked_loss,
    save_checkpoint,
)
from .seqbuild import build_ar_sequence, compose_grid, sample_patch_mask

OBJECTIVES = ("mim", "ar")


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN/inf loss."""


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    steps_per_epoch: int = 100
    peak_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 4
    seg_sampling_weight: float = 0.5
    mim_fraction_nonseg: float = 0.9
    mask_ratio: float = 0.75
    seed: int = 0
    beta: float = 1.0
    checkpoint_interval: int = 500
    lr_floor: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if not (0.0 <= self.seg_sampling_weight <= 1.0):
            raise ValueError("seg_sampling_weight must lie in [0, 1]")
        if not (0.0 <= self.mim_fraction_nonseg <= 1.0):
            raise ValueError("mim_fraction_nonseg must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskDescriptor:
    dataset_id: int
    task_kind: str
    scheme: str | None = None

    def __post_init__(self):
        if (self.task_kind == "segmentation") != (self.scheme is not None):
            raise ValueError("colorization scheme is present iff the task is segmentation")


def sample_task(rng: np.random.Generator, descriptors, seg_weight: float) -> TaskDescriptor:
    """Segmentation with probability seg_weight, uniform within each family."""
    seg = [d for d in descriptors if d.task_kind == "segmentation"]
    rest = [d for d in descriptors if d.task_kind != "segmentation"]
    if not seg or not rest:
        family = seg or rest
        if not family:
            raise ValueError("no task descriptors given")
        warnings.warn("only one task family present; sampling ignores seg_weight")
        return family[int(rng.integers(len(family)))]
    family = seg if rng.random() < seg_weight else rest
    return family[int(rng.integers(len(family)))]


def choose_objective(task_kind: str, rng: np.random.Generator, mim_fraction_nonseg: float) -> str:
    """Segmentation always trains autoregressively; other tasks mix in MIM."""
    if task_kind == "segmentation":
        return "ar"
    return "mim" if rng.random() < mim_fraction_nonseg else "ar"


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, floor: float = 0.0) -> float:
    """Linear ramp 0 -> peak over warmup, then half-cosine decay to floor."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _ar_layout(h: int, w: int, patch: int):
    """Per-term attention/placeholder geometry for the n=1 sequence."""
    zeros = np.zeros((h, w))
    seq = build_ar_sequence([(zeros, zeros)], zeros, zeros, patch_size=patch)
    layouts = []
    for target_idx in seq.label_indices():
        rows = target_idx + 1
        hp, wp = h // patch, w // patch
        n_tok = (rows // 2) * hp * 2 * wp
        attn = seq.attention_mask[:n_tok, :n_tok].copy()
        ph = (seq.element_of_patch[:n_tok] == target_idx).copy()
        r, c = divmod(target_idx, 2)
        region = (slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))
        layouts.append((target_idx, rows, attn, ph, region))
    return layouts


def _seg_canvases(ds: SliceDataset, rng, scheme, pool, registry):
    """Prompt/task pair for one segmentation sample, sharing one palette."""
    vols = ds.volumes
    v = vols[int(rng.integers(len(vols)))]
    i = int(rng.integers(len(v)))
    u = vols[int(rng.integers(len(vols)))]
    j = int(rng.integers(len(u)))
    p_img, p_lbl = u.slices[j], u.labels[j]
    t_img, t_lbl = v.slices[i], v.labels[i]
    if scheme == "random":
        palette = sample_palette(range(1, ds.class_count + 1), rng, pool)
    elif scheme == "predefined":
        palette = registry.palette(ds.dataset_id, list(range(1, ds.class_count + 1)))
    elif scheme == "binary":
        shared = sorted(set(np.unique(p_lbl)) & set(np.unique(t_lbl)) - {0})
        pick = sorted(set(np.unique(t_lbl)) - {0}) if not shared else shared
        palette = Palette({int(rng.choice(pick)): 1.0}, scheme="binary")
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return p_img, palette.apply(p_lbl), t_img, palette.apply(t_lbl)


def _gen_pair(ds: SliceDataset, rng):
    vols = ds.volumes
    v = vols[int(rng.integers(len(vols)))]
    i = int(rng.integers(len(v)))
    u = vols[int(rng.integers(len(vols)))]
    j = int(rng.integers(len(u)))
    return u.slices[j], u.targets[j], v.slices[i], v.targets[i]


def build_batch(
    ds: SliceDataset,
    descriptor: TaskDescriptor,
    objective: str,
    batch_size: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
    pool=None,
    registry: ClassRegistry | None = None,
    patch_size: int = 16,
) -> dict:
    """A homogeneous batch (one task, one objective) as numpy arrays."""
    quads = []
    for _ in range(batch_size):
        if descriptor.task_kind == "segmentation":
            quads.append(_seg_canvases(ds, rng, descriptor.scheme, pool, registry))
        else:
            quads.append(_gen_pair(ds, rng))
    h, w = quads[0][0].shape

    if objective == "ar":
        canvases = []
        for target_idx, rows, _attn, _ph, _region in _ar_layout(h, w, patch_size):
            cnv = np.zeros((batch_size, 1, rows // 2 * h, 2 * w), dtype=np.float32)
            for b, (p_img, p_cnv, t_img, _t_cnv) in enumerate(quads):
                elems = [p_img, p_cnv, t_img][:target_idx]
                for e_idx, el in enumerate(elems):
                    r, c = divmod(e_idx, 2)
                    cnv[b, 0, r * h : (r + 1) * h, c * w : (c + 1) * w] = el
            canvases.append(cnv)
        targets = [
            np.stack([q[1] for q in quads])[:, None].astype(np.float32),
            np.stack([q[3] for q in quads])[:, None].astype(np.float32),
        ]
        return {
            "objective": "ar",
            "inputs": canvases,
            "targets": targets,
            "layout": _ar_layout(h, w, patch_size),
        }

    grids = np.stack(
        [compose_grid(p, pc, t, tc).pixels for p, pc, t, tc in quads]
    )[:, None].astype(np.float32)
    n_tok = (2 * h // patch_size) * (2 * w // patch_size)
    masks = np.stack(
        [sample_patch_mask(n_tok, cfg.mask_ratio, rng).as_bool() for _ in range(batch_size)]
    )
    return {"objective": "mim", "inputs": grids, "masks": masks}


def compute_loss(model: PromptCompletionNet, batch: dict, beta: float) -> torch.Tensor:
    """Objective loss for one batch (mean over supervised pixels)."""
    p = model.cfg.patch_size
    if batch["objective"] == "mim":
        x = torch.from_numpy(batch["inputs"])
        mask = batch["masks"]
        pred = model(x, attn_mask=None, placeholder=mask)
        return masked_loss(pred, x, mask, beta, p)
    terms = []
    for (target_idx, _rows, attn, ph, region), x_np, t_np in zip(
        batch["layout"], batch["inputs"], batch["targets"]
    ):
        x = torch.from_numpy(x_np)
        target = torch.from_numpy(t_np)
        pred = model(x, attn_mask=attn, placeholder=ph)
        pred_el = pred[:, :, region[0], region[1]]
        loss = torch.nn.functional.smooth_l1_loss(pred_el, target, beta=beta)
        terms.append(loss)
    return torch.stack(terms).mean()


def make_optimizer(model: PromptCompletionNet, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay; 1-D params (norms, biases) undecayed."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.peak_lr,
        betas=(0.9, 0.999),
    )


def train_step(
    model: PromptCompletionNet,
    batch: dict,
    objective: str,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    lr: float,
    step: int = -1,
    task: str = "?",
) -> float:
    """One AdamW update; aborts with diagnostics on a non-finite loss."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = compute_loss(model, batch, cfg.beta)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss {value} at step {step} (lr={lr:.3e}, task={task}, objective={objective})"
        )
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return value


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

def _registry_from_datasets(datasets: dict) -> ClassRegistry:
    seg_ids = sorted(k for k, ds in datasets.items() if ds.task_kind == "segmentation")
    sizes = [datasets[k].class_count for k in seg_ids]
    if seg_ids != list(range(1, len(seg_ids) + 1)):
        raise ValueError("predefined colorization needs contiguous dataset ids starting at 1")
    return ClassRegistry(dataset_sizes=sizes)


def fit(
    config: TrainConfig,
    datasets: list[SliceDataset],
    out_dir,
    model_cfg: ModelConfig | None = None,
    schemes: dict | None = None,
    registry: ClassRegistry | None = None,
    value_pool=None,
    resume=None,
    init_from=None,
    default_scheme: str = "random",
) -> tuple[Path, Path]:
    """Run the training loop; returns (final checkpoint, metrics log) paths.

    ``schemes`` maps dataset names to colorization schemes for segmentation
    datasets (``default_scheme`` otherwise).  ``resume`` continues a run
    from a checkpoint (step counter, optimizer and RNG state included);
    ``init_from`` loads encoder/decoder weights only, e.g. from MIM
    pretraining.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    by_id = {ds.dataset_id: ds for ds in datasets}
    if len(by_id) != len(datasets):
        raise ValueError("dataset ids must be unique")
    schemes = schemes or {}
    descriptors = [
        TaskDescriptor(
            ds.dataset_id,
            ds.task_kind,
            schemes.get(ds.name, default_scheme) if ds.task_kind == "segmentation" else None,
        )
        for ds in datasets
    ]
    needs_registry = any(d.scheme == "predefined" for d in descriptors)
    if needs_registry and registry is None:
        registry = _registry_from_datasets(by_id)
    pool = default_value_pool() if value_pool is None else np.asarray(value_pool)

    torch.manual_seed(config.seed)
    model_cfg = model_cfg or ModelConfig()
    model = PromptCompletionNet(model_cfg)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    start_step = 0
    mode = "w"

    if init_from is not None:
        pre, _ = load_checkpoint(init_from)
        model.load_state_dict(pre.state_dict())
    if resume is not None:
        model, payload = load_checkpoint(resume)
        optimizer = make_optimizer(model, config)
        if payload.get("optimizer_state"):
            optimizer.load_state_dict(payload["optimizer_state"])
        start_step = payload["step"]
        rng_state = payload.get("extra", {}).get("rng_state")
        if rng_state is not None:
            rng.bit_generator.state = json.loads(rng_state)
        mode = "a"

    model.train()
    log = open(metrics_path, mode)
    try:
        for step in range(start_step, config.total_steps):
            lr = lr_at(step, config.total_steps, config.warmup_steps, config.peak_lr, config.lr_floor)
            descriptor = sample_task(rng, descriptors, config.seg_sampling_weight)
            objective = choose_objective(descriptor.task_kind, rng, config.mim_fraction_nonseg)
            ds = by_id[descriptor.dataset_id]
            batch = build_batch(
                ds, descriptor, objective, config.batch_size, rng, config,
                pool=pool, registry=registry, patch_size=model_cfg.patch_size,
            )
            loss = train_step(model, batch, objective, optimizer, config, lr, step, ds.name)
            log.write(json.dumps(
                {"step": step, "loss": loss, "lr": lr, "task": ds.name, "objective": objective},
                sort_keys=True,
            ) + "\n")
            done = step + 1
            if done % config.checkpoint_interval == 0 and done < config.total_steps:
                save_checkpoint(
                    out / "checkpoints" / f"step_{done:07d}.pt", model, done, optimizer,
                    extra={"rng_state": json.dumps(rng.bit_generator.state)},
                )
    finally:
        log.close()

    final = out / "checkpoints" / "final.pt"
    save_checkpoint(final, model, config.total_steps, optimizer,
                    extra={"rng_state": json.dumps(rng.bit_generator.state)})
    return final, metrics_path


def pretrain_mim(
    config: TrainConfig,
    slices: np.ndarray,
    out_dir,
    model_cfg: ModelConfig | None = None,
) -> tuple[Path, Path]:
    """Single-image masked pretraining on lone slices (no prompts).

    Produces a checkpoint whose weights load directly as ``fit``
    initialization.
    """
    slices = np.asarray(slices, dtype=np.float32)
    if slices.ndim != 3 or slices.shape[0] < 1:
        raise ValueError("pretraining corpus must be a non-empty (N, H, W) stack")
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    torch.manual_seed(config.seed)
    model_cfg = model_cfg or ModelConfig()
    model = PromptCompletionNet(model_cfg)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    p = model_cfg.patch_size
    n_tok = (slices.shape[1] // p) * (slices.shape[2] // p)

    model.train()
    with open(metrics_path, "w") as log:
        for step in range(config.total_steps):
            lr = lr_at(step, config.total_steps, config.warmup_steps, config.peak_lr, config.lr_floor)
            idx = rng.integers(0, slices.shape[0], size=config.batch_size)
            x_np = slices[idx][:, None]
            masks = np.stack(
                [sample_patch_mask(n_tok, config.mask_ratio, rng).as_bool()
                 for _ in range(config.batch_size)]
            )
            batch = {"objective": "mim", "inputs": x_np, "masks": masks}
            loss = train_step(model, batch, "mim", optimizer, config, lr, step, "pretrain")
            log.write(json.dumps(
                {"step": step, "loss": loss, "lr": lr, "task": "pretrain", "objective": "mim"},
                sort_keys=True,
            ) + "\n")

    final = out / "checkpoints" / "final.pt"
    save_checkpoint(final, model, config.total_steps, optimizer)
    return final, metrics_path


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = raw
    return values


def _coerce(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if "," in raw:
        return tuple(_coerce(part.strip()) for part in raw.split(","))
    return raw


def load_run_config(path, overrides: dict | None = None):
    """Resolve (TrainConfig, ModelConfig, extras) from a flat config file.

    Model keys are prefixed ``model.``; anything else lands in extras.
    CLI overrides take precedence over file values over defaults.
    """
    values = parse_config_text(Path(path).read_text())
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    train_kwargs, model_kwargs, extras = {}, {}, {}
    for key, raw in values.items():
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in _MODEL_KEYS:
                raise ValueError(f"unknown model config key {key!r}")
            model_kwargs[name] = _coerce(raw)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(raw)
        else:
            extras[key] = _coerce(raw)
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs), extras


def dump_resolved_config(train_cfg: TrainConfig, model_cfg: ModelConfig, extras: dict) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(train_cfg.to_dict().items())]
    for k, v in sorted(model_cfg.to_dict().items()):
        v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        lines.append(f"model.{k} = {v}")
    for k, v in sorted(extras.items()):
        v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
