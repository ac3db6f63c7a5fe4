"""Sample sourcing: slice preprocessing, synthetic suites, manifest IO.

The synthetic generators provide desk-scale analogues of the four task
families.  Every instance is a small volume whose shapes deform smoothly
from slice to slice, so slice position carries information and
position-matched prompt selection is meaningful.  All generators are
deterministic functions of their spec's seed.

Real data enters as pre-extracted 2-D slices (16-bit grayscale PNG) listed
in a JSON manifest; 3-D container parsing is a documented external
conversion step and stays out of scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

TASK_KINDS = ("segmentation", "synthesis", "inpainting", "denoising")


class ManifestError(ValueError):
    """Schema violations, missing files or misaligned slice/label lists."""


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def ct_window(raw: np.ndarray, lo: float = -100.0, hi: float = 200.0) -> np.ndarray:
    """Clamp a signed intensity grid to [lo, hi] and rescale into [0, 1]."""
    if hi <= lo:
        raise ValueError(f"window bounds must satisfy hi > lo, got [{lo}, {hi}]")
    clipped = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    return (clipped - lo) / (hi - lo)


def resize_crop(
    img: np.ndarray,
    resize_to: int = 512,
    crop: int = 448,
    rng: np.random.Generator | None = None,
    paired: np.ndarray | None = None,
):
    """Resize then randomly crop, with identical offsets for a paired label.

    Images are resized bilinearly, labels nearest-neighbor (no new ids).
    """
    if crop > resize_to:
        raise ValueError("crop must not exceed the resized side")
    rng = rng or np.random.default_rng()
    resized = cv2.resize(
        np.asarray(img, dtype=np.float32), (resize_to, resize_to), interpolation=cv2.INTER_LINEAR
    )
    top, left = (int(v) for v in rng.integers(0, resize_to - crop + 1, size=2))
    out_img = resized[top : top + crop, left : left + crop]
    if paired is None:
        return out_img, None
    lbl = cv2.resize(
        np.asarray(paired), (resize_to, resize_to), interpolation=cv2.INTER_NEAREST
    )
    return out_img, lbl[top : top + crop, left : left + crop]


# ---------------------------------------------------------------------------
# Volumes and synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    """Ordered slice stack; labels for segmentation, targets for generation."""

    slices: np.ndarray
    instance_id: str
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ValueError("a volume is a non-empty (N, H, W) stack")
        for name in ("labels", "targets"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != self.slices.shape:
                raise ValueError(f"{name} must align with slices")

    def __len__(self) -> int:
        return self.slices.shape[0]


@dataclass
class SynthSpec:
    task_kind: str
    image_size: int = 64
    class_count: int = 3
    noise_sigma: float = 0.1
    transform_id: int = 0
    hole_count: int = 2
    hole_size: tuple = (10, 18)
    slice_count: int = 12
    seed: int = 0
    instance_id: str = ""

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.image_size < 32:
            raise ValueError("image size must be at least 32")
        if self.slice_count < 1:
            raise ValueError("slice_count must be >= 1")
        if self.task_kind == "segmentation":
            cells = int(np.ceil(np.sqrt(self.class_count)))
            if self.image_size // cells < 16:
                raise ValueError(
                    f"{self.class_count} classes do not fit a {self.image_size}px image"
                )


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)


def _track(rng: np.random.Generator, lo: float, hi: float, wobble: float, n: int) -> np.ndarray:
    """Smooth per-slice parameter track: lerp between endpoints plus a sine."""
    a, b = rng.uniform(lo, hi, size=2)
    phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.5)
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return a + (b - a) * s + wobble * (hi - lo) * np.sin(2 * np.pi * freq * s + phase)


_SHAPE_KINDS = ("ellipse", "rectangle", "diamond")


def _rasterize(kind: str, size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "ellipse":
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(x - cx) <= rx) & (np.abs(y - cy) <= ry)
    if kind == "diamond":
        return np.abs(x - cx) / rx + np.abs(y - cy) / ry <= 1.0
    raise ValueError(kind)


def _shape_scene(spec: SynthSpec, rng: np.random.Generator):
    """Shared scene machinery: shapes over a textured background.

    Each class keeps a fixed intensity band and shape kind across the whole
    dataset, and each instance confines each class to one cell of a coarse
    grid so shapes never occlude each other.
    """
    size, n, classes = spec.image_size, spec.slice_count, spec.class_count
    grid = int(np.ceil(np.sqrt(classes)))
    cell = size // grid
    cell_ids = rng.permutation(grid * grid)[:classes]
    bands = np.linspace(0.45, 0.95, classes) if classes > 1 else np.array([0.8])
    bands = bands + rng.uniform(-0.02, 0.02, size=classes)

    tex_a, tex_b = _smooth_field(rng, size), _smooth_field(rng, size)
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = np.zeros((n, size, size), dtype=np.int64)

    tracks = []
    for c in range(classes):
        gy, gx = divmod(int(cell_ids[c]), grid)
        r_max = 0.38 * cell
        r_lo = 0.6 * r_max
        tracks.append(
            dict(
                kind=_SHAPE_KINDS[c % len(_SHAPE_KINDS)],
                cx=_track(rng, gx * cell + r_max + 1, (gx + 1) * cell - r_max - 1, 0.3, n),
                cy=_track(rng, gy * cell + r_max + 1, (gy + 1) * cell - r_max - 1, 0.3, n),
                rx=_track(rng, r_lo, r_max, 0.15, n),
                ry=_track(rng, r_lo, r_max, 0.15, n),
            )
        )

    for t in range(n):
        s = t / max(n - 1, 1)
        background = 0.05 + 0.25 * ((1 - s) * tex_a + s * tex_b)
        img = background.astype(np.float32)
        lbl = np.zeros((size, size), dtype=np.int64)
        for c, tr in enumerate(tracks):
            mask = _rasterize(tr["kind"], size, tr["cx"][t], tr["cy"][t], tr["rx"][t], tr["ry"][t])
            img[mask] = bands[c]
            lbl[mask] = c + 1
        images[t] = np.clip(img, 0.0, 1.0)
        labels[t] = lbl
    return images, labels


_SYNTH_TRANSFORMS = {
    0: lambda x: 0.05 + 0.9 * np.power(x, 1.8),
    1: lambda x: 0.05 + 0.9 / (1.0 + np.exp(-6.0 * (x - 0.5))),
}


def gen_synthetic(spec: SynthSpec) -> Volume:
    """Deterministic synthetic volume for one task family.

    segmentation -> (slices, labels); denoising -> noisy inputs with clean
    targets; synthesis -> inputs with a fixed invertible intensity remap as
    the other modality; inpainting -> inputs with zeroed rectangular holes
    and intact targets.
    """
    rng = np.random.default_rng(spec.seed)
    images, labels = _shape_scene(spec, rng)
    iid = spec.instance_id or f"{spec.task_kind}-{spec.seed}"

    if spec.task_kind == "segmentation":
        return Volume(images, iid, labels=labels)

    if spec.task_kind == "denoising":
        clean = (0.25 + 0.5 * images).astype(np.float32)
        noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape).astype(np.float32)
        return Volume(np.clip(noisy, 0.0, 1.0), iid, targets=clean)

    if spec.task_kind == "synthesis":
        if spec.transform_id not in _SYNTH_TRANSFORMS:
            raise ValueError(f"unknown transform id {spec.transform_id}")
        remapped = _SYNTH_TRANSFORMS[spec.transform_id](images).astype(np.float32)
        return Volume(images, iid, targets=remapped)

    # inpainting: rectangular holes drift smoothly with slice position
    target = (0.1 + 0.85 * images).astype(np.float32)
    holed = target.copy()
    size, n = spec.image_size, spec.slice_count
    lo, hi = spec.hole_size
    for _ in range(spec.hole_count):
        cx = _track(rng, hi, size - hi, 0.2, n)
        cy = _track(rng, hi, size - hi, 0.2, n)
        hw = _track(rng, lo / 2, hi / 2, 0.1, n)
        hh = _track(rng, lo / 2, hi / 2, 0.1, n)
        for t in range(n):
            r0, r1 = int(max(cy[t] - hh[t], 0)), int(min(cy[t] + hh[t], size))
            c0, c1 = int(max(cx[t] - hw[t], 0)), int(min(cx[t] + hw[t], size))
            holed[t, r0:r1, c0:c1] = 0.0
    return Volume(holed, iid, targets=target)


@dataclass
class SliceDataset:
    """A set of volumes sharing one task kind; the unit training/eval sees."""

    name: str
    task_kind: str
    volumes: list
    dataset_id: int = 1
    class_count: int | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "segmentation" and self.class_count is None:
            raise ValueError("segmentation datasets need class_count")


def build_synthetic_suite(
    task_kind: str,
    n_instances: int,
    seed: int,
    image_size: int = 64,
    class_count: int = 3,
    slice_range: tuple = (8, 20),
    name: str | None = None,
    dataset_id: int = 1,
    **spec_kwargs,
) -> SliceDataset:
    """A dataset of deterministic synthetic volumes with varying slice counts."""
    rng = np.random.default_rng(seed)
    volumes = []
    for i in range(n_instances):
        n_slices = int(rng.integers(slice_range[0], slice_range[1] + 1))
        spec = SynthSpec(
            task_kind=task_kind,
            image_size=image_size,
            class_count=class_count,
            slice_count=n_slices,
            seed=int(rng.integers(0, 2**31 - 1)),
            instance_id=f"{task_kind}{dataset_id}-{i:03d}",
            **spec_kwargs,
        )
        volumes.append(gen_synthetic(spec))
    return SliceDataset(
        name=name or f"synthetic-{task_kind}",
        task_kind=task_kind,
        volumes=volumes,
        dataset_id=dataset_id,
        class_count=class_count if task_kind == "segmentation" else None,
    )


# ---------------------------------------------------------------------------
# Manifest-backed datasets (16-bit grayscale PNG on disk)
# ---------------------------------------------------------------------------

PNG_MAX = 65535


def write_png16(path, array: np.ndarray, is_label: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if is_label:
        data = np.asarray(array).astype(np.uint16)
    else:
        data = np.round(np.clip(np.asarray(array), 0.0, 1.0) * PNG_MAX).astype(np.uint16)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"failed to write {path}")


def read_png16(path, is_label: bool = False) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ManifestError(f"missing or unreadable image: {path}")
    if is_label:
        return data.astype(np.int64)
    return data.astype(np.float32) / PNG_MAX


@dataclass
class DatasetManifest:
    root: Path
    name: str
    modality: str
    task_kind: str
    instances: list
    class_count: int | None = None
    normalization: str = "none"

    def volume(self, index: int) -> Volume:
        inst = self.instances[index]
        slices = np.stack([read_png16(self.root / p) for p in inst["slices"]])
        if self.normalization == "volume_minmax":
            lo, hi = slices.min(), slices.max()
            if hi > lo:
                slices = (slices - lo) / (hi - lo)
        labels = targets = None
        if inst.get("labels"):
            labels = np.stack([read_png16(self.root / p, is_label=True) for p in inst["labels"]])
        if inst.get("targets"):
            targets = np.stack([read_png16(self.root / p) for p in inst["targets"]])
        return Volume(slices, inst["instance_id"], labels=labels, targets=targets)

    def volumes(self) -> list:
        return [self.volume(i) for i in range(len(self.instances))]

    def iter_samples(self):
        """Lazily yield (instance_id, slice_index) in manifest order."""
        for inst in self.instances:
            for i in range(len(inst["slices"])):
                yield inst["instance_id"], i

    def to_dataset(self, dataset_id: int = 1) -> SliceDataset:
        return SliceDataset(
            name=self.name,
            task_kind=self.task_kind,
            volumes=self.volumes(),
            dataset_id=dataset_id,
            class_count=self.class_count,
        )


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    for key in ("name", "modality", "task_kind", "instances"):
        if key not in raw:
            raise ManifestError(f"manifest {path} missing required key {key!r}")
    if raw["task_kind"] not in TASK_KINDS:
        raise ManifestError(f"manifest {path}: unknown task kind {raw['task_kind']!r}")
    if raw["task_kind"] == "segmentation" and not raw.get("class_count"):
        raise ManifestError(f"manifest {path}: segmentation manifests need class_count")

    root = path.parent
    for inst in raw["instances"]:
        iid = inst.get("instance_id", "<missing id>")
        if "slices" not in inst or not inst["slices"]:
            raise ManifestError(f"instance {iid}: empty slice list")
        for aux in ("labels", "targets"):
            if inst.get(aux) is not None and len(inst[aux]) != len(inst["slices"]):
                raise ManifestError(
                    f"instance {iid}: {aux} list length {len(inst[aux])} "
                    f"!= slice list length {len(inst['slices'])}"
                )
        for rel in inst["slices"] + (inst.get("labels") or []) + (inst.get("targets") or []):
            if not (root / rel).is_file():
                raise ManifestError(f"instance {iid}: missing file {root / rel}")

    return DatasetManifest(
        root=root,
        name=raw["name"],
        modality=raw["modality"],
        task_kind=raw["task_kind"],
        instances=raw["instances"],
        class_count=raw.get("class_count"),
        normalization=raw.get("normalization", "none"),
    )


def write_dataset(dataset: SliceDataset, out_dir, modality: str = "synthetic") -> Path:
    """Materialize a dataset as PNGs plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    instances = []
    for vol in dataset.volumes:
        entry = {"instance_id": vol.instance_id, "slices": [], "labels": None, "targets": None}
        for i in range(len(vol)):
            rel = f"{vol.instance_id}/slice_{i:03d}.png"
            write_png16(out / rel, vol.slices[i])
            entry["slices"].append(rel)
        if vol.labels is not None:
            entry["labels"] = []
            for i in range(len(vol)):
                rel = f"{vol.instance_id}/label_{i:03d}.png"
                write_png16(out / rel, vol.labels[i], is_label=True)
                entry["labels"].append(rel)
        if vol.targets is not None:
            entry["targets"] = []
            for i in range(len(vol)):
                rel = f"{vol.instance_id}/target_{i:03d}.png"
                write_png16(out / rel, vol.targets[i])
                entry["targets"].append(rel)
        instances.append(entry)
    manifest = {
        "name": dataset.name,
        "modality": modality,
        "task_kind": dataset.task_kind,
        "class_count": dataset.class_count,
        "normalization": "none",
        "instances": instances,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
