"""Single-channel canvas encoding of task outputs.

Segmentation labels are mapped onto a single grayscale canvas so that every
task (segmentation, synthesis, denoising, inpainting) shares one output
space.  Three schemes are supported:

* binary      - one 0/1 canvas per foreground class
* predefined  - a fixed global value per (dataset, class), from a registry
* random      - per-sample values drawn from a pool, shared between the
                prompt label and the task label

Non-segmentation tasks bypass colorization: their canvases are raw
intensity images in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Default pool: evenly spaced values with separation DELTA, background stays 0.
DELTA = 0.05
SCHEMES = ("binary", "predefined", "random")


def default_value_pool(delta: float = DELTA, lo: float = 0.1, hi: float = 1.0) -> np.ndarray:
    """Evenly spaced admissible canvas values in [lo, hi]."""
    n = int(round((hi - lo) / delta)) + 1
    return np.round(np.linspace(lo, hi, n), 6)


@dataclass
class LabelMap:
    """Integer per-pixel class ids, 0 = background."""

    pixels: np.ndarray
    dataset_id: int = 0
    class_count: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if not np.issubdtype(self.pixels.dtype, np.integer):
            raise ValueError("label pixels must be integers")
        if self.pixels.ndim != 2:
            raise ValueError("label pixels must be a 2-D grid")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        lo, hi = int(self.pixels.min()), int(self.pixels.max())
        if lo < 0 or hi > self.class_count:
            raise ValueError(
                f"label ids must lie in [0, {self.class_count}], found [{lo}, {hi}]"
            )

    def foreground_classes(self) -> list[int]:
        ids = np.unique(self.pixels)
        return [int(c) for c in ids if c != 0]


@dataclass(frozen=True)
class Palette:
    """Injective class-id -> canvas-value mapping for one sample."""

    mapping: dict[int, float]
    scheme: str
    seed: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        vals = list(self.mapping.values())
        if len(set(vals)) != len(vals):
            raise ValueError("palette values must be distinct")
        for c, v in self.mapping.items():
            if c <= 0:
                raise ValueError("palette keys are foreground class ids (> 0)")
            if not (0.0 < v <= 1.0):
                raise ValueError(f"palette value for class {c} outside (0, 1]: {v}")

    @property
    def separation(self) -> float:
        """Minimum pairwise gap between palette values, background 0 included."""
        vals = sorted([0.0] + list(self.mapping.values()))
        return float(min(b - a for a, b in zip(vals, vals[1:])))

    def apply(self, label: LabelMap | np.ndarray) -> np.ndarray:
        """Paint a label map with this palette; background stays 0."""
        pix = label.pixels if isinstance(label, LabelMap) else np.asarray(label)
        canvas = np.zeros(pix.shape, dtype=np.float64)
        for c, v in self.mapping.items():
            canvas[pix == c] = v
        return canvas

    def to_json(self) -> str:
        obj = {
            "scheme": self.scheme,
            "mapping": {str(c): v for c, v in sorted(self.mapping.items())},
            "seed": self.seed,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Palette":
        obj = json.loads(text)
        mapping = {int(c): float(v) for c, v in obj["mapping"].items()}
        return cls(mapping=mapping, scheme=obj["scheme"], seed=obj.get("seed"))


@dataclass
class Canvas:
    """H x W grid of values in [0, 1]; palette present for segmentation."""

    pixels: np.ndarray
    palette: Palette | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("canvas must be a 2-D grid")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("canvas values must lie in [0, 1]")
        if self.palette is not None:
            allowed = np.array([0.0] + list(self.palette.mapping.values()))
            if not np.isin(self.pixels, allowed).all():
                raise ValueError("segmentation canvas contains non-palette values")


def assign_predefined_value(
    k: int, n: int, sizes: list[int], strategy: str = "as_printed"
) -> int:
    """Global integer value for class n of dataset k.

    ``as_printed`` uses sum(i * N_i for i < k) + n; ``cumulative`` uses the
    plain offset sum(N_i for i < k) + n.  Both are injective (verified at
    registry build time); the weighted variant wastes value range but is
    kept as the default behaviour.
    """
    if k < 1:
        raise ValueError(f"dataset index must be >= 1, got {k}")
    if n < 1:
        raise ValueError(f"class index must be >= 1, got {n}")
    if len(sizes) < k - 1:
        raise ValueError(f"sizes must cover datasets 1..{k - 1}, got {len(sizes)}")
    if len(sizes) >= k and n > sizes[k - 1]:
        raise ValueError(f"class index {n} out of range for dataset {k} (N={sizes[k - 1]})")
    if strategy == "as_printed":
        return sum((i + 1) * sizes[i] for i in range(k - 1)) + n
    if strategy == "cumulative":
        return sum(sizes[: k - 1]) + n
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class ClassRegistry:
    """All known (dataset, class) pairs and their predefined canvas values.

    Values are assigned by ``assign_predefined_value`` and normalized into
    (0, 1] by the global maximum, so the registry composition (not just the
    datasets actually trained on) fixes how crowded predefined canvas
    values are.
    """

    dataset_sizes: list[int]
    names: dict[tuple[int, int], str] = field(default_factory=dict)
    strategy: str = "as_printed"

    def __post_init__(self):
        if not self.dataset_sizes or any(s < 1 for s in self.dataset_sizes):
            raise ValueError("dataset_sizes must be non-empty positive counts")
        self.entries = []
        seen = {}
        for k in range(1, len(self.dataset_sizes) + 1):
            for n in range(1, self.dataset_sizes[k - 1] + 1):
                v = assign_predefined_value(k, n, self.dataset_sizes, self.strategy)
                if v <= 0:
                    raise ValueError(f"non-positive predefined value for ({k}, {n})")
                if v in seen:
                    raise ValueError(
                        f"predefined value collision: ({k}, {n}) and {seen[v]} -> {v}"
                    )
                seen[v] = (k, n)
                name = self.names.get((k, n), f"ds{k}/class{n}")
                self.entries.append((k, n, name, v))
        self.global_max = max(seen)

    def value(self, k: int, n: int) -> int:
        return assign_predefined_value(k, n, self.dataset_sizes, self.strategy)

    def canvas_value(self, k: int, n: int) -> float:
        return self.value(k, n) / self.global_max

    def palette(self, k: int, class_ids: list[int] | None = None) -> Palette:
        """Predefined palette for dataset k (all its classes by default)."""
        if class_ids is None:
            class_ids = list(range(1, self.dataset_sizes[k - 1] + 1))
        mapping = {int(n): self.canvas_value(k, n) for n in class_ids}
        return Palette(mapping=mapping, scheme="predefined")


def colorize_binary(label: LabelMap) -> list[tuple[int, Canvas]]:
    """Split a multi-class label into one 0/1 canvas per present class."""
    out = []
    for c in label.foreground_classes():
        pal = Palette(mapping={c: 1.0}, scheme="binary")
        out.append((c, Canvas((label.pixels == c).astype(np.float64), pal)))
    return out


def sample_palette(
    class_ids, rng: np.random.Generator, value_pool, seed: int | None = None
) -> Palette:
    """Random palette over the given classes, values drawn without replacement."""
    class_ids = sorted(int(c) for c in class_ids)
    pool = np.asarray(value_pool, dtype=np.float64)
    if pool.ndim != 1 or len(np.unique(pool)) != pool.size:
        raise ValueError("value pool must be a 1-D list of distinct values")
    if pool.size < len(class_ids):
        raise ValueError(
            f"value pool exhausted: need {len(class_ids)} values, pool has {pool.size}"
        )
    chosen = rng.choice(pool, size=len(class_ids), replace=False)
    mapping = {c: float(v) for c, v in zip(class_ids, chosen)}
    return Palette(mapping=mapping, scheme="random", seed=seed)


def colorize_random(
    label: LabelMap, rng: np.random.Generator, value_pool
) -> tuple[Canvas, Palette]:
    """Random colorization of one label map.

    The returned palette must be reused for the paired label of the same
    sample so that identical class ids carry identical canvas values.
    """
    palette = sample_palette(label.foreground_classes(), rng, value_pool)
    return Canvas(palette.apply(label), palette), palette


def decode_canvas(
    canvas: Canvas | np.ndarray, palette: Palette, dataset_id: int = 0
) -> LabelMap:
    """Snap each canvas pixel to the nearest palette value (or background 0).

    Ties resolve toward background first, then toward the lowest class id,
    so decoding is deterministic for pixels exactly midway between values.
    """
    if not palette.mapping:
        raise ValueError("palette is empty")
    pix = canvas.pixels if isinstance(canvas, Canvas) else np.asarray(canvas, dtype=np.float64)
    ids = [0] + sorted(palette.mapping)
    values = np.array([0.0] + [palette.mapping[c] for c in ids[1:]])
    # argmin returns the first minimum, so the [background, ascending ids]
    # ordering realizes the tie rule.
    dist = np.abs(pix[None, :, :] - values[:, None, None])
    nearest = np.argmin(dist, axis=0)
    decoded = np.asarray(ids, dtype=np.int64)[nearest]
    return LabelMap(decoded, dataset_id=dataset_id, class_count=max(ids))
