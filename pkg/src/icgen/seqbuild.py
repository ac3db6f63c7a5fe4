"""Training/inference layouts for conditional image generation.

Two layouts are built here:

* the 2x2 quadrant grid used by masked-image-modeling training (prompt
  image UL, prompt label UR, task image LL, task label LR), with uniformly
  random patch masks, and
* the visual sequence used by image-level autoregression, where each image
  is one element of [P_x1, P_y1, ..., X, Y], attention is causal at image
  granularity and supervision falls on label elements only.

Elements of a sequence are laid out on an (n+1)-row by 2-column canvas of
equally sized images (row i holds pair i, the last row holds the task
image/label), so the n=1 sequence occupies exactly the quadrant grid and
both objectives share patch geometry and positional structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUADRANT_MAP = {"UL": "prompt-image", "UR": "prompt-label", "LL": "task-image", "LR": "task-label"}


def _check_same_shape(arrays) -> tuple[int, int]:
    shapes = {np.asarray(a).shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"all elements must share H x W, got shapes {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2:
        raise ValueError("elements must be 2-D single-channel images")
    return shape


@dataclass
class QuadrantGrid:
    """2H x 2W single-channel grid with the fixed quadrant placement."""

    pixels: np.ndarray
    quadrant_map: dict = None

    def __post_init__(self):
        if self.quadrant_map is None:
            self.quadrant_map = dict(QUADRANT_MAP)
        h, w = self.pixels.shape
        if h % 2 or w % 2:
            raise ValueError("grid sides must be even")

    @property
    def element_shape(self) -> tuple[int, int]:
        return self.pixels.shape[0] // 2, self.pixels.shape[1] // 2

    def quadrant(self, name: str) -> np.ndarray:
        h, w = self.element_shape
        r = {"UL": (0, 0), "UR": (0, w), "LL": (h, 0), "LR": (h, w)}[name]
        return self.pixels[r[0] : r[0] + h, r[1] : r[1] + w]


def compose_grid(p_img, p_lbl, t_img, t_lbl) -> QuadrantGrid:
    """Concatenate the four images into the square training grid."""
    _check_same_shape([p_img, p_lbl, t_img, t_lbl])
    pixels = np.block([[np.asarray(p_img), np.asarray(p_lbl)],
                       [np.asarray(t_img), np.asarray(t_lbl)]])
    return QuadrantGrid(pixels)


def extract_quadrants(grid: QuadrantGrid):
    """Inverse of compose_grid; bit-exact."""
    return tuple(grid.quadrant(q) for q in ("UL", "UR", "LL", "LR"))


@dataclass
class PatchMask:
    """Set of masked patch indices over a patch lattice."""

    masked: np.ndarray
    ratio: float
    total: int

    def __post_init__(self):
        self.masked = np.asarray(sorted(int(i) for i in self.masked), dtype=np.int64)
        if self.masked.size and (self.masked.min() < 0 or self.masked.max() >= self.total):
            raise ValueError("mask indices out of range")
        if len(set(self.masked.tolist())) != self.masked.size:
            raise ValueError("mask indices must be distinct")

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.total, dtype=bool)
        m[self.masked] = True
        return m


def sample_patch_mask(total_patches: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Uniform random patch subset of size round(ratio * total)."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if total_patches < 4:
        raise ValueError("patch lattice too small to mask")
    count = int(round(ratio * total_patches))
    masked = rng.choice(total_patches, size=count, replace=False)
    return PatchMask(masked=masked, ratio=ratio, total=total_patches)


ROLE_IMAGE = "image"
ROLE_LABEL = "label"


@dataclass
class VisualSequence:
    """Role-tagged elements plus per-patch attention/supervision masks.

    Token order is row-major over the full (n+1)H x 2W pixel canvas at
    ``patch_size`` granularity.  ``attention_mask[i, j]`` is True when
    patch i may attend to patch j; causality at image granularity means
    element(j) <= element(i).  ``supervision_mask`` is True on patches of
    label elements.  ``placeholder`` marks patches whose content is absent
    (the query element at inference).
    """

    elements: list[np.ndarray]
    roles: list[str]
    patch_size: int
    attention_mask: np.ndarray
    supervision_mask: np.ndarray
    placeholder: np.ndarray
    element_of_patch: np.ndarray

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def element_shape(self) -> tuple[int, int]:
        return np.asarray(self.elements[0]).shape

    @property
    def lattice_shape(self) -> tuple[int, int]:
        h, w = self.element_shape
        rows = self.n_elements // 2
        return rows * h // self.patch_size, 2 * w // self.patch_size

    def element_patches(self, idx: int) -> np.ndarray:
        """Flat token indices belonging to element idx."""
        return np.nonzero(self.element_of_patch == idx)[0]

    def label_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == ROLE_LABEL]

    def assemble(self, upto: int | None = None) -> np.ndarray:
        """Pixel canvas of the first `upto` elements (all by default).

        `upto` must complete whole rows; absent/None elements render as 0.
        """
        count = self.n_elements if upto is None else upto
        if count % 2:
            raise ValueError("layout rows hold two elements; upto must be even")
        h, w = self.element_shape
        canvas = np.zeros((count // 2 * h, 2 * w), dtype=np.float64)
        for i in range(count):
            el = self.elements[i]
            if el is None:
                continue
            r, c = divmod(i, 2)
            canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = el
        return canvas


def _element_grid_ids(n_rows: int, hp: int, wp: int) -> np.ndarray:
    """Element id of every patch in a row-major (n_rows*hp) x (2*wp) lattice."""
    rows = np.arange(n_rows * hp)[:, None] // hp
    cols = np.arange(2 * wp)[None, :] // wp
    return (rows * 2 + cols).ravel()


def build_ar_sequence(
    pairs: list[tuple], t_img, t_lbl=None, patch_size: int = 16
) -> VisualSequence:
    """Visual sequence [P_x1, P_y1, ..., X, Y] with causal attention.

    With ``t_lbl=None`` (inference) the final element is a query
    placeholder that may attend to every preceding element and to itself.
    """
    if len(pairs) < 1:
        raise ValueError("at least one prompt pair is required")
    elements, roles = [], []
    for img, lbl in pairs:
        elements += [np.asarray(img), np.asarray(lbl)]
        roles += [ROLE_IMAGE, ROLE_LABEL]
    elements.append(np.asarray(t_img))
    roles.append(ROLE_IMAGE)
    elements.append(None if t_lbl is None else np.asarray(t_lbl))
    roles.append(ROLE_LABEL)

    h, w = _check_same_shape([e for e in elements if e is not None])
    if h % patch_size or w % patch_size:
        raise ValueError(f"element shape {h}x{w} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    n_rows = len(elements) // 2
    elem_of = _element_grid_ids(n_rows, hp, wp)

    attention = elem_of[None, :] <= elem_of[:, None]
    supervision = (elem_of % 2).astype(bool)
    placeholder = np.zeros_like(supervision)
    if t_lbl is None:
        placeholder = elem_of == len(elements) - 1

    return VisualSequence(
        elements=elements,
        roles=roles,
        patch_size=patch_size,
        attention_mask=attention,
        supervision_mask=supervision,
        placeholder=placeholder,
        element_of_patch=elem_of,
    )


def ar_terms(seq: VisualSequence) -> list[tuple[int, int]]:
    """Per-label conditional-generation terms of a sequence.

    Each supervised element 2i (1-based) yields one term: a forward pass
    over the first 2i elements with the label's own content replaced by
    the placeholder embedding.  Returns (target_element_index,
    element_count_included) per term, in sequence order.
    """
    return [(j, j + 1) for j in seq.label_indices()]


def term_layout(seq: VisualSequence, target_idx: int):
    """Pixel canvas, attention submask and placeholder vector for one term.

    The canvas covers elements 0..target_idx with the target zeroed out
    (its patches are placeholder-embedded, so content is ignored).  The
    attention submask is the leading block of the sequence mask, which is
    valid because token order is row-major and rows fill in element order.
    """
    if seq.roles[target_idx] != ROLE_LABEL:
        raise ValueError("AR terms target label elements")
    count = target_idx + 1
    elements = [seq.elements[i] if i < target_idx else None for i in range(count)]
    sub = VisualSequence(
        elements=elements,
        roles=seq.roles[:count],
        patch_size=seq.patch_size,
        attention_mask=np.empty((0, 0), dtype=bool),
        supervision_mask=np.empty(0, dtype=bool),
        placeholder=np.empty(0, dtype=bool),
        element_of_patch=np.empty(0, dtype=np.int64),
    )
    canvas = sub.assemble()
    hp = seq.element_shape[0] // seq.patch_size
    wp = seq.element_shape[1] // seq.patch_size
    elem_of = _element_grid_ids(count // 2, hp, wp)
    n_tok = elem_of.size
    attention = seq.attention_mask[:n_tok, :n_tok]
    placeholder = elem_of == target_idx
    return canvas, attention, placeholder


def element_pixel_region(seq: VisualSequence, idx: int) -> tuple[slice, slice]:
    """Pixel-space slices of element idx inside the assembled canvas."""
    h, w = seq.element_shape
    r, c = divmod(idx, 2)
    return slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w)


def quadrant_patch_mask(element_shape: tuple[int, int], patch_size: int, quadrant: str = "LR") -> np.ndarray:
    """Boolean per-patch mask selecting one quadrant of a 2x2 grid."""
    h, w = element_shape
    hp, wp = h // patch_size, w // patch_size
    elem_of = _element_grid_ids(2, hp, wp)
    idx = {"UL": 0, "UR": 1, "LL": 2, "LR": 3}[quadrant]
    return elem_of == idx
