"""Patch-embedding ViT encoder with a two-conv decoder head.

The encoder is a stack of plain pre-norm transformer blocks over patch
tokens with fixed 2-D sine/cosine positional embeddings, so the same
weights run on any patch lattice (single slices, 2x2 grids, longer visual
sequences).  Content at placeholder positions is replaced by a learned
mask token before positional terms are added.  The decoder fuses four
tapped block outputs by per-tap linear projection and summation, reshapes
to the lattice, applies two 3x3 convolutions and emits per-patch pixels
through a sigmoid, keeping predictions inside the canvas range [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seqbuild import VisualSequence, ar_terms, term_layout, element_pixel_region

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    tap_layers: tuple = (3, 6, 9, 12)
    decoder_channels: int = 192
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if len(self.tap_layers) != 4:
            raise ValueError("tap_layers must name exactly 4 encoder blocks")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ValueError("tap_layers must be strictly increasing")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.depth:
            raise ValueError("tap_layers must lie in [1, depth]")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_pos_embed(dim: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 2-D sine/cosine positional embedding for a rows x cols lattice."""
    if dim % 4:
        raise ValueError("embed dim must be divisible by 4 for 2-D sin/cos terms")
    half = dim // 2

    def axis_embed(positions: np.ndarray) -> np.ndarray:
        omega = 1.0 / (10000 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
        angles = np.outer(positions, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    r = axis_embed(np.arange(rows, dtype=np.float64))
    c = axis_embed(np.arange(cols, dtype=np.float64))
    grid_r = np.repeat(r, cols, axis=0)
    grid_c = np.tile(c, (rows, 1))
    return np.concatenate([grid_r, grid_c], axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if mask is not None:
            attn = attn.masked_fill(~mask, float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class PromptCompletionNet(nn.Module):
    """Encoder + decoder operating on single-channel patch lattices."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Conv2d(1, d, kernel_size=p, stride=p)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.tap_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(4))
        self.tap_projs = nn.ModuleList(nn.Linear(d, d) for _ in range(4))
        self.dec_conv1 = nn.Conv2d(d, cfg.decoder_channels, kernel_size=3, padding=1)
        self.dec_conv2 = nn.Conv2d(cfg.decoder_channels, p * p, kernel_size=3, padding=1)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self._pos_cache: dict = {}

    def pos_embed(self, rows: int, cols: int) -> torch.Tensor:
        key = (rows, cols)
        if key not in self._pos_cache:
            pe = sincos_pos_embed(self.cfg.embed_dim, rows, cols)
            self._pos_cache[key] = torch.from_numpy(pe)
        ref = self.mask_token
        return self._pos_cache[key].to(dtype=ref.dtype, device=ref.device)

    def _lattice(self, x: torch.Tensor) -> tuple[int, int]:
        p = self.cfg.patch_size
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError("input must be (B, 1, H, W)")
        if x.shape[2] % p or x.shape[3] % p:
            raise ValueError(f"input {tuple(x.shape[2:])} not divisible by patch size {p}")
        return x.shape[2] // p, x.shape[3] // p

    def _prepare_mask(self, mask, n_tokens: int, device) -> torch.Tensor | None:
        if mask is None:
            return None
        m = torch.as_tensor(np.asarray(mask), dtype=torch.bool, device=device)
        if m.shape != (n_tokens, n_tokens):
            raise ValueError(f"attention mask must be ({n_tokens}, {n_tokens}), got {tuple(m.shape)}")
        return m

    def encode(self, x, attn_mask=None, placeholder=None) -> list[torch.Tensor]:
        """Tapped token features; the last entry is the deepest tap."""
        rows, cols = self._lattice(x)
        t = rows * cols
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        if placeholder is not None:
            ph = torch.as_tensor(np.asarray(placeholder), dtype=torch.bool, device=x.device)
            if ph.ndim == 1:
                ph = ph.unsqueeze(0).expand(x.shape[0], -1)
            tokens = torch.where(ph.unsqueeze(-1), self.mask_token.expand_as(tokens), tokens)
        tokens = tokens + self.pos_embed(rows, cols).unsqueeze(0)
        mask = self._prepare_mask(attn_mask, t, x.device)
        feats = []
        h = tokens
        for i, blk in enumerate(self.blocks):
            h = blk(h, mask)
            if (i + 1) in self.cfg.tap_layers:
                feats.append(h)
        return feats

    def decode_head(self, feats: list[torch.Tensor], lattice: tuple[int, int]) -> torch.Tensor:
        """Fuse four feature maps and emit pixels in [0, 1]."""
        if len(feats) != 4:
            raise ValueError("decoder expects four feature maps")
        shapes = {tuple(f.shape) for f in feats}
        if len(shapes) != 1:
            raise ValueError("feature maps must share token count and channels")
        rows, cols = lattice
        fused = sum(proj(norm(f)) for f, norm, proj in zip(feats, self.tap_norms, self.tap_projs))
        b, t, d = fused.shape
        if t != rows * cols:
            raise ValueError("feature token count does not match lattice")
        grid = fused.transpose(1, 2).reshape(b, d, rows, cols)
        h = F.gelu(self.dec_conv1(grid))
        h = self.dec_conv2(h)
        return torch.sigmoid(F.pixel_shuffle(h, self.cfg.patch_size))

    def forward(self, x, attn_mask=None, placeholder=None) -> torch.Tensor:
        lattice = self._lattice(x)
        feats = self.encode(x, attn_mask, placeholder)
        return self.decode_head(feats, lattice)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Per-element smooth-L1: 0.5 d^2/beta below the beta kink, |d| - beta/2 above."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.smooth_l1_loss(pred, target, reduction="none", beta=beta)


def expand_patch_mask(mask, lattice: tuple[int, int], patch_size: int) -> torch.Tensor:
    """Per-patch booleans -> per-pixel booleans on the assembled canvas."""
    rows, cols = lattice
    m = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    flat = m.reshape(-1, rows, cols) if m.ndim > 1 else m.reshape(1, rows, cols)
    px = flat.repeat_interleave(patch_size, dim=1).repeat_interleave(patch_size, dim=2)
    return px if m.ndim > 1 else px[0]


def masked_loss(pred, target, mask, beta: float, patch_size: int) -> torch.Tensor:
    """Mean smooth-L1 over pixels of masked/supervised patches only."""
    b, _, h, w = pred.shape
    lattice = (h // patch_size, w // patch_size)
    px = expand_patch_mask(mask, lattice, patch_size).to(pred.device)
    if px.ndim == 2:
        px = px.unsqueeze(0).expand(b, -1, -1)
    if not px.any():
        raise ValueError("mask selects no patches")
    per_pixel = smooth_l1(pred.squeeze(1), target.squeeze(1), beta)
    return per_pixel[px].mean()


def run_sequence(model: PromptCompletionNet, seq: VisualSequence) -> dict[int, np.ndarray]:
    """Predictions at every supervised element of a visual sequence.

    Runs one forward pass per conditional-generation term; the prediction
    for element 2i is computed from elements 1..2i-1 plus the placeholder,
    so outputs at earlier labels are independent of later elements.
    """
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    out = {}
    for target_idx, _count in ar_terms(seq):
        canvas, attn, ph = term_layout(seq, target_idx)
        x = torch.as_tensor(canvas, dtype=dtype, device=device).unsqueeze(0).unsqueeze(0)
        with torch.no_grad():
            pred = model(x, attn, ph)
        rs, cs = element_pixel_region(seq, target_idx)
        out[target_idx] = pred[0, 0].cpu().numpy()[rs, cs]
    return out


def save_checkpoint(path, model: PromptCompletionNet, step: int, optimizer=None, extra=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "step": int(step),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[PromptCompletionNet, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {version!r} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = ModelConfig(**payload["model_config"])
    model = PromptCompletionNet(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload
