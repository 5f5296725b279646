"""Raw 14-bit thermal frames and their normalized / colorized representations."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import DTYPE, DomainError, as_tensor

RAW_MAX = 2**14 - 1
T_MIN_C = -30.0
T_MAX_C = 150.0

# iron-style map; see ThermalRepresentationConfig
DEFAULT_COLORMAP = (
    (0.0, (0.0, 0.0, 0.0)),
    (0.25, (0.5, 0.0, 0.5)),
    (0.5, (1.0, 0.25, 0.0)),
    (0.75, (1.0, 0.75, 0.0)),
    (1.0, (1.0, 1.0, 1.0)),
)


class Strategy(str, enum.Enum):
    WHOLE = "WHOLE"
    MINMAX = "MINMAX"
    WIDE_CLIP = "WIDE_CLIP"
    NARROW_CLIP = "NARROW_CLIP"
    CLIP_COLORIZE = "CLIP_COLORIZE"


DEFAULT_CLIPS = {
    Strategy.WIDE_CLIP: (0.0, 50.0),
    Strategy.NARROW_CLIP: (10.0, 40.0),
    Strategy.CLIP_COLORIZE: (10.0, 40.0),
}


@dataclass(frozen=True)
class ThermalRepresentationConfig:
    strategy: Strategy = Strategy.CLIP_COLORIZE
    clip_lo: float | None = None
    clip_hi: float | None = None
    colormap: tuple = field(default=DEFAULT_COLORMAP)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        lo, hi = DEFAULT_CLIPS.get(self.strategy, (None, None))
        if self.clip_lo is None:
            object.__setattr__(self, "clip_lo", lo)
        if self.clip_hi is None:
            object.__setattr__(self, "clip_hi", hi)
        if self.clip_lo is not None and not self.clip_lo < self.clip_hi:
            raise DomainError("clip_lo must be below clip_hi")
        cmap = tuple((float(p), tuple(float(c) for c in rgb)) for p, rgb in self.colormap)
        pos = [p for p, _ in cmap]
        if len(cmap) < 2 or pos[0] != 0.0 or pos[-1] != 1.0:
            raise DomainError("colormap must start at 0 and end at 1")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise DomainError("colormap positions must be strictly increasing")
        object.__setattr__(self, "colormap", cmap)

    @property
    def channels(self) -> int:
        return 3 if self.strategy is Strategy.CLIP_COLORIZE else 1

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "clip_lo": self.clip_lo,
                "clip_hi": self.clip_hi,
                "colormap": [[p, list(rgb)] for p, rgb in self.colormap]}

    @classmethod
    def from_dict(cls, d: dict) -> "ThermalRepresentationConfig":
        kw = dict(d)
        if "colormap" in kw:
            kw["colormap"] = tuple((p, tuple(rgb)) for p, rgb in kw["colormap"])
        return cls(**kw)


def check_raw(raw) -> np.ndarray:
    raw = np.asarray(raw)
    if not np.issubdtype(raw.dtype, np.integer):
        if not np.all(raw == np.round(raw)):
            raise DomainError("raw thermal counts must be integers")
        raw = raw.astype(np.int64)
    if raw.size and (raw.min() < 0 or raw.max() > RAW_MAX):
        raise DomainError(f"raw thermal counts must lie in [0, {RAW_MAX}]")
    return raw


def raw_to_celsius(raw):
    """Linear low-gain mapping of counts [0, 16383] to [-30, 150] degC."""
    raw = check_raw(raw)
    return T_MIN_C + (T_MAX_C - T_MIN_C) * raw.astype(np.float64) / RAW_MAX


def celsius_to_raw(temp) -> np.ndarray:
    """Inverse of :func:`raw_to_celsius`, rounded and saturated to 14 bits."""
    r = np.round((np.asarray(temp, dtype=np.float64) - T_MIN_C) * RAW_MAX / (T_MAX_C - T_MIN_C))
    return np.clip(r, 0, RAW_MAX).astype(np.uint16)


def normalize(raw, cfg: ThermalRepresentationConfig) -> torch.Tensor:
    """Map a raw image (H, W) to (C, H, W) in [0, 1] according to ``cfg``."""
    raw = check_raw(raw)
    s = cfg.strategy
    if s is Strategy.WHOLE:
        v = raw.astype(np.float64) / RAW_MAX
    elif s is Strategy.MINMAX:
        lo, hi = raw.min(), raw.max()
        if hi == lo:
            v = np.zeros(raw.shape)
        else:
            v = (raw.astype(np.float64) - lo) / float(hi - lo)
    else:
        t = np.clip(raw_to_celsius(raw), cfg.clip_lo, cfg.clip_hi)
        v = (t - cfg.clip_lo) / (cfg.clip_hi - cfg.clip_lo)
    v = torch.as_tensor(v, dtype=DTYPE)[None]
    if s is Strategy.CLIP_COLORIZE:
        return colorize(v, cfg.colormap)
    return v


def colorize(v, colormap=DEFAULT_COLORMAP) -> torch.Tensor:
    """Piecewise-linear colormap lookup of a (1, H, W) or (H, W) image.

    At a control point the right-hand segment is used, which fixes the
    derivative there.
    """
    v = as_tensor(v)
    if v.dim() == 3:
        v = v[0]
    pos = torch.tensor([p for p, _ in colormap], dtype=DTYPE)
    rgb = torch.tensor([c for _, c in colormap], dtype=DTYPE)  # (K, 3)
    n_seg = len(pos) - 1
    seg = (torch.searchsorted(pos, v.detach().contiguous(), right=True) - 1).clamp(0, n_seg - 1)
    p0, p1 = pos[seg], pos[seg + 1]
    a = (v - p0) / (p1 - p0)
    c0 = rgb[seg]
    c1 = rgb[seg + 1]
    out = c0 + a[..., None] * (c1 - c0)
    return out.permute(2, 0, 1).contiguous()
