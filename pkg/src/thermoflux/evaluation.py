"""Depth error/accuracy metrics and 5-frame ATE / RE pose metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import DomainError

DEPTH_CAPS = {"indoor": 10.0, "outdoor": 80.0}
DEPTH_COLUMNS = ("AbsRel", "SqRel", "RMS", "RMSlog", "δ<1.25", "δ<1.25²", "δ<1.25³")
WINDOW = 5


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    a1: float
    a2: float
    a3: float

    def row(self) -> tuple:
        return (self.abs_rel, self.sq_rel, self.rms, self.rms_log, self.a1, self.a2, self.a3)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class PoseMetrics:
    ate_mean: float
    ate_std: float
    re_mean: float   # rad per frame
    re_std: float
    n_windows: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'ATE':>16} {'RE':>16}"
        row = f"{self.ate_mean:.4f} ± {self.ate_std:.4f}".rjust(16) + " " + \
              f"{self.re_mean:.4f} ± {self.re_std:.4f}".rjust(16)
        return head + "\n" + row + "\n"


def depth_metrics(pred, gt, cap: float = DEPTH_CAPS["indoor"], median_scale: bool = True,
                  mask=None) -> DepthMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = (gt > 0) & (gt <= cap)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DomainError("no valid ground-truth pixels")
    p, g = pred[valid], gt[valid]
    if not np.all(p > 0):
        raise DomainError("predicted depth must be positive on valid pixels")
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        rms=float(np.sqrt(np.mean(err**2))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25**2)),
        a3=float(np.mean(ratio < 1.25**3)),
    )


def mean_depth_metrics(pairs, **kw) -> DepthMetrics:
    """Average of per-image metrics over ``(pred, gt)`` pairs."""
    rows = np.array([depth_metrics(p, g, **kw).row() for p, g in pairs])
    if rows.size == 0:
        raise DomainError("no depth maps to evaluate")
    return DepthMetrics(*(float(v) for v in rows.mean(0)))


def depth_table(rows: dict[str, DepthMetrics] | DepthMetrics) -> str:
    """Plain-text table in the usual seven-column order."""
    if isinstance(rows, DepthMetrics):
        rows = {"": rows}
    w = max([len(k) for k in rows] + [0])
    lines = [" " * w + "".join(f"{c:>10}" for c in DEPTH_COLUMNS)]
    for name, m in rows.items():
        lines.append(name.ljust(w) + "".join(f"{v:>10.3f}" for v in m.row()))
    return "\n".join(lines) + "\n"


def _rot_angle(R) -> float:
    # atan2 form stays accurate near 0 where acos of the trace loses half the digits
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    c = (np.trace(R) - 1.0) / 2.0
    return math.atan2(s, c)


def _as_poses(seq) -> np.ndarray:
    P = np.asarray(seq, dtype=np.float64)
    if P.ndim != 3 or P.shape[1:] != (4, 4):
        raise DomainError("pose sequence must be a list of 4x4 matrices")
    return P


def window_errors(pred, gt) -> tuple[float, float]:
    """ATE and RE of a single snippet of camera-to-world poses."""
    pred, gt = _as_poses(pred), _as_poses(gt)
    ip, ig = np.linalg.inv(pred[0]), np.linalg.inv(gt[0])
    pa = np.einsum("ij,njk->nik", ip, pred)
    ga = np.einsum("ij,njk->nik", ig, gt)
    tp, tg = pa[:, :3, 3], ga[:, :3, 3]
    denom = float(np.sum(tp * tp))
    s = float(np.sum(tp * tg)) / denom if denom > 0 else 1.0
    ate = math.sqrt(float(np.mean(np.sum((s * tp - tg) ** 2, axis=1))))
    re = []
    for i in range(len(pa) - 1):
        rp = np.linalg.inv(pa[i]) @ pa[i + 1]
        rg = np.linalg.inv(ga[i]) @ ga[i + 1]
        re.append(_rot_angle(rg[:3, :3].T @ rp[:3, :3]))
    return ate, float(np.mean(re))


def pose_metrics_5frame(pred, gt, window: int = WINDOW) -> PoseMetrics:
    """Scale-aligned ATE and RE over all windows of ``window`` consecutive poses (stride 1)."""
    pred, gt = _as_poses(pred), _as_poses(gt)
    if len(pred) != len(gt):
        raise DomainError("pose sequences differ in length")
    if len(pred) < window:
        raise DomainError(f"need at least {window} poses, got {len(pred)}")
    errs = np.array([window_errors(pred[k:k + window], gt[k:k + window])
                     for k in range(len(pred) - window + 1)])
    return PoseMetrics(float(errs[:, 0].mean()), float(errs[:, 0].std()),
                       float(errs[:, 1].mean()), float(errs[:, 1].std()), len(errs))
