"""Reconstruction, geometric-consistency and total multi-spectral objectives."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .core import DTYPE, DomainError, RigidPose, as_tensor, record_branch, se3_inverse
from .thermal import ThermalRepresentationConfig, normalize
from .warp import FlowReversalConfig, Rig, forward_warp_depth, inverse_warp, warp_pose

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
TERM_NAMES = ("rec_T", "gc_T", "rec_RGB", "gc_RGB", "smooth")
# residuals this small are zero up to rounding; |x| then takes its
# minimum-norm subgradient (0) instead of the sign of the rounding noise
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma_T: float = 0.15
    gamma_RGB: float = 0.85
    lambda_T: float = 0.25
    lambda_RGB: float = 1.0
    use_smoothness: bool = False
    smooth_weight: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_T", "lambda_RGB", "smooth_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        for name in ("gamma_T", "gamma_RGB"):
            if not 0 <= getattr(self, name) <= 1:
                raise DomainError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


INDOOR = LossWeights()
OUTDOOR = LossWeights(gamma_T=0.85, gamma_RGB=0.30, lambda_T=1.0, lambda_RGB=0.1)
PRESETS = {"indoor": INDOOR, "outdoor": OUTDOOR}


@dataclass(frozen=True)
class LossConfig:
    """Non-weight knobs of the snippet objective."""
    thermal: ThermalRepresentationConfig = field(default_factory=ThermalRepresentationConfig)
    flow_reversal: FlowReversalConfig = field(default_factory=FlowReversalConfig)
    transform_depth_values: bool = True
    detach_mask: bool = True

    def to_dict(self) -> dict:
        return {"thermal": self.thermal.to_dict(), "flow_reversal": self.flow_reversal.to_dict(),
                "transform_depth_values": self.transform_depth_values,
                "detach_mask": self.detach_mask}


def _same_shape(A, B):
    if A.shape != B.shape:
        raise DomainError(f"shape mismatch {tuple(A.shape)} vs {tuple(B.shape)}")


def _box3(t: torch.Tensor) -> torch.Tensor:
    """3x3 mean of a padded (..., H+2, W+2) stack."""
    t = t[..., :, :-2] + t[..., :, 1:-1] + t[..., :, 2:]
    t = t[..., :-2, :] + t[..., 1:-1, :] + t[..., 2:, :]
    return t / 9.0


def ssim_map(A, B) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 uniform windows (reflection padded), channel mean.

    Accepts (H, W), (C, H, W) or (N, C, H, W); the channel axis is reduced.
    """
    A, B = as_tensor(A), as_tensor(B)
    _same_shape(A, B)
    if A.dim() == 2:
        A, B = A[None], B[None]
    H, W = A.shape[-2:]
    stats = torch.stack([A, B, A * A, B * B, A * B])
    padded = F.pad(stats.reshape(-1, H, W), (1, 1, 1, 1), mode="reflect")
    mu_x, mu_y, exx, eyy, exy = _box3(padded).reshape(stats.shape)
    sxx = exx - mu_x**2
    syy = eyy - mu_y**2
    sxy = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean(-3)


def _abs0(x, scale=1.0):
    dead = x.detach().abs() <= ZERO_TOL * scale
    record_branch(dead)
    return torch.where(dead, torch.zeros((), dtype=x.dtype), x.abs())


def reconstruction_map(I, I_hat, gamma: float) -> torch.Tensor:
    """gamma * (1 - SSIM) / 2 + (1 - gamma) * |I - I_hat| (channel mean), per pixel."""
    I, I_hat = as_tensor(I), as_tensor(I_hat)
    _same_shape(I, I_hat)
    if I.dim() == 2:
        I, I_hat = I[None], I_hat[None]
    diff = I - I_hat
    record_branch(diff > 0)
    l1 = _abs0(diff).mean(-3)
    if gamma == 0:
        return l1
    return gamma * ((1 - ssim_map(I, I_hat)) / 2).clamp(0, 1) + (1 - gamma) * l1


def masked_reduce(L_map, M, V):
    """Mean of ``M * L_map`` over the valid set ``V``.

    Returns ``(value, empty)``; an empty valid set gives ``(0, True)``.  With a
    leading batch axis both are per-item tensors.
    """
    L_map, M = as_tensor(L_map), as_tensor(M)
    V = as_tensor(V, dtype=torch.bool)
    _same_shape(L_map, M)
    _same_shape(L_map, V)
    zero = torch.zeros((), dtype=DTYPE)
    n = V.sum((-2, -1))
    total = torch.where(V, M * L_map, zero).sum((-2, -1))
    empty = n == 0
    value = torch.where(empty, zero, total / n.clamp(min=1))
    if value.dim() == 0:
        return value, bool(empty)
    return value, empty


def depth_inconsistency(D_warped, D_comp, V) -> torch.Tensor:
    """|D~ - D'| / (D~ + D') on V, zero elsewhere."""
    D_warped, D_comp = as_tensor(D_warped), as_tensor(D_comp)
    V = as_tensor(V, dtype=torch.bool)
    if (D_warped[V] <= 0).any() or (D_comp[V] <= 0).any():
        raise DomainError("depths must be positive on the valid set")
    one = torch.ones((), dtype=DTYPE)
    a = torch.where(V, D_warped, one)
    b = torch.where(V, D_comp, one)
    record_branch((a - b > 0) & V)
    diff = _abs0(a - b, (a + b).detach()) / (a + b)
    return torch.where(V, diff, torch.zeros((), dtype=DTYPE))


def geometric_consistency(D_diff, V):
    """Mean depth inconsistency over V; returns ``(loss, M, empty)`` with M = 1 - D_diff."""
    D_diff = as_tensor(D_diff)
    loss, empty = masked_reduce(D_diff, torch.ones_like(D_diff), V)
    return loss, 1 - D_diff, empty


def smoothness_loss(D, I) -> torch.Tensor:
    """Edge-aware first-order smoothness of the mean-normalized depth."""
    D, I = as_tensor(D), as_tensor(I)
    if I.dim() == 2:
        I = I[None]
    if I.shape[1:] != D.shape:
        raise DomainError("depth and image sizes differ")
    d = D / D.mean()
    dx = d[:, 1:] - d[:, :-1]
    dy = d[1:, :] - d[:-1, :]
    ix = (I[:, :, 1:] - I[:, :, :-1]).abs().mean(0)
    iy = (I[:, 1:, :] - I[:, :-1, :]).abs().mean(0)
    record_branch(dx > 0)
    record_branch(dy > 0)
    return (dx.abs() * torch.exp(-ix)).mean() + (dy.abs() * torch.exp(-iy)).mean()


@dataclass
class SnippetImages:
    """Loss-ready images of a three-frame snippet."""
    thermal: list          # (C, H, W) representation used in the thermal loss
    rgb: list              # (3, H, W)


def prepare_images(frames, thermal_cfg: ThermalRepresentationConfig) -> SnippetImages:
    if isinstance(frames, SnippetImages):
        return frames
    return SnippetImages([normalize(f.thermal_raw, thermal_cfg) for f in frames],
                         [as_tensor(f.rgb) for f in frames])


@dataclass
class LossReport:
    total: torch.Tensor
    terms: dict            # name -> scalar tensor
    empty: dict            # name -> number of directed pairs with an empty valid set
    maps: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out

    def to_json(self) -> str:
        body = self.as_floats()
        body["empty_valid_set"] = dict(self.empty)
        return json.dumps(body, indent=2, sort_keys=True)


def combine_terms(terms: dict, W: LossWeights) -> torch.Tensor:
    total = (W.lambda_T * (W.alpha * terms["rec_T"] + W.beta * terms["gc_T"])
             + W.lambda_RGB * (W.alpha * terms["rec_RGB"] + W.beta * terms["gc_RGB"]))
    if W.use_smoothness:
        total = total + W.smooth_weight * terms["smooth"]
    return total


def _branch(I_tgt, I_src, D_tgt, D_src, T, K, gamma, detach_mask,
            tgt_mask=None, src_mask=None):
    w = inverse_warp(I_src, D_tgt, T, K, D_src=D_src, src_mask=src_mask)
    V = w.valid if tgt_mask is None else w.valid & tgt_mask
    D_diff = depth_inconsistency(w.sampled_depth, w.projected_depth, V)
    gc, M, empty = geometric_consistency(D_diff, V)
    if detach_mask:
        M = M.detach()
    # both images are zeroed off V so SSIM windows straddling its border agree
    zero = torch.zeros((), dtype=DTYPE)
    Vc = V.unsqueeze(-3)
    rec_map = reconstruction_map(torch.where(Vc, I_tgt, zero), torch.where(Vc, w.image, zero), gamma)
    rec, _ = masked_reduce(rec_map, M, V)
    return rec, gc, empty, {"rec_map": rec_map.detach(), "D_diff": D_diff.detach(),
                            "M": M.detach(), "V": V}


# directed pairs (target, source) of a three-frame snippet, both directions
_TARGETS = [0, 1, 1, 2]
_SOURCES = [1, 0, 2, 1]


def snippet_loss(frames, depths, poses, W: LossWeights, rig: Rig,
                 cfg: LossConfig = LossConfig(), keep_maps: bool = False) -> LossReport:
    """Total objective over a three-frame snippet, both temporal directions.

    ``depths`` are the three thermal-frame depth maps; ``poses[k]`` maps
    thermal frame k points into thermal frame k+1.  The four directed pair
    losses of each term are averaged.
    """
    if len(depths) != 3 or len(poses) != 2:
        raise DomainError("a snippet holds three depth maps and two relative poses")
    imgs = prepare_images(frames, cfg.thermal)
    D = torch.stack([as_tensor(d) for d in depths])
    if (D <= 0).any():
        raise DomainError("depth maps must be strictly positive")
    T = RigidPose.stack([poses[0], se3_inverse(poses[0]), poses[1], se3_inverse(poses[1])])
    tgt, src = _TARGETS, _SOURCES

    th = torch.stack(imgs.thermal)
    rec_T, gc_T, empty_T, m_T = _branch(th[tgt], th[src], D[tgt], D[src], T, rig.K_T,
                                        W.gamma_T, cfg.detach_mask)

    fwd = forward_warp_depth(D, rig.extrinsic, rig.K_T, rig.K_RGB, cfg.flow_reversal,
                             cfg.transform_depth_values)
    rgb = torch.stack(imgs.rgb)
    T_rgb = warp_pose(T, rig.extrinsic)
    rec_RGB, gc_RGB, empty_RGB, m_RGB = _branch(
        rgb[tgt], rgb[src], fwd.depth[tgt], fwd.depth[src], T_rgb, rig.K_RGB, W.gamma_RGB,
        cfg.detach_mask, tgt_mask=fwd.valid[tgt], src_mask=fwd.valid[src])

    terms = {"rec_T": rec_T.mean(), "gc_T": gc_T.mean(),
             "rec_RGB": rec_RGB.mean(), "gc_RGB": gc_RGB.mean()}
    n_T, n_RGB = int(empty_T.sum()), int(empty_RGB.sum())
    empty = {"rec_T": n_T, "gc_T": n_T, "rec_RGB": n_RGB, "gc_RGB": n_RGB}
    if W.use_smoothness:
        terms["smooth"] = torch.stack([smoothness_loss(d, I)
                                       for d, I in zip(D, imgs.thermal)]).mean()
    else:
        terms["smooth"] = torch.zeros((), dtype=DTYPE)
    report = LossReport(combine_terms(terms, W), terms, empty)
    if keep_maps:
        report.maps = {"pairs": list(zip(tgt, src)), "thermal": m_T, "rgb": m_RGB,
                       "rgb_depth": fwd.depth.detach(), "rgb_valid": fwd.valid}
    return report


def relative_poses_from_absolute(cam_to_world) -> list[RigidPose]:
    """Relative motions ``T_{k -> k+1}`` from camera-to-world poses."""
    out = []
    for a, b in zip(cam_to_world, cam_to_world[1:]):
        out.append(se3_inverse(b) @ a)
    return out
