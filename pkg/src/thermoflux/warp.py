"""Geometric image synthesis: rigid flow, inverse warping, flow reversal,
forward depth warping across the thermal/RGB rig and pose conjugation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import (DTYPE, CameraIntrinsics, DomainError, RigidPose, as_tensor,
                   backproject, bilinear_sample, pixel_grid, project, record_branch,
                   se3_compose, se3_inverse)


@dataclass(frozen=True)
class Rig:
    """Thermal + RGB camera pair; ``extrinsic`` maps thermal-frame points to the RGB frame."""
    K_T: CameraIntrinsics
    K_RGB: CameraIntrinsics
    extrinsic: RigidPose

    def to_dict(self) -> dict:
        return {"K_T": self.K_T.to_dict(), "K_RGB": self.K_RGB.to_dict(),
                "extrinsic": self.extrinsic.matrix().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Rig":
        return cls(CameraIntrinsics.from_dict(d["K_T"]), CameraIntrinsics.from_dict(d["K_RGB"]),
                   RigidPose.from_matrix(d["extrinsic"]))

    def scaled(self, s: float) -> "Rig":
        return Rig(self.K_T, self.K_RGB, self.extrinsic.scaled(s))


@dataclass
class FlowField:
    flow: torch.Tensor   # (2, H, W): dx, dy
    mask: torch.Tensor   # (H, W) bool


@dataclass(frozen=True)
class FlowReversalConfig:
    delta: float = 1.0
    footprint_radius: int = 1
    hole_eps: float = 1e-4

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("delta must be positive")
        if int(self.footprint_radius) != self.footprint_radius or self.footprint_radius < 1:
            raise DomainError("footprint_radius must be an integer >= 1")
        if not self.hole_eps > 0:
            raise DomainError("hole_eps must be positive")

    def to_dict(self) -> dict:
        return {"delta": self.delta, "footprint_radius": self.footprint_radius,
                "hole_eps": self.hole_eps}


@dataclass
class WarpResult:
    image: torch.Tensor                   # (C, H, W) synthesized target
    valid: torch.Tensor                   # (H, W) bool, the set V
    coords: torch.Tensor                  # (H, W, 2) sampling positions in the source
    projected_depth: torch.Tensor         # (H, W) z of the target point in the source frame
    sampled_depth: torch.Tensor | None = None   # (H, W) source depth at ``coords``


def _check_depth(D: torch.Tensor):
    if (D <= 0).any():
        raise DomainError("depth map must be strictly positive")


def reproject(D, T: RigidPose, K_src: CameraIntrinsics, K_dst: CameraIntrinsics):
    """Move every pixel of ``D`` (H, W) or (B, H, W) through ``T`` into ``K_dst``.

    Returns ``(pix, z, valid)`` with ``pix`` shaped (..., H, W, 2).
    """
    D = as_tensor(D)
    _check_depth(D)
    X = backproject(pixel_grid(*D.shape[-2:]), D, K_src)
    pix, z, valid = project(T.apply(X), K_dst)
    record_branch(valid)
    return pix, z, valid


def _flow_from_pix(pix, valid):
    flow = (pix - pixel_grid(*pix.shape[-3:-1])).movedim(-1, -3)
    return torch.where(valid.unsqueeze(-3), flow, torch.zeros((), dtype=flow.dtype))


def rigid_flow(D, T: RigidPose, K_src: CameraIntrinsics, K_dst: CameraIntrinsics) -> FlowField:
    pix, _, valid = reproject(D, T, K_src, K_dst)
    return FlowField(_flow_from_pix(pix, valid), valid)


def _sample_map(M, pix):
    """Bilinear sample of a single-channel map (H, W) or (B, H, W)."""
    return bilinear_sample(M.unsqueeze(-3), pix)[0].squeeze(-3)


def inverse_warp(I_src, D_tgt, T: RigidPose, K: CameraIntrinsics, D_src=None,
                 src_mask=None, K_src: CameraIntrinsics | None = None) -> WarpResult:
    """Synthesize the target view by sampling ``I_src`` where target pixels land.

    ``T`` maps target-frame points into the source frame.  When ``D_src`` is
    given its bilinear sample at the same positions is returned as
    ``sampled_depth``; ``src_mask`` (source pixels allowed to contribute) shrinks
    the valid set to samples whose whole bilinear footprint is unmasked.
    Batched inputs carry a leading batch axis on images, depths and ``T``.
    """
    I_src = as_tensor(I_src)
    D_tgt = as_tensor(D_tgt)
    if I_src.dim() == D_tgt.dim():
        I_src = I_src.unsqueeze(-3)
    K_src = K_src or K
    pix, z, front_inside = reproject(D_tgt, T, K, K_src)
    image, inside = bilinear_sample(I_src, pix)
    valid = inside & front_inside
    sampled = None
    if D_src is not None:
        sampled = _sample_map(as_tensor(D_src), pix)
    if src_mask is not None:
        cover = _sample_map(as_tensor(src_mask).to(DTYPE), pix)
        full = cover.detach() > 1 - 1e-9
        record_branch(full)
        valid = valid & full
    image = torch.where(valid.unsqueeze(-3), image, torch.zeros((), dtype=image.dtype))
    return WarpResult(image, valid, pix, z, sampled)


def _footprint_offsets(r: int):
    return [(dx, dy) for dy in range(-r + 1, r + 1) for dx in range(-r + 1, r + 1)]


def flow_reversal(F: FlowField, cfg: FlowReversalConfig = FlowReversalConfig(),
                  out_shape: tuple[int, int] | None = None) -> FlowField:
    """Splat ``-F`` onto the target grid with Gaussian weights and normalize.

    Each valid source pixel ``x`` lands at ``v = x + F(x)`` and contributes to
    the (2r)^2 integer pixels ``u`` surrounding ``v`` (for r = 1 the four
    corners of the cell containing ``v``), with weight
    ``exp(-|v - u|^2 / delta^2)``.  Target pixels whose accumulated weight is
    below ``hole_eps`` are holes.  Accepts (2, H, W) or (B, 2, H, W) flows.
    """
    flow = as_tensor(F.flow)
    mask = as_tensor(F.mask, dtype=torch.bool)
    batched = flow.dim() == 4
    if not batched:
        flow, mask = flow[None], mask[None]
    B, _, H, W = flow.shape
    Ho, Wo = out_shape or (H, W)
    bidx = torch.arange(B)[:, None, None].expand(B, H, W)[mask]
    src_flow = flow.permute(0, 2, 3, 1)[mask]          # (N, 2)
    v = pixel_grid(H, W).expand(B, H, W, 2)[mask] + src_flow
    base = torch.floor(v.detach())
    record_branch(base)
    offsets = torch.tensor(_footprint_offsets(int(cfg.footprint_radius)), dtype=DTYPE)
    u = base[:, None, :] + offsets[None]              # (N, P, 2)
    ok = (u[..., 0] >= 0) & (u[..., 0] <= Wo - 1) & (u[..., 1] >= 0) & (u[..., 1] <= Ho - 1)
    w = torch.exp(-((v[:, None, :] - u) ** 2).sum(-1) / cfg.delta**2)[ok]
    idx = (bidx[:, None] * (Ho * Wo) + u[..., 1].long() * Wo + u[..., 0].long())[ok]
    vals = (-src_flow)[:, None, :].expand(-1, offsets.shape[0], 2)[ok]
    n_out = B * Ho * Wo
    den = torch.zeros(n_out, dtype=DTYPE).index_add(0, idx, w)
    # weighted mean taken about a (detached) contributor value, so targets whose
    # contributors all agree reproduce that value exactly; the gradient is unchanged
    ref = torch.zeros(n_out, 2, dtype=DTYPE).scatter_reduce(
        0, idx[:, None].expand(-1, 2), vals.detach(), "amax", include_self=False)
    num = torch.zeros(n_out, 2, dtype=DTYPE).index_add(0, idx, (vals - ref[idx]) * w[:, None])
    filled = den.detach() >= cfg.hole_eps
    record_branch(filled)
    den_safe = torch.where(filled, den, torch.ones_like(den))
    out = torch.where(filled[:, None], ref + num / den_safe[:, None], torch.zeros((), dtype=DTYPE))
    out = out.reshape(B, Ho, Wo, 2).permute(0, 3, 1, 2)
    filled = filled.reshape(B, Ho, Wo)
    if not batched:
        return FlowField(out[0], filled[0])
    return FlowField(out, filled)


@dataclass
class ForwardDepthResult:
    depth: torch.Tensor          # (..., H, W) on the RGB grid; holes hold 1.0
    valid: torch.Tensor          # (..., H, W) bool, False on holes
    forward_flow: FlowField      # thermal -> RGB
    backward_flow: FlowField     # pseudo RGB -> thermal


def forward_warp_depth(D_T, extrinsic: RigidPose, K_T: CameraIntrinsics, K_RGB: CameraIntrinsics,
                       cfg: FlowReversalConfig = FlowReversalConfig(),
                       transform_depth_values: bool = True) -> ForwardDepthResult:
    """Carry a thermal depth map (H, W) or (B, H, W) onto the RGB image grid.

    With ``transform_depth_values`` the carried values are the z-coordinates
    of the thermal points expressed in the RGB frame; otherwise the thermal
    depths are copied verbatim.
    """
    D_T = as_tensor(D_T)
    pix, z_rgb, valid = reproject(D_T, extrinsic, K_T, K_RGB)
    fwd = FlowField(_flow_from_pix(pix, valid), valid)
    bwd = flow_reversal(fwd, cfg, out_shape=K_RGB.shape)
    values = z_rgb if transform_depth_values else D_T
    # carried values off the valid set are never sampled with weight; keep them finite
    values = torch.where(valid, values, torch.ones((), dtype=DTYPE))
    coords = pixel_grid(*K_RGB.shape) + bwd.flow.movedim(-3, -1)
    sampled, inside = bilinear_sample(values.unsqueeze(-3), coords)
    sampled = sampled.squeeze(-3)
    cover = _sample_map(valid.to(DTYPE), coords)
    full = cover.detach() > 1 - 1e-9
    record_branch(full)
    ok = bwd.mask & inside & full & (sampled.detach() > 0)
    depth = torch.where(ok, sampled, torch.ones((), dtype=DTYPE))
    return ForwardDepthResult(depth, ok, fwd, bwd)


def warp_pose(T_thermal: RigidPose, extrinsic: RigidPose) -> RigidPose:
    """Relative RGB-camera motion induced by a thermal-camera motion on a rigid rig."""
    return se3_compose(se3_compose(extrinsic, T_thermal), se3_inverse(extrinsic))
