"""Image grids, pinhole cameras and SE(3) algebra.

Conventions used throughout the package:

* images are float64 tensors shaped ``(C, H, W)``; depth maps and masks are
  ``(H, W)``; flow fields are ``(2, H, W)`` holding ``(dx, dy)`` in pixels;
* pixel ``(i, j)`` sits at continuous coordinate ``(x=i, y=j)``, no half-pixel
  offset;
* ``RigidPose`` maps points from its source frame into its target frame,
  ``X_dst = R @ X_src + t``; ``compose(A, B)`` applies ``B`` first.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64
MIN_PROJ_DEPTH = 1e-6
# coordinates this far outside the image (pixels) still count as inside, so
# rounding noise in an identity reprojection does not punch holes at the border
BORDER_TOL = 1e-9


class DomainError(ValueError):
    """An input violates the mathematical domain of an operation."""


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# branch tracing
#
# Every piecewise decision taken on the way to a loss value (bilinear cell,
# validity, splat footprint, sign of an absolute value) is pushed here while a
# trace is active.  The finite-difference checker compares traces at x +/- h to
# detect perturbations that straddle a kink.

_BRANCH_TRACE: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "thermoflux_branch_trace", default=None)


@contextlib.contextmanager
def trace_branches():
    trace: list[bytes] = []
    token = _BRANCH_TRACE.set(trace)
    try:
        yield trace
    finally:
        _BRANCH_TRACE.reset(token)


def record_branch(decision: torch.Tensor) -> None:
    trace = _BRANCH_TRACE.get()
    if trace is not None:
        trace.append(decision.detach().to(torch.int64).cpu().numpy().tobytes())


# ---------------------------------------------------------------------------
# camera model

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def pixel_grid(height: int, width: int) -> torch.Tensor:
    """(H, W, 2) tensor of integer pixel coordinates ``(x, y)``."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=DTYPE),
                            torch.arange(width, dtype=DTYPE), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def backproject(pix, depth, K: CameraIntrinsics) -> torch.Tensor:
    """Lift pixels ``(..., 2)`` with depths ``(...)`` to camera points ``(..., 3)``."""
    pix = as_tensor(pix)
    depth = as_tensor(depth)
    if not torch.isfinite(pix).all():
        raise DomainError("pixel coordinates must be finite")
    if (depth <= 0).any():
        raise DomainError("depth must be positive")
    x = (pix[..., 0] - K.cx) * depth / K.fx
    y = (pix[..., 1] - K.cy) * depth / K.fy
    return torch.stack([x, y, depth], dim=-1)


def project(points, K: CameraIntrinsics):
    """Project camera points ``(..., 3)``.

    Returns ``(pix, z, valid)``; ``valid`` is False behind the camera
    (z <= 1e-6) or outside ``[0, W-1] x [0, H-1]``.  Invalid entries still
    get finite coordinates.
    """
    points = as_tensor(points)
    z = points[..., 2]
    front = z > MIN_PROJ_DEPTH
    z_safe = torch.where(front, z, torch.ones_like(z))
    u = K.fx * points[..., 0] / z_safe + K.cx
    v = K.fy * points[..., 1] / z_safe + K.cy
    pix = torch.stack([u, v], dim=-1)
    e = BORDER_TOL
    inside = (u >= -e) & (u <= K.width - 1 + e) & (v >= -e) & (v <= K.height - 1 + e)
    return pix, z, front & inside


# ---------------------------------------------------------------------------
# SE(3)

def hat(w: torch.Tensor) -> torch.Tensor:
    w = as_tensor(w)
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack([
        torch.stack([z, -w[2], w[1]]),
        torch.stack([w[2], z, -w[0]]),
        torch.stack([-w[1], w[0], z]),
    ])


def vee(W: torch.Tensor) -> torch.Tensor:
    return torch.stack([W[2, 1], W[0, 2], W[1, 0]])


@dataclass(frozen=True)
class RigidPose:
    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        R = as_tensor(self.rotation)
        t = as_tensor(self.translation)
        if R.dim() == 3:
            object.__setattr__(self, "rotation", R)
            object.__setattr__(self, "translation", t.reshape(R.shape[0], 3))
        else:
            object.__setattr__(self, "rotation", R.reshape(3, 3))
            object.__setattr__(self, "translation", t.reshape(3))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_matrix(cls, M) -> "RigidPose":
        M = as_tensor(M)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> torch.Tensor:
        top = torch.cat([self.rotation, self.translation[:, None]], dim=1)
        bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=top.dtype)
        return torch.cat([top, bottom], dim=0)

    @property
    def batched(self) -> bool:
        return self.rotation.dim() == 3

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform points shaped ``(..., 3)``; batched poses need ``(B, ..., 3)``."""
        if not self.batched:
            return points @ self.rotation.T + self.translation
        B = self.rotation.shape[0]
        flat = points.reshape(B, -1, 3)
        out = flat @ self.rotation.transpose(1, 2) + self.translation[:, None, :]
        return out.reshape(points.shape)

    @classmethod
    def stack(cls, poses) -> "RigidPose":
        return cls(torch.stack([p.rotation for p in poses]),
                   torch.stack([p.translation for p in poses]))

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return se3_compose(self, other)

    def inverse(self) -> "RigidPose":
        return se3_inverse(self)

    def detach(self) -> "RigidPose":
        return RigidPose(self.rotation.detach(), self.translation.detach())

    def scaled(self, s: float) -> "RigidPose":
        return RigidPose(self.rotation, self.translation * s)

    def rotation_angle(self) -> float:
        c = (float(torch.trace(self.rotation)) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))


def se3_compose(A: RigidPose, B: RigidPose) -> RigidPose:
    t = (A.rotation @ B.translation[..., None])[..., 0] + A.translation
    return RigidPose(A.rotation @ B.rotation, t)


def se3_inverse(P: RigidPose) -> RigidPose:
    Rt = P.rotation.transpose(-1, -2)
    return RigidPose(Rt, -(Rt @ P.translation[..., None])[..., 0])


SERIES_THETA2 = 1e-4


def _so3_coeffs(theta2: torch.Tensor):
    # A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3, with Taylor
    # branches near zero so autograd stays finite at the origin.
    # The series are used up to theta^2 = 1e-4, where the closed forms still
    # lose digits to cancellation; truncation error there is below 1e-21.
    small = theta2 < SERIES_THETA2
    t2 = torch.where(small, torch.ones_like(theta2), theta2)
    t = torch.sqrt(t2)
    s2 = theta2**2
    s3 = s2 * theta2
    A = torch.where(small, 1 - theta2 / 6 + s2 / 120 - s3 / 5040, torch.sin(t) / t)
    B = torch.where(small, 0.5 - theta2 / 24 + s2 / 720 - s3 / 40320, (1 - torch.cos(t)) / t2)
    C = torch.where(small, 1.0 / 6 - theta2 / 120 + s2 / 5040 - s3 / 362880,
                    (t - torch.sin(t)) / (t2 * t))
    return A, B, C


def se3_exp(xi) -> RigidPose:
    """Exponential map of a twist ``(omega, v)``."""
    xi = as_tensor(xi).reshape(6)
    w, v = xi[:3], xi[3:]
    W = hat(w)
    W2 = W @ W
    A, B, C = _so3_coeffs(w @ w)
    eye = torch.eye(3, dtype=xi.dtype)
    R = eye + A * W + B * W2
    V = eye + B * W + C * W2
    return RigidPose(R, V @ v)


def so3_log(R: torch.Tensor) -> torch.Tensor:
    R = as_tensor(R)
    cos_t = ((torch.trace(R) - 1) / 2).clamp(-1.0, 1.0)
    theta = torch.arccos(cos_t)
    if theta < 1e-6:
        # first-order inverse of Rodrigues
        return vee(R - R.T) / 2 * (1 + theta**2 / 6)
    if math.pi - float(theta) < 1e-6:
        warnings.warn("rotation at the cut locus (angle ~ pi); returning principal value",
                      RuntimeWarning, stacklevel=2)
        # axis from the dominant column of (R + I) / 2 = a a^T
        M = (R + torch.eye(3, dtype=R.dtype)) / 2
        k = int(torch.argmax(torch.diagonal(M)))
        axis = M[:, k] / torch.sqrt(M[k, k])
        return axis / torch.linalg.norm(axis) * theta
    return vee(R - R.T) * (theta / (2 * torch.sin(theta)))


def se3_log(P: RigidPose) -> torch.Tensor:
    w = so3_log(P.rotation)
    theta2 = w @ w
    if float(theta2) >= math.pi**2:
        warnings.warn("twist rotation norm >= pi; principal value returned",
                      RuntimeWarning, stacklevel=2)
    W = hat(w)
    A, B, _ = _so3_coeffs(theta2)
    t2 = float(theta2)
    if t2 < SERIES_THETA2:
        k = 1.0 / 12 + t2 / 720 + t2**2 / 30240 + t2**3 / 1209600
    else:
        k = (1 - A / (2 * B)) / theta2
    V_inv = torch.eye(3, dtype=P.rotation.dtype) - 0.5 * W + k * (W @ W)
    return torch.cat([w, V_inv @ P.translation])


def orthonormalize(R: torch.Tensor) -> torch.Tensor:
    """Closest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = torch.linalg.svd(as_tensor(R))
    D = torch.eye(3, dtype=U.dtype)
    D[2, 2] = torch.sign(torch.linalg.det(U @ Vt))
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# sampling

def bilinear_sample(img, coords):
    """Sample ``img`` at continuous positions ``coords``.

    ``img`` is (C, H, W) with ``coords`` (..., 2), or batched (B, C, H, W)
    with ``coords`` (B, ..., 2).  Returns ``(values, inside)`` with values
    shaped (C, ...) or (B, C, ...).  Positions outside ``[0, W-1] x [0, H-1]``
    (beyond ``BORDER_TOL``) sample to 0 and report ``inside=False``.  Differentiable with respect to
    both the image and the coordinates.
    """
    img = as_tensor(img)
    coords = as_tensor(coords)
    if img.dim() == 2:
        img = img[None]
    batched = img.dim() == 4
    if not batched:
        img, coords = img[None], coords[None]
    B, C, H, W = img.shape
    pts_shape = coords.shape[1:-1]
    x = coords[..., 0].reshape(B, -1)
    y = coords[..., 1].reshape(B, -1)
    e = BORDER_TOL
    inside = (x >= -e) & (x <= W - 1 + e) & (y >= -e) & (y <= H - 1 + e)
    # cell index clamped so that x == W-1 uses the last cell with weight 1;
    # non-finite positions are outside and land in cell 0
    x0 = torch.nan_to_num(torch.floor(x.detach()), nan=0.0).clamp(0, max(W - 2, 0))
    y0 = torch.nan_to_num(torch.floor(y.detach()), nan=0.0).clamp(0, max(H - 2, 0))
    record_branch(inside)
    record_branch(x0)
    record_branch(y0)
    ax = torch.where(inside, x, x0) - x0
    ay = torch.where(inside, y, y0) - y0
    x0i = x0.long()
    y0i = y0.long()
    dx = 1 if W > 1 else 0
    dy = W if H > 1 else 0
    base = y0i * W + x0i + (torch.arange(B) * (H * W))[:, None]
    idx = torch.stack([base, base + dx, base + dy, base + dx + dy], dim=1)   # (B, 4, N)
    wts = torch.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], dim=1)
    wts = wts * inside[:, None]
    flat = img.permute(1, 0, 2, 3).reshape(C, -1)
    taps = flat[:, idx]                                   # (C, B, 4, N)
    val = (taps * wts).sum(2).transpose(0, 1)             # (B, C, N)
    val = val.reshape((B, C) + pts_shape)
    inside = inside.reshape((B,) + pts_shape)
    if not batched:
        return val[0], inside[0]
    return val, inside
