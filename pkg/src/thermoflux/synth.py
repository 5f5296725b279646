"""Deterministic ray-cast RGB-T scenes with exact depth, pose and flow.

Geometry is a list of textured rectangles (boxes expand to six faces).  Each
face carries an albedo field (RGB) and a temperature field (degC) defined on
its local metric coordinates ``(s, t)``.  Cameras follow a list of
thermal-camera-to-world poses; the RGB camera rides along through the rig
extrinsic.

With ``affine`` texture fields, fronto-parallel planes and a translation-only
trajectory (including the rig), every rendered image is exactly affine in
pixel coordinates, so bilinear resampling reproduces other views exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BORDER_TOL, CameraIntrinsics, DomainError, RigidPose
from .thermal import celsius_to_raw
from .warp import FlowField, Rig

import torch


# ---------------------------------------------------------------------------
# textures

def _texture_params(spec: dict, channels: int, rng: np.random.Generator) -> dict:
    kind = spec.get("type", "constant")
    base = np.broadcast_to(np.asarray(spec.get("base", 0.5), dtype=np.float64), (channels,)).copy()
    out = {"type": kind, "base": base}
    if kind == "affine":
        out["grad_s"] = np.broadcast_to(np.asarray(spec.get("grad_s", 0.0), float), (channels,)).copy()
        out["grad_t"] = np.broadcast_to(np.asarray(spec.get("grad_t", 0.0), float), (channels,)).copy()
    elif kind == "sines":
        n = int(spec.get("n_waves", 6))
        lo, hi = spec.get("wavelength", (0.4, 1.2))
        amp = float(spec.get("amplitude", 0.3))
        lam = rng.uniform(lo, hi, size=(channels, n))
        ang = rng.uniform(0, math.pi, size=(channels, n))
        out["k"] = np.stack([np.cos(ang), np.sin(ang)], -1) * (2 * math.pi / lam)[..., None]
        out["phase"] = rng.uniform(0, 2 * math.pi, size=(channels, n))
        out["amp"] = amp / n * rng.uniform(0.5, 1.5, size=(channels, n))
    elif kind != "constant":
        raise DomainError(f"unknown texture type {kind!r}")
    return out


def _texture_eval(p: dict, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Returns (channels, N)."""
    val = np.repeat(p["base"][:, None], s.size, axis=1)
    if p["type"] == "affine":
        val = val + p["grad_s"][:, None] * s[None] + p["grad_t"][:, None] * t[None]
    elif p["type"] == "sines":
        arg = p["k"][..., 0][..., None] * s + p["k"][..., 1][..., None] * t + p["phase"][..., None]
        val = val + (p["amp"][..., None] * np.sin(arg)).sum(1)
    return val


# ---------------------------------------------------------------------------
# geometry

def _rotvec_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    th = np.linalg.norm(r)
    if th < 1e-15:
        return np.eye(3)
    k = r / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * Kx + (1 - math.cos(th)) * Kx @ Kx


@dataclass
class _Face:
    center: np.ndarray
    e_s: np.ndarray
    e_t: np.ndarray
    half: tuple
    albedo: dict
    temperature: dict
    velocity: np.ndarray
    owner: int

    @property
    def normal(self):
        return np.cross(self.e_s, self.e_t)


def _faces(layout: list[dict], rng: np.random.Generator) -> list[_Face]:
    faces = []
    for idx, item in enumerate(layout):
        R = _rotvec_to_matrix(item.get("rotation", (0, 0, 0)))
        c = np.asarray(item["center"], dtype=np.float64)
        vel = np.asarray(item.get("velocity", (0, 0, 0)), dtype=np.float64)
        albedo = _texture_params(item.get("albedo", {}), 3, rng)
        temp = _texture_params(item.get("temperature", {"base": 20.0}), 1, rng)
        kind = item.get("kind", "plane")
        if kind == "plane":
            size = item.get("size", (math.inf, math.inf))
            faces.append(_Face(c, R[:, 0], R[:, 1], (size[0] / 2, size[1] / 2), albedo, temp, vel, idx))
        elif kind == "box":
            sx, sy, sz = (np.asarray(item["size"], dtype=np.float64) / 2)
            ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]
            for n_ax, a_ax, b_ax, dn, da, db in (
                    (ez, ex, ey, sz, sx, sy), (-ez, ey, ex, sz, sy, sx),
                    (ex, ey, ez, sx, sy, sz), (-ex, ez, ey, sx, sz, sy),
                    (ey, ez, ex, sy, sz, sx), (-ey, ex, ez, sy, sx, sz)):
                faces.append(_Face(c + n_ax * dn, a_ax, b_ax, (da, db), albedo, temp, vel, idx))
        else:
            raise DomainError(f"unknown layout kind {kind!r}")
    return faces


def _inside_boxes(layout, point, frame):
    for item in layout:
        if item.get("kind") != "box":
            continue
        R = _rotvec_to_matrix(item.get("rotation", (0, 0, 0)))
        c = np.asarray(item["center"], float) + frame * np.asarray(item.get("velocity", (0, 0, 0)), float)
        local = R.T @ (point - c)
        if np.all(np.abs(local) < np.asarray(item["size"], float) / 2):
            return True
    return False


def _cast(faces, origin, dirs, frame):
    """First hit along rays ``origin + lam * dirs``; returns (lam, face index, s, t)."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    S = np.zeros(n)
    T = np.zeros(n)
    for fi, f in enumerate(faces):
        c = f.center + frame * f.velocity
        nrm = f.normal
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((c - origin) @ nrm) / denom
        ok = np.abs(denom) > 1e-12
        lam = np.where(ok, lam, np.inf)
        p = origin + lam[:, None] * dirs
        s = (p - c) @ f.e_s
        t = (p - c) @ f.e_t
        hit = ok & (lam > 1e-9) & (np.abs(s) <= f.half[0]) & (np.abs(t) <= f.half[1]) & (lam < best)
        best = np.where(hit, lam, best)
        which = np.where(hit, fi, which)
        S = np.where(hit, s, S)
        T = np.where(hit, t, T)
    return best, which, S, T


# ---------------------------------------------------------------------------
# scene spec and rendering

@dataclass
class SceneSpec:
    layout: list
    trajectory: list                       # thermal camera-to-world 4x4 matrices
    rig: Rig
    seed: int = 0
    thermal_noise: float = 0.0            # std of additive Gaussian count noise
    name: str = "custom"

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "thermal_noise": self.thermal_noise,
                "layout": _jsonable(self.layout),
                "trajectory": [np.asarray(P, float).tolist() for P in self.trajectory],
                "rig": self.rig.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if "preset" in d:
            base = PRESETS[d["preset"]](**d.get("params", {}))
            return base
        return cls(layout=copy.deepcopy(d["layout"]),
                   trajectory=[np.asarray(P, float) for P in d["trajectory"]],
                   rig=Rig.from_dict(d["rig"]), seed=int(d.get("seed", 0)),
                   thermal_noise=float(d.get("thermal_noise", 0.0)), name=d.get("name", "custom"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class MultiSpectralPair:
    rgb: np.ndarray               # (3, H, W) float in [0, 1]
    thermal_raw: np.ndarray       # (H, W) uint16 counts
    gt_depth_T: np.ndarray        # (H, W) meters, thermal camera
    gt_depth_RGB: np.ndarray      # (H, W) meters, RGB camera
    pose: np.ndarray              # thermal camera-to-world 4x4
    timestamp: float
    temperature: np.ndarray = field(default=None, repr=False)   # (H, W) degC before quantization


def _camera_rays(K: CameraIntrinsics, cam_to_world: np.ndarray):
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    d_cam = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], -1).reshape(-1, 3)
    R, t = cam_to_world[:3, :3], cam_to_world[:3, 3]
    return t, d_cam @ R.T


def _render_camera(spec, faces, K, cam_to_world, frame):
    origin, dirs = _camera_rays(K, cam_to_world)
    if _inside_boxes(spec.layout, origin, frame):
        raise DomainError("camera centre lies inside scene geometry")
    lam, which, S, T = _cast(faces, origin, dirs, frame)
    hit = which >= 0
    if hit.mean() < 0.5:
        raise DomainError(f"camera {frame} sees only {hit.mean():.0%} of the scene")
    n = dirs.shape[0]
    rgb = np.zeros((3, n))
    temp = np.zeros(n)
    for fi, f in enumerate(faces):
        sel = which == fi
        if sel.any():
            rgb[:, sel] = _texture_eval(f.albedo, S[sel], T[sel])
            temp[sel] = _texture_eval(f.temperature, S[sel], T[sel])[0]
    depth = np.where(hit, lam, 0.0)   # ray direction has unit camera z, so lam is depth
    shape = (K.height, K.width)
    return (np.clip(rgb, 0, 1).reshape((3,) + shape), temp.reshape(shape),
            depth.reshape(shape), hit.reshape(shape))


def rgb_pose(spec: SceneSpec, thermal_cam_to_world) -> np.ndarray:
    E = spec.rig.extrinsic.matrix().numpy()
    return np.asarray(thermal_cam_to_world, float) @ np.linalg.inv(E)


def render_sequence(spec: SceneSpec, n_frames: int | None = None) -> list[MultiSpectralPair]:
    n_frames = len(spec.trajectory) if n_frames is None else n_frames
    if n_frames > len(spec.trajectory):
        raise DomainError("trajectory shorter than requested frame count")
    rng = np.random.default_rng(spec.seed)
    faces = _faces(spec.layout, rng)
    noise_rng = np.random.default_rng([spec.seed, 1])
    out = []
    for i in range(n_frames):
        P = np.asarray(spec.trajectory[i], dtype=np.float64)
        _, temp, depth_T, _ = _render_camera(spec, faces, spec.rig.K_T, P, i)
        rgb, _, depth_RGB, _ = _render_camera(spec, faces, spec.rig.K_RGB, rgb_pose(spec, P), i)
        if spec.thermal_noise > 0:
            noisy = np.round((temp + 30.0) * 16383 / 180.0 + noise_rng.normal(0, spec.thermal_noise, temp.shape))
            raw = np.clip(noisy, 0, 16383).astype(np.uint16)
        else:
            raw = celsius_to_raw(temp)
        out.append(MultiSpectralPair(rgb, raw, depth_T, depth_RGB, P, float(i), temp))
    return out


def analytic_flow(spec: SceneSpec, i: int, j: int, camera: str = "T") -> FlowField:
    """Exact correspondence field from frame ``i`` to frame ``j`` of one camera.

    Pixels are invalid when their ray misses the scene, the re-projected point
    falls behind or outside frame ``j``, or another surface occludes it there.
    """
    rng = np.random.default_rng(spec.seed)
    faces = _faces(spec.layout, rng)
    K = spec.rig.K_T if camera == "T" else spec.rig.K_RGB
    pose = (lambda P: np.asarray(P, float)) if camera == "T" else (lambda P: rgb_pose(spec, P))
    Pi, Pj = pose(spec.trajectory[i]), pose(spec.trajectory[j])
    origin, dirs = _camera_rays(K, Pi)
    lam, which, _, _ = _cast(faces, origin, dirs, i)
    hit = which >= 0
    X = origin + np.where(hit, lam, 1.0)[:, None] * dirs
    vel = np.array([faces[w].velocity if w >= 0 else np.zeros(3) for w in which])
    X = X + (j - i) * vel
    Xj = (X - Pj[:3, 3]) @ Pj[:3, :3]
    z = Xj[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = K.fx * Xj[:, 0] / zs + K.cx
    v = K.fy * Xj[:, 1] / zs + K.cy
    e = BORDER_TOL
    inside = (u >= -e) & (u <= K.width - 1 + e) & (v >= -e) & (v <= K.height - 1 + e)
    # re-hit test from camera j towards X
    oj = Pj[:3, 3]
    ray = X - oj
    lam_j, _, _, _ = _cast(faces, oj, ray, j)
    visible = lam_j >= 1 - 1e-9
    valid = hit & front & inside & visible
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    flow = np.stack([u.reshape(K.shape) - xs, v.reshape(K.shape) - ys])
    flow = np.where(valid.reshape(K.shape)[None], flow, 0.0)
    return FlowField(torch.as_tensor(flow), torch.as_tensor(valid.reshape(K.shape)))


# ---------------------------------------------------------------------------
# presets

def translation_pose(t, rotvec=(0, 0, 0)) -> np.ndarray:
    P = np.eye(4)
    P[:3, :3] = _rotvec_to_matrix(rotvec)
    P[:3, 3] = t
    return P


def affine_plane_scene(size: int = 64, depth: float = 5.0, baseline: float = 0.1,
                       seed: int = 0, hfov_deg: float = 60.0, n_frames: int = 3,
                       thermal_gradient: bool = True) -> SceneSpec:
    """Fronto-parallel plane with affine albedo / temperature, translation-only motion.

    Temperatures stay within 27.5..32.5 degC so the default narrow clip and
    colormap keep the thermal image on a single colormap segment.  Without
    ``thermal_gradient`` the plane is a uniform 30 degC, so 14-bit rounding
    leaves no residual and ground truth is an exact zero of the objective.
    """
    g = 1.0 if thermal_gradient else 0.0
    K = CameraIntrinsics.from_fov(size, size, hfov_deg)
    rig = Rig(K, K, RigidPose(np.eye(3), [-baseline, 0.0, 0.0]))
    extent = 2 * depth * math.tan(math.radians(hfov_deg) / 2)
    layout = [{
        "kind": "plane", "center": [0.0, 0.0, depth],
        "albedo": {"type": "affine", "base": [0.5, 0.45, 0.4],
                   "grad_s": [0.5 / extent, 0.2 / extent, -0.3 / extent],
                   "grad_t": [0.2 / extent, -0.4 / extent, 0.25 / extent]},
        "temperature": {"type": "affine", "base": 30.0, "grad_s": g * 3.0 / extent,
                        "grad_t": g * 1.5 / extent},
    }]
    steps = [(0.0, 0.0, 0.0), (0.08, 0.03, 0.1), (0.15, 0.05, 0.2), (0.22, 0.06, 0.3), (0.3, 0.08, 0.4)]
    traj = [translation_pose(steps[k % len(steps)]) for k in range(n_frames)]
    return SceneSpec(layout, traj, rig, seed=seed, name="affine_plane")


def textured_scene(size: int = 64, depth: float = 5.0, baseline: float = 0.1, seed: int = 0,
                   hfov_deg: float = 60.0, n_frames: int = 3, slant_deg: float = 12.0,
                   wavelength=(1.2, 3.0), hot_object: bool = False) -> SceneSpec:
    """Slanted sinusoid-textured plane at ``depth`` seen from a rotating, translating camera."""
    K_T = CameraIntrinsics.from_fov(size, size, hfov_deg)
    K_RGB = CameraIntrinsics.from_fov(size, size, hfov_deg * 0.95)
    rig = Rig(K_T, K_RGB, RigidPose(torch.as_tensor(_rotvec_to_matrix((0.0, 0.01, 0.0))),
                                    [-baseline, 0.01, 0.0]))
    layout = [{
        "kind": "plane", "center": [0.0, 0.0, depth],
        "rotation": [0.0, math.radians(slant_deg), 0.0],
        "albedo": {"type": "sines", "base": [0.5, 0.5, 0.5], "amplitude": 0.35,
                   "n_waves": 6, "wavelength": list(wavelength)},
        "temperature": {"type": "sines", "base": 25.0, "amplitude": 6.0,
                        "n_waves": 6, "wavelength": list(wavelength)},
    }]
    if hot_object:
        layout.append({"kind": "box", "center": [-0.4, 0.2, depth - 1.5], "size": [0.5, 0.5, 0.5],
                       "velocity": [0.05, 0.0, 0.0],
                       "albedo": {"base": [0.9, 0.2, 0.2]},
                       "temperature": {"base": 38.0}})
    traj = []
    for k in range(n_frames):
        traj.append(translation_pose((0.1 * k, 0.02 * k, 0.05 * k),
                                     (0.01 * k, -0.015 * k, 0.005 * k)))
    return SceneSpec(layout, traj, rig, seed=seed, name="textured")


PRESETS = {"affine_plane": affine_plane_scene, "textured": textured_scene}
