"""Netpbm / PFM image files and JSON pose, rig and fixture-directory helpers."""

from __future__ import annotations

import json
import os

import numpy as np

from .core import DomainError
from .thermal import RAW_MAX, check_raw


def _tokens(f, n):
    """Read ``n`` whitespace-separated header tokens, skipping comments."""
    out, tok = [], b""
    while len(out) < n:
        c = f.read(1)
        if not c:
            raise DomainError("truncated header")
        if c == b"#" and not tok:
            f.readline()
            continue
        if c.isspace():
            if tok:
                out.append(tok)
                tok = b""
        else:
            tok += c
    return out


def write_pgm16(path, raw):
    """16-bit binary PGM with maxval 16383 (big-endian samples)."""
    raw = check_raw(raw)
    if raw.ndim != 2:
        raise DomainError("PGM expects an (H, W) image")
    H, W = raw.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (W, H, RAW_MAX))
        f.write(raw.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _tokens(f, 4)
        if magic != b"P5":
            raise DomainError(f"{path}: not a binary PGM")
        W, H, M = int(w), int(h), int(maxval)
        dt = ">u2" if M > 255 else "u1"
        data = np.frombuffer(f.read(), dtype=dt, count=W * H)
    return data.reshape(H, W).astype(np.uint16)


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb):
    """8-bit binary PPM from a (3, H, W) float image in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DomainError("PPM expects a (3, H, W) image")
    _, H, W = rgb.shape
    data = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (3, H, W) float64 in [0, 1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _tokens(f, 4)
        if magic != b"P6" or int(maxval) != 255:
            raise DomainError(f"{path}: not an 8-bit binary PPM")
        W, H = int(w), int(h)
        data = np.frombuffer(f.read(), dtype=np.uint8, count=3 * W * H)
    return data.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pfm(path, arr):
    """(H, W) -> 'Pf' greyscale, (3, H, W) -> 'PF' colour.  Little-endian, rows bottom-up."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        magic, body = b"Pf", arr
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, body = b"PF", arr.transpose(1, 2, 0)
    else:
        raise DomainError("PFM expects (H, W) or (3, H, W)")
    H, W = body.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n-1.0\n" % (magic, W, H))
        f.write(np.ascontiguousarray(body[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, scale = _tokens(f, 4)
        if magic not in (b"Pf", b"PF"):
            raise DomainError(f"{path}: not a PFM file")
        W, H, s = int(w), int(h), float(scale)
        C = 1 if magic == b"Pf" else 3
        data = np.frombuffer(f.read(), dtype="<f4" if s < 0 else ">f4", count=W * H * C)
    data = data.reshape(H, W, C)[::-1].astype(np.float64)
    return data[..., 0].copy() if C == 1 else data.transpose(2, 0, 1).copy()


def write_flow_pfm(path, flow, mask):
    """Flow stored as a 3-channel PFM: dx, dy, validity."""
    flow = np.asarray(flow, dtype=np.float64)
    write_pfm(path, np.concatenate([flow, np.asarray(mask, dtype=np.float64)[None]]))


def read_flow_pfm(path):
    a = read_pfm(path)
    return a[:2], a[2] > 0.5


def _dump(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_json(path, obj):
    _dump(path, obj)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_poses(path, poses):
    """List of 4x4 row-major matrices."""
    _dump(path, [np.asarray(P, dtype=np.float64).reshape(4, 4).tolist() for P in poses])


def read_poses(path) -> np.ndarray:
    P = np.asarray(read_json(path), dtype=np.float64)
    if P.ndim != 3 or P.shape[1:] != (4, 4):
        raise DomainError(f"{path}: expected a list of 4x4 matrices")
    return P


def frame_name(i: int, ext: str) -> str:
    return f"{i:06d}.{ext}"


def write_fixture(out_dir, frames, rig):
    """Write rgb/, thermal/, depth/ (thermal-camera depth), poses.json and rig.json."""
    for sub in ("rgb", "thermal", "depth", "depth_rgb"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, fr in enumerate(frames):
        write_ppm(os.path.join(out_dir, "rgb", frame_name(i, "ppm")), fr.rgb)
        write_pgm16(os.path.join(out_dir, "thermal", frame_name(i, "pgm")), fr.thermal_raw)
        write_pfm(os.path.join(out_dir, "depth", frame_name(i, "pfm")), fr.gt_depth_T)
        write_pfm(os.path.join(out_dir, "depth_rgb", frame_name(i, "pfm")), fr.gt_depth_RGB)
    write_poses(os.path.join(out_dir, "poses.json"), [fr.pose for fr in frames])
    _dump(os.path.join(out_dir, "rig.json"), rig.to_dict())


def _listing(d, ext):
    if not os.path.isdir(d):
        raise DomainError(f"missing directory {d}")
    return sorted(f for f in os.listdir(d) if f.endswith("." + ext))


def read_depth_dir(d) -> list[np.ndarray]:
    return [read_pfm(os.path.join(d, f)) for f in _listing(d, "pfm")]


def read_fixture(fixture_dir):
    """Returns (rgb list, thermal raw list, depth list, poses, rig dict)."""
    rgb = [read_ppm(os.path.join(fixture_dir, "rgb", f))
           for f in _listing(os.path.join(fixture_dir, "rgb"), "ppm")]
    thermal = [read_pgm(os.path.join(fixture_dir, "thermal", f))
               for f in _listing(os.path.join(fixture_dir, "thermal"), "pgm")]
    depth = read_depth_dir(os.path.join(fixture_dir, "depth"))
    poses = read_poses(os.path.join(fixture_dir, "poses.json"))
    rig = read_json(os.path.join(fixture_dir, "rig.json"))
    if not (len(rgb) == len(thermal) == len(depth) == len(poses)):
        raise DomainError(f"{fixture_dir}: inconsistent frame counts")
    return rgb, thermal, depth, poses, rig
