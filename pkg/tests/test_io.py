import numpy as np
import pytest

from thermoflux import io, synth
from thermoflux.core import DomainError
from thermoflux.warp import Rig


def test_pgm16_roundtrip(tmp_path, rng):
    raw = rng.integers(0, 16384, size=(7, 11)).astype(np.uint16)
    io.write_pgm16(tmp_path / "a.pgm", raw)
    assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), raw)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n11 7\n16383\n")
    with pytest.raises(DomainError):
        io.write_pgm16(tmp_path / "b.pgm", raw.astype(np.int64) + 16383)


def test_ppm_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(3, 5, 6)) / 255.0
    io.write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), rgb)


def test_pfm_roundtrip(tmp_path, rng):
    d = rng.uniform(0, 10, size=(6, 9)).astype(np.float32).astype(np.float64)
    io.write_pfm(tmp_path / "a.pfm", d)
    assert np.array_equal(io.read_pfm(tmp_path / "a.pfm"), d)
    c = rng.uniform(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
    io.write_pfm(tmp_path / "c.pfm", c)
    assert np.array_equal(io.read_pfm(tmp_path / "c.pfm"), c)
    flow, mask = rng.normal(size=(2, 4, 5)).astype(np.float32).astype(np.float64), rng.uniform(size=(4, 5)) > 0.5
    io.write_flow_pfm(tmp_path / "f.pfm", flow, mask)
    f2, m2 = io.read_flow_pfm(tmp_path / "f.pfm")
    assert np.array_equal(f2, flow) and np.array_equal(m2, mask)


def test_pfm_rows_stored_bottom_up(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    io.write_pfm(tmp_path / "a.pfm", d)
    body = (tmp_path / "a.pfm").read_bytes().split(b"-1.0\n", 1)[1]
    assert np.frombuffer(body, "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_header_comments(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n2 1\n16383\n" + np.array([5, 16383], ">u2").tobytes())
    assert io.read_pgm(tmp_path / "a.pgm").tolist() == [[5, 16383]]


def test_poses_roundtrip(tmp_path, rng):
    P = rng.normal(size=(3, 4, 4))
    io.write_poses(tmp_path / "p.json", P)
    assert np.array_equal(io.read_poses(tmp_path / "p.json"), P)
    io.write_json(tmp_path / "bad.json", [[1, 2]])
    with pytest.raises(DomainError):
        io.read_poses(tmp_path / "bad.json")


def test_fixture_roundtrip(tmp_path):
    spec = synth.textured_scene(size=16)
    frames = synth.render_sequence(spec)
    io.write_fixture(tmp_path, frames, spec.rig)
    rgb, thermal, depth, poses, rig = io.read_fixture(tmp_path)
    assert sorted(p.name for p in (tmp_path / "thermal").iterdir()) == ["000000.pgm", "000001.pgm", "000002.pgm"]
    for k, f in enumerate(frames):
        assert np.array_equal(thermal[k], f.thermal_raw)
        assert np.abs(rgb[k] - f.rgb).max() <= 0.5 / 255 + 1e-12
        assert np.abs(depth[k] - f.gt_depth_T).max() < 1e-5
        assert np.array_equal(poses[k], f.pose)
    assert Rig.from_dict(rig).to_dict() == spec.rig.to_dict()
