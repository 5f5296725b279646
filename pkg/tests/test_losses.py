import dataclasses

import numpy as np
import pytest
import torch

from thermoflux import losses, optim, synth
from thermoflux.core import DomainError
from thermoflux.losses import (INDOOR, OUTDOOR, SSIM_C1, SSIM_C2, LossConfig, LossWeights,
                               depth_inconsistency, geometric_consistency, masked_reduce,
                               reconstruction_map, smoothness_loss, snippet_loss, ssim_map)
from conftest import gt_state


def ssim_oracle(a, b):
    """Scalar SSIM per 3x3 reflection-padded window, channel mean."""
    a, b = np.atleast_3d(np.asarray(a)), np.atleast_3d(np.asarray(b))
    C, H, W = a.shape
    out = np.zeros((C, H, W))
    for c in range(C):
        pa = np.pad(a[c], 1, mode="reflect")
        pb = np.pad(b[c], 1, mode="reflect")
        for i in range(H):
            for j in range(W):
                x = pa[i:i + 3, j:j + 3].ravel()
                y = pb[i:i + 3, j:j + 3].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cxy = ((x - mx) * (y - my)).mean()
                out[c, i, j] = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
                                / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)))
    return out.mean(0)


def test_presets_match_published_weights():
    assert (INDOOR.alpha, INDOOR.beta, INDOOR.gamma_T, INDOOR.gamma_RGB) == (1.0, 0.5, 0.15, 0.85)
    assert (INDOOR.lambda_T, INDOOR.lambda_RGB) == (0.25, 1.0)
    assert (OUTDOOR.alpha, OUTDOOR.beta, OUTDOOR.gamma_T, OUTDOOR.gamma_RGB) == (1.0, 0.5, 0.85, 0.30)
    assert (OUTDOOR.lambda_T, OUTDOOR.lambda_RGB) == (1.0, 0.1)
    with pytest.raises(DomainError):
        LossWeights(gamma_T=1.5)
    with pytest.raises(DomainError):
        LossWeights(beta=-1)


def test_ssim_identical_and_constant(rng):
    A = torch.as_tensor(rng.uniform(size=(3, 8, 8)))
    assert (ssim_map(A, A) - 1).abs().max() < 1e-12
    c = torch.full((1, 5, 5), 0.5, dtype=torch.float64)
    assert (ssim_map(c, c) - 1).abs().max() < 1e-15


def test_ssim_matches_window_oracle(rng):
    A = rng.uniform(size=(2, 5, 5))
    B = rng.uniform(size=(2, 5, 5))
    ours = ssim_map(torch.as_tensor(A), torch.as_tensor(B)).numpy()
    assert np.abs(ours - ssim_oracle(A, B)).max() < 1e-12
    assert ours.min() >= -1 and ours.max() <= 1


def test_ssim_shape_mismatch():
    with pytest.raises(DomainError):
        ssim_map(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


def test_reconstruction_examples(rng):
    I = torch.as_tensor(rng.uniform(size=(3, 6, 6)))
    assert reconstruction_map(I, I, 0.15).abs().max() == 0
    J = I + 0.3
    assert (reconstruction_map(I, J, 0.0) - 0.3).abs().max() < 1e-15
    A, B = rng.uniform(size=(1, 5, 5)), rng.uniform(size=(1, 5, 5))
    expect = 0.15 * (1 - ssim_oracle(A, B)) / 2 + 0.85 * np.abs(A - B)[0]
    got = reconstruction_map(torch.as_tensor(A), torch.as_tensor(B), 0.15).numpy()
    assert np.abs(got - expect).max() < 1e-12


def test_masked_reduce(rng):
    V = torch.ones(4, 4, dtype=torch.bool)
    assert masked_reduce(torch.full((4, 4), 0.7, dtype=torch.float64), torch.ones(4, 4, dtype=torch.float64), V)[0] == pytest.approx(0.7)
    L, M = rng.uniform(size=(7, 9)), rng.uniform(size=(7, 9))
    Vn = rng.uniform(size=(7, 9)) > 0.4
    total, n = 0.0, 0
    for i in range(7):
        for j in range(9):
            if Vn[i, j]:
                total += M[i, j] * L[i, j]
                n += 1
    value, empty = masked_reduce(torch.as_tensor(L), torch.as_tensor(M), torch.as_tensor(Vn))
    assert not empty and float(value) == pytest.approx(total / n, abs=1e-14)
    value, empty = masked_reduce(torch.as_tensor(L), torch.as_tensor(M), torch.zeros(7, 9, dtype=torch.bool))
    assert empty and float(value) == 0.0


def test_depth_inconsistency_examples(rng):
    V = torch.ones(2, 2, dtype=torch.bool)
    three, one = torch.full((2, 2), 3.0, dtype=torch.float64), torch.ones(2, 2, dtype=torch.float64)
    assert torch.equal(depth_inconsistency(three, one, V), torch.full((2, 2), 0.5, dtype=torch.float64))
    assert torch.equal(depth_inconsistency(three, three, V), torch.zeros(2, 2, dtype=torch.float64))
    with pytest.raises(DomainError):
        depth_inconsistency(-three, one, V)


def test_depth_inconsistency_range(rng):
    a = torch.as_tensor(10.0 ** rng.uniform(-6, 6, size=(50, 50)))
    b = torch.as_tensor(10.0 ** rng.uniform(-6, 6, size=(50, 50)))
    V = torch.as_tensor(rng.uniform(size=(50, 50)) > 0.3)
    d = depth_inconsistency(a, b, V)
    assert d.min() >= 0 and d.max() < 1
    assert torch.equal(d[~V], torch.zeros_like(d[~V]))


def test_geometric_consistency_examples(rng):
    V = torch.ones(4, 4, dtype=torch.bool)
    z = torch.zeros(4, 4, dtype=torch.float64)
    loss, M, empty = geometric_consistency(z, V)
    assert float(loss) == 0 and torch.equal(M, torch.ones_like(M)) and not empty
    half = z.clone()
    half[:2] = 0.2
    assert float(geometric_consistency(half, V)[0]) == pytest.approx(0.1, abs=1e-15)
    D = rng.uniform(0, 0.9, size=(6, 6))
    Vn = rng.uniform(size=(6, 6)) > 0.5
    loss, _, _ = geometric_consistency(torch.as_tensor(D), torch.as_tensor(Vn))
    assert float(loss) == pytest.approx(sum(D[Vn]) / Vn.sum(), abs=1e-14)


def test_smoothness():
    I = torch.full((1, 8, 10), 0.4, dtype=torch.float64)
    assert float(smoothness_loss(torch.full((8, 10), 3.0, dtype=torch.float64), I)) == 0.0
    x = torch.arange(10, dtype=torch.float64)
    D = (2.0 + 0.5 * x).expand(8, 10)
    assert float(smoothness_loss(D, I)) == pytest.approx(0.5 / float(D.mean()), abs=1e-14)
    assert float(smoothness_loss(2 * D, I)) == pytest.approx(float(smoothness_loss(D, I)), abs=1e-15)


def test_zero_loss_at_ground_truth(affine):
    spec, frames = affine
    st = gt_state(frames)
    rep = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig)
    vals = rep.as_floats()
    assert all(v < 1e-3 for v in vals.values()), vals
    assert all(n == 0 for n in rep.empty.values())


def test_exact_zero_without_thermal_gradient(affine_flat):
    spec, frames = affine_flat
    st = gt_state(frames)
    rep = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig)
    assert float(rep.total) < 1e-12


def test_gc_small_on_consistent_textured_pair():
    spec = synth.textured_scene()
    frames = synth.render_sequence(spec)
    st = gt_state(frames)
    rep = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig, keep_maps=True)
    assert float(rep.terms["gc_T"]) < 1e-5
    assert float(rep.terms["gc_RGB"]) < 1e-5
    D = rep.maps["thermal"]["D_diff"]
    assert float(D[:, 2:-2, 2:-2].max()) < 1e-5


def test_lambda_rgb_zero_drops_rgb_gradient(small_textured):
    spec, frames = small_textured
    st = optim.perturb_state(gt_state(frames), np.random.default_rng(3), rot_deg=0.5, trans_m=0.01)
    W = dataclasses.replace(INDOOR, lambda_RGB=0.0)
    ld = st.log_depths.clone().requires_grad_(True)
    tw = st.twists.clone().requires_grad_(True)
    s = optim.OptimState(ld, tw)
    rep = snippet_loss(frames, list(s.depths), s.poses(), W, spec.rig)
    g_total = torch.autograd.grad(rep.total, [ld, tw])
    ld2 = st.log_depths.clone().requires_grad_(True)
    tw2 = st.twists.clone().requires_grad_(True)
    s2 = optim.OptimState(ld2, tw2)
    rep2 = snippet_loss(frames, list(s2.depths), s2.poses(), W, spec.rig)
    thermal = W.lambda_T * (W.alpha * rep2.terms["rec_T"] + W.beta * rep2.terms["gc_T"])
    g_thermal = torch.autograd.grad(thermal, [ld2, tw2])
    for a, b in zip(g_total, g_thermal):
        assert torch.equal(a, b)
    assert float(rep.total.detach()) == float(thermal.detach())


@pytest.mark.parametrize("s", [0.1, 10.0])
def test_gc_scale_invariance(small_textured, s):
    spec, frames = small_textured
    st = optim.perturb_state(gt_state(frames), np.random.default_rng(5), rot_deg=1.0, trans_m=0.02)
    base = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig)
    scaled = snippet_loss(frames, [d * s for d in st.depths], [P.scaled(s) for P in st.poses()],
                          INDOOR, spec.rig.scaled(s))
    for k in ("gc_T", "gc_RGB"):
        assert float(base.terms[k]) > 1e-4
        assert abs(float(base.terms[k]) - float(scaled.terms[k])) < 1e-9


def test_hot_object_lowers_mask():
    spec = synth.textured_scene(hot_object=True)
    frames = synth.render_sequence(spec)
    st = gt_state(frames)
    rep = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig, keep_maps=True)
    M = rep.maps["thermal"]["M"]
    V = rep.maps["thermal"]["V"]
    assert float(M[V].min()) < 0.9
    assert float(M[V].median()) > 1 - 1e-4


def test_snippet_loss_rejects_bad_input(small_textured):
    spec, frames = small_textured
    st = gt_state(frames)
    with pytest.raises(DomainError):
        snippet_loss(frames, list(st.depths)[:2], st.poses(), INDOOR, spec.rig)
    with pytest.raises(DomainError):
        snippet_loss(frames, [-d for d in st.depths], st.poses(), INDOOR, spec.rig)


def test_report_json_roundtrip(small_textured):
    import json
    spec, frames = small_textured
    st = gt_state(frames)
    rep = snippet_loss(frames, list(st.depths), st.poses(), INDOOR, spec.rig)
    body = json.loads(rep.to_json())
    assert set(body) == set(losses.TERM_NAMES) | {"total", "empty_valid_set"}
