"""Joint refinement of per-pixel log-depths and relative-pose twists under the
snippet objective, and a finite-difference gradient checker."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .core import DTYPE, DomainError, RigidPose, as_tensor, se3_exp, se3_log, trace_branches
from .losses import TERM_NAMES, LossConfig, LossReport, LossWeights, prepare_images, snippet_loss
from .warp import Rig

METHODS = ("gd", "adam")
GRADIENT_MODES = ("analytic", "finite-difference")


class NonFiniteGradient(ArithmeticError):
    def __init__(self, term: str):
        super().__init__(f"non-finite gradient in term {term!r}")
        self.term = term


@dataclass
class OptimState:
    log_depths: torch.Tensor          # (3, H, W)
    twists: torch.Tensor              # (2, 6), (omega, v)
    iteration: int = 0
    report: LossReport | None = None

    @classmethod
    def from_depths_poses(cls, depths, poses) -> "OptimState":
        D = torch.stack([as_tensor(d) for d in depths])
        if (D <= 0).any():
            raise DomainError("depths must be positive")
        return cls(torch.log(D), torch.stack([se3_log(p) for p in poses]))

    @property
    def depths(self) -> torch.Tensor:
        return torch.exp(self.log_depths)

    def poses(self) -> list[RigidPose]:
        return [se3_exp(t) for t in self.twists]

    def copy(self) -> "OptimState":
        return OptimState(self.log_depths.detach().clone(), self.twists.detach().clone(),
                          self.iteration, self.report)


@dataclass(frozen=True)
class OptimizerConfig:
    step_depth: float = 1000.0
    step_twist: float = 0.01
    # the translation half of each twist moves this many times further than
    # the rotation half (roughly depth^2 for a scene a few meters away)
    translation_scale: float = 25.0
    max_iter: int = 2000
    tol: float = 1e-6               # relative decrease of the total over `window` steps
    grad_tol: float = 1e-10         # stationary when every |gradient| entry is below this
    window: int = 10
    d_min: float = 0.1
    d_max: float = 100.0
    gradient_mode: str = "analytic"
    fd_step: float = 1e-6
    method: str = "gd"
    grow: float = 1.2               # step growth after an accepted step (1 = fixed steps)
    max_backtracks: int = 20
    beta1: float = 0.9              # adam only
    beta2: float = 0.999
    eps: float = 1e-8
    time_limit: float | None = None

    def __post_init__(self):
        if self.step_depth < 0 or self.step_twist < 0 or self.translation_scale <= 0:
            raise DomainError("step sizes must be non-negative")
        if not 0 < self.d_min < self.d_max:
            raise DomainError("need 0 < d_min < d_max")
        if self.gradient_mode not in GRADIENT_MODES:
            raise DomainError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}")
        if self.max_iter < 0 or self.window < 1 or self.max_backtracks < 1:
            raise DomainError("invalid iteration limits")
        if self.grow < 1:
            raise DomainError("grow must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# objective

@dataclass
class Problem:
    """Everything held fixed during refinement."""
    images: object
    weights: LossWeights
    rig: Rig
    loss_cfg: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.images = prepare_images(self.images, self.loss_cfg.thermal)

    def report(self, log_depths, twists, keep_maps=False) -> LossReport:
        return snippet_loss(self.images, list(torch.exp(log_depths)),
                            [se3_exp(t) for t in twists], self.weights, self.rig,
                            self.loss_cfg, keep_maps=keep_maps)

    def value(self, log_depths, twists) -> float:
        with torch.no_grad():
            return float(self.report(log_depths, twists).total)


def _problem(frames, weights, rig, loss_cfg) -> Problem:
    if isinstance(frames, Problem):
        return frames
    return Problem(frames, weights, rig, loss_cfg or LossConfig())


def _blame(prob: Problem, ld, tw, report) -> str:
    """Name the first term whose value or gradient is non-finite."""
    for name in TERM_NAMES:
        if name not in report.terms:
            continue
        v = report.terms[name]
        if not torch.isfinite(v):
            return name
        if not v.requires_grad:
            continue
        g = torch.autograd.grad(v, (ld, tw), retain_graph=True, allow_unused=True)
        if any(x is not None and not torch.isfinite(x).all() for x in g):
            return name
    return "total"


def _analytic(prob: Problem, log_depths, twists):
    ld = log_depths.detach().clone().requires_grad_()
    tw = twists.detach().clone().requires_grad_()
    rep = prob.report(ld, tw)
    gl, gt = torch.autograd.grad(rep.total, (ld, tw), retain_graph=True)
    if not (torch.isfinite(rep.total) and torch.isfinite(gl).all() and torch.isfinite(gt).all()):
        raise NonFiniteGradient(_blame(prob, ld, tw, rep))
    return rep, gl, gt


def _central(fun, x: torch.Tensor, idx, h: float):
    """Central difference of ``fun`` at flat index ``idx`` of ``x``."""
    flat = x.reshape(-1)
    xp, xm = flat.clone(), flat.clone()
    xp[idx] += h
    xm[idx] -= h
    return (fun(xp.reshape(x.shape)) - fun(xm.reshape(x.shape))) / (2 * h)


def _numeric(prob: Problem, log_depths, twists, h):
    with torch.no_grad():
        rep = prob.report(log_depths, twists)
        gl = torch.zeros_like(log_depths)
        gt = torch.zeros_like(twists)
        fl = gl.reshape(-1)
        for i in range(log_depths.numel()):
            fl[i] = _central(lambda x: prob.value(x, twists), log_depths, i, h)
        ft = gt.reshape(-1)
        for i in range(twists.numel()):
            ft[i] = _central(lambda x: prob.value(log_depths, x), twists, i, h)
    if not (torch.isfinite(gl).all() and torch.isfinite(gt).all()):
        raise NonFiniteGradient("total")
    return rep, gl, gt


def loss_gradients(state: OptimState, frames, weights: LossWeights, rig: Rig,
                   cfg: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig | None = None):
    """Returns ``(total, d total / d log_depths, d total / d twists)``."""
    prob = _problem(frames, weights, rig, loss_cfg)
    if cfg.gradient_mode == "analytic":
        rep, gl, gt = _analytic(prob, state.log_depths, state.twists)
    else:
        rep, gl, gt = _numeric(prob, state.log_depths, state.twists, cfg.fd_step)
    state.report = rep
    return rep.total.detach(), gl, gt


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    worst: dict                 # {"block", "index", "analytic", "numeric", "rel_err"}
    n_checked: int
    n_excluded: int             # parameters whose +/-h probes straddle a kink
    excluded: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _traced_value(prob: Problem, ld, tw):
    with trace_branches() as tr, torch.no_grad():
        v = float(prob.report(ld, tw).total)
    return v, tr


def finite_diff_check(state: OptimState, frames, weights: LossWeights, rig: Rig,
                      step: float = 1e-4, n_depth: int = 200, seed: int = 0,
                      loss_cfg: LossConfig | None = None, atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``n_depth`` log-depth coordinates are drawn without replacement (seeded)
    and every twist coordinate is checked.  A probe whose discrete decisions
    (valid sets, sampling cells, signs of L1 residuals, ...) differ from those
    at the base point sits on a kink and is excluded.  The relative error is
    ``|a - n| / max(|a|, |n|, atol)``.  Differences see the mask's dependence
    on depth, so the check always runs with ``detach_mask=False``.
    """
    prob = _problem(frames, weights, rig, loss_cfg)
    prob = Problem(prob.images, prob.weights, prob.rig, replace(prob.loss_cfg, detach_mask=False))
    _, gl, gt = _analytic(prob, state.log_depths, state.twists)
    ld, tw = state.log_depths.detach(), state.twists.detach()
    _, base = _traced_value(prob, ld, tw)
    rng = np.random.default_rng(seed)
    n = min(n_depth, ld.numel())
    picks = [("log_depth", int(i)) for i in np.sort(rng.choice(ld.numel(), n, replace=False))]
    picks += [("twist", i) for i in range(tw.numel())]
    entries, excluded = [], []
    for block, i in picks:
        x = ld if block == "log_depth" else tw
        vals, kink = [], False
        for sgn in (1, -1):
            xs = x.reshape(-1).clone()
            xs[i] += sgn * step
            xs = xs.reshape(x.shape)
            v, tr = _traced_value(prob, xs, tw) if block == "log_depth" else _traced_value(prob, ld, xs)
            kink |= tr != base
            vals.append(v)
        if kink:
            excluded.append({"block": block, "index": i})
            continue
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float((gl if block == "log_depth" else gt).reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), atol)
        entries.append({"block": block, "index": i, "analytic": ana, "numeric": num, "rel_err": rel})
    if entries:
        worst = max(entries, key=lambda e: e["rel_err"])
        errs = [e["rel_err"] for e in entries]
        mx, mean = float(max(errs)), float(np.mean(errs))
    else:
        worst, mx, mean = {}, 0.0, 0.0
    return GradCheckReport(mx, mean, worst, len(entries), len(excluded), excluded, entries)


# ---------------------------------------------------------------------------
# refinement

TRACE_COLUMNS = ("iteration", "total") + TERM_NAMES


def _trace_row(it: int, rep: LossReport) -> dict:
    row = {"iteration": it, "total": float(rep.total.detach())}
    for k in TERM_NAMES:
        row[k] = float(rep.terms[k].detach()) if k in rep.terms else 0.0
    return row


def trace_to_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row["iteration"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])
    return buf.getvalue()


@dataclass
class RefineResult:
    state: OptimState
    trace: list                 # accepted iterates, monotone nonincreasing total
    status: str                 # "converged" | "max_iter" | "diverged" | "time_limit"
    backtracks: int = 0


def _project(ld, cfg: OptimizerConfig):
    return ld.clamp(math.log(cfg.d_min), math.log(cfg.d_max))


class _Adam:
    def __init__(self, cfg):
        self.cfg, self.k, self.m, self.v = cfg, 0, None, None

    def direction(self, g):
        c = self.cfg
        self.k += 1
        if self.m is None:
            self.m = [torch.zeros_like(x) for x in g]
            self.v = [torch.zeros_like(x) for x in g]
        out = []
        for m, v, x in zip(self.m, self.v, g):
            m.mul_(c.beta1).add_(x, alpha=1 - c.beta1)
            v.mul_(c.beta2).addcmul_(x, x, value=1 - c.beta2)
            mh = m / (1 - c.beta1**self.k)
            vh = v / (1 - c.beta2**self.k)
            out.append(mh / (vh.sqrt() + c.eps))
        return out


def refine(state: OptimState, frames, weights: LossWeights, rig: Rig,
           cfg: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig | None = None,
           callback=None) -> RefineResult:
    """Descent on (log-depths, twists) with per-block step sizes and backtracking.

    A candidate step that increases the total is halved until it does not;
    accepted steps grow by ``cfg.grow``.  ``method="adam"`` replaces the raw
    gradient by the bias-corrected Adam direction under the same backtracking
    rule.  Stops after ``max_iter`` accepted iterations, when the relative
    decrease over the last ``window`` iterations falls below ``tol``, or after
    ``max_backtracks`` consecutive halvings (returning the last accepted state).
    A start whose gradient vanishes (within ``grad_tol``) returns at once.
    """
    prob = _problem(frames, weights, rig, loss_cfg)
    cur = state.copy()
    cur.log_depths = _project(cur.log_depths, cfg)
    L, gl, gt = loss_gradients(cur, prob, weights, rig, cfg)
    trace = [_trace_row(cur.iteration, cur.report)]
    eta = [cfg.step_depth, cfg.step_twist]
    tscale = torch.tensor([1.0] * 3 + [cfg.translation_scale] * 3, dtype=DTYPE)
    adam = _Adam(cfg) if cfg.method == "adam" else None
    status, total_bt = "max_iter", 0
    t0 = time.perf_counter()
    while cur.iteration < state.iteration + cfg.max_iter:
        if max(float(gl.abs().max()), float(gt.abs().max())) <= cfg.grad_tol:
            status = "converged"
            break
        dl, dt = adam.direction((gl, gt)) if adam else (gl, gt)
        accepted = False
        for _ in range(cfg.max_backtracks):
            ld_new = _project(cur.log_depths - eta[0] * dl, cfg)
            tw_new = cur.twists - eta[1] * tscale * dt
            if prob.value(ld_new, tw_new) <= float(L):
                accepted = True
                break
            eta = [e / 2 for e in eta]
            total_bt += 1
        if not accepted:
            status = "diverged"
            break
        cur = OptimState(ld_new, tw_new, cur.iteration + 1, None)
        L, gl, gt = loss_gradients(cur, prob, weights, rig, cfg)
        trace.append(_trace_row(cur.iteration, cur.report))
        eta = [e * cfg.grow for e in eta]
        if adam:
            # adam directions are already normalized; the configured steps are ceilings
            eta = [min(e, e0) for e, e0 in zip(eta, (cfg.step_depth, cfg.step_twist))]
        if callback is not None:
            callback(cur, trace)
        if len(trace) > cfg.window:
            old = trace[-1 - cfg.window]["total"]
            if old <= 0 or (old - trace[-1]["total"]) / old < cfg.tol:
                status = "converged"
                break
        if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
            status = "time_limit"
            break
    return RefineResult(cur, trace, status, total_bt)


def perturb_state(state: OptimState, rng: np.random.Generator, depth_noise=(0.8, 1.2),
                  rot_deg: float = 2.0, trans_m: float = 0.05) -> OptimState:
    """Multiply depths by uniform noise and left-perturb each pose by a random
    rotation of ``rot_deg`` and translation of ``trans_m``."""
    D = state.depths * torch.as_tensor(rng.uniform(*depth_noise, size=tuple(state.log_depths.shape)),
                                       dtype=DTYPE)
    tws = []
    for P in state.poses():
        ax = rng.normal(size=3)
        ax /= np.linalg.norm(ax)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        R = se3_exp(torch.cat([torch.as_tensor(ax * math.radians(rot_deg), dtype=DTYPE),
                               torch.zeros(3, dtype=DTYPE)]))
        Q = R @ P
        tws.append(se3_log(RigidPose(Q.rotation, Q.translation + torch.as_tensor(d * trans_m, dtype=DTYPE))))
    return replace(state, log_depths=torch.log(D), twists=torch.stack(tws), report=None)
