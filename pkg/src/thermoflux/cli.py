"""thermoflux command line: render fixtures, evaluate / check / refine the
snippet objective and compute depth and pose metrics."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import torch

from . import __version__, evaluation, io, losses, optim, synth, thermal
from .core import DomainError, RigidPose, se3_inverse
from .warp import FlowReversalConfig, Rig

SEED_ENV = "THERMOFLUX_SEED"

PRESET_CONFIGS = {
    "indoor": {"weights": losses.INDOOR.to_dict(), "depth_cap": evaluation.DEPTH_CAPS["indoor"]},
    "outdoor": {"weights": losses.OUTDOOR.to_dict(), "depth_cap": evaluation.DEPTH_CAPS["outdoor"]},
}

DEFAULTS = {
    "seed": 0,
    "scene": {"preset": "textured", "params": {}},
    "fixture": None,
    "output": "out",
    "weights": losses.INDOOR.to_dict(),
    "depth_cap": evaluation.DEPTH_CAPS["indoor"],
    "thermal": {"strategy": thermal.Strategy.CLIP_COLORIZE.value},
    "flow_reversal": FlowReversalConfig().to_dict(),
    "loss": {"transform_depth_values": True, "detach_mask": True},
    "optimizer": optim.OptimizerConfig().to_dict(),
    # starting point for loss / gradcheck / refine: GT (optionally perturbed), or the
    # depth/ and relative_poses.json of an earlier refine output directory given as "init"
    "state": {"init": None, "perturb": False, "depth_noise": [0.8, 1.2], "rot_deg": 2.0,
              "trans_m": 0.05},
    # gradcheck always jitters the start away from GT so residuals are not at kinks
    "gradcheck": {"step": 1e-4, "n_depth": 256, "threshold": 1e-3, "atol": 1e-7,
                  "jitter": {"depth_noise": [0.95, 1.05], "rot_deg": 0.5, "trans_m": 0.01}},
}


class UsageError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict, env=os.environ) -> dict:
    """Expand presets ("extends") and defaults into a complete config."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw = dict(raw)
    cfg = copy.deepcopy(DEFAULTS)
    ext = raw.pop("extends", None)
    for name in ([ext] if isinstance(ext, str) else (ext or [])):
        if name not in PRESET_CONFIGS:
            raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESET_CONFIGS)}")
        cfg = _merge(cfg, PRESET_CONFIGS[name])
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if isinstance(raw.get("weights"), str):
        if raw["weights"] not in losses.PRESETS:
            raise UsageError(f"unknown weight preset {raw['weights']!r}")
        raw["weights"] = losses.PRESETS[raw["weights"]].to_dict()
    cfg = _merge(cfg, raw)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer")
    scene = cfg["scene"]
    if cfg["fixture"] is None and "preset" in scene:
        if scene["preset"] not in synth.PRESETS:
            raise UsageError(f"unknown scene preset {scene['preset']!r}")
        params = dict(scene.get("params", {}))
        params.setdefault("seed", cfg["seed"])
        scene["params"] = params
    for key, where in (("fixture", cfg["fixture"]), ("state.init", cfg["state"]["init"])):
        if where is not None and not os.path.isdir(where):
            raise UsageError(f"{key} directory {where!r} does not exist")
    # validate every block now so malformed configs fail before any work
    try:
        cfg["weights"] = losses.LossWeights(**cfg["weights"]).to_dict()
        cfg["thermal"] = thermal.ThermalRepresentationConfig.from_dict(cfg["thermal"]).to_dict()
        cfg["flow_reversal"] = FlowReversalConfig(**cfg["flow_reversal"]).to_dict()
        cfg["optimizer"] = optim.OptimizerConfig.from_dict(cfg["optimizer"]).to_dict()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}")
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config: {e}")
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}")
    return resolve_config(raw)


def _loss_cfg(cfg) -> losses.LossConfig:
    return losses.LossConfig(thermal.ThermalRepresentationConfig.from_dict(cfg["thermal"]),
                             FlowReversalConfig(**cfg["flow_reversal"]),
                             cfg["loss"]["transform_depth_values"], cfg["loss"]["detach_mask"])


class _Frame:
    """Minimal frame record for fixtures read back from disk."""

    def __init__(self, rgb, thermal_raw, depth, pose):
        self.rgb, self.thermal_raw, self.gt_depth_T, self.pose = rgb, thermal_raw, depth, pose


def load_snippet(cfg):
    """Returns (frames, rig) from the fixture directory or by rendering the scene."""
    if cfg["fixture"] is not None:
        rgb, th, depth, poses, rig = io.read_fixture(cfg["fixture"])
        frames = [_Frame(*a) for a in zip(rgb, th, depth, poses)]
        rig = Rig.from_dict(rig)
    else:
        spec = synth.SceneSpec.from_dict(cfg["scene"])
        frames, rig = synth.render_sequence(spec), spec.rig
    if len(frames) < 3:
        raise DomainError("a snippet needs three frames")
    return frames[:3], rig


def initial_state(cfg, frames, jitter=None) -> optim.OptimState:
    s = cfg["state"]
    if s.get("init") is not None:
        depths = io.read_depth_dir(os.path.join(s["init"], "depth"))
        rel = io.read_poses(os.path.join(s["init"], "relative_poses.json"))
        poses = [RigidPose.from_matrix(P) for P in rel]
    else:
        depths = [f.gt_depth_T for f in frames]
        poses = losses.relative_poses_from_absolute([RigidPose.from_matrix(f.pose) for f in frames])
    if len(depths) != 3 or len(poses) != 2:
        raise DomainError("initial state needs three depth maps and two relative poses")
    st = optim.OptimState.from_depths_poses(depths, poses)
    if jitter is not None and not s.get("perturb"):
        s = dict(jitter, perturb=True)
    if s.get("perturb"):
        st = optim.perturb_state(st, np.random.default_rng(cfg["seed"]), tuple(s["depth_noise"]),
                                 s["rot_deg"], s["trans_m"])
    return st


def _manifest(out, command, cfg, extra=None):
    body = {"command": command, "version": __version__, "config": cfg}
    if extra:
        body.update(extra)
    io.write_json(os.path.join(out, "manifest.json"), body)


def _echo(cfg):
    """Config as recorded in manifests; the output location is not part of the run."""
    c = copy.deepcopy(cfg)
    c.pop("output", None)
    return c


# ---------------------------------------------------------------------------
# subcommands

def cmd_render(args, cfg):
    if cfg["fixture"] is not None:
        raise UsageError("render needs a scene, not a fixture")
    spec = synth.SceneSpec.from_dict(cfg["scene"])
    frames = synth.render_sequence(spec)
    out = cfg["output"]
    io.write_fixture(out, frames, spec.rig)
    io.write_json(os.path.join(out, "scene.json"), spec.to_dict())
    _manifest(out, "render", _echo(cfg))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_loss(args, cfg):
    frames, rig = load_snippet(cfg)
    st = initial_state(cfg, frames)
    W = losses.LossWeights(**cfg["weights"])
    with torch.no_grad():
        rep = losses.snippet_loss(frames, list(st.depths), st.poses(), W, rig, _loss_cfg(cfg))
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "loss.json"), "w") as f:
        f.write(rep.to_json() + "\n")
    _manifest(out, "loss", _echo(cfg))
    print(rep.to_json())
    return 0


def cmd_gradcheck(args, cfg):
    frames, rig = load_snippet(cfg)
    g = cfg["gradcheck"]
    st = initial_state(cfg, frames, jitter=g["jitter"])
    rep = optim.finite_diff_check(st, frames, losses.LossWeights(**cfg["weights"]), rig,
                                  step=g["step"], n_depth=g["n_depth"], seed=cfg["seed"],
                                  loss_cfg=_loss_cfg(cfg), atol=g["atol"])
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    io.write_json(os.path.join(out, "gradcheck.json"), rep.to_dict())
    _manifest(out, "gradcheck", _echo(cfg))
    ok = rep.max_rel_err <= g["threshold"]
    print(f"checked {rep.n_checked} parameters ({rep.n_excluded} at kinks): "
          f"max rel err {rep.max_rel_err:.3e}, mean {rep.mean_rel_err:.3e} -> "
          f"{'ok' if ok else 'FAILED'}")
    if not ok:
        print(f"worst: {rep.worst}", file=sys.stderr)
    return 0 if ok else 1


def absolute_poses(first, rel) -> list[np.ndarray]:
    """Chain relative thermal motions into camera-to-world matrices starting at ``first``."""
    P = [np.asarray(first, dtype=np.float64)]
    for T in rel:
        P.append(P[-1] @ se3_inverse(T).matrix().numpy())
    return P


def cmd_refine(args, cfg):
    frames, rig = load_snippet(cfg)
    st = initial_state(cfg, frames)
    oc = optim.OptimizerConfig.from_dict(cfg["optimizer"])
    if oc.time_limit is not None:
        raise UsageError("time_limit makes runs non-reproducible; leave it null on the CLI")
    res = optim.refine(st, frames, losses.LossWeights(**cfg["weights"]), rig, oc, _loss_cfg(cfg))
    out = cfg["output"]
    os.makedirs(os.path.join(out, "depth"), exist_ok=True)
    for i, d in enumerate(res.state.depths):
        io.write_pfm(os.path.join(out, "depth", io.frame_name(i, "pfm")), d.numpy())
    rel = res.state.poses()
    io.write_poses(os.path.join(out, "relative_poses.json"), [p.matrix().numpy() for p in rel])
    io.write_poses(os.path.join(out, "poses.json"), absolute_poses(frames[0].pose, rel))
    with open(os.path.join(out, "trace.csv"), "w") as f:
        f.write(optim.trace_to_csv(res.trace))
    _manifest(out, "refine", _echo(cfg), {"status": res.status, "iterations": res.state.iteration})
    print(f"{res.status} after {res.state.iteration} iterations: "
          f"total {res.trace[0]['total']:.6g} -> {res.trace[-1]['total']:.6g}")
    return 0


def cmd_eval_depth(args, cfg=None):
    pred = io.read_depth_dir(args.pred_dir)
    gt = io.read_depth_dir(args.gt_dir)
    if len(pred) != len(gt) or not gt:
        raise DomainError(f"{len(pred)} predicted vs {len(gt)} ground-truth depth maps")
    m = evaluation.mean_depth_metrics(zip(pred, gt), cap=args.cap, median_scale=not args.no_median_scale)
    print(evaluation.depth_table(m), end="")
    if args.json:
        io.write_json(args.json, m.to_dict())
    return 0


def cmd_eval_pose(args, cfg=None):
    m = evaluation.pose_metrics_5frame(io.read_poses(args.pred), io.read_poses(args.gt))
    print(m.table(), end="")
    if args.json:
        io.write_json(args.json, m.to_dict())
    return 0


def cmd_thermal_view(args, cfg=None):
    raw = io.read_pgm(args.input)
    tcfg = thermal.ThermalRepresentationConfig(thermal.Strategy(args.strategy), args.clip_lo, args.clip_hi)
    img = thermal.normalize(raw, tcfg).numpy()
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    io.write_ppm(args.output, img)
    return 0


CONFIG_COMMANDS = {"render": cmd_render, "loss": cmd_loss, "gradcheck": cmd_gradcheck,
                   "refine": cmd_refine}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thermoflux", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="intra-op threads (default: all cores); results do not depend on it")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in CONFIG_COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", nargs="?", default=None, help="JSON run config")
        s.add_argument("-o", "--output", default=None, help="output directory (overrides config)")
    s = sub.add_parser("eval-depth")
    s.add_argument("pred_dir")
    s.add_argument("gt_dir")
    s.add_argument("--cap", type=float, default=evaluation.DEPTH_CAPS["indoor"])
    s.add_argument("--no-median-scale", action="store_true")
    s.add_argument("--json", default=None, help="also write metrics JSON here")
    s = sub.add_parser("eval-pose")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--json", default=None)
    s = sub.add_parser("thermal-view")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--strategy", default=thermal.Strategy.CLIP_COLORIZE.value,
                   choices=[s.value for s in thermal.Strategy])
    s.add_argument("--clip-lo", type=float, default=None)
    s.add_argument("--clip-hi", type=float, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            torch.set_num_threads(args.threads)
        cfg = None
        if args.command in CONFIG_COMMANDS:
            cfg = load_config(args.config)
            if args.output is not None:
                cfg["output"] = args.output
            return CONFIG_COMMANDS[args.command](args, cfg)
        return {"eval-depth": cmd_eval_depth, "eval-pose": cmd_eval_pose,
                "thermal-view": cmd_thermal_view}[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"thermoflux: error: {e}", file=sys.stderr)
        return 2
    except (DomainError, optim.NonFiniteGradient, OSError) as e:
        print(f"thermoflux: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
