"""Command line front end and the textual file formats behind it.

Five subcommands: simulate (render organized clouds of a synthetic
scene), fit (one patch at a pixel), map (the full per-frame pipeline
over a frame sequence), track (volume policy replay over a trajectory),
and validate (re-run the gates of a stored map against a cloud).

All numbers are serialized with 17 significant digits so files are
byte-identical across runs and round-trip 64-bit floats exactly. Clouds
use the OPC1 text format; patch maps, scene specs, configs, and remap
logs are JSON. Diagnostics go to stderr; stdout stays machine readable.
Exit codes: 0 success, 1 bad input, 2 gate failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import mapping as _mapping
from .fit import fit_patch
from .mapping import (
    MapBudgets,
    MapConfig,
    MovePolicy,
    NeighborhoodIndex,
    NeighborhoodVariant,
    SaliencyConfig,
    init_volume,
    map_step,
    neighborhood,
    remap_patches,
    volume_update,
)
from .patch import BoundaryType, Patch, SurfaceType, patch_frame, transform_patch
from .pose import Pose5, Pose6, pose_inverse, rxy_from_r, rxy_to_r
from .sensor import (
    CameraIntrinsics,
    ConstantNoise,
    LinearNoise,
    OrganizedCloud,
    QuadraticNoise,
    ScenePlane,
    StereoNoise,
    intrinsics_preset,
    sample_scene,
)
from .validate import (
    CoverageConfig,
    ResidualMethod,
    coverage_eval,
    curvature_gate,
    residual,
)


# ---------------------------------------------------------------------------
# Deterministic 17-significant-digit JSON
# ---------------------------------------------------------------------------


def _g17(x: float) -> str:
    if math.isnan(x):
        return "null"
    return "%.17g" % x


def json_dumps(obj, indent: int = 0) -> str:
    """JSON text with floats at 17 significant digits.

    The stdlib writer formats floats with repr, which is round-trip safe
    but not the pinned 17-digit form; this one keeps files byte-stable
    under any interpreter.
    """
    pad = " " * indent
    if obj is None:
        return "null"
    if obj is True or obj is False:
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _g17(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (np.ndarray, list, tuple)):
        items = [json_dumps(v, indent) for v in obj]
        return "[" + ", ".join(items) + "]"
    if isinstance(obj, dict):
        inner = ",\n".join(
            pad + "  " + json.dumps(str(k)) + ": " + json_dumps(v, indent + 2)
            for k, v in obj.items()
        )
        return "{\n" + inner + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def json_line(obj) -> str:
    """Single-line variant for log records, one JSON document per line."""
    if isinstance(obj, dict):
        return "{" + ", ".join(
            json.dumps(str(k)) + ": " + json_line(v) for k, v in obj.items()
        ) + "}"
    if isinstance(obj, (np.ndarray, list, tuple)):
        return "[" + ", ".join(json_line(v) for v in obj) + "]"
    return json_dumps(obj)


# ---------------------------------------------------------------------------
# OPC1 organized cloud files
# ---------------------------------------------------------------------------

_UT = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _noise_tag(noise) -> str:
    if noise is None:
        return "none"
    if isinstance(noise, StereoNoise):
        return f"stereo {_g17(noise.sigma_p)} {_g17(noise.sigma_m)}"
    return f"{noise.kind} {_g17(noise.k)}"


def _parse_noise_tag(tokens: Sequence[str]):
    kind = tokens[0]
    if kind == "none":
        return None
    if kind == "stereo":
        return StereoNoise(sigma_p=float(tokens[1]), sigma_m=float(tokens[2]))
    cls = {"constant": ConstantNoise, "linear": LinearNoise, "quadratic": QuadraticNoise}
    if kind not in cls:
        raise ValueError(f"unknown noise tag: {kind}")
    return cls[kind](float(tokens[1]))


def write_cloud(path: str, cloud: OrganizedCloud, noise=None) -> None:
    intr = cloud.intrinsics
    lines = [
        f"OPC1 {intr.width} {intr.height}",
        "intrinsics "
        + " ".join(_g17(v) for v in (intr.fx, intr.fy, intr.cx, intr.cy, intr.baseline)),
        "noise " + _noise_tag(noise),
        f"cov {int(cloud.cov is not None)}",
    ]
    pts = cloud.points.reshape(-1, 3)
    ok = np.isfinite(pts).all(axis=1)
    for p, good in zip(pts, ok):
        lines.append(" ".join(_g17(v) for v in p) if good else "nan")
    if cloud.cov is not None:
        cvs = cloud.cov.reshape(-1, 3, 3)
        for c, good in zip(cvs, ok):
            if good and np.isfinite(c).all():
                lines.append(" ".join(_g17(c[i, j]) for i, j in _UT))
            else:
                lines.append("nan")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_cloud(path: str) -> Tuple[OrganizedCloud, object]:
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    if not lines or not lines[0].startswith("OPC1 "):
        raise ValueError(f"{path}: not an OPC1 cloud file")
    _, w, h = lines[0].split()
    w, h = int(w), int(h)
    vals = lines[1].split()
    if vals[0] != "intrinsics":
        raise ValueError(f"{path}: missing intrinsics line")
    intr = CameraIntrinsics(
        fx=float(vals[1]), fy=float(vals[2]), cx=float(vals[3]), cy=float(vals[4]),
        width=w, height=h, baseline=float(vals[5]),
    )
    noise = _parse_noise_tag(lines[2].split()[1:])
    has_cov = bool(int(lines[3].split()[1]))
    n = w * h
    body = [ln for ln in lines[4:] if ln]
    expect = n * (2 if has_cov else 1)
    if len(body) != expect:
        raise ValueError(f"{path}: expected {expect} records, found {len(body)}")
    pts = np.full((n, 3), np.nan)
    for i, ln in enumerate(body[:n]):
        if ln != "nan":
            pts[i] = [float(t) for t in ln.split()]
    cov = None
    if has_cov:
        cov = np.full((n, 3, 3), np.nan)
        for i, ln in enumerate(body[n:]):
            if ln != "nan":
                u = [float(t) for t in ln.split()]
                for v, (a, b) in zip(u, _UT):
                    cov[i, a, b] = v
                    cov[i, b, a] = v
        cov = cov.reshape(h, w, 3, 3)
    return OrganizedCloud(points=pts.reshape(h, w, 3), cov=cov, intrinsics=intr), noise


# ---------------------------------------------------------------------------
# Patch map files
# ---------------------------------------------------------------------------


def _pose_vectors(patch: Patch) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(patch.pose, Pose5):
        return rxy_to_r(patch.pose.rxy), np.asarray(patch.pose.t, float)
    return np.asarray(patch.pose.r, float), np.asarray(patch.pose.t, float)


def patch_record(mp: _mapping.MapPatch) -> dict:
    r, t = _pose_vectors(mp.patch)
    return {
        "id": mp.id,
        "surface": mp.patch.s.value,
        "boundary": mp.patch.b.value,
        "k": mp.patch.k,
        "d": mp.patch.d,
        "r": r,
        "t": t,
        "sigma": None if mp.patch.sigma is None else mp.patch.sigma,
        "seed_pixel": list(mp.seed_pixel),
        "frame_index": mp.frame_index,
        "validation": {
            "residual": mp.validation.residual,
            "bad_cells": mp.validation.bad_cells,
            "gates": {
                "curvature": bool(mp.validation.curvature_ok),
                "residual": bool(mp.validation.residual_ok),
                "coverage": bool(mp.validation.coverage_ok),
            },
        },
    }


def _patch_from_record(rec: dict) -> Patch:
    s = SurfaceType(rec["surface"])
    b = BoundaryType(rec["boundary"])
    r = np.asarray(rec["r"], float)
    t = np.asarray(rec["t"], float)
    sigma = None if rec.get("sigma") is None else np.asarray(rec["sigma"], float)
    try:
        return Patch(s, b, rec["k"], rec["d"], Pose6(r, t), sigma)
    except ValueError:
        return Patch(s, b, rec["k"], rec["d"], Pose5(rxy_from_r(r), t), sigma)


def write_patch_map(path: str, state: _mapping.VolumeState) -> None:
    doc = {
        "format": "patch-map",
        "frame": "volume",
        "camera_in_volume": {"r": state.c_t.r, "t": state.c_t.t},
        "volume_world": {"r": state.pose_world.r, "t": state.pose_world.t},
        "v_s": state.v_s,
        "patches": [patch_record(mp) for mp in state.patches],
    }
    with open(path, "w") as f:
        f.write(json_dumps(doc) + "\n")


# ---------------------------------------------------------------------------
# Scene specs
# ---------------------------------------------------------------------------


def _pose_from_spec(d: dict):
    t = np.asarray(d["t"], float)
    if "rxy" in d:
        return Pose5(np.asarray(d["rxy"], float), t)
    return Pose6(np.asarray(d.get("r", [0.0, 0.0, 0.0]), float), t)


def _noise_from_spec(d):
    if d is None:
        return None
    model = d["model"]
    if model == "none":
        return None
    if model == "stereo":
        return StereoNoise(
            sigma_p=float(d.get("sigma_p", 0.35)), sigma_m=float(d.get("sigma_m", 0.17))
        )
    cls = {"constant": ConstantNoise, "linear": LinearNoise, "quadratic": QuadraticNoise}
    if model not in cls:
        raise ValueError(f"unknown noise model: {model}")
    return cls[model](float(d["k"]))


def load_scene_spec(path: str):
    """Parse a scene spec into (surfaces, intrinsics, camera, noise)."""
    with open(path) as f:
        spec = json.load(f)
    intr = spec.get("intrinsics", "kinect-640")
    if isinstance(intr, str):
        intr = intrinsics_preset(intr)
    else:
        intr = CameraIntrinsics(**intr)
    cam = spec.get("camera")
    cam = Pose6(np.zeros(3), np.zeros(3)) if cam is None else Pose6(
        np.asarray(cam.get("r", [0.0, 0.0, 0.0]), float), np.asarray(cam["t"], float)
    )
    noise = _noise_from_spec(spec.get("noise"))
    surfaces = []
    for entry in spec["surfaces"]:
        kind = entry.get("type", "patch")
        if kind == "plane":
            surfaces.append(ScenePlane(np.asarray(entry["normal"], float), float(entry["offset"])))
        elif kind == "patch":
            surfaces.append(
                Patch(
                    SurfaceType(entry["surface"]),
                    BoundaryType(entry["boundary"]),
                    np.asarray(entry["k"], float),
                    np.asarray(entry["d"], float),
                    _pose_from_spec(entry["pose"]),
                    None,
                )
            )
        else:
            raise ValueError(f"unknown surface type: {kind}")
    return surfaces, intr, cam, noise


def _scene_truth(surfaces) -> List[dict]:
    out = []
    for s in surfaces:
        if isinstance(s, ScenePlane):
            out.append({"type": "plane", "normal": s.normal, "offset": s.offset})
        else:
            r, t = _pose_vectors(s)
            out.append(
                {
                    "type": "patch",
                    "surface": s.s.value,
                    "boundary": s.b.value,
                    "k": s.k,
                    "d": s.d,
                    "r": r,
                    "t": t,
                }
            )
    return out


# ---------------------------------------------------------------------------
# Map config files
# ---------------------------------------------------------------------------


def load_map_config(path: Optional[str]):
    """Config JSON -> (MapConfig, MapBudgets, volume kwargs, seed or None)."""
    spec = {}
    if path is not None:
        with open(path) as f:
            spec = json.load(f)
    cfg = MapConfig(
        saliency=SaliencyConfig(**spec.get("saliency", {})),
        neighborhood=NeighborhoodIndex(
            **{
                k: (NeighborhoodVariant(v) if k == "variant" else v)
                for k, v in spec.get("neighborhood", {}).items()
            }
        ),
        n_f=int(spec.get("n_f", 50)),
        surface=spec.get("surface", "paraboloid"),
        gamma=float(spec.get("gamma", 0.95)),
        d_max=float(spec.get("d_max", 0.01)),
        coverage=CoverageConfig(**spec.get("coverage", {})),
        check_coverage=bool(spec.get("check_coverage", True)),
        decimate=int(spec.get("decimate", 0)),
    )
    b = spec.get("budgets", {})
    budgets = MapBudgets(
        n_s=b.get("n_s"),
        work_units=b.get("work_units"),
        wall_clock_s=b.get("wall_clock_s"),
        area_target=b.get("area_target"),
    )
    vol = dict(spec.get("volume", {}))
    if "policy" in vol:
        vol["policy"] = MovePolicy(vol["policy"])
    return cfg, budgets, vol, spec.get("seed")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _seed_or_env(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("PATCHSCAPE_SEED", "0"))


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def cmd_simulate(args) -> int:
    try:
        surfaces, intr, cam, noise = load_scene_spec(args.scene)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        return _fail(f"bad scene spec: {e}")
    if args.no_noise:
        noise = None
    seed = _seed_or_env(args.seed)

    poses = [cam] * args.frames
    if args.trajectory is not None:
        try:
            with open(args.trajectory) as f:
                traj = json.load(f)
            poses = [
                Pose6(np.asarray(p.get("r", [0.0, 0.0, 0.0]), float), np.asarray(p["t"], float))
                for p in traj
            ]
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
            return _fail(f"bad trajectory: {e}")

    frame_paths = []
    for i, pose in enumerate(poses):
        cloud = sample_scene(
            surfaces, intr, camera_pose=pose, noise=noise, rng=np.random.default_rng((seed, i))
        )
        path = f"{args.out}_{i:03d}.opc"
        write_cloud(path, cloud, noise)
        frame_paths.append(path)

    truth = {
        "seed": seed,
        "noise": _noise_tag(noise),
        "frames": frame_paths,
        "camera_per_frame": [{"r": p.r, "t": p.t} for p in poses],
        "surfaces": _scene_truth(surfaces),
    }
    with open(f"{args.out}_truth.json", "w") as f:
        f.write(json_dumps(truth) + "\n")
    print("\n".join(frame_paths))
    return 0


def cmd_fit(args) -> int:
    try:
        cloud, _ = read_cloud(args.cloud)
    except (OSError, ValueError) as e:
        return _fail(str(e))
    col, row = args.pixel
    h, w = cloud.points.shape[:2]
    if not (0 <= row < h and 0 <= col < w) or not np.isfinite(cloud.points[row, col, 2]):
        return _fail(f"pixel ({col}, {row}) is out of range or has no return")
    seed = _seed_or_env(args.seed)
    index = NeighborhoodIndex()
    try:
        nb = neighborhood(index, cloud, np.array([row, col]), args.radius, n_f=1 << 30)
    except ValueError as e:
        return _fail(str(e))
    if len(nb.points) < 13:
        return _fail(f"only {len(nb.points)} neighbors within {args.radius} m")

    rng = np.random.default_rng(seed)
    if len(nb.points) > args.n_f:
        pick = np.sort(rng.choice(len(nb.points), size=args.n_f, replace=False))
        fit_pts = nb.points[pick]
        fit_cvs = nb.covs[pick] if nb.covs is not None else None
    else:
        fit_pts, fit_cvs = nb.points, nb.covs
    try:
        fit = fit_patch(
            fit_pts,
            fit_cvs,
            surface=args.surface,
            plane_boundary=BoundaryType(args.boundary),
            gamma=args.gamma,
            viewpoint=np.zeros(3),
            side_wall=True,
        )
    except (ValueError, np.linalg.LinAlgError) as e:
        return _fail(f"fit failed: {e}")

    patch = fit.patch
    gate = SaliencyConfig().gate
    curv_ok = curvature_gate(patch, gate)
    R_l, t_l = patch_frame(patch)
    res = float(residual(patch, (fit_pts - t_l) @ R_l, ResidualMethod.EXACT))
    res_ok = res <= args.d_max
    report = coverage_eval(patch, (nb.points - t_l) @ R_l, CoverageConfig())
    cov_ok = bool(report.passed)

    rec = _mapping.MapPatch(
        id=0,
        patch=patch,
        cell=(0, 0),
        seed_pixel=(row, col),
        seed_point=cloud.points[row, col],
        frame_index=0,
        validation=_mapping.ValidationRecord(
            residual=res,
            bad_cells=len(report.bad_cells),
            curvature_ok=curv_ok,
            residual_ok=res_ok,
            coverage_ok=cov_ok,
        ),
    )
    out = patch_record(rec)
    out["gamma"] = args.gamma
    print(json_dumps(out))
    return 0 if (curv_ok and res_ok and cov_ok) else 2


def cmd_map(args) -> int:
    try:
        cfg, budgets, vol_kwargs, cfg_seed = load_map_config(args.config)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
        return _fail(f"bad config: {e}")
    seed = _seed_or_env(args.seed if args.seed is not None else cfg_seed)

    gravities = None
    if args.gravity is not None:
        try:
            with open(args.gravity) as f:
                gspec = json.load(f)
            if "g_per_frame" in gspec:
                gravities = [np.asarray(g, float) for g in gspec["g_per_frame"]]
            else:
                gravities = [np.asarray(gspec["g"], float)]
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
            return _fail(f"bad gravity file: {e}")

    state = init_volume(**vol_kwargs)
    stats_rows = []
    for i, frame in enumerate(args.frames):
        try:
            cloud, _ = read_cloud(frame)
        except (OSError, ValueError) as e:
            return _fail(str(e))
        if gravities is None:
            g = np.array([0.0, 1.0, 0.0])
        else:
            g = gravities[min(i, len(gravities) - 1)]
        res = map_step(
            state, cloud, g, budgets=budgets, config=cfg, rng_seed=(seed, i)
        )
        row = {
            "frame": i,
            "seeds": res.n_seeds,
            "fits": res.n_attempts,
            "admitted": len(res.admitted),
        }
        row.update({f"drop_{k}": v for k, v in res.drops.items()})
        row.update({f"t_{k}_s": round(res.timings.get(k, 0.0), 6) for k in
                    ("saliency", "seeds", "fit_validate", "total")})
        stats_rows.append(row)

    write_patch_map(args.out, state)
    if args.stats is not None and stats_rows:
        with open(args.stats, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(stats_rows[0]))
            writer.writeheader()
            writer.writerows(stats_rows)
    print(args.out)
    return 0


def cmd_track(args) -> int:
    if args.policy not in [p.value for p in MovePolicy]:
        return _fail(f"unknown policy: {args.policy}")
    policy = MovePolicy(args.policy)
    try:
        with open(args.trajectory) as f:
            traj = json.load(f)
        poses = [
            Pose6(np.asarray(p.get("r", [0.0, 0.0, 0.0]), float), np.asarray(p["t"], float))
            for p in traj
        ]
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        return _fail(f"bad trajectory: {e}")
    if not poses:
        return _fail("trajectory is empty")

    g = np.asarray(args.g, float)
    fwd = np.asarray(args.forward, float)
    state = init_volume(poses[0], policy=policy, c_d=args.c_d, c_a=args.c_a)

    if args.map is not None:
        try:
            with open(args.map) as f:
                doc = json.load(f)
            for rec in doc["patches"]:
                patch = _patch_from_record(rec)
                _, t = _pose_vectors(patch)
                state.patches.append(
                    _mapping.MapPatch(
                        id=int(rec["id"]),
                        patch=patch,
                        cell=_mapping._cell_of(t, state.v_s, state.grid.v_g) or (0, 0),
                        seed_pixel=tuple(rec["seed_pixel"]),
                        seed_point=t.copy(),
                        frame_index=int(rec["frame_index"]),
                        validation=_mapping.ValidationRecord(
                            residual=float(rec["validation"]["residual"]),
                            bad_cells=int(rec["validation"]["bad_cells"]),
                            curvature_ok=rec["validation"]["gates"]["curvature"],
                            residual_ok=rec["validation"]["gates"]["residual"],
                            coverage_ok=rec["validation"]["gates"]["coverage"],
                        ),
                    )
                )
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
            return _fail(f"bad patch map: {e}")

    lines = []
    for i, pose in enumerate(poses):
        kwargs = {} if policy in (MovePolicy.FV, MovePolicy.FC) else {"g": g, "forward": fwd}
        state, T = volume_update(state, pose, **kwargs)
        culled: List[int] = []
        if T is not None:
            before = {mp.id for mp in state.patches}
            state = remap_patches(state, T, cull_excess=args.cull)
            culled = sorted(before - {mp.id for mp in state.patches})
        lines.append(
            json_line(
                {
                    "frame": i,
                    "fired": T is not None,
                    "T": None if T is None else {"r": T.r, "t": T.t},
                    "culled": culled,
                }
            )
        )
    lines.append(
        json_line(
            {
                "final": {
                    "pose_world": {"r": state.pose_world.r, "t": state.pose_world.t},
                    "camera_in_volume": {"r": state.c_t.r, "t": state.c_t.t},
                    "patch_ids": [mp.id for mp in state.patches],
                }
            }
        )
    )
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        with open(args.out, "w") as f:
            f.write(text)
        print(args.out)
    else:
        print(text, end="")
    return 0


def cmd_validate(args) -> int:
    try:
        with open(args.map) as f:
            doc = json.load(f)
        cloud, _ = read_cloud(args.cloud)
    except (OSError, ValueError, json.JSONDecodeError) as e:
        return _fail(str(e))
    try:
        cfg, _, _, _ = load_map_config(args.config)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
        return _fail(f"bad config: {e}")

    cam = doc.get("camera_in_volume", {"r": [0.0, 0.0, 0.0], "t": [0.0, 0.0, 0.0]})
    to_cam = pose_inverse(Pose6(np.asarray(cam["r"], float), np.asarray(cam["t"], float)))
    gate = cfg.saliency.gate
    any_fail = False
    for rec in doc.get("patches", []):
        patch_vol = _patch_from_record(rec)
        patch, _ = transform_patch(patch_vol, to_cam)
        row, col = rec["seed_pixel"]
        entry = {"id": rec["id"]}
        try:
            nb = neighborhood(
                cfg.neighborhood, cloud, np.array([int(row), int(col)]),
                cfg.saliency.r, n_f=1 << 30,
            )
            R_l, t_l = patch_frame(patch)
            local = (nb.points - t_l) @ R_l
            res = float(residual(patch, local, ResidualMethod.EXACT))
            report = coverage_eval(patch, local, cfg.coverage)
            entry.update(
                {
                    "residual": res,
                    "bad_cells": len(report.bad_cells),
                    "gates": {
                        "curvature": bool(curvature_gate(patch, gate)),
                        "residual": bool(res <= cfg.d_max),
                        "coverage": bool(report.passed),
                    },
                }
            )
            entry["passed"] = all(entry["gates"].values())
        except ValueError as e:
            entry.update({"error": str(e), "passed": False})
        any_fail |= not entry["passed"]
        print(json_line(entry))
    return 2 if any_fail else 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="patchscape",
        description="Curved-patch mapping toolkit: simulate, fit, map, track, validate.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render organized clouds of a synthetic scene")
    s.add_argument("--scene", required=True, help="scene spec JSON")
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--trajectory", help="JSON list of per-frame camera poses")
    s.add_argument("--no-noise", action="store_true", help="disable the spec's noise model")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one bounded patch at a pixel")
    f.add_argument("--cloud", required=True, help="OPC1 cloud file")
    f.add_argument("--pixel", type=int, nargs=2, metavar=("U", "V"), required=True)
    f.add_argument("--radius", type=float, default=0.1)
    f.add_argument("--surface", default="paraboloid",
                   choices=["paraboloid", "plane", "sphere", "cylinder"])
    f.add_argument("--boundary", default="ellipse",
                   choices=[b.value for b in BoundaryType])
    f.add_argument("--gamma", type=float, default=0.95)
    f.add_argument("--n-f", type=int, default=50)
    f.add_argument("--d-max", type=float, default=0.01)
    f.add_argument("--seed", type=int, default=None)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("map", help="run the mapping pipeline over frames")
    m.add_argument("frames", nargs="*", help="OPC1 frame files in order")
    m.add_argument("--gravity", help="JSON {g: [...]} or {g_per_frame: [[...], ...]}, camera frame")
    m.add_argument("--config", help="pipeline config JSON")
    m.add_argument("--out", required=True, help="patch map output path")
    m.add_argument("--stats", help="per-frame stats CSV path")
    m.add_argument("--seed", type=int, default=None)
    m.set_defaults(func=cmd_map)

    t = sub.add_parser("track", help="replay volume move policies over a trajectory")
    t.add_argument("--trajectory", required=True, help="JSON list of camera poses (world)")
    t.add_argument("--policy", required=True, help="fv | fc | fd | ff")
    t.add_argument("--c-d", type=float, default=0.3)
    t.add_argument("--c-a", type=float, default=0.05)
    t.add_argument("--g", type=float, nargs=3, default=[0.0, 1.0, 0.0], help="gravity, world")
    t.add_argument("--forward", type=float, nargs=3, default=[0.0, 0.0, 1.0])
    t.add_argument("--map", help="preload patches from a patch map file")
    t.add_argument("--cull", action="store_true", help="cull per-cell overflow on remap")
    t.add_argument("--out", help="log path (stdout when omitted)")
    t.set_defaults(func=cmd_track)

    v = sub.add_parser("validate", help="re-run the gates of a patch map against a cloud")
    v.add_argument("--map", required=True)
    v.add_argument("--cloud", required=True)
    v.add_argument("--config", help="same config JSON the map was built with")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
