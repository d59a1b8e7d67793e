"""End-to-end registration: preprocessing, the window-doubling refinement
loop, checkpointing, and output artifacts.

Each refinement iteration detects constraints inside windows of l_i frames
(l doubling every iteration until one window spans the whole sequence, that
iteration included) and solves for all camera poses and proxy planes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import features as features_mod
from .constraints import (
    ConstraintConfig,
    ConstraintSet,
    Correspondences,
    detect_relations,
    cluster_coplanar,
    find_correspondences,
    leaves_from_patches,
    make_windows,
    sample_proxy_fits,
    subsample_correspondences,
)
from .features import FeatureConfig, KeypointsUnavailable
from .geom import RigidTransform
from .ingest.frames import DepthFrame
from .pairwise import PairwiseConfig, STATUS_FALLBACK, LocalAlignment, align_pair, concatenate
from .solver import (
    EnergyWeights,
    SolverError,
    SolverOptions,
    build_problem,
    make_state,
    solve,
)
from .trajectory import Trajectory

CHECKPOINT_VERSION = 1


class PipelineError(RuntimeError):
    pass


class PreprocessingError(PipelineError):
    pass


class SolveAbort(PipelineError):
    def __init__(self, iteration, cause):
        super().__init__(f"solver aborted at iteration {iteration}: {cause}")
        self.iteration = iteration


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    l0: int = 16
    seed: int = 0
    n_iter: int = 0  # 0 = derive from l0 and the frame count
    fixed_window: bool = False  # ablation: every window spans the whole scan
    structure: bool = True  # ablation: disable structural constraints
    depth_mode: str = "millimeters"
    features: FeatureConfig = FeatureConfig()
    pairwise: PairwiseConfig = PairwiseConfig()
    constraints: ConstraintConfig = ConstraintConfig()
    solver: SolverOptions = SolverOptions()
    weights: EnergyWeights = EnergyWeights()

    def __post_init__(self):
        if self.l0 < 2:
            raise ConfigError(f"l0 must be >= 2, got {self.l0}")

    def items(self):
        """Flat (dotted key, value) pairs, sorted by key."""
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for sub in dataclasses.fields(v):
                    out.append((f"{f.name}.{sub.name}", getattr(v, sub.name)))
            else:
                out.append((f.name, v))
        return sorted(out)

    def hash(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in self.items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.items()) + "\n"


def config_with_overrides(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Apply dotted-key overrides with field-typed coercion; unknown keys are
    rejected."""
    groups: dict[str, dict] = {}
    top: dict = {}
    valid_top = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    for key, raw in overrides.items():
        if "." in key:
            section, _, name = key.partition(".")
            if section not in valid_top or not dataclasses.is_dataclass(getattr(base, section)):
                raise ConfigError(f"unknown config key {key!r}")
            sub = getattr(base, section)
            subfields = {f.name: f for f in dataclasses.fields(sub)}
            if name not in subfields:
                raise ConfigError(f"unknown config key {key!r}")
            groups.setdefault(section, {})[name] = _coerce(raw, getattr(sub, name))
        else:
            if key not in valid_top or dataclasses.is_dataclass(getattr(base, key)):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, getattr(base, key))
    for section, vals in groups.items():
        top[section] = dataclasses.replace(getattr(base, section), **vals)
    return dataclasses.replace(base, **top)


def _coerce(raw, current):
    if isinstance(raw, str):
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"cannot parse boolean from {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    return raw


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a key=value config file (dotted keys address sub-sections)."""
    base = base or PipelineConfig()
    overrides = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            overrides[key.strip()] = val.strip()
    return config_with_overrides(base, overrides)


def iteration_count(n_frames: int, cfg: PipelineConfig) -> int:
    """Number of refinement iterations: window lengths l0 * 2^i until one
    window covers the trajectory, that iteration included."""
    if cfg.n_iter > 0:
        return cfg.n_iter
    count = 1
    length = cfg.l0
    while length < n_frames:
        length *= 2
        count += 1
    return count


@dataclass
class IterationResult:
    poses: np.ndarray
    cset: ConstraintSet
    proxies: np.ndarray
    report: object


def run_iteration(
    poses6: np.ndarray,
    t0_poses6: np.ndarray,
    features: list,
    leaves: list,
    iteration: int,
    window_length: int,
    windows_by_iteration: list,
    cfg: PipelineConfig,
) -> IterationResult:
    """One E-M refinement pass: detect constraints in every window of the
    given length, then minimize the energy over poses and proxy planes."""
    n = poses6.shape[0]
    poses = [RigidTransform(poses6[i, :3], poses6[i, 3:]) for i in range(n)]
    windows = make_windows(n, window_length, iteration)

    parents = []
    coplanarity = []
    if cfg.structure:
        leaves_by_frame: dict[int, list] = {}
        for leaf in leaves:
            leaves_by_frame.setdefault(leaf.frame, []).append(leaf)
        for w in windows:
            in_window = [
                leaf
                for f in range(w.first_frame, w.last_frame + 1)
                for leaf in leaves_by_frame.get(f, [])
            ]
            p, h = cluster_coplanar(
                in_window, poses, cfg.constraints, window_index=w.index, id_start=len(leaves) + len(parents)
            )
            parents.extend(p)
            coplanarity.extend(h)
        relations = detect_relations(parents, cfg.constraints)
    else:
        relations = []

    corr = find_correspondences(
        features,
        windows,
        poses,
        windows_by_iteration,
        iteration,
        cfg.constraints,
        seed=cfg.seed,
    )
    corr = subsample_correspondences(
        corr, n, seed=cfg.seed + iteration, per_frame=cfg.constraints.corr_per_frame
    )
    if cfg.structure:
        fits = sample_proxy_fits(
            parents, leaves, features, n, seed=cfg.seed + iteration, per_frame=cfg.constraints.corr_per_frame
        )
    else:
        fits = sample_proxy_fits([], [], features, n)

    cset = ConstraintSet(
        leaves=leaves,
        parents=parents,
        coplanarity=coplanarity,
        relations=relations,
        correspondences=corr,
        proxy_fits=fits,
        iteration=iteration,
    )

    proxies6 = np.array(
        [[*p.plane.normal, *p.plane.point] for p in parents], dtype=np.float64
    ).reshape(-1, 6)
    state = make_state(poses6, proxies6)
    problem = build_problem(cset, features, t0_poses6, cfg.weights, state)
    try:
        out, report = solve(state, problem, cfg.solver)
    except SolverError as e:
        raise SolveAbort(iteration, e) from e
    return IterationResult(poses=out.poses, cset=cset, proxies=out.proxies, report=report)


def _checkpoint_path(directory, iteration):
    return os.path.join(directory, f"state_iter_{iteration:03d}.npz")


def save_checkpoint(directory, iteration, poses6, config: PipelineConfig) -> None:
    os.makedirs(directory, exist_ok=True)
    np.savez(
        _checkpoint_path(directory, iteration),
        version=np.array([CHECKPOINT_VERSION]),
        iteration=np.array([iteration]),
        poses=poses6,
        config_hash=np.frombuffer(config.hash().encode(), dtype=np.uint8),
    )


def load_checkpoint(directory, config: PipelineConfig):
    """Latest completed iteration and its poses, or None."""
    if not os.path.isdir(directory):
        return None
    best = None
    for name in sorted(os.listdir(directory)):
        if name.startswith("state_iter_") and name.endswith(".npz"):
            best = os.path.join(directory, name)
    if best is None:
        return None
    data = np.load(best)
    if int(data["version"][0]) != CHECKPOINT_VERSION:
        raise PipelineError(
            f"checkpoint {best} has version {int(data['version'][0])}, want {CHECKPOINT_VERSION}"
        )
    stored = bytes(data["config_hash"]).decode()
    if stored != config.hash():
        raise PipelineError(
            f"checkpoint {best} was produced with config {stored}, current is {config.hash()}"
        )
    return int(data["iteration"][0]), data["poses"]


def structural_model_dump(cset: ConstraintSet, proxies6: np.ndarray, config_hash: str) -> dict:
    """JSON-ready structural model: proxies (post-solve planes), hierarchy
    edges, relations."""
    parents = []
    for i, p in enumerate(cset.parents):
        parents.append(
            {
                "id": p.id,
                "window": p.window,
                "normal": [float(x) for x in proxies6[i, :3]],
                "point": [float(x) for x in proxies6[i, 3:]],
                "inliers": p.inlier_count,
                "children": list(p.children),
            }
        )
    leaves = [
        {
            "id": leaf.id,
            "frame": leaf.frame,
            "patch": leaf.patch,
            "normal": [float(x) for x in leaf.plane_cam.normal],
            "point": [float(x) for x in leaf.plane_cam.point],
            "inliers": leaf.inlier_count,
        }
        for leaf in cset.leaves
    ]
    return {
        "config_hash": config_hash,
        "iteration": cset.iteration,
        "proxies": parents,
        "leaves": leaves,
        "coplanarity": [{"parent": c.parent, "child": c.child} for c in cset.coplanarity],
        "relations": [
            {"kind": r.kind, "a": r.a, "b": r.b, "weight": r.weight} for r in cset.relations
        ],
    }


@dataclass
class RegistrationResult:
    trajectory: Trajectory
    structural_model: dict
    energy_rows: list = field(default_factory=list)
    t0: Trajectory | None = None


def preprocess(
    frames: list[DepthFrame],
    cfg: PipelineConfig,
    local_alignments=None,
    matches: dict | None = None,
    cache_dir=None,
):
    """Features, leaf proxies, and the concatenated initial trajectory.

    local_alignments (n-1 transforms) or matches ({(a, b): (pts_a, pts_b)})
    bypass keypoint detection.
    """
    patches_per_frame = []
    features = []
    for frame in frames:
        cache_path = os.path.join(cache_dir, f"features_{frame.index:06d}.npz") if cache_dir else None
        if cache_path and os.path.exists(cache_path):
            patches, feats = features_mod.load_feature_cache(cache_path)
        else:
            patches, feats = features_mod.extract_frame(frame, cfg.features)
            if cache_path:
                features_mod.save_feature_cache(cache_path, patches, feats)
        patches_per_frame.append(patches)
        features.append(feats)
    leaves = leaves_from_patches(patches_per_frame)

    n = len(frames)
    if local_alignments is not None:
        if len(local_alignments) != n - 1:
            raise PreprocessingError(
                f"need {n - 1} local alignments for {n} frames, got {len(local_alignments)}"
            )
        aligns = [
            a if isinstance(a, LocalAlignment) else LocalAlignment(a, 0, "ok") for a in local_alignments
        ]
    else:
        aligns = []
        fallbacks = 0
        keypoints: dict[int, object] = {}

        def kp(k):
            if k not in keypoints:
                try:
                    keypoints[k] = features_mod.detect_keypoints(frames[k], cfg.features)
                except KeypointsUnavailable:
                    keypoints[k] = None
            return keypoints[k]

        for k in range(1, n):
            if matches is not None and (k - 1, k) in matches:
                pa, pb = matches[(k - 1, k)]
                a = align_pair(None, None, matches=(pa, pb), cfg=cfg.pairwise, seed=cfg.seed + k)
            else:
                ka, kb = kp(k - 1), kp(k)
                if ka is None or kb is None:
                    a = LocalAlignment(RigidTransform(), 0, STATUS_FALLBACK)
                else:
                    a = align_pair(ka, kb, cfg=cfg.pairwise, seed=cfg.seed + k)
            if a.status == STATUS_FALLBACK:
                fallbacks += 1
            aligns.append(a)
        if n > 1 and fallbacks * 2 > n - 1:
            raise PreprocessingError(
                f"pairwise alignment failed for {fallbacks} of {n - 1} frame pairs"
            )
    t0_list = concatenate(aligns)
    t0 = np.array([[*p.euler, *p.translation] for p in t0_list])
    return features, leaves, t0


def register(
    frames: list[DepthFrame],
    cfg: PipelineConfig = PipelineConfig(),
    local_alignments=None,
    matches=None,
    cache_dir=None,
    checkpoint_dir=None,
    resume=False,
) -> RegistrationResult:
    """Run the full refinement and return the final trajectory plus the
    final-iteration structural model."""
    n = len(frames)
    if n < 2:
        raise PreprocessingError(f"need at least 2 frames, got {n}")
    features, leaves, t0 = preprocess(frames, cfg, local_alignments, matches, cache_dir)

    total_iters = iteration_count(n, cfg)
    lengths = [n if cfg.fixed_window else min(cfg.l0 * 2**i, n) for i in range(total_iters)]
    windows_by_iteration = [make_windows(n, ln, i) for i, ln in enumerate(lengths)]

    start_iter = 0
    poses = t0.copy()
    if resume and checkpoint_dir:
        loaded = load_checkpoint(checkpoint_dir, cfg)
        if loaded is not None:
            done, poses = loaded
            start_iter = done + 1

    energy_rows = []
    last_result = None
    for i in range(start_iter, total_iters):
        result = run_iteration(
            poses, t0, features, leaves, i, lengths[i], windows_by_iteration, cfg
        )
        poses = result.poses
        last_result = result
        for row in result.report.log:
            energy_rows.append({"outer": i, **row})
        if checkpoint_dir:
            save_checkpoint(checkpoint_dir, i, poses, cfg)

    meta = {
        "config": cfg.hash(),
        "iterations": total_iters,
        "frames": n,
    }
    if last_result is not None:
        meta["final_energy"] = f"{last_result.report.final_energy:.9e}"
        model = structural_model_dump(last_result.cset, last_result.proxies, cfg.hash())
    else:  # fully resumed; rebuild the final model from the checkpointed poses
        result = run_iteration(
            poses, t0, features, leaves, total_iters - 1, lengths[-1], windows_by_iteration, cfg
        )
        model = structural_model_dump(result.cset, result.proxies, cfg.hash())
    traj = Trajectory(
        poses=[RigidTransform(poses[i, :3], poses[i, 3:]) for i in range(n)], meta=meta
    )
    t0_traj = Trajectory(poses=[RigidTransform(t0[i, :3], t0[i, 3:]) for i in range(n)])
    return RegistrationResult(
        trajectory=traj, structural_model=model, energy_rows=energy_rows, t0=t0_traj
    )


def write_energy_log(path, rows) -> None:
    cols = ["outer", "iteration", "lambda", "energy", "accepted"]
    terms = ["h", "g", "p", "c", "l", "i"]
    with open(path, "w") as f:
        f.write(",".join(cols + [f"e_{t}" for t in terms]) + "\n")
        for row in rows:
            vals = [str(row.get(c, "")) for c in cols]
            tv = row.get("terms", {})
            vals += [f"{tv[t]:.9e}" if t in tv else "" for t in terms]
            f.write(",".join(vals) + "\n")
