"""Evaluation protocol: RMSE against annotated point correspondences, the
correspondence-only lower bound, the frame-offset error histogram, and the
ablation matrix.

A benchmark file is a JSON array of pixel-pair records
{frame_a, u_a, v_a, frame_b, u_b, v_b}; each pixel is backprojected through
its frame's depth to a camera-space point, cached at load time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .geom import RigidTransform
from .ingest.frames import DepthFrame
from .pipeline import PipelineConfig, register
from .solver import (
    EnergyWeights,
    PointBlock,
    SolverOptions,
    make_problem,
    make_state,
    solve,
)
from .trajectory import Trajectory


class BenchmarkError(ValueError):
    pass


@dataclass
class GroundTruthCorrespondence:
    frame_a: int
    frame_b: int
    pixel_a: tuple
    pixel_b: tuple
    point_a: np.ndarray  # camera space, cached at load
    point_b: np.ndarray


@dataclass
class BenchmarkReport:
    rmse: float
    errors: np.ndarray
    lower_bound: float | None = None
    histogram: list = field(default_factory=list)


def _backproject_pixel(frame: DepthFrame, u: int, v: int):
    intr = frame.intrinsics
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        return None
    z = frame.depth[v, u]
    if z <= 0:
        return None
    return np.array([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])


def load_benchmark(path, frames: list[DepthFrame]):
    """Parse and backproject the annotation file.

    Returns (correspondences, dropped) where dropped counts records whose
    pixels had no valid depth.
    """
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise BenchmarkError(f"{path}: expected a JSON array of records")
    out = []
    dropped = 0
    for i, rec in enumerate(doc):
        try:
            fa, fb = int(rec["frame_a"]), int(rec["frame_b"])
            ua, va = int(rec["u_a"]), int(rec["v_a"])
            ub, vb = int(rec["u_b"]), int(rec["v_b"])
        except (KeyError, TypeError, ValueError) as e:
            raise BenchmarkError(f"{path}: malformed record {i}: {e}") from None
        if not (0 <= fa < len(frames) and 0 <= fb < len(frames)):
            raise BenchmarkError(f"{path}: record {i} references missing frame")
        if fa >= fb:
            raise BenchmarkError(f"{path}: record {i} must have frame_a < frame_b")
        pa = _backproject_pixel(frames[fa], ua, va)
        pb = _backproject_pixel(frames[fb], ub, vb)
        if pa is None or pb is None:
            dropped += 1
            continue
        out.append(
            GroundTruthCorrespondence(
                frame_a=fa, frame_b=fb, pixel_a=(ua, va), pixel_b=(ub, vb), point_a=pa, point_b=pb
            )
        )
    return out, dropped


def save_benchmark(path, records: list[dict], meta: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(records, f)
    if meta is not None:
        with open(str(path) + ".meta.json", "w") as f:
            json.dump(meta, f, indent=1)


def correspondence_errors(trajectory: Trajectory, corrs) -> np.ndarray:
    """Per-pair distances between the two transformed endpoints."""
    n = len(trajectory)
    for c in corrs:
        if c.frame_a >= n or c.frame_b >= n:
            raise BenchmarkError(f"trajectory has {n} poses but pair references frame {max(c.frame_a, c.frame_b)}")
    errs = np.empty(len(corrs))
    for i, c in enumerate(corrs):
        wa = trajectory[c.frame_a].apply(c.point_a)
        wb = trajectory[c.frame_b].apply(c.point_b)
        errs[i] = np.linalg.norm(wa - wb)
    return errs


def rmse(trajectory: Trajectory, corrs) -> float:
    """Root mean squared 3D distance over all annotated pairs."""
    if not corrs:
        raise BenchmarkError("no correspondences to evaluate")
    errs = correspondence_errors(trajectory, corrs)
    return float(np.sqrt(np.mean(errs**2)))


def _connected_components(n, corrs):
    root = list(range(n))

    def find(i):
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    for c in corrs:
        a, b = find(c.frame_a), find(c.frame_b)
        if a != b:
            root[b] = a
    return [find(i) for i in range(n)]


def lower_bound(corrs, n_frames: int, w_i: float = 1e-8) -> float:
    """Best achievable RMSE on these pairs: align them with point-to-point
    rows only (plus a vanishing inertia weight), one gauge-fixed pose per
    connected component of the frame graph."""
    if not corrs:
        raise BenchmarkError("no correspondences to align")
    comps = _connected_components(n_frames, corrs)
    fixed = np.zeros(n_frames, dtype=bool)
    seen = set()
    for i, c in enumerate(comps):
        if c not in seen:
            seen.add(c)
            fixed[i] = True
    state = make_state(np.zeros((n_frames, 6)), fixed=fixed)
    block = PointBlock(
        frame_a=np.array([c.frame_a for c in corrs], dtype=np.int64),
        pos_a=np.array([c.point_a for c in corrs]),
        frame_b=np.array([c.frame_b for c in corrs], dtype=np.int64),
        pos_b=np.array([c.point_b for c in corrs]),
    )
    weights = EnergyWeights(w_i=w_i)
    problem = make_problem(state, weights, pt=block)
    options = SolverOptions(max_inner_iterations=100, relative_tolerance=1e-12)
    out, _ = solve(state, problem, options)
    traj = Trajectory(poses=[RigidTransform(out.poses[i, :3], out.poses[i, 3:]) for i in range(n_frames)])
    return rmse(traj, corrs)


DEFAULT_BIN_EDGES = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384)


@dataclass
class HistogramBin:
    lo: int
    hi: int  # exclusive
    count: int
    mean_error: float
    mean_sq_error: float


def offset_histogram(trajectory: Trajectory, corrs, edges=DEFAULT_BIN_EDGES) -> list[HistogramBin]:
    """Per-bin error statistics of pairs grouped by |frame_b - frame_a| on
    logarithmic bin edges."""
    errs = correspondence_errors(trajectory, corrs)
    offsets = np.array([c.frame_b - c.frame_a for c in corrs])
    edges = list(edges)
    if offsets.size and offsets.max() >= edges[-1]:
        edges.append(int(offsets.max()) + 1)
    bins = []
    for lo, hi in zip(edges, edges[1:]):
        sel = (offsets >= lo) & (offsets < hi)
        cnt = int(sel.sum())
        if cnt == 0:
            bins.append(HistogramBin(lo, hi, 0, 0.0, 0.0))
        else:
            bins.append(
                HistogramBin(
                    lo,
                    hi,
                    cnt,
                    float(np.mean(errs[sel])),
                    float(np.mean(errs[sel] ** 2)),
                )
            )
    return bins


@dataclass
class AblationRow:
    name: str
    rmse: float
    constraint_counts: dict


ABLATION_VARIANTS = ("full", "no_structure", "no_fine_to_coarse", "neither")


def run_ablations(
    frames,
    cfg: PipelineConfig,
    corrs,
    local_alignments=None,
) -> list[AblationRow]:
    """The four-variant matrix: structure and window growth on/off, all with
    identical seed and thresholds."""
    rows = []
    for name in ABLATION_VARIANTS:
        variant = dataclasses.replace(
            cfg,
            structure=name in ("full", "no_fine_to_coarse"),
            fixed_window=name in ("no_fine_to_coarse", "neither"),
        )
        if not variant.structure:
            variant = dataclasses.replace(variant, weights=dataclasses.replace(variant.weights, w_s=0.0))
        result = register(frames, variant, local_alignments=local_alignments)
        counts = {
            "coplanarity": len(result.structural_model["coplanarity"]),
            "relations": len(result.structural_model["relations"]),
            "proxies": len(result.structural_model["proxies"]),
        }
        rows.append(AblationRow(name=name, rmse=rmse(result.trajectory, corrs), constraint_counts=counts))
    return rows
