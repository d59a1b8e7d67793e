"""Depth frame containers and on-disk formats.

Depth images are 16-bit single-channel PNGs.  Two storage conventions are
supported: plain millimeters, and a variant whose 16-bit values are
bit-rotated right by 3 before the millimeter scaling (as used by some
structured-light capture archives).  Intrinsics live in a plain-text file of
key=value lines; a manifest is a text file with one depth path per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

MAX_DEPTH_M = 12.0

DEPTH_MODES = ("millimeters", "sun3d_shift")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise IngestError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise IngestError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )


@dataclass
class DepthFrame:
    """One RGB-D frame: depth in meters (0 = invalid) plus optional gray."""

    index: int
    depth: np.ndarray
    intrinsics: Intrinsics
    gray: np.ndarray | None = None


def load_intrinsics(path) -> Intrinsics:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    try:
        return Intrinsics(
            fx=values["fx"],
            fy=values["fy"],
            cx=values["cx"],
            cy=values["cy"],
            width=int(values["width"]),
            height=int(values["height"]),
        )
    except KeyError as e:
        raise IngestError(f"intrinsics file {path} missing key {e.args[0]}") from None


def save_intrinsics(path, intr: Intrinsics) -> None:
    with open(path, "w") as f:
        for key in ("fx", "fy", "cx", "cy", "width", "height"):
            f.write(f"{key}={getattr(intr, key)}\n")


def _rotr3(raw: np.ndarray) -> np.ndarray:
    raw = raw.astype(np.uint16)
    return ((raw >> 3) | (raw << 13)).astype(np.uint16)


def _rotl3(raw: np.ndarray) -> np.ndarray:
    raw = raw.astype(np.uint16)
    return ((raw << 3) | (raw >> 13)).astype(np.uint16)


def decode_depth(raw: np.ndarray, mode: str) -> np.ndarray:
    """Raw 16-bit values -> meters, with out-of-range pixels zeroed."""
    if mode not in DEPTH_MODES:
        raise IngestError(f"unknown depth mode {mode!r}")
    raw = np.asarray(raw)
    if mode == "sun3d_shift":
        raw = _rotr3(raw)
    meters = raw.astype(np.float64) / 1000.0
    meters[(meters <= 0.0) | (meters > MAX_DEPTH_M)] = 0.0
    return meters


def encode_depth(meters: np.ndarray, mode: str) -> np.ndarray:
    """Meters -> raw 16-bit values (inverse of decode_depth up to mm rounding)."""
    if mode not in DEPTH_MODES:
        raise IngestError(f"unknown depth mode {mode!r}")
    mm = np.clip(np.round(np.asarray(meters) * 1000.0), 0, 65535).astype(np.uint16)
    if mode == "sun3d_shift":
        return _rotl3(mm)
    return mm


def load_depth(path, mode: str, intrinsics: Intrinsics, index: int = 0) -> DepthFrame:
    """Read a 16-bit depth PNG; rejects size mismatches against intrinsics."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise IngestError(f"cannot read depth image {path}: {e}") from e
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise IngestError(f"{path}: expected single-channel depth, got shape {arr.shape}")
    h, w = arr.shape
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise IngestError(
            f"{path}: image is {w}x{h} but intrinsics declare "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    depth = decode_depth(arr.astype(np.uint16), mode)
    gray = _load_gray_sibling(path)
    return DepthFrame(index=index, depth=depth, intrinsics=intrinsics, gray=gray)


def save_depth(path, meters: np.ndarray, mode: str) -> None:
    raw = encode_depth(meters, mode)
    Image.fromarray(raw).save(path)


def gray_sibling_path(depth_path) -> str:
    base, ext = os.path.splitext(str(depth_path))
    return base + ".gray.png"


def _load_gray_sibling(depth_path) -> np.ndarray | None:
    gpath = gray_sibling_path(depth_path)
    if not os.path.exists(gpath):
        return None
    arr = np.asarray(Image.open(gpath).convert("L"))
    return arr.astype(np.float64) / 255.0


def save_gray(path, gray: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(gray) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_manifest(path, mode: str, intrinsics: Intrinsics) -> list[DepthFrame]:
    """Load every frame listed (one path per line, relative to the manifest)."""
    root = os.path.dirname(os.path.abspath(path))
    frames = []
    with open(path) as f:
        entries = [line.strip() for line in f if line.strip()]
    for i, entry in enumerate(entries):
        fpath = entry if os.path.isabs(entry) else os.path.join(root, entry)
        frames.append(load_depth(fpath, mode, intrinsics, index=i))
    return frames
