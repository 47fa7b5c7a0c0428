"""Keyframe selection and fragment assembly from posed frame streams.

Dataset directory layout:
    poses.txt       one line per frame: frame_id followed by 16 floats,
                    row-major 4x4 camera-to-world
    intrinsics.txt  fx fy cx cy width height
    depth/<id>.png  16-bit unsigned, millimeters, 0 = invalid (optional)
    color/<id>.png  optional
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyResultError, InvalidInputError
from .geometry import CameraIntrinsics, CameraPose, VoxelGridSpec, compute_fbv

logger = logging.getLogger(__name__)

DEFAULT_T_THRESH = 0.1  # meters
DEFAULT_R_THRESH = 15.0  # degrees
DEFAULT_N = 9


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image_path: str | None = None
    depth_path: str | None = None


@dataclass(frozen=True)
class Fragment:
    """N consecutive keyframes plus their per-level bounding grids."""

    index: int
    keyframes: tuple[FrameRecord, ...]
    fbv: dict[int, VoxelGridSpec] = field(default_factory=dict)

    @property
    def cameras(self) -> list[tuple[CameraIntrinsics, CameraPose]]:
        return [(f.intrinsics, f.pose) for f in self.keyframes]


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Relative rotation angle between two rotation matrices, in degrees."""
    rel = r_a @ r_b.T
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def select_keyframes(
    frames: list[FrameRecord],
    t_thresh: float = DEFAULT_T_THRESH,
    r_thresh: float = DEFAULT_R_THRESH,
) -> list[int]:
    """Frame ids whose motion versus the last keyframe exceeds either threshold.

    The first frame is always selected; selection depends only on poses.
    """
    if not frames:
        raise InvalidInputError("frame sequence is empty")
    if t_thresh <= 0 or r_thresh <= 0:
        raise InvalidInputError("motion thresholds must be positive")
    selected = [frames[0].frame_id]
    last = frames[0].pose
    for f in frames[1:]:
        dt = np.linalg.norm(f.pose.center - last.center)
        dr = rotation_angle_deg(f.pose.rotation, last.rotation)
        if dt > t_thresh or dr > r_thresh:
            selected.append(f.frame_id)
            last = f.pose
    return selected


def assemble_fragments(
    keyframes: list[FrameRecord],
    n_views: int = DEFAULT_N,
    d_max: float = 3.0,
    voxel_sizes: tuple[float, float, float] = (0.16, 0.08, 0.04),
) -> list[Fragment]:
    """Split keyframes into consecutive non-overlapping windows of n_views.

    A trailing remainder shorter than n_views is dropped (logged).  Each
    fragment's FBV is computed at the coarse level and refined so all three
    levels nest exactly.
    """
    if n_views < 2:
        raise InvalidInputError("a fragment needs at least 2 keyframes")
    total = len(keyframes)
    count = total // n_views
    if count == 0:
        raise EmptyResultError(
            f"only {total} keyframes available, need at least {n_views}"
        )
    dropped = total - count * n_views
    if dropped:
        logger.info("dropping %d trailing keyframes (< one fragment)", dropped)
    fragments = []
    for t in range(count):
        chunk = tuple(keyframes[t * n_views:(t + 1) * n_views])
        cams = [(f.intrinsics, f.pose) for f in chunk]
        coarse = compute_fbv(cams, d_max=d_max, voxel_size=voxel_sizes[0])
        mid = coarse.refined()
        fine = mid.refined()
        fragments.append(Fragment(index=t, keyframes=chunk,
                                  fbv={1: coarse, 2: mid, 3: fine}))
    return fragments


def frames_from_poses(
    poses: list[CameraPose], intrinsics: CameraIntrinsics
) -> list[FrameRecord]:
    """Wrap a synthetic trajectory as a frame stream."""
    return [
        FrameRecord(frame_id=i, intrinsics=intrinsics, pose=p)
        for i, p in enumerate(poses)
    ]


# ---------------------------------------------------------------------------
# dataset directory I/O

def load_dataset(root: str) -> list[FrameRecord]:
    """Read the documented dataset layout into a frame stream."""
    pose_file = os.path.join(root, "poses.txt")
    intr_file = os.path.join(root, "intrinsics.txt")
    if not os.path.isfile(pose_file) or not os.path.isfile(intr_file):
        raise FileNotFoundError(f"dataset at {root!r} needs poses.txt and intrinsics.txt")
    vals = np.loadtxt(intr_file).reshape(-1)
    if vals.size != 6:
        raise InvalidInputError("intrinsics.txt must hold: fx fy cx cy width height")
    intr = CameraIntrinsics(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                            width=int(vals[4]), height=int(vals[5]))
    frames = []
    prev_id = None
    with open(pose_file, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 17:
                raise InvalidInputError("poses.txt lines must be: id + 16 floats")
            fid = int(parts[0])
            if prev_id is not None and fid <= prev_id:
                raise InvalidInputError("frame_ids must be strictly increasing")
            prev_id = fid
            mat = np.array([float(x) for x in parts[1:]]).reshape(4, 4)
            pose = CameraPose.from_cam_to_world(mat)
            depth = os.path.join(root, "depth", f"{fid}.png")
            color = os.path.join(root, "color", f"{fid}.png")
            frames.append(FrameRecord(
                frame_id=fid, intrinsics=intr, pose=pose,
                image_path=color if os.path.isfile(color) else None,
                depth_path=depth if os.path.isfile(depth) else None,
            ))
    if not frames:
        raise EmptyResultError(f"poses.txt in {root!r} is empty")
    return frames


def load_depth_png(path: str) -> np.ndarray:
    """16-bit millimeter depth PNG -> float meters, 0 where invalid."""
    import cv2

    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    return raw.astype(np.float64) / 1000.0


def dump_synthetic_dataset(bundle, root: str, d_max: float | None = None) -> None:
    """Render a SceneBundle into the dataset layout (closes the loop for tests)."""
    import cv2

    from .synth import render_depth

    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    intr = bundle.intrinsics
    d_max = bundle.d_max if d_max is None else d_max
    with open(os.path.join(root, "intrinsics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height}\n")
    with open(os.path.join(root, "poses.txt"), "w", encoding="utf-8") as fh:
        for i, pose in enumerate(bundle.poses):
            mat = pose.inverse_matrix()
            fh.write(str(i) + " " + " ".join(f"{x:.17g}" for x in mat.ravel()) + "\n")
            depth = render_depth(bundle.scene, intr, pose, d_max=d_max)
            mm = np.round(depth * 1000.0).astype(np.uint16)
            cv2.imwrite(os.path.join(root, "depth", f"{i}.png"), mm)
