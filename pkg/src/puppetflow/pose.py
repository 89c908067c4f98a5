"""Pose tracks: kinematic tree, camera projection, file ingestion, retargeting.

All types are immutable after construction and all operations are pure, so
they are safe to use from concurrent contexts without locking.

Subject space is metric (meters); the image plane is in pixels; angles are
radians.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Fixed 17-joint body subset. Hands are represented by wrist endpoints only.
DEFAULT_JOINTS = (
    "pelvis",
    "spine",
    "chest",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
)
DEFAULT_PARENTS = (
    -1,  # pelvis
    0,   # spine
    1,   # chest
    2,   # neck
    3,   # head
    2,   # left_shoulder
    5,   # left_elbow
    6,   # left_wrist
    2,   # right_shoulder
    8,   # right_elbow
    9,   # right_wrist
    0,   # left_hip
    11,  # left_knee
    12,  # left_ankle
    0,   # right_hip
    14,  # right_knee
    15,  # right_ankle
)

HEAD_BONE = ("neck", "head")


class PoseValidationError(ValueError):
    """A pose structure violates its invariants."""


class PoseParseError(ValueError):
    """A pose file does not conform to the pose JSON schema."""


class ProjectionError(ValueError):
    """A point cannot be projected (non-positive depth)."""


class DegeneratePoseError(ValueError):
    """A bone has (near) zero length where a positive length is required."""


@dataclass(frozen=True)
class KinematicTree:
    """Joint names plus a parent map; bones are the (parent, child) edges."""

    joints: tuple
    parent: dict  # joint -> parent joint name; root absent

    def __post_init__(self):
        joints = tuple(self.joints)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "parent", dict(self.parent))
        names = set(joints)
        if len(names) != len(joints):
            raise PoseValidationError("duplicate joint names")
        roots = [j for j in joints if j not in self.parent]
        if len(roots) != 1:
            raise PoseValidationError(f"exactly one root required, found {roots}")
        for j, p in self.parent.items():
            if j not in names or p not in names:
                raise PoseValidationError(f"unknown joint in parent map: {j}->{p}")
        # Walking to the root from every joint must terminate (acyclicity).
        for j in joints:
            seen = set()
            cur = j
            while cur in self.parent:
                if cur in seen:
                    raise PoseValidationError(f"cycle through joint {cur!r}")
                seen.add(cur)
                cur = self.parent[cur]

    @property
    def root(self) -> str:
        return next(j for j in self.joints if j not in self.parent)

    @property
    def bones(self) -> tuple:
        """(parent, child) pairs in canonical joint order; len = n_joints - 1."""
        return tuple((self.parent[j], j) for j in self.joints if j in self.parent)

    def children_first_order(self) -> tuple:
        """Joints ordered so each parent precedes its children."""
        out, placed = [], set()
        pending = list(self.joints)
        while pending:
            progressed = False
            for j in list(pending):
                p = self.parent.get(j)
                if p is None or p in placed:
                    out.append(j)
                    placed.add(j)
                    pending.remove(j)
                    progressed = True
            if not progressed:  # pragma: no cover - excluded by acyclicity
                raise PoseValidationError("tree ordering failed")
        return tuple(out)

    @classmethod
    def default(cls) -> "KinematicTree":
        parent = {
            DEFAULT_JOINTS[i]: DEFAULT_JOINTS[p]
            for i, p in enumerate(DEFAULT_PARENTS)
            if p >= 0
        }
        return cls(DEFAULT_JOINTS, parent)


@dataclass(frozen=True)
class JointSet:
    """Map joint name -> 3-vector position in subject space."""

    positions: dict

    def __post_init__(self):
        pos = {k: np.asarray(v, dtype=np.float64).reshape(3) for k, v in self.positions.items()}
        for k, v in pos.items():
            if not np.all(np.isfinite(v)):
                raise PoseValidationError(f"non-finite coordinate for joint {k!r}")
        object.__setattr__(self, "positions", pos)

    def require_tree(self, tree: KinematicTree) -> None:
        missing = [j for j in tree.joints if j not in self.positions]
        if missing:
            raise PoseValidationError(f"missing joints: {missing}")

    def array(self, tree: KinematicTree) -> np.ndarray:
        """Positions stacked in canonical tree order, shape (n_joints, 3)."""
        return np.stack([self.positions[j] for j in tree.joints])


@dataclass(frozen=True)
class HeadPose:
    """Head rotation (yaw, pitch, roll) plus center and radius in meters."""

    rotation: tuple
    center: np.ndarray
    radius: float

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        if len(rot) != 3:
            raise PoseValidationError("rotation must be (yaw, pitch, roll)")
        for name, a in zip(("yaw", "pitch", "roll"), rot):
            if not (-math.pi <= a <= math.pi):
                raise PoseValidationError(f"{name}={a} out of [-pi, pi]")
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(center)):
            raise PoseValidationError("non-finite head center")
        if not (float(self.radius) > 0):
            raise PoseValidationError(f"head radius must be > 0, got {self.radius}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def yaw(self) -> float:
        return self.rotation[0]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: focal, principal point, rigid extrinsic."""

    focal: float
    principal_point: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (float(self.focal) > 0):
            raise PoseValidationError(f"focal must be > 0, got {self.focal}")
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise PoseValidationError("camera rotation is not orthonormal (1e-6)")
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, focal: float, pp) -> "Camera":
        return cls(focal, pp, np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PoseTrack:
    """Per-frame (JointSet, HeadPose) with one camera and kinematic tree."""

    frames: tuple  # tuple of (JointSet, HeadPose)
    camera: Camera
    fps: float
    tree: KinematicTree = field(default_factory=KinematicTree.default)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise PoseValidationError("pose track must have at least one frame")
        for i, (js, head) in enumerate(frames):
            try:
                js.require_tree(self.tree)
            except PoseValidationError as e:
                raise PoseValidationError(f"frame {i}: {e}") from e
            pts = np.vstack([js.array(self.tree), head.center[None]])
            depths = pts @ self.camera.rotation.T[:, 2] + self.camera.translation[2]
            if np.any(depths <= 0):
                raise PoseValidationError(
                    f"frame {i}: joint depth not positive under camera"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def yaw_per_frame(self) -> np.ndarray:
        return np.array([h.yaw for _, h in self.frames])

    def slice(self, start: int, stop: int) -> "PoseTrack":
        return PoseTrack(self.frames[start:stop], self.camera, self.fps, self.tree)


@dataclass(frozen=True)
class APoseCalibration:
    """Standardized A-pose joint sets for the reference and driving subjects."""

    reference_apose: JointSet
    driving_apose: JointSet

    def ratios(self, tree: KinematicTree) -> dict:
        """Per-bone length ratio reference/driving."""
        ref = bone_lengths(self.reference_apose, tree)
        drv = bone_lengths(self.driving_apose, tree)
        return {b: ref[b] / drv[b] for b in ref}


def project_point(p, cam: Camera) -> np.ndarray:
    """Pinhole projection of one 3D point to pixels.

    Applies the extrinsic, divides by depth, scales by focal, and adds the
    principal point. Raises :class:`ProjectionError` on non-positive depth.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    q = cam.rotation @ p + cam.translation
    if q[2] <= 0:
        raise ProjectionError(f"point depth {q[2]} not positive")
    return cam.focal * q[:2] / q[2] + cam.principal_point


def project_points(points: np.ndarray, cam: Camera) -> tuple:
    """Vectorized projection; returns ((n,2) pixels, (n,) depths)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = pts @ cam.rotation.T + cam.translation
    depths = q[:, 2]
    if np.any(depths <= 0):
        bad = int(np.argmax(depths <= 0))
        raise ProjectionError(f"point {bad} depth {depths[bad]} not positive")
    uv = cam.focal * q[:, :2] / depths[:, None] + cam.principal_point
    return uv, depths


def bone_lengths(j: JointSet, tree: KinematicTree) -> dict:
    """Euclidean parent->child distance for every bone of the tree."""
    j.require_tree(tree)
    out = {}
    for parent, child in tree.bones:
        d = float(np.linalg.norm(j.positions[child] - j.positions[parent]))
        if d <= 1e-12:
            raise DegeneratePoseError(f"bone {parent}->{child} has zero length")
        out[(parent, child)] = d
    return out


def retarget_joint_set(j: JointSet, tree: KinematicTree, ratios: dict) -> JointSet:
    """Re-grow the skeleton from the root with per-bone length ratios.

    Bone directions are preserved exactly; the root position is preserved;
    each bone's length is multiplied by its calibration ratio.
    """
    j.require_tree(tree)
    new = {tree.root: j.positions[tree.root].copy()}
    for name in tree.children_first_order():
        p = tree.parent.get(name)
        if p is None:
            continue
        offset = j.positions[name] - j.positions[p]
        new[name] = new[p] + ratios[(p, name)] * offset
    return JointSet(new)


def retarget_track(track: PoseTrack, calib: APoseCalibration) -> PoseTrack:
    """Adjust every frame's bone lengths to the reference subject's proportions.

    The head sphere follows the head joint: its center offset from the head
    joint and its radius both scale by the neck->head bone ratio.
    """
    ratios = calib.ratios(track.tree)
    r_head = ratios.get(HEAD_BONE, 1.0)
    frames = []
    for js, head in track.frames:
        new_js = retarget_joint_set(js, track.tree, ratios)
        head_old = js.positions.get("head")
        if head_old is not None:
            center = new_js.positions["head"] + r_head * (head.center - head_old)
        else:  # pragma: no cover - default tree always has a head joint
            center = head.center
        frames.append(
            (new_js, HeadPose(head.rotation, center, head.radius * r_head))
        )
    return PoseTrack(tuple(frames), track.camera, track.fps, track.tree)


# ---------------------------------------------------------------------------
# Pose JSON schema ingestion


def _require(cond: bool, msg: str):
    if not cond:
        raise PoseParseError(msg)


def pose_track_to_dict(track: PoseTrack) -> dict:
    """Serialize a track to the pose JSON schema."""
    tree = track.tree
    name_to_idx = {n: i for i, n in enumerate(tree.joints)}
    parents = [
        name_to_idx[tree.parent[j]] if j in tree.parent else -1 for j in tree.joints
    ]
    frames = []
    for js, head in track.frames:
        frames.append(
            {
                "joints": {n: [float(x) for x in js.positions[n]] for n in tree.joints},
                "head": {
                    "yaw": head.rotation[0],
                    "pitch": head.rotation[1],
                    "roll": head.rotation[2],
                    "center": [float(x) for x in head.center],
                    "radius": head.radius,
                },
            }
        )
    return {
        "fps": track.fps,
        "camera": {
            "focal": track.camera.focal,
            "principal_point": [float(x) for x in track.camera.principal_point],
            "rotation": [float(x) for x in track.camera.rotation.reshape(9)],
            "translation": [float(x) for x in track.camera.translation],
        },
        "tree": {"joints": list(tree.joints), "parents": parents},
        "frames": frames,
    }


def save_pose_track(path, track: PoseTrack) -> None:
    with open(path, "w") as f:
        json.dump(pose_track_to_dict(track), f)


def pose_track_from_dict(data: dict) -> PoseTrack:
    _require(isinstance(data, dict), "top level must be an object")
    for key in ("fps", "camera", "tree", "frames"):
        _require(key in data, f"missing top-level key {key!r}")

    cam_d = data["camera"]
    for key in ("focal", "principal_point", "rotation", "translation"):
        _require(key in cam_d, f"camera missing {key!r}")
    rot = np.asarray(cam_d["rotation"], dtype=np.float64)
    _require(rot.size == 9, "camera rotation must hold 9 row-major numbers")
    try:
        camera = Camera(
            cam_d["focal"], cam_d["principal_point"], rot.reshape(3, 3),
            cam_d["translation"],
        )
    except PoseValidationError as e:
        raise PoseParseError(f"camera: {e}") from e

    tree_d = data["tree"]
    _require("joints" in tree_d and "parents" in tree_d, "tree needs joints+parents")
    names = list(tree_d["joints"])
    parents = list(tree_d["parents"])
    _require(len(names) == len(parents), "tree joints/parents length mismatch")
    try:
        parent_map = {}
        for i, p in enumerate(parents):
            if p == -1:
                continue
            _require(0 <= p < len(names), f"parent index {p} out of range")
            parent_map[names[i]] = names[p]
        tree = KinematicTree(tuple(names), parent_map)
    except PoseValidationError as e:
        raise PoseParseError(f"tree: {e}") from e

    frames = []
    for fi, frame_d in enumerate(data["frames"]):
        _require("joints" in frame_d, f"frame {fi}: missing joints")
        _require("head" in frame_d, f"frame {fi}: missing head")
        joints_d = frame_d["joints"]
        for n in names:
            _require(n in joints_d, f"frame {fi}: missing joint {n!r}")
        try:
            js = JointSet({n: joints_d[n] for n in names})
        except PoseValidationError as e:
            raise PoseParseError(f"frame {fi}: {e}") from e
        head_d = frame_d["head"]
        for key in ("yaw", "pitch", "roll", "center", "radius"):
            _require(key in head_d, f"frame {fi}: head missing {key!r}")
        try:
            head = HeadPose(
                (head_d["yaw"], head_d["pitch"], head_d["roll"]),
                head_d["center"],
                head_d["radius"],
            )
        except PoseValidationError as e:
            raise PoseParseError(f"frame {fi}: head: {e}") from e
        frames.append((js, head))
    _require(len(frames) >= 1, "frames must be non-empty")

    try:
        return PoseTrack(tuple(frames), camera, float(data["fps"]), tree)
    except PoseValidationError as e:
        raise PoseParseError(str(e)) from e


def load_pose_track(path) -> PoseTrack:
    """Load and validate a pose JSON file (schema in the module docstring)."""
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise PoseParseError(f"{path}: invalid JSON: {e}") from e
    return pose_track_from_dict(data)
