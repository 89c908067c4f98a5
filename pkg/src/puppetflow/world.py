"""Procedural stick-figure world: paired pose tracks, videos and face factors.

The renderer is a pure function of (track, appearance, face factors), so a
stored sample can always be re-rendered bit-exactly; that makes it the
ground-truth oracle for reconstruction metrics.

The torso is textured as a cylindrical wrap: each pixel column maps to a
body azimuth, the front half of the wrap carries one stripe palette and the
back half a contrasting one (derived from the front hue, so the world has a
learnable front-to-back rule). Turning slides the visible azimuth window,
so profile and back views expose texture that is invisible from the front.
The head is a disc whose simplified face follows the per-frame expression
factors and is hidden when the figure faces away.

Rendered videos are snapped to the 8-bit grid (multiples of 1/255) so PNG
round trips are bit-exact.

Subject space: x right, y down, z away from the camera; the camera sits at
depth 0 looking toward +z with the figure near z=0 (meters).
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .codec import PixelVideo
from .facemotion import EXPRESSION_DIM, IDENTITY_DIM, ExpressionFactors
from .pose import Camera, HeadPose, JointSet, PoseTrack, project_points
from .raster import composite, disc_coverage, segment_coverage

SCRIPT_KINDS = ("turn", "walk", "wave")

# Canonical standing pose (A-pose-like, arms lowered outward), y down.
BASE_POSE = {
    "pelvis": (0.0, 0.0, 0.0),
    "spine": (0.0, -0.15, 0.0),
    "chest": (0.0, -0.30, 0.0),
    "neck": (0.0, -0.44, 0.0),
    "head": (0.0, -0.58, 0.0),
    "left_shoulder": (-0.20, -0.40, 0.0),
    "left_elbow": (-0.30, -0.18, 0.0),
    "left_wrist": (-0.38, 0.04, 0.0),
    "right_shoulder": (0.20, -0.40, 0.0),
    "right_elbow": (0.30, -0.18, 0.0),
    "right_wrist": (0.38, 0.04, 0.0),
    "left_hip": (-0.11, 0.02, 0.0),
    "left_knee": (-0.13, 0.42, 0.0),
    "left_ankle": (-0.14, 0.82, 0.0),
    "right_hip": (0.11, 0.02, 0.0),
    "right_knee": (0.13, 0.42, 0.0),
    "right_ankle": (0.14, 0.82, 0.0),
}
HEAD_RADIUS = 0.12
TORSO_RADIUS = 0.17
CAMERA_DEPTH = 3.0

LIMB_BONES = (
    ("chest", "neck"),
    ("neck", "head"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
)


@dataclass(frozen=True)
class MotionScript:
    """Parameters of the scripted motion."""

    kind: str = "turn"
    yaw_range: tuple = (-math.pi / 2, math.pi / 2)
    amplitude: float = 0.35
    cycles: float = 1.5

    def __post_init__(self):
        if self.kind not in SCRIPT_KINDS:
            raise ValueError(f"unknown script kind {self.kind!r}")


@dataclass(frozen=True)
class WorldConfig:
    resolution: int = 64
    appearance_seed: int = 0
    script: MotionScript = field(default_factory=MotionScript)
    duration: int = 17
    fps: float = 8.0
    full_body: bool = True

    def __post_init__(self):
        if self.duration < 9:
            raise ValueError("duration must be >= 9 frames")
        if self.resolution % 8 != 0:
            raise ValueError("resolution must be divisible by 8 (codec x patch)")


@dataclass(frozen=True)
class Appearance:
    """Seed-derived figure look.

    The back stripe palette is a fixed function of the front hue
    (complementary hue, darker values), so front and back torso textures
    always differ while remaining mutually inferable.
    """

    limb_color: tuple
    skin_color: tuple
    front_colors: tuple   # two stripe colors
    back_colors: tuple    # two stripe colors, complementary hue
    texture_kind: int     # 0 = azimuth stripes, 1 = checker
    stripe_period: float  # fraction of the full wrap
    stripe_phase: float   # radians

    @classmethod
    def from_rng(cls, rng: np.random.Generator) -> "Appearance":
        hue = float(rng.uniform(0, 1))
        back_hue = (hue + 0.5) % 1.0
        front = (
            colorsys.hsv_to_rgb(hue, 0.8, 0.95),
            colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.9, 0.7),
        )
        back = (
            colorsys.hsv_to_rgb(back_hue, 0.85, 0.45),
            colorsys.hsv_to_rgb((back_hue + 0.08) % 1.0, 0.7, 0.22),
        )
        limb = colorsys.hsv_to_rgb(float(rng.uniform(0, 1)), 0.6, 0.85)
        skin = (0.92, float(rng.uniform(0.7, 0.85)), float(rng.uniform(0.5, 0.65)))
        return cls(
            limb_color=tuple(float(c) for c in limb),
            skin_color=skin,
            front_colors=tuple(tuple(float(c) for c in col) for col in front),
            back_colors=tuple(tuple(float(c) for c in col) for col in back),
            texture_kind=int(rng.integers(2)),
            stripe_period=float(rng.uniform(0.10, 0.16)),
            stripe_phase=float(rng.uniform(0, 2 * math.pi)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Appearance":
        return cls(
            limb_color=tuple(d["limb_color"]),
            skin_color=tuple(d["skin_color"]),
            front_colors=tuple(tuple(c) for c in d["front_colors"]),
            back_colors=tuple(tuple(c) for c in d["back_colors"]),
            texture_kind=int(d["texture_kind"]),
            stripe_period=float(d["stripe_period"]),
            stripe_phase=float(d["stripe_phase"]),
        )


@dataclass(frozen=True)
class Sample:
    """Aligned (track, video, per-frame factors) plus generator metadata."""

    track: PoseTrack
    video: PixelVideo
    face_factors: tuple  # per-frame ExpressionFactors
    yaw_per_frame: np.ndarray
    appearance: Appearance
    is_full_body: bool = True

    def __post_init__(self):
        if len(self.track) != self.video.frames.shape[0]:
            raise ValueError("track and video length mismatch")
        if len(self.face_factors) != len(self.track):
            raise ValueError("face factors and track length mismatch")


def default_camera(resolution: int) -> Camera:
    focal = 1.55 * resolution
    pp = (resolution / 2.0, resolution / 2.0)
    return Camera(focal, pp, np.eye(3), np.array([0.0, -0.12, CAMERA_DEPTH]))


def _yaw_rotate(p: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate about the vertical axis through the pelvis (x-z plane)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]])


def pose_at(script: MotionScript, phase: float, yaw: float) -> JointSet:
    """Body pose for one frame: scripted limb offsets, then yaw rotation."""
    pts = {k: np.array(v, dtype=np.float64) for k, v in BASE_POSE.items()}
    a = script.amplitude
    if script.kind == "walk":
        swing = a * math.sin(2 * math.pi * phase)
        for side, sign in (("left", 1.0), ("right", -1.0)):
            pts[f"{side}_knee"][2] += 0.3 * sign * swing
            pts[f"{side}_ankle"][2] += 0.55 * sign * swing
            pts[f"{side}_wrist"][2] -= 0.5 * sign * swing
            pts[f"{side}_elbow"][2] -= 0.25 * sign * swing
        pts["pelvis"][1] += 0.02 * math.cos(4 * math.pi * phase)
    elif script.kind == "wave":
        lift = a * (0.5 + 0.5 * math.sin(2 * math.pi * phase))
        pts["right_elbow"] += np.array([0.05, -0.30 * lift, 0.0])
        pts["right_wrist"] += np.array([0.02, -0.75 * lift, 0.0])
    return JointSet({k: _yaw_rotate(v, yaw) for k, v in pts.items()})


def yaw_schedule(script: MotionScript, n: int) -> np.ndarray:
    if script.kind == "turn":
        lo, hi = script.yaw_range
        return np.linspace(lo, hi, n)
    return np.zeros(n)


def generate_track(cfg: WorldConfig, rng: np.random.Generator) -> tuple:
    """Build (PoseTrack, yaw array) for the scripted motion."""
    n = cfg.duration
    yaws = yaw_schedule(cfg.script, n)
    phase0 = float(rng.uniform(0, 1))
    cam = default_camera(cfg.resolution)
    frames = []
    for i in range(n):
        phase = phase0 + cfg.script.cycles * i / max(n - 1, 1)
        js = pose_at(cfg.script, phase, float(yaws[i]))
        head_center = js.positions["head"] + np.array([0.0, -0.06, 0.0])
        head = HeadPose((float(yaws[i]), 0.0, 0.0), head_center, HEAD_RADIUS)
        frames.append((js, head))
    return PoseTrack(tuple(frames), cam, cfg.fps), yaws


def expression_trajectory(n: int, rng: np.random.Generator) -> list:
    """Smooth per-frame expression factors with a fixed per-clip identity."""
    identity = rng.uniform(-1, 1, IDENTITY_DIM)
    freqs = rng.uniform(0.5, 1.5, EXPRESSION_DIM)
    phases = rng.uniform(0, 2 * math.pi, EXPRESSION_DIM)
    out = []
    for i in range(n):
        t = i / max(n - 1, 1)
        expr = np.sin(2 * math.pi * freqs * t + phases)
        out.append(ExpressionFactors(expr, identity))
    return out


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.mod(a + math.pi, 2 * math.pi) - math.pi


def torso_texture(alpha: np.ndarray, v: np.ndarray, app: Appearance) -> np.ndarray:
    """Wrap texture color per pixel from azimuth alpha and height fraction v."""
    alpha = _wrap_angle(alpha)
    period = app.stripe_period * 2 * math.pi
    band = np.floor((alpha + math.pi + app.stripe_phase) / period).astype(int)
    if app.texture_kind == 1:
        band = band + np.floor(v * 4).astype(int)
    parity = band % 2
    is_front = np.abs(alpha) <= math.pi / 2
    front = np.where(
        parity[..., None] == 0, app.front_colors[0], app.front_colors[1]
    )
    back = np.where(parity[..., None] == 0, app.back_colors[0], app.back_colors[1])
    return np.where(is_front[..., None], front, back).astype(np.float32)


def render_frame(
    js: JointSet,
    head: HeadPose,
    cam: Camera,
    appearance: Appearance,
    factors: ExpressionFactors,
    resolution: int,
) -> np.ndarray:
    """Render one frame (H, W, 3) in [0, 1], snapped to the 8-bit grid."""
    size = resolution
    img = np.zeros((size, size, 3), dtype=np.float32)
    img[:] = (0.10, 0.11, 0.13)

    names = list(js.positions)
    uv_all, depth_all = project_points(np.stack([js.positions[n] for n in names]), cam)
    uv = {n: uv_all[i] for i, n in enumerate(names)}
    depth = {n: depth_all[i] for i, n in enumerate(names)}

    yaw = head.yaw

    # Torso: constant-width cylindrical band between chest and pelvis whose
    # visible azimuth window slides with yaw.
    top, bot = uv["chest"], uv["pelvis"]
    hw_px = TORSO_RADIUS * cam.focal / depth["chest"]
    ys = np.arange(size, dtype=np.float64) + 0.5
    xs = np.arange(size, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    y0, y1 = top[1], bot[1]
    v = (gy - y0) / (y1 - y0) if abs(y1 - y0) > 1e-9 else np.zeros_like(gy)
    cx = top[0] + (bot[0] - top[0]) * np.clip(v, 0.0, 1.0)
    u = (gx - cx) / hw_px
    in_band = (v >= 0.0) & (v <= 1.0) & (np.abs(u) <= 1.0)
    alpha = yaw + np.arcsin(np.clip(u, -1.0, 1.0))
    tex = torso_texture(alpha, np.clip(v, 0.0, 1.0), appearance)
    img[in_band] = tex[in_band]

    # Limbs, farthest first so nearer limbs overwrite.
    limb_w = max(size * 0.035, 1.0)
    order = sorted(LIMB_BONES, key=lambda b: -(depth[b[0]] + depth[b[1]]) / 2.0)
    for a, b in order:
        cov, ty, tx = segment_coverage(uv[a], uv[b], limb_w / 2, size, size)
        composite(img, cov, appearance.limb_color, ty, tx)

    # Head disc with expression-driven face when front-facing.
    (hc,), (hd,) = project_points(head.center[None], cam)
    r_px = head.radius * cam.focal / hd
    composite(img, disc_coverage(hc, r_px, size, size), appearance.skin_color)
    if math.cos(yaw) > 0.15:
        e = factors.expression
        shift = -math.sin(yaw) * r_px * 0.45
        openness = 0.25 + 0.7 * (e[2] + 1) / 2
        eye_r = max(r_px * 0.16, 0.7)
        for sign in (-1, 1):
            c = (hc[0] + shift + sign * r_px * 0.42, hc[1] - r_px * 0.25)
            composite(img, disc_coverage(c, eye_r * openness, size, size), (0.05, 0.05, 0.08))
        mouth_y = hc[1] + r_px * (0.45 - 0.1 * e[0])
        mouth_half = r_px * 0.42
        mouth_w = max(r_px * (0.14 + 0.22 * (e[1] + 1) / 2), 0.6)
        a = (hc[0] + shift - mouth_half, mouth_y + r_px * 0.12 * e[0])
        b = (hc[0] + shift + mouth_half, mouth_y + r_px * 0.12 * e[0])
        mid = (hc[0] + shift, mouth_y - r_px * 0.18 * e[0])
        for p, q in ((a, mid), (mid, b)):
            cov, ty, tx = segment_coverage(p, q, mouth_w / 2, size, size)
            composite(img, cov, (0.6, 0.1, 0.12), ty, tx)

    np.clip(img, 0.0, 1.0, out=img)
    return np.round(img * 255.0).astype(np.float32) / np.float32(255.0)


def render_track_video(
    track: PoseTrack,
    appearance: Appearance,
    face_factors,
    resolution: int,
) -> PixelVideo:
    """The ground-truth renderer: pure in (track, appearance, factors)."""
    frames = [
        render_frame(js, head, track.camera, appearance, face_factors[i], resolution)
        for i, (js, head) in enumerate(track.frames)
    ]
    return PixelVideo(np.stack(frames), fps=track.fps)


def generate_sample(cfg: WorldConfig, seed: int) -> Sample:
    """Deterministic paired sample; same (cfg, seed) gives bit-identical output."""
    appearance = Appearance.from_rng(
        np.random.default_rng([cfg.appearance_seed, seed, 1])
    )
    motion_rng = np.random.default_rng([cfg.appearance_seed, seed, 2])
    track, yaws = generate_track(cfg, motion_rng)
    factors = expression_trajectory(cfg.duration, motion_rng)
    video = render_track_video(track, appearance, factors, cfg.resolution)
    return Sample(
        track=track,
        video=video,
        face_factors=tuple(factors),
        yaw_per_frame=yaws,
        appearance=appearance,
        is_full_body=cfg.full_body,
    )


# ---------------------------------------------------------------------------
# On-disk dataset


def save_video_frames(video: PixelVideo, frames_dir) -> None:
    os.makedirs(frames_dir, exist_ok=True)
    for i, frame in enumerate(video.frames):
        arr = np.round(frame * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(frames_dir, f"{i:05d}.png"))


def load_video_frames(frames_dir, fps: float = 8.0) -> PixelVideo:
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".png"))
    frames = [
        np.asarray(Image.open(os.path.join(frames_dir, n)), dtype=np.float32) / 255.0
        for n in names
    ]
    return PixelVideo(np.stack(frames), fps=fps)


def save_sample(sample_dir, sample: Sample) -> None:
    from .pose import save_pose_track

    os.makedirs(sample_dir, exist_ok=True)
    save_pose_track(os.path.join(sample_dir, "poses.json"), sample.track)
    save_video_frames(sample.video, os.path.join(sample_dir, "frames"))
    factors = {
        "expression": [f.expression.tolist() for f in sample.face_factors],
        "identity": sample.face_factors[0].identity.tolist(),
        "yaw_per_frame": np.asarray(sample.yaw_per_frame).tolist(),
        "is_full_body": sample.is_full_body,
        "appearance": sample.appearance.to_dict(),
    }
    with open(os.path.join(sample_dir, "factors.json"), "w") as f:
        json.dump(factors, f)


def load_sample(sample_dir) -> Sample:
    from .pose import load_pose_track

    track = load_pose_track(os.path.join(sample_dir, "poses.json"))
    video = load_video_frames(os.path.join(sample_dir, "frames"), fps=track.fps)
    with open(os.path.join(sample_dir, "factors.json")) as f:
        d = json.load(f)
    identity = np.asarray(d["identity"])
    factors = tuple(
        ExpressionFactors(np.asarray(e), identity) for e in d["expression"]
    )
    return Sample(
        track=track,
        video=video,
        face_factors=factors,
        yaw_per_frame=np.asarray(d["yaw_per_frame"]),
        appearance=Appearance.from_dict(d["appearance"]),
        is_full_body=bool(d["is_full_body"]),
    )


def _dir_digest(root) -> str:
    h = hashlib.sha256()
    for base, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = os.path.join(base, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def make_dataset(
    out_dir,
    n: int,
    cfg: WorldConfig,
    seed: int,
    clip_len_range: tuple = (9, 33),
    f_t: int = 1,
    script_kinds: tuple = SCRIPT_KINDS,
) -> dict:
    """Write n samples plus a manifest; clip lengths uniform over the range.

    Lengths are snapped to 1 mod f_t so every clip is codec-compatible. The
    desk-scale range (9, 33) stands in for the full-scale sampling protocol
    of 25..121-frame clips (recorded in the manifest).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(n):
        lo, hi = clip_len_range
        length = int(rng.integers(lo, hi + 1))
        if f_t > 1:
            length = max(lo, length - (length - 1) % f_t)
        kind = script_kinds[int(rng.integers(len(script_kinds)))]
        yaw_span = float(rng.uniform(0.6, math.pi))
        script = MotionScript(kind=kind, yaw_range=(-yaw_span, yaw_span))
        sample_cfg = WorldConfig(
            resolution=cfg.resolution,
            appearance_seed=cfg.appearance_seed,
            script=script,
            duration=length,
            fps=cfg.fps,
            full_body=cfg.full_body,
        )
        sample = generate_sample(sample_cfg, seed=seed + 1000 * (i + 1))
        name = f"sample_{i:04d}"
        try:
            save_sample(os.path.join(out_dir, name), sample)
        except OSError as e:
            raise OSError(f"sample {i}: {e}") from e
        names.append(name)
    manifest = {
        "n": n,
        "resolution": cfg.resolution,
        "fps": cfg.fps,
        "seed": seed,
        "clip_length_range": list(clip_len_range),
        "fullscale_clip_length_range": [25, 121],
        "samples": names,
        "content_digest": _dir_digest(out_dir),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_dataset(root) -> list:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    return [load_sample(os.path.join(root, name)) for name in manifest["samples"]]
