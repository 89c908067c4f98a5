"""Rasterized control signals: projected skeleton maps and head spheres.

Every renderer here is a pure deterministic function of its inputs, so
per-frame rasterization can run concurrently. Images are ``(H, W, 3)``
float32 in ``[0, 1]``, row 0 at the top, pixel centers at half-integer
coordinates ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .pose import (
    Camera,
    HeadPose,
    JointSet,
    KinematicTree,
    PoseTrack,
    ProjectionError,
    project_points,
)
from .raster import composite, disc_coverage, segment_coverage


def bone_palette(tree: KinematicTree) -> dict:
    """Evenly spaced hues over the tree's bones, in canonical bone order."""
    bones = tree.bones
    palette = {}
    for i, bone in enumerate(bones):
        r, g, b = colorsys.hsv_to_rgb(i / len(bones), 0.9, 1.0)
        palette[bone] = (r, g, b)
    return palette


@dataclass(frozen=True)
class RasterSpec:
    """Canvas geometry plus the per-bone color palette."""

    width: int
    height: int
    line_width: float = 2.0
    palette: dict = field(default_factory=lambda: bone_palette(KinematicTree.default()))

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("canvas dims must be positive")
        if self.line_width < 1:
            raise ValueError("line_width must be >= 1")
        colors = [tuple(np.round(c, 9)) for c in self.palette.values()]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be distinct")

    def require_bones(self, tree: KinematicTree) -> None:
        missing = [b for b in tree.bones if b not in self.palette]
        if missing:
            raise ValueError(f"palette missing bones: {missing}")


@dataclass(frozen=True)
class GuidanceCanvas:
    """Skeleton and sphere maps for one frame, plus their channel concat."""

    skeleton: np.ndarray
    sphere: np.ndarray

    def __post_init__(self):
        for name in ("skeleton", "sphere"):
            img = np.asarray(getattr(self, name), dtype=np.float32)
            if img.ndim != 3 or img.shape[-1] != 3:
                raise ValueError(f"{name} must be (H, W, 3), got {img.shape}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} values outside [0, 1]")
            object.__setattr__(self, name, img)
        if self.skeleton.shape != self.sphere.shape:
            raise ValueError("skeleton/sphere shape mismatch")

    @property
    def combined(self) -> np.ndarray:
        """(H, W, 6): channels 0-2 skeleton, 3-5 sphere."""
        return np.concatenate([self.skeleton, self.sphere], axis=-1)


def rasterize_skeleton(
    j: JointSet,
    cam: Camera,
    spec: RasterSpec,
    tree: KinematicTree | None = None,
) -> np.ndarray:
    """Draw every bone as an anti-aliased colored segment.

    Bones are composited back to front by mean endpoint depth so nearer
    bones overwrite farther ones; the background is black. Raises
    :class:`~puppetflow.pose.ProjectionError` if any joint sits behind the
    camera.
    """
    tree = tree or KinematicTree.default()
    spec.require_bones(tree)
    uv, depths = project_points(j.array(tree), cam)
    idx = {name: i for i, name in enumerate(tree.joints)}
    order = sorted(
        tree.bones,
        key=lambda b: -(depths[idx[b[0]]] + depths[idx[b[1]]]) / 2.0,
    )
    img = np.zeros((spec.height, spec.width, 3), dtype=np.float32)
    half = spec.line_width / 2.0
    for bone in order:
        a, b = uv[idx[bone[0]]], uv[idx[bone[1]]]
        cov, y0, x0 = segment_coverage(a, b, half, spec.height, spec.width)
        composite(img, cov, spec.palette[bone], y0, x0)
    return img


def orientation_color(rotation) -> tuple:
    """Map (yaw, pitch, roll) in [-pi, pi] linearly onto RGB in [0, 1]."""
    yaw, pitch, roll = (float(a) for a in rotation)
    for a in (yaw, pitch, roll):
        if not (-np.pi <= a <= np.pi):
            raise ValueError(f"angle {a} out of [-pi, pi]")
    return (
        (yaw + np.pi) / (2 * np.pi),
        (pitch + np.pi) / (2 * np.pi),
        (roll + np.pi) / (2 * np.pi),
    )


def color_to_orientation(color) -> tuple:
    """Exact inverse of :func:`orientation_color`."""
    return tuple(float(c) * 2 * np.pi - np.pi for c in color)


def render_head_sphere(
    h: HeadPose, cam: Camera, ref_radius_px: float, spec: RasterSpec
) -> np.ndarray:
    """Flat-filled disc at the projected head center.

    The disc radius is ``ref_radius_px`` (aligned to the reference head's
    size, not the driving head's projected size) and the fill color encodes
    the driving head orientation.
    """
    if not ref_radius_px > 0:
        raise ValueError("ref_radius_px must be > 0")
    uv, _ = project_points(h.center[None], cam)
    color = orientation_color(h.rotation)
    cov = disc_coverage(uv[0], ref_radius_px, spec.height, spec.width)
    img = np.zeros((spec.height, spec.width, 3), dtype=np.float32)
    composite(img, cov, color)
    return img


def render_frame(
    j: JointSet,
    head: HeadPose,
    cam: Camera,
    ref_head_radius_px: float,
    spec: RasterSpec,
    tree: KinematicTree | None = None,
) -> GuidanceCanvas:
    return GuidanceCanvas(
        skeleton=rasterize_skeleton(j, cam, spec, tree),
        sphere=render_head_sphere(head, cam, ref_head_radius_px, spec),
    )


def build_canvas(
    track: PoseTrack, ref_head_radius_px: float, spec: RasterSpec
) -> list:
    """One GuidanceCanvas per track frame; errors carry the frame index."""
    out = []
    for i, (js, head) in enumerate(track.frames):
        try:
            out.append(
                render_frame(js, head, track.camera, ref_head_radius_px, spec, track.tree)
            )
        except (ProjectionError, ValueError) as e:
            raise type(e)(f"frame {i}: {e}") from e
    return out


def canvas_stack(canvases) -> np.ndarray:
    """Stack combined canvases into a (T, H, W, 6) float32 array."""
    return np.stack([c.combined for c in canvases])
