"""Invertible pixel <-> latent codec and the on-disk tensor container.

The codec is a lossless space-to-channel (and optional time-to-channel)
rearrangement standing in for a learned video autoencoder, so every
downstream reconstruction claim is attributable to the denoiser rather
than to a lossy compressor.

Layout conventions: pixel videos are ``(T, H, W, 3)`` float arrays in
``[0, 1]``; latents are ``(t_lat, h, w, c_lat)`` with

    t_lat = 1 + (T - 1) / f_t,   h = H / f_s,   w = W / f_s,
    c_lat = 3 * f_s**2 * f_t.

When ``f_t > 1`` the first pixel frame occupies the first latent frame on
its own, replicated across the f_t temporal slots so the channel count is
uniform; every later latent frame packs a block of f_t pixel frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DAT1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CodecShapeError(ValueError):
    """Input shape violates the codec divisibility contract."""


class TensorFormatError(ValueError):
    """Tensor container file is malformed."""


@dataclass(frozen=True)
class CodecConfig:
    """Spatial/temporal rearrangement factors."""

    f_s: int = 4
    f_t: int = 1

    def __post_init__(self):
        if self.f_s < 1 or self.f_t < 1:
            raise ValueError("codec factors must be >= 1")

    @property
    def c_lat(self) -> int:
        return 3 * self.f_s * self.f_s * self.f_t

    def latent_frames(self, n_pixel_frames: int) -> int:
        if (n_pixel_frames - 1) % self.f_t != 0:
            raise CodecShapeError(
                f"frame count {n_pixel_frames} must be 1 mod f_t={self.f_t}"
            )
        return 1 + (n_pixel_frames - 1) // self.f_t

    def pixel_frames(self, n_latent_frames: int) -> int:
        return 1 + (n_latent_frames - 1) * self.f_t


@dataclass(frozen=True)
class PixelVideo:
    """A ``(T, H, W, 3)`` float32 video in [0, 1] with a frame rate."""

    frames: np.ndarray
    fps: float = 8.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise CodecShapeError(f"expected (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise CodecShapeError("video must have at least one frame")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self) -> tuple:
        return self.frames.shape


@dataclass(frozen=True)
class LatentVideo:
    """A ``(t_lat, h, w, c_lat)`` float32 latent tensor."""

    latent: np.ndarray

    def __post_init__(self):
        l = np.asarray(self.latent, dtype=np.float32)
        if l.ndim != 4:
            raise CodecShapeError(f"expected (t, h, w, c), got {l.shape}")
        object.__setattr__(self, "latent", l)

    @property
    def shape(self) -> tuple:
        return self.latent.shape


def encode_video(video: PixelVideo, cfg: CodecConfig = CodecConfig()) -> LatentVideo:
    """Rearrange pixels into the latent layout. Exactly invertible and linear."""
    t, h, w, c = video.frames.shape
    fs, ft = cfg.f_s, cfg.f_t
    if h % fs != 0 or w % fs != 0:
        raise CodecShapeError(f"spatial dims {(h, w)} not divisible by f_s={fs}")
    t_lat = cfg.latent_frames(t)

    if ft == 1:
        blocks = video.frames[:, None]  # (t_lat, 1, H, W, 3)
    else:
        first = np.repeat(video.frames[:1][None], ft, axis=1)  # (1, ft, H, W, 3)
        rest = video.frames[1:].reshape(t_lat - 1, ft, h, w, c)
        blocks = np.concatenate([first, rest], axis=0)

    # (t_lat, ft, h, fs, w, fs, 3) -> (t_lat, h, w, ft*fs*fs*3)
    x = blocks.reshape(t_lat, ft, h // fs, fs, w // fs, fs, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    x = x.reshape(t_lat, h // fs, w // fs, cfg.c_lat)
    return LatentVideo(np.ascontiguousarray(x))


def decode_video(
    latent: LatentVideo, cfg: CodecConfig = CodecConfig(), fps: float = 8.0
) -> PixelVideo:
    """Exact inverse of :func:`encode_video`."""
    t_lat, h, w, c = latent.latent.shape
    fs, ft = cfg.f_s, cfg.f_t
    if c != cfg.c_lat:
        raise CodecShapeError(f"latent has {c} channels, codec expects {cfg.c_lat}")
    x = latent.latent.reshape(t_lat, h, w, ft, fs, fs, 3)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    blocks = x.reshape(t_lat, ft, h * fs, w * fs, 3)
    if ft == 1:
        frames = blocks[:, 0]
    else:
        # First latent frame carries ft replicas of pixel frame 0; keep one.
        frames = np.concatenate(
            [blocks[0, :1], blocks[1:].reshape((t_lat - 1) * ft, h * fs, w * fs, 3)],
            axis=0,
        )
    return PixelVideo(np.ascontiguousarray(frames), fps=fps)


def write_tensor(path, tensor: np.ndarray) -> None:
    """Write one tensor in the container format.

    Layout: magic ``DAT1`` | u32 little-endian header length | UTF-8 JSON
    header ``{"dtype", "shape", "order"}`` | raw little-endian payload.
    """
    arr = np.ascontiguousarray(tensor)
    key = _DTYPE_NAMES.get(arr.dtype.newbyteorder("<"))
    if key is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)) and key in ("f32", "f64"):
        raise TensorFormatError("refusing to write non-finite tensor")
    header = json.dumps(
        {"dtype": key, "shape": list(arr.shape), "order": "row-major"}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor container; bit-exact round trip with :func:`write_tensor`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(f"{path}: unreadable header: {e}") from e
    for k in ("dtype", "shape", "order"):
        if k not in header:
            raise TensorFormatError(f"{path}: header missing {k!r}")
    if header["order"] != "row-major":
        raise TensorFormatError(f"{path}: unsupported order {header['order']!r}")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise TensorFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[8 + hlen :]
    if len(payload) != n * dtype.itemsize:
        raise TensorFormatError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"header promises {n * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
