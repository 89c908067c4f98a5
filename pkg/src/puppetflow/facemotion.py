"""Identity-free face motion tokens from face crops.

A small trainable convolutional encoder maps standardized 224x224 face
crops to per-frame motion tokens. It stands in for a pretrained expression
encoder: we train it on procedurally rendered cartoon faces whose
expression and identity factors are independent by construction, with an
expression-regression loss plus an identity-decorrelation penalty, which
makes identity-independence a measurable property.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .codec import read_tensor, write_tensor

FACE_SIZE = 224
EXPRESSION_DIM = 4  # mouth curve, mouth openness, eye openness, brow raise
IDENTITY_DIM = 3    # face aspect, skin tone, eye spacing


class FaceShapeError(ValueError):
    """Face crop tensor has the wrong shape or range."""


@dataclass(frozen=True)
class ExpressionFactors:
    """Ground-truth generative factors for one synthetic face."""

    expression: np.ndarray  # (EXPRESSION_DIM,) in [-1, 1]
    identity: np.ndarray    # (IDENTITY_DIM,) in [-1, 1]

    def __post_init__(self):
        e = np.asarray(self.expression, dtype=np.float64).reshape(-1)
        i = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        if e.shape != (EXPRESSION_DIM,) or i.shape != (IDENTITY_DIM,):
            raise ValueError(
                f"expected dims ({EXPRESSION_DIM},)/({IDENTITY_DIM},), "
                f"got {e.shape}/{i.shape}"
            )
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(i))):
            raise ValueError("factors must be finite")
        object.__setattr__(self, "expression", e)
        object.__setattr__(self, "identity", i)


@dataclass(frozen=True)
class FaceCrop:
    """(t, 3, 224, 224) float32 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 4 or p.shape[1:] != (3, FACE_SIZE, FACE_SIZE):
            raise FaceShapeError(
                f"expected (t, 3, {FACE_SIZE}, {FACE_SIZE}), got {p.shape}"
            )
        if p.min() < 0.0 or p.max() > 1.0:
            raise FaceShapeError("face crop values outside [0, 1]")
        object.__setattr__(self, "pixels", p)

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class FaceMotionTokens:
    """(t, c) float32 tokens; row i depends only on crop frame i."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32)
        if t.ndim != 2:
            raise FaceShapeError(f"expected (t, c), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise FaceShapeError("tokens must be finite")
        object.__setattr__(self, "tokens", t)

    def __len__(self) -> int:
        return self.tokens.shape[0]


# ---------------------------------------------------------------------------
# Synthetic cartoon face renderer


def _fill(img, mask, color):
    img[mask] = color


def _ellipse_mask(gx, gy, cx, cy, ax, ay):
    return ((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 <= 1.0


def render_face(
    expression, identity, size: int = FACE_SIZE
) -> np.ndarray:
    """Render one cartoon face as (3, size, size) float32 in [0, 1].

    Identity drives head shape, skin tone and eye spacing; expression drives
    mouth curve/openness, eye openness and brow raise. Deterministic.
    """
    e = np.asarray(expression, dtype=np.float64).reshape(EXPRESSION_DIM)
    i = np.asarray(identity, dtype=np.float64).reshape(IDENTITY_DIM)
    s = float(size)
    xs = np.arange(size, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, xs)
    img = np.zeros((size, size, 3), dtype=np.float32)
    img[:] = (0.08, 0.08, 0.12)  # background

    # Head ellipse (identity: aspect + tone).
    ax = s * (0.30 + 0.06 * i[0])
    ay = s * (0.40 - 0.05 * i[0])
    skin = (0.92, float(0.72 + 0.12 * i[1]), float(0.55 - 0.12 * i[1]))
    _fill(img, _ellipse_mask(gx, gy, s / 2, s / 2, ax, ay), skin)

    # Eyes (identity: spacing; expression: openness).
    eye_dx = s * (0.12 + 0.035 * i[2])
    eye_y = s * 0.42
    openness = 0.25 + 0.7 * (e[2] + 1) / 2
    for sign in (-1, 1):
        cx = s / 2 + sign * eye_dx
        white = _ellipse_mask(gx, gy, cx, eye_y, s * 0.055, s * 0.05 * openness)
        _fill(img, white, (0.98, 0.98, 0.98))
        pupil = _ellipse_mask(gx, gy, cx, eye_y, s * 0.022, s * 0.035 * openness)
        _fill(img, pupil, (0.05, 0.05, 0.08))

    # Brows (expression: raise + tilt).
    brow_y = s * (0.345 - 0.03 * e[3])
    tilt = s * 0.02 * e[3]
    for sign in (-1, 1):
        cx = s / 2 + sign * eye_dx
        x0, x1 = cx - s * 0.055, cx + s * 0.055
        in_x = (gx >= x0) & (gx <= x1)
        t = np.where(in_x, (gx - x0) / (x1 - x0), 0.0)
        yline = brow_y - sign * tilt * (t - 0.5) * 2
        band = in_x & (np.abs(gy - yline) <= s * 0.012)
        _fill(img, band, (0.15, 0.1, 0.05))

    # Mouth (expression: curve + openness).
    mouth_y = s * 0.66
    mouth_w = s * 0.13
    curve = e[0] * s * 0.05
    in_x = np.abs(gx - s / 2) <= mouth_w
    u = np.where(in_x, (gx - s / 2) / mouth_w, 0.0)
    center_line = mouth_y + curve * (u**2 - 0.5) * 2
    gap = s * (0.012 + 0.035 * (e[1] + 1) / 2)
    lips = in_x & (np.abs(gy - center_line) <= gap)
    _fill(img, lips, (0.75, 0.15, 0.2))
    if e[1] > 0.0:
        inner = in_x & (np.abs(gy - center_line) <= gap * 0.45)
        _fill(img, inner, (0.2, 0.02, 0.05))

    return np.ascontiguousarray(img.transpose(2, 0, 1))


def sample_factors(rng: np.random.Generator) -> ExpressionFactors:
    """Independent uniform factors in [-1, 1]."""
    return ExpressionFactors(
        expression=rng.uniform(-1, 1, EXPRESSION_DIM),
        identity=rng.uniform(-1, 1, IDENTITY_DIM),
    )


def make_face_dataset(n: int, seed: int, size: int = FACE_SIZE) -> list:
    """n (crop_frame, factors) pairs; crop_frame is (3, size, size)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        f = sample_factors(rng)
        out.append((render_face(f.expression, f.identity, size), f))
    return out


# ---------------------------------------------------------------------------
# Encoder


class FaceMotionEncoder(nn.Module):
    """conv4 encoder + linear head + tanh; tokens bounded in [-1, 1].

    Convolutions carry no bias and the head bias starts at zero, so an
    all-zero crop maps to all-zero tokens at initialization.
    """

    arch = "conv4"
    version = 1

    def __init__(self, c: int = 64):
        super().__init__()
        self.c = c
        chans = (8, 16, 32, 64)
        layers = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(chans[-1], c)
        nn.init.zeros_(self.head.bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(t, 3, H, W) -> (t, c); each row depends on its frame only."""
        feat = self.pool(self.features(frames)).flatten(1)
        return torch.tanh(self.head(feat))


def encode_face(encoder: FaceMotionEncoder, crop: FaceCrop) -> FaceMotionTokens:
    """Deterministic per-frame encoding of a face crop."""
    with torch.no_grad():
        x = torch.from_numpy(crop.pixels)
        tokens = encoder(x).numpy()
    return FaceMotionTokens(tokens)


def _r2_score(pred: np.ndarray, target: np.ndarray) -> float:
    resid = np.sum((target - pred) ** 2)
    total = np.sum((target - target.mean(axis=0)) ** 2)
    return float(1.0 - resid / total)


def linear_probe_r2(tokens: np.ndarray, targets: np.ndarray, fit_frac: float = 0.5):
    """Fit a ridge probe on the first split, return R^2 on the second."""
    n = len(tokens)
    n_fit = int(n * fit_frac)
    x_fit, x_val = tokens[:n_fit], tokens[n_fit:]
    y_fit, y_val = targets[:n_fit], targets[n_fit:]
    xb = np.hstack([x_fit, np.ones((len(x_fit), 1))])
    reg = 1e-4 * np.eye(xb.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(xb.T @ xb + reg, xb.T @ y_fit)
    pred = np.hstack([x_val, np.ones((len(x_val), 1))]) @ w
    return _r2_score(pred, y_val)


def probe_scores(encoder: FaceMotionEncoder, dataset) -> dict:
    """Expression/identity linear-probe R^2 on a held-out face set."""
    crops = np.stack([c for c, _ in dataset])
    tokens = encode_face(encoder, FaceCrop(crops)).tokens.astype(np.float64)
    expr = np.stack([f.expression for _, f in dataset])
    ident = np.stack([f.identity for _, f in dataset])
    return {
        "expression_r2": linear_probe_r2(tokens, expr),
        "identity_r2": linear_probe_r2(tokens, ident),
    }


def train_face_encoder(
    dataset,
    c: int = 64,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 2e-3,
    decorrelation_weight: float = 2.0,
    seed: int = 0,
    holdout=None,
) -> tuple:
    """Train the encoder for expression content and identity independence.

    Two losses: a linear expression-regression head (tokens must linearly
    decode expression factors) and a squared batch-correlation penalty
    between tokens and identity factors. Returns (encoder, scores) where
    scores holds held-out probe R^2 values when ``holdout`` is given.
    """
    torch.manual_seed(seed)
    enc = FaceMotionEncoder(c)
    expr_head = nn.Linear(c, EXPRESSION_DIM)
    opt = torch.optim.Adam(
        list(enc.parameters()) + list(expr_head.parameters()), lr=lr
    )
    crops = torch.from_numpy(np.stack([cr for cr, _ in dataset]))
    expr = torch.from_numpy(
        np.stack([f.expression for _, f in dataset]).astype(np.float32)
    )
    ident = torch.from_numpy(
        np.stack([f.identity for _, f in dataset]).astype(np.float32)
    )
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        tokens = enc(crops[idx])
        loss_expr = torch.mean((expr_head(tokens) - expr[idx]) ** 2)
        zc = tokens - tokens.mean(dim=0, keepdim=True)
        yc = ident[idx] - ident[idx].mean(dim=0, keepdim=True)
        z_std = zc.std(dim=0, keepdim=True) + 1e-4
        y_std = yc.std(dim=0, keepdim=True) + 1e-4
        corr = (zc / z_std).T @ (yc / y_std) / len(idx)
        loss_dec = torch.mean(corr**2)
        loss = loss_expr + decorrelation_weight * loss_dec
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite face-encoder loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    enc.eval()
    scores = probe_scores(enc, holdout) if holdout is not None else {}
    return enc, scores


# ---------------------------------------------------------------------------
# Checkpoint I/O


def pack_parameters(module: nn.Module) -> np.ndarray:
    """Flatten all parameters into one f32 vector, sorted by name."""
    parts = [
        p.detach().cpu().numpy().astype(np.float32).ravel()
        for _, p in sorted(module.named_parameters())
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def unpack_parameters(module: nn.Module, flat: np.ndarray) -> None:
    """Inverse of :func:`pack_parameters`; shapes come from the module."""
    flat = np.asarray(flat, dtype=np.float32)
    offset = 0
    with torch.no_grad():
        for _, p in sorted(module.named_parameters()):
            n = p.numel()
            if offset + n > flat.size:
                raise ValueError("checkpoint vector too short for module")
            p.copy_(torch.from_numpy(flat[offset : offset + n].reshape(p.shape)))
            offset += n
    if offset != flat.size:
        raise ValueError(
            f"checkpoint vector has {flat.size} values, module needs {offset}"
        )


def save_face_encoder(path, encoder: FaceMotionEncoder) -> None:
    """Write `<path>` tensor container plus a `<path>.json` sidecar."""
    write_tensor(path, pack_parameters(encoder))
    sidecar = {"c": encoder.c, "arch": encoder.arch, "version": encoder.version}
    with open(f"{path}.json", "w") as f:
        json.dump(sidecar, f)


def load_face_encoder(path) -> FaceMotionEncoder:
    with open(f"{path}.json") as f:
        sidecar = json.load(f)
    if sidecar.get("arch") != FaceMotionEncoder.arch:
        raise ValueError(f"unsupported encoder arch {sidecar.get('arch')!r}")
    enc = FaceMotionEncoder(int(sidecar["c"]))
    unpack_parameters(enc, read_tensor(path))
    enc.eval()
    return enc
