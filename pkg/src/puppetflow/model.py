"""Reference-conditioned video denoiser with hybrid guidance attention.

Token conventions
-----------------
A token grid is a tensor ``(t, n, c)``: ``t`` frames, ``n = h_p * w_p``
spatial tokens per frame (after patchify), width ``c = c_model``. Reference
frames and noised frames form two grids with the same ``n`` and ``c``.

Per block, the wiring is: joint self-attention over the time-concatenated
grids flattened to one sequence of ``(t_R + t_D) * n`` tokens; then
cross-attention where each noised frame's tokens query all reference tokens
flattened to a single key/value set of length ``n * t_R``; then per-frame
cross-attention from noised tokens to that frame's aligned window of face
motion tokens; then a shared MLP on both branches. Every residual output
projection starts at zero, so an untrained block is an exact no-op and the
face branch starts as a no-op in particular.

Training target: rectified-flow velocity. For noise ``x0``, data ``x1`` and
``s`` uniform in [0, 1], the interpolant is ``x_s = (1-s) x0 + s x1`` and
the regression target is ``v = x1 - x0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .codec import CodecConfig

# All reference frames share one fixed time position so the reference set is
# permutation-invariant yet distinguishable from noised frames (which use
# time positions 0..t_D-1).
REF_TIME_POS = 512

DROP_FLAGS = ("keep", "drop_ref", "drop_motion", "drop_both")


class ShapeContractError(ValueError):
    """A tensor violates the token/latent shape contract."""


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeContractError(msg)


@dataclass(frozen=True)
class ModelConfig:
    """Denoiser hyperparameters and codec/tokenization factors."""

    c_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    c_face: int = 64
    c_pose: int = 16
    f_s: int = 4
    f_t: int = 1
    patch: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.c_model % self.n_heads != 0:
            raise ValueError("c_model must be divisible by n_heads")

    @property
    def c_lat(self) -> int:
        return CodecConfig(self.f_s, self.f_t).c_lat

    @property
    def codec(self) -> CodecConfig:
        return CodecConfig(self.f_s, self.f_t)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class FlowSample:
    """One rectified-flow training sample over latent tensors."""

    x0: torch.Tensor
    x1: torch.Tensor
    s: float
    x_s: torch.Tensor = field(init=False)
    v_target: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ShapeContractError("x0/x1 shape mismatch")
        if not (0.0 <= self.s <= 1.0):
            raise ValueError(f"s={self.s} out of [0, 1]")
        object.__setattr__(self, "x_s", (1.0 - self.s) * self.x0 + self.s * self.x1)
        object.__setattr__(self, "v_target", self.x1 - self.x0)


# ---------------------------------------------------------------------------
# Token plumbing with the symbolic shape contract asserted inline


def concat_branches(ref: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Concat grids along time and flatten to one joint sequence.

    (t_R, n, c) + (t_D, n, c) -> (1, (t_R + t_D) * n, c).
    """
    t_r, n, c = ref.shape
    t_d, n2, c2 = noise.shape
    _check(n == n2 and c == c2, f"branch mismatch: {ref.shape} vs {noise.shape}")
    joint = torch.cat([ref, noise], dim=0).reshape(1, (t_r + t_d) * n, c)
    _check(joint.shape == (1, (t_r + t_d) * n, c), "joint flatten shape")
    return joint


def split_branches(joint: torch.Tensor, t_r: int, t_d: int, n: int):
    """Inverse of :func:`concat_branches`: -> (t_R, n, c), (t_D, n, c)."""
    _, total, c = joint.shape
    _check(total == (t_r + t_d) * n, f"joint length {total} != (t_R+t_D)*n")
    grid = joint.reshape(t_r + t_d, n, c)
    ref, noise = grid[:t_r], grid[t_r:]
    _check(ref.shape == (t_r, n, c) and noise.shape == (t_d, n, c), "split shape")
    return ref, noise


def flatten_reference(ref: torch.Tensor) -> torch.Tensor:
    """(t_R, n, c) -> (1, n * t_R, c): one key/value set shared by all queries."""
    t_r, n, c = ref.shape
    flat = ref.reshape(1, n * t_r, c)
    _check(flat.shape == (1, n * t_r, c), "reference flatten shape")
    return flat


def align_face_tokens(tokens: torch.Tensor, f_t: int) -> torch.Tensor:
    """Align per-pixel-frame face tokens to latent frames.

    Mirrors the codec's temporal packing: pixel frame 0 is replicated f_t
    times, so latent frame i's window is rows [i*f_t, (i+1)*f_t). Identity
    when f_t == 1.
    """
    if f_t == 1:
        return tokens
    t = tokens.shape[0]
    _check((t - 1) % f_t == 0, f"face token count {t} must be 1 mod f_t={f_t}")
    return torch.cat([tokens[:1].expand(f_t, -1), tokens[1:]], dim=0)


# ---------------------------------------------------------------------------
# Attention primitives


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention; output projection zero-init (residual no-op)."""

    def __init__(self, c: int, n_heads: int, c_kv: int | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = c // n_heads
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c_kv or c, c)
        self.v = nn.Linear(c_kv or c, c)
        self.out = nn.Linear(c, c)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(
        self,
        q_tokens: torch.Tensor,
        kv_tokens: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Batched attention: (b, nq, c) x (b, nk, c_kv) -> (b, nq, c).

        key_mask: optional bool (b, nk); False keys are excluded.
        """
        b, nq, _ = q_tokens.shape
        nk = kv_tokens.shape[1]
        h, d = self.n_heads, self.d_head
        q = self.q(q_tokens).reshape(b, nq, h, d).transpose(1, 2)
        k = self.k(kv_tokens).reshape(b, nk, h, d).transpose(1, 2)
        v = self.v(kv_tokens).reshape(b, nk, h, d).transpose(1, 2)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, nq, h * d)
        return self.out(mixed)


class Mlp(nn.Module):
    def __init__(self, c: int, ratio: float):
        super().__init__()
        hidden = int(c * ratio)
        self.fc1 = nn.Linear(c, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, c)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class DenoiserBlock(nn.Module):
    """One block: joint self-attn -> ref cross-attn -> face cross-attn -> MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.c_model
        self.self_attn = MultiHeadAttention(c, cfg.n_heads)
        self.ref_attn = MultiHeadAttention(c, cfg.n_heads)
        self.face_attn = MultiHeadAttention(c, cfg.n_heads, c_kv=cfg.c_face)
        self.mlp = Mlp(c, cfg.mlp_ratio)
        self.norm_self = nn.LayerNorm(c)
        self.norm_ref_q = nn.LayerNorm(c)
        self.norm_ref_kv = nn.LayerNorm(c)
        self.norm_face = nn.LayerNorm(c)
        self.norm_mlp = nn.LayerNorm(c)

    def joint_self_attention(self, ref: torch.Tensor, noise: torch.Tensor):
        """Bidirectional self-attention over both branches (residual)."""
        t_r, n, _ = ref.shape
        t_d = noise.shape[0]
        joint = concat_branches(ref, noise)
        joint = joint + self.self_attn(self.norm_self(joint), self.norm_self(joint))
        return split_branches(joint, t_r, t_d, n)

    def ref_cross_attention(
        self,
        ref: torch.Tensor,
        noise: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Noised tokens query the flattened reference token set (residual)."""
        _check(ref.shape[1:] == noise.shape[1:], "ref/noise token width mismatch")
        t_d = noise.shape[0]
        kv = self.norm_ref_kv(flatten_reference(ref)).expand(t_d, -1, -1)
        mask = key_mask.reshape(1, -1).expand(t_d, -1) if key_mask is not None else None
        return noise + self.ref_attn(self.norm_ref_q(noise), kv, key_mask=mask)

    def face_cross_attention(
        self, noise: torch.Tensor, face_tokens: torch.Tensor, f_t: int
    ) -> torch.Tensor:
        """Each frame's tokens attend to that frame's face-token window (residual).

        face_tokens: (t_D * f_t, c_face), already aligned to latent frames.
        """
        t_d, n, c = noise.shape
        _check(
            face_tokens.shape[0] == t_d * f_t,
            f"face tokens {face_tokens.shape[0]} != t_D*f_t = {t_d * f_t}",
        )
        windows = face_tokens.reshape(t_d, f_t, -1)
        return noise + self.face_attn(self.norm_face(noise), windows)

    def forward(self, ref, noise, face_tokens=None, f_t: int = 1):
        ref, noise = self.joint_self_attention(ref, noise)
        noise = self.ref_cross_attention(ref, noise)
        if face_tokens is not None:
            noise = self.face_cross_attention(noise, face_tokens, f_t)
        ref = ref + self.mlp(self.norm_mlp(ref))
        noise = noise + self.mlp(self.norm_mlp(noise))
        return ref, noise


# ---------------------------------------------------------------------------
# Embeddings


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer/float positions -> (len, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=positions.dtype, device=positions.device)
        / max(half - 1, 1)
    )
    args = positions[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimeEmbedding(nn.Module):
    """Flow time s in [0, 1] -> c_model vector."""

    def __init__(self, c: int):
        super().__init__()
        self.c = c
        self.mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))

    def forward(self, s: float, dtype, device) -> torch.Tensor:
        pos = torch.tensor([s * 1000.0], dtype=dtype, device=device)
        return self.mlp(sinusoidal_embedding(pos, self.c))[0]


class PoseEncoder(nn.Module):
    """Strided conv encoder: (t, H, W, 6) canvases -> (t_lat, h, w, c_pose).

    Spatial downsampling by f_s; when f_t > 1 the canvases are first grouped
    temporally like the codec packs pixel frames (frame 0 alone, then mean
    over each block of f_t). Hidden convs carry no bias so zero canvases map
    to the final layer's bias alone (zero once that layer is zeroed).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.f_s = cfg.f_s
        self.f_t = cfg.f_t
        hidden = 32
        self.conv_in = nn.Conv2d(6, hidden, cfg.f_s, stride=cfg.f_s, bias=False)
        self.act = nn.ReLU()
        self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1, bias=False)
        self.conv_out = nn.Conv2d(hidden, cfg.c_pose, 3, padding=1)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, canvases: torch.Tensor) -> torch.Tensor:
        t, hgt, wid, ch = canvases.shape
        _check(ch == 6, f"canvas must have 6 channels, got {ch}")
        _check(
            hgt % self.f_s == 0 and wid % self.f_s == 0,
            f"canvas dims {(hgt, wid)} not divisible by f_s={self.f_s}",
        )
        if self.f_t > 1:
            _check((t - 1) % self.f_t == 0, f"canvas count {t} must be 1 mod f_t")
            t_lat = 1 + (t - 1) // self.f_t
            rest = canvases[1:].reshape(t_lat - 1, self.f_t, hgt, wid, ch).mean(dim=1)
            canvases = torch.cat([canvases[:1], rest], dim=0)
        x = canvases.permute(0, 3, 1, 2)
        x = self.act(self.conv_in(x))
        x = self.act(self.conv_mid(x))
        x = self.conv_out(x)
        return x.permute(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# The denoiser


class GuidedDenoiser(nn.Module):
    """Velocity predictor with reference/face conditioning and CFG support."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.c_model
        pin = (cfg.c_lat + cfg.c_pose) * cfg.patch * cfg.patch
        self.pose_encoder = PoseEncoder(cfg)
        self.noise_embed = nn.Linear(pin, c)
        self.ref_embed = nn.Linear(cfg.c_lat * cfg.patch * cfg.patch, c)
        self.time_embed = TimeEmbedding(c)
        self.blocks = nn.ModuleList(DenoiserBlock(cfg) for _ in range(cfg.n_blocks))
        self.norm_out = nn.LayerNorm(c)
        self.head = nn.Linear(c, cfg.c_lat * cfg.patch * cfg.patch)
        # Zero-init head: the untrained model predicts zero velocity.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.null_ref = nn.Parameter(torch.zeros(c))
        self.null_pose = nn.Parameter(torch.zeros(cfg.c_pose))
        self.null_face = nn.Parameter(torch.zeros(cfg.c_face))

    # -- tokenization ------------------------------------------------------

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        """(t, h, w, c) -> (t, (h/p)*(w/p), c*p*p)."""
        t, h, w, c = x.shape
        p = self.cfg.patch
        _check(h % p == 0 and w % p == 0, f"latent dims {(h, w)} not divisible by patch")
        x = x.reshape(t, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5)
        return x.reshape(t, (h // p) * (w // p), c * p * p)

    def _unpatchify(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        t, n, cpp = tokens.shape
        p = self.cfg.patch
        c = cpp // (p * p)
        x = tokens.reshape(t, h // p, w // p, p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5)
        return x.reshape(t, h, w, c)

    def _positional(self, t: int, h: int, w: int, ref: bool, dtype, device):
        """Factorized sinusoidal embedding over (time, row, col) token coords."""
        c = self.cfg.c_model
        p = self.cfg.patch
        hp, wp = h // p, w // p
        if ref:
            tpos = torch.full((t,), float(REF_TIME_POS), dtype=dtype, device=device)
        else:
            _check(t < REF_TIME_POS, f"t_D={t} exceeds reference time offset")
            tpos = torch.arange(t, dtype=dtype, device=device)
        et = sinusoidal_embedding(tpos, c)
        ey = sinusoidal_embedding(torch.arange(hp, dtype=dtype, device=device), c)
        ex = sinusoidal_embedding(torch.arange(wp, dtype=dtype, device=device), c)
        spatial = ey[:, None, :] + ex[None, :, :]
        return et[:, None, :] + spatial.reshape(1, hp * wp, c)

    def encode_pose(self, canvases: torch.Tensor) -> torch.Tensor:
        """Canvas stack (t, H, W, 6) -> pose feature (t_lat, h, w, c_pose)."""
        return self.pose_encoder(canvases)

    def assemble_noise_tokens(self, x_s: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        """Channel-concat latent and pose feature, patchify, project to c_model."""
        _check(
            x_s.shape[:3] == pose.shape[:3],
            f"latent {tuple(x_s.shape)} vs pose {tuple(pose.shape)} grid mismatch",
        )
        joint = torch.cat([x_s, pose], dim=-1)
        return self.noise_embed(self._patchify(joint))

    def embed_reference(self, ref_latents: torch.Tensor) -> torch.Tensor:
        """Reference latents (t_R, h, w, c_lat) -> token grid (t_R, n, c_model)."""
        return self.ref_embed(self._patchify(ref_latents))

    # -- forward -----------------------------------------------------------

    def predict_velocity(
        self,
        x_s: torch.Tensor,
        s: float,
        pose: torch.Tensor,
        ref_latents: torch.Tensor,
        m: torch.Tensor | None = None,
        drop: str = "keep",
    ) -> torch.Tensor:
        """Full forward pass -> velocity with the same shape as x_s.

        m: face motion tokens (t_D * f_t, c_face), aligned to latent frames
        (see :func:`align_face_tokens`), or None to bypass the face branch
        entirely. Drop flags swap conditioning for learned null embeddings.
        """
        if drop not in DROP_FLAGS:
            raise ValueError(f"drop flag {drop!r} not in {DROP_FLAGS}")
        _check(x_s.dim() == 4, f"x_s must be (t, h, w, c), got {tuple(x_s.shape)}")
        t_d, h, w, _ = x_s.shape
        dtype, device = x_s.dtype, x_s.device
        drop_ref = drop in ("drop_ref", "drop_both")
        drop_motion = drop in ("drop_motion", "drop_both")

        if drop_motion:
            pose = self.null_pose.to(dtype).expand(t_d, h, w, -1)
        noise = self.assemble_noise_tokens(x_s, pose)
        n_tok = noise.shape[1]

        if drop_ref:
            ref = self.null_ref.to(dtype).expand(1, n_tok, -1)
        else:
            ref = self.embed_reference(ref_latents.to(dtype))
        noise = noise + self._positional(t_d, h, w, ref=False, dtype=dtype, device=device)
        ref = ref + self._positional(ref.shape[0], h, w, ref=True, dtype=dtype, device=device)

        noise = noise + self.time_embed(s, dtype, device)
        ref = ref + self.time_embed(1.0, dtype, device)

        face = None
        if m is not None:
            if drop_motion:
                face = self.null_face.to(dtype).expand(t_d * self.cfg.f_t, -1)
            else:
                face = m.to(dtype)

        for i, block in enumerate(self.blocks):
            try:
                ref, noise = block(ref, noise, face_tokens=face, f_t=self.cfg.f_t)
            except ShapeContractError as e:
                raise ShapeContractError(f"block {i}: {e}") from e

        out = self.head(self.norm_out(noise))
        return self._unpatchify(out, h, w)

    def cfg_velocity(
        self,
        x_s: torch.Tensor,
        s: float,
        pose: torch.Tensor,
        ref_latents: torch.Tensor,
        m: torch.Tensor | None = None,
        w_ref: float = 2.5,
        w_motion: float = 2.5,
    ) -> torch.Tensor:
        """Two-weight guidance from three forward passes.

        v = v_uncond + w_ref (v_ref - v_uncond) + w_motion (v_full - v_ref),
        evaluated in the numerically exact-at-endpoints form
        (1 - w_ref) v_uncond + (w_ref - w_motion) v_ref + w_motion v_full.
        """
        if w_ref < 0 or w_motion < 0:
            raise ValueError("guidance weights must be >= 0")
        args = (x_s, s, pose, ref_latents, m)
        v_uncond = self.predict_velocity(*args, drop="drop_both")
        v_ref = self.predict_velocity(*args, drop="drop_motion")
        v_full = self.predict_velocity(*args, drop="keep")
        return (1.0 - w_ref) * v_uncond + (w_ref - w_motion) * v_ref + w_motion * v_full

    # -- parameters ----------------------------------------------------------

    def parameter_groups(self) -> dict:
        """Named parameter groups used by checkpointing and stage freezing."""
        face_attn, trunk = [], []
        for block in self.blocks:
            for name, p in block.named_parameters():
                (face_attn if "face" in name else trunk).append(p)
        return {
            "pose_encoder": list(self.pose_encoder.parameters()),
            "input_embed": (
                list(self.noise_embed.parameters())
                + list(self.ref_embed.parameters())
                + list(self.time_embed.parameters())
                + [self.null_ref, self.null_pose]
            ),
            "trunk": trunk,
            "face_attn": face_attn + [self.null_face],
            "head": list(self.norm_out.parameters()) + list(self.head.parameters()),
        }


def flow_matching_loss(
    model: GuidedDenoiser,
    sample: FlowSample,
    pose: torch.Tensor,
    ref_latents: torch.Tensor,
    m: torch.Tensor | None = None,
    drop: str = "keep",
) -> torch.Tensor:
    """Mean squared error between predicted and target velocity."""
    v = model.predict_velocity(sample.x_s, sample.s, pose, ref_latents, m, drop=drop)
    loss = torch.mean((v - sample.v_target) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError("non-finite flow matching loss")
    return loss


def velocity_mse(v_pred: torch.Tensor, sample: FlowSample) -> torch.Tensor:
    """Loss for an arbitrary velocity prediction (oracle tests)."""
    return torch.mean((v_pred - sample.v_target) ** 2)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
