"""Shared neural/numerical primitives for both pipeline stages.

Attention blocks, gated residual fusion, the stage-1 loss functions,
mask-ratio and temperature schedules, Gumbel codebook routing, and a
finite-difference gradient checker used as the test oracle throughout.
All randomness flows through explicit torch.Generator objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCCOS_CLAMP = 1e-7  # keeps arccos gradients finite at 0 / pi


class ShapeError(ValueError):
    pass


class NonRotationError(ValueError):
    pass


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


class ParameterStore:
    """Named parameter tensors with matching gradient buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = value.detach().clone().requires_grad_(True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def items(self):
        return self._params.items()

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self._params)

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {k: v.grad for k, v in self._params.items()}

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def check_buffers(self) -> bool:
        return all(v.grad is None or v.grad.shape == v.shape
                   for v in self._params.values())

    @classmethod
    def from_module(cls, module: nn.Module, seed: int = 0) -> "ParameterStore":
        store = cls(seed)
        for name, p in module.named_parameters():
            if name in store._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            store._params[name] = p
        return store


@dataclass
class AttentionConfig:
    width: int
    heads: int
    ffn: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError("dropout must be in [0, 1)")


class MultiHeadAttention(nn.Module):
    """Standard scaled-dot-product attention with learned projections."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        self.heads = config.heads
        self.head_dim = config.width // config.heads
        self.q_proj = nn.Linear(config.width, config.width)
        self.k_proj = nn.Linear(config.width, config.width)
        self.v_proj = nn.Linear(config.width, config.width)
        self.out_proj = nn.Linear(config.width, config.width)
        self.drop = nn.Dropout(config.dropout)
        for proj in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(proj.weight)
            nn.init.zeros_(proj.bias)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                values: torch.Tensor, return_weights: bool = False):
        squeeze = queries.dim() == 2
        if squeeze:
            queries, keys, values = queries[None], keys[None], values[None]
        if keys.shape[-2] != values.shape[-2]:
            raise ShapeError("key/value lengths differ")
        if queries.shape[-1] != self.config.width:
            raise ShapeError("query width mismatch")
        b, lq, _ = queries.shape
        lk = keys.shape[1]
        q = self.q_proj(queries).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keys).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(values).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = self.drop(weights) @ v
        out = out.transpose(1, 2).reshape(b, lq, self.config.width)
        out = self.out_proj(out)
        if squeeze:
            out = out[0]
            weights = weights[0]
        if return_weights:
            return out, weights
        return out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.width)
        self.attn = MultiHeadAttention(config)
        self.norm2 = nn.LayerNorm(config.width)
        self.ffn = nn.Sequential(
            nn.Linear(config.width, config.ffn),
            nn.GELU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.ffn, config.width),
            nn.Dropout(config.dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.ffn(self.norm2(x))
        return x


class GatedResidual(nn.Module):
    """base + sigmoid(W_g @ update) * update, gate bias set at init."""

    def __init__(self, width: int, init_gate: float):
        super().__init__()
        self.gate = nn.Linear(width, width)
        nn.init.zeros_(self.gate.weight)
        nn.init.constant_(self.gate.bias, init_gate)

    def forward(self, base: torch.Tensor, update: torch.Tensor) -> torch.Tensor:
        if base.shape != update.shape:
            raise ShapeError(f"gated residual shapes differ: {base.shape} vs {update.shape}")
        return base + torch.sigmoid(self.gate(update)) * update


# --- rotation losses ---------------------------------------------------------

def features_to_blocks(x: torch.Tensor) -> torch.Tensor:
    """[T, D] rotation features (D % 9 == 0) -> [T * D/9, 3, 3] blocks."""
    if x.shape[-1] % 9:
        raise ShapeError(f"feature dim {x.shape[-1]} not divisible by 9")
    return x.reshape(-1, 3, 3)


def orthonormalize_blocks(blocks: torch.Tensor) -> torch.Tensor:
    """Differentiable Gram-Schmidt on rows; third row via cross product."""
    r1 = F.normalize(blocks[..., 0, :], dim=-1, eps=1e-8)
    r2 = blocks[..., 1, :] - (blocks[..., 1, :] * r1).sum(-1, keepdim=True) * r1
    r2 = F.normalize(r2, dim=-1, eps=1e-8)
    r3 = torch.cross(r1, r2, dim=-1)
    return torch.stack([r1, r2, r3], dim=-2)


def block_orthonormality_error(blocks: torch.Tensor) -> torch.Tensor:
    gram = blocks @ blocks.transpose(-2, -1)
    eye = torch.eye(3, dtype=blocks.dtype, device=blocks.device)
    return (gram - eye).norm(dim=(-2, -1))


def geodesic_loss(pred_blocks: torch.Tensor, true_blocks: torch.Tensor,
                  validate: bool = True) -> torch.Tensor:
    """Mean arccos geodesic angle between predicted and true rotations.

    Predicted blocks are re-orthonormalized first; true blocks must already
    be rotations within 1e-3.
    """
    if pred_blocks.shape != true_blocks.shape:
        raise ShapeError("geodesic_loss shape mismatch")
    if validate:
        err = block_orthonormality_error(true_blocks).max()
        if err > 1e-3:
            raise NonRotationError(f"true blocks deviate from rotations by {err:.2e}")
    pred = orthonormalize_blocks(pred_blocks)
    rel = pred.transpose(-2, -1) @ true_blocks
    trace = rel.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = ((trace - 1.0) / 2.0).clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    return torch.arccos(cos).mean()


def velocity_loss(pred: torch.Tensor, true: torch.Tensor) -> torch.Tensor:
    """L1 distance between first-order finite differences."""
    if pred.shape != true.shape:
        raise ShapeError("velocity_loss shape mismatch")
    if pred.shape[0] < 2:
        raise ShapeError("velocity_loss needs T >= 2")
    return (pred.diff(dim=0) - true.diff(dim=0)).abs().mean()


def infonce_style_loss(style_latents: torch.Tensor, speaker_ids: torch.Tensor,
                       tau_cl: float) -> tuple[torch.Tensor, int]:
    """Contrastive speaker loss over time-pooled style latents.

    Ordered same-speaker pairs are positives; each anchor contrasts against
    every other clip in the batch. Returns (loss, positive pair count);
    count 0 signals a skip (loss tensor is 0 and detached from inputs).
    """
    if tau_cl <= 0:
        raise ValueError("tau_cl must be positive")
    b = style_latents.shape[0]
    if b < 2:
        raise ShapeError("need a batch of >= 2 clips")
    z = F.normalize(style_latents, dim=-1, eps=1e-8)
    sim = (z @ z.T) / tau_cl
    same = speaker_ids[:, None] == speaker_ids[None, :]
    off_diag = ~torch.eye(b, dtype=torch.bool, device=sim.device)
    pos_mask = same & off_diag
    n_pairs = int(pos_mask.sum())
    if n_pairs == 0:
        return style_latents.new_zeros(()), 0
    denom = torch.logsumexp(sim.masked_fill(~off_diag, float("-inf")), dim=1)
    loss = (denom[:, None] - sim)[pos_mask].mean()
    return loss, n_pairs


# --- schedules and routing ---------------------------------------------------

def cosine_mask_ratio(t: float) -> float:
    """gamma(t) = cos(pi t / 2); endpoints exact (1 at t=0, 0 at t=1)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    # sin form hits both endpoints exactly in floating point
    return math.sin(math.pi * (1.0 - t) / 2.0)


def semantic_temperature(tau0: float, kappa: float, eta) -> torch.Tensor | float:
    """Intensity-sharpened sampling temperature tau0 * exp(-kappa * eta)."""
    if tau0 <= 0:
        raise ValueError("tau0 must be positive")
    if isinstance(eta, torch.Tensor):
        if eta.min() < 0 or eta.max() > 1:
            raise ValueError("eta outside [0, 1]")
        return tau0 * torch.exp(-kappa * eta)
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta outside [0, 1]")
    return tau0 * math.exp(-kappa * eta)


def gumbel_noise(shape, generator: torch.Generator,
                 dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    neg_log_u = -torch.log(u.clamp_min(1e-20))
    return -torch.log(neg_log_u.clamp_min(1e-20))


def gumbel_pick(latent: torch.Tensor, candidate_entries: torch.Tensor,
                tau=1.0, mode: str = "infer",
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Select codebook entries for latents.

    Train mode: argmax_m(-||z - e_m||^2 / tau + g_m), g ~ Gumbel(0, 1).
    Infer mode: plain nearest neighbour (noise removed).
    Returns indices into candidate_entries ([N] for [N, D] latents, scalar
    for a single latent).
    """
    if candidate_entries.numel() == 0:
        raise ValueError("empty candidate set")
    single = latent.dim() == 1
    z = latent[None] if single else latent
    d2 = torch.cdist(z, candidate_entries).pow(2)
    if mode == "infer":
        idx = d2.argmin(dim=1)
    elif mode == "train":
        if generator is None:
            raise ValueError("train mode requires a generator")
        tau_t = torch.as_tensor(tau, dtype=d2.dtype)
        if tau_t.min() <= 0:
            raise ValueError("tau must be positive in train mode")
        scores = -d2 / (tau_t[:, None] if tau_t.dim() else tau_t)
        scores = scores + gumbel_noise(scores.shape, generator, dtype=scores.dtype)
        idx = scores.argmax(dim=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return idx[0] if single else idx


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.per_param.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def grad_check(loss_fn, params: dict[str, torch.Tensor], tolerance: float = 1e-4,
               step: float = 1e-5,
               analytic_grads: dict[str, torch.Tensor] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn is a nullary closure over the (requires_grad) tensors in params.
    64-bit tensors are expected for tight tolerances. analytic_grads
    overrides autograd (used by the deliberately-wrong negative control).
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss {loss}")
    if analytic_grads is None:
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        analytic = {name: g for name, g in zip(params, grads)}
    else:
        analytic = analytic_grads

    report: dict[str, float] = {}
    with torch.no_grad():
        for name, p in params.items():
            a = analytic.get(name)
            a = torch.zeros_like(p) if a is None else a
            worst = 0.0
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                ai = a.view(-1)[i].item()
                denom = max(abs(ai), abs(numeric), 1e-8)
                worst = max(worst, abs(ai - numeric) / denom)
            report[name] = worst
    return GradCheckReport(per_param=report, tolerance=tolerance)
