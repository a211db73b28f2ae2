"""Stage 1: semantic-guided residual-quantized motion tokenizer.

Per-part 1D-conv encoders/decoders (4x temporal compression), a content
codebook partitioned into five gesture-category regions with top-2 routed
Gumbel selection, seven residual style codebooks learned by EMA, gated
multi-scale audio fusion, cross-part attention, the combined training
objective, and tokenize/detokenize round trips.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .config import (BODY_PARTS, PART_NAMES, AblationConfig, ExperimentConfig,
                     TokenizerConfig, from_dict)
from .formats import read_tensor_blob, write_tensor_blob
from .motion_data import Corpus, MotionSequence, corpus_windows
from .nn_core import (AttentionConfig, GatedResidual, MultiHeadAttention,
                      TransformerBlock, features_to_blocks, geodesic_loss,
                      gumbel_noise, infonce_style_loss, make_generator,
                      orthonormalize_blocks, semantic_temperature,
                      velocity_loss)

EMA_EPS = 1e-5
CHECKPOINT_JSON = "checkpoint.json"
CHECKPOINT_BLOB = "tensors.bin"


class TrainingDiverged(RuntimeError):
    pass


class TokenRangeError(ValueError):
    pass


def pool4(x: torch.Tensor) -> torch.Tensor:
    """Mean-pool the time axis by 4: [B, T, C] -> [B, T/4, C]."""
    b, t, c = x.shape
    return x.reshape(b, t // 4, 4, c).mean(dim=2)


# --- codebooks ---------------------------------------------------------------

class CodebookState(nn.Module):
    """One quantization layer: entries plus EMA statistics.

    Content codebooks additionally carry K contiguous, equal-size semantic
    partitions covering all entries.
    """

    def __init__(self, entries: int, dim: int, partitions: int = 0,
                 generator: torch.Generator | None = None,
                 pin_zero: bool = False):
        super().__init__()
        if partitions and entries % partitions:
            raise ValueError(f"{entries} entries not divisible into {partitions} partitions")
        self.partitions = partitions
        self.partition_size = entries // partitions if partitions else 0
        # a pinned all-zero entry 0 guarantees residual-norm monotonicity:
        # the nearest entry is never worse than selecting no correction
        self.pin_zero = pin_zero
        init = torch.randn(entries, dim, generator=generator) * 0.1
        if pin_zero:
            init[0] = 0.0
        self.register_buffer("entries", init)
        self.register_buffer("ema_count", torch.ones(entries))
        self.register_buffer("ema_sum", init.clone())
        self.register_buffer("dead_steps", torch.zeros(entries, dtype=torch.long))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def partition_range(self, k: int) -> tuple[int, int]:
        if not self.partitions:
            raise ValueError("codebook has no partition table")
        return k * self.partition_size, (k + 1) * self.partition_size

    def union_mask(self, top2: torch.Tensor) -> torch.Tensor:
        """[N, 2] category pairs -> [N, entries] allowed-entry mask."""
        n = top2.shape[0]
        mask = torch.zeros(n, self.size, dtype=torch.bool, device=top2.device)
        idx = torch.arange(self.size, device=top2.device)
        part_of_entry = idx // self.partition_size
        for col in range(top2.shape[1]):
            mask |= part_of_entry[None, :] == top2[:, col:col + 1]
        return mask

    def partition_of(self, indices: torch.Tensor) -> torch.Tensor:
        return indices // self.partition_size


def top2_categories(semantic_logits: torch.Tensor) -> torch.Tensor:
    """Top-2 category indices per frame; ties resolved to the lower index."""
    order = torch.argsort(-semantic_logits, dim=-1, stable=True)
    return order[..., :2]


def smoc_quantize(latent: torch.Tensor, semantic_logits: torch.Tensor,
                  intensity: torch.Tensor, codebook: CodebookState,
                  tau0: float, kappa: float, mode: str = "infer",
                  generator: torch.Generator | None = None
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Route each frame to the union of its top-2 category partitions.

    Train mode perturbs the scaled negative squared distances with Gumbel
    noise at temperature tau0 * exp(-kappa * eta); infer mode is the plain
    nearest neighbour over the same union. Returns (indices [N], z_c [N, d]).
    """
    top2 = top2_categories(semantic_logits)
    allowed = codebook.union_mask(top2)
    assert bool(allowed.any(dim=1).all()), "empty partition union"
    d2 = torch.cdist(latent, codebook.entries).pow(2)
    if mode == "infer":
        indices = d2.masked_fill(~allowed, float("inf")).argmin(dim=1)
    elif mode == "train":
        if generator is None:
            raise ValueError("train mode requires a generator")
        tau = semantic_temperature(tau0, kappa, intensity)
        scores = -d2 / tau[:, None]
        scores = scores + gumbel_noise(scores.shape, generator, dtype=scores.dtype)
        indices = scores.masked_fill(~allowed, float("-inf")).argmax(dim=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return indices, codebook.entries[indices]


def vq_quantize(latent: torch.Tensor, codebook: CodebookState
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain nearest-neighbour lookup (face branch and the A3 variant)."""
    d2 = torch.cdist(latent, codebook.entries).pow(2)
    indices = d2.argmin(dim=1)
    return indices, codebook.entries[indices]


def residual_quantize_style(residual: torch.Tensor,
                            codebooks: list[CodebookState]
                            ) -> tuple[torch.Tensor, torch.Tensor, list[dict]]:
    """Quantize the running residual layer by layer.

    Returns (tokens [N_layers, N], z_s = sum of selections [N, d], and a
    per-layer record of the residual input and selected entries for the
    commitment terms and EMA updates).
    """
    run = residual
    tokens = []
    layers = []
    z_s = torch.zeros_like(residual)
    for cb in codebooks:
        idx, sel = vq_quantize(run, cb)
        tokens.append(idx)
        layers.append({"input": run, "entries": sel, "indices": idx})
        z_s = z_s + sel
        run = run - sel
    return torch.stack(tokens, dim=0), z_s, layers


def ema_codebook_update(codebook: CodebookState, latents: torch.Tensor,
                        indices: torch.Tensor, decay: float) -> None:
    """Decay running stats by mu, accumulate this batch, refresh entries."""
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must be in (0, 1)")
    with torch.no_grad():
        n = codebook.size
        counts = torch.bincount(indices, minlength=n).to(codebook.ema_count.dtype)
        sums = torch.zeros_like(codebook.ema_sum)
        sums.index_add_(0, indices, latents.detach().to(sums.dtype))
        codebook.ema_count.mul_(decay).add_(counts, alpha=1.0 - decay)
        codebook.ema_sum.mul_(decay).add_(sums, alpha=1.0 - decay)
        codebook.entries.copy_(codebook.ema_sum
                               / codebook.ema_count.clamp_min(EMA_EPS)[:, None])
        if codebook.pin_zero:
            codebook.entries[0] = 0.0
            codebook.ema_sum[0] = 0.0


def refresh_dead_codes(codebook: CodebookState, batch_latents: torch.Tensor,
                       batch_indices: torch.Tensor, threshold: float,
                       patience: int, generator: torch.Generator) -> int:
    """Re-seed entries whose EMA mass stayed below threshold for `patience`
    consecutive steps. Content entries are re-seeded only from latents routed
    into their own partition, keeping partitions semantically pure."""
    with torch.no_grad():
        starving = codebook.ema_count < threshold
        codebook.dead_steps[starving] += 1
        codebook.dead_steps[~starving] = 0
        if codebook.pin_zero:
            codebook.dead_steps[0] = 0
        dead = torch.nonzero(codebook.dead_steps >= patience).flatten()
        reseeded = 0
        for entry in dead.tolist():
            if codebook.partitions:
                part = entry // codebook.partition_size
                pool = batch_latents[codebook.partition_of(batch_indices) == part]
            else:
                pool = batch_latents
            if pool.shape[0] == 0:
                continue
            pick = int(torch.randint(pool.shape[0], (1,), generator=generator))
            codebook.entries[entry] = pool[pick]
            codebook.ema_sum[entry] = pool[pick]
            codebook.ema_count[entry] = 1.0
            codebook.dead_steps[entry] = 0
            reseeded += 1
    return reseeded


# --- encoder / decoder -------------------------------------------------------

class ResBlock1d(nn.Module):
    def __init__(self, width: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=dilation,
                               dilation=dilation, padding_mode="replicate")
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class PartEncoder(nn.Module):
    """[B, T, D_p] -> [B, T/4, latent]; replicate padding keeps constants flat."""

    def __init__(self, in_dim: int, width: int, latent: int, depth: int,
                 dilation_growth: int):
        super().__init__()
        self.stem = nn.Conv1d(in_dim, width, 3, padding=1, padding_mode="replicate")
        self.down1 = nn.Conv1d(width, width, 4, stride=2, padding=1,
                               padding_mode="replicate")
        self.down2 = nn.Conv1d(width, width, 4, stride=2, padding=1,
                               padding_mode="replicate")
        self.blocks = nn.Sequential(
            *[ResBlock1d(width, dilation_growth ** i) for i in range(depth)])
        self.head = nn.Conv1d(width, latent, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] % 4:
            raise ValueError(f"T={x.shape[1]} not divisible by 4")
        h = x.transpose(1, 2)
        h = F.gelu(self.stem(h))
        h = F.gelu(self.down1(h))
        h = F.gelu(self.down2(h))
        h = self.blocks(h)
        return self.head(h).transpose(1, 2)


class PartDecoder(nn.Module):
    """[B, T', latent] -> [B, 4*T', D_p]."""

    def __init__(self, out_dim: int, width: int, latent: int, depth: int,
                 dilation_growth: int):
        super().__init__()
        self.stem = nn.Conv1d(latent, width, 3, padding=1, padding_mode="replicate")
        self.blocks = nn.Sequential(
            *[ResBlock1d(width, dilation_growth ** i) for i in range(depth)])
        self.up1 = nn.ConvTranspose1d(width, width, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose1d(width, width, 4, stride=2, padding=1)
        self.head = nn.Conv1d(width, out_dim, 3, padding=1, padding_mode="replicate")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.stem(z.transpose(1, 2)))
        h = self.blocks(h)
        h = F.gelu(self.up1(h))
        h = F.gelu(self.up2(h))
        return self.head(h).transpose(1, 2)


class SemanticPredictor(nn.Module):
    """psi: pooled audio+text features -> per-latent-frame category logits."""

    def __init__(self, audio_dim: int, hidden: int, categories: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * audio_dim, hidden), nn.GELU(),
            nn.Linear(hidden, categories))

    def forward(self, audio: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return self.net(pool4(torch.cat([audio, text], dim=-1)))


class SnakeBeta(nn.Module):
    """x + sin^2(alpha x) / beta with per-channel log-scale parameters."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(channels))
        self.log_beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        alpha = self.log_alpha.exp()[None, :, None]
        beta = self.log_beta.exp()[None, :, None]
        return x + torch.sin(alpha * x).pow(2) / (beta + 1e-9)


class PhonemePredictor(nn.Module):
    """phi: dilated residual units (1, 2, 3) with SnakeBeta, linear head."""

    def __init__(self, latent: int, phonemes: int):
        super().__init__()
        self.units = nn.ModuleList()
        self.acts = nn.ModuleList()
        for dilation in (1, 2, 3):
            self.units.append(weight_norm(nn.Conv1d(
                latent, latent, 3, padding=dilation, dilation=dilation,
                padding_mode="replicate")))
            self.acts.append(SnakeBeta(latent))
        self.head = nn.Linear(latent, phonemes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = z.transpose(1, 2)
        for conv, act in zip(self.units, self.acts):
            h = h + act(conv(h))
        return self.head(h.transpose(1, 2))


class MSAF(nn.Module):
    """Multi-scale audio fusion with gated residual injection per part."""

    def __init__(self, latent: int, audio_dim: int, heads: int,
                 gate_init_hands: float, gate_init_other: float):
        super().__init__()
        self.prosody = nn.Sequential(
            nn.LayerNorm(audio_dim), nn.Linear(audio_dim, latent), nn.GELU(),
            nn.Linear(latent, latent))
        self.scale_mlp = nn.Sequential(
            nn.Linear(3 * latent, latent), nn.GELU(), nn.Linear(latent, latent))
        self.global_token = nn.Parameter(torch.zeros(1, latent))
        cfg = AttentionConfig(width=latent, heads=heads, ffn=latent)
        self.part_mha = MultiHeadAttention(cfg)
        self.mhca = MultiHeadAttention(cfg)
        self.query_norm = nn.LayerNorm(latent)
        self.vel_proj = nn.Linear(latent, latent)
        self.gates = nn.ModuleDict({
            part: GatedResidual(latent,
                                gate_init_hands if part == "hands" else gate_init_other)
            for part in PART_NAMES})

    def audio_kv(self, audio: torch.Tensor) -> torch.Tensor:
        """[B, T, D_a] frame-rate audio -> fused multi-scale [B, T', latent]."""
        e_a = self.prosody(pool4(audio))
        scales = [e_a]
        for factor in (2, 4):
            t = e_a.shape[1]
            pooled = F.avg_pool1d(e_a.transpose(1, 2), factor,
                                  ceil_mode=True)
            up = F.interpolate(pooled, size=t, mode="nearest").transpose(1, 2)
            scales.append(up)
        return self.scale_mlp(torch.cat(scales, dim=-1))

    def forward(self, latents: dict[str, torch.Tensor], audio: torch.Tensor,
                enabled: bool = True, use_global_token: bool = True
                ) -> dict[str, torch.Tensor]:
        if not enabled:
            return dict(latents)
        t_lat = next(iter(latents.values())).shape[1]
        if audio.shape[1] != 4 * t_lat:
            raise ValueError(
                f"audio frames {audio.shape[1]} misaligned with latents {t_lat}")
        kv = self.audio_kv(audio)
        stacked = torch.stack([latents[p] for p in PART_NAMES], dim=2)
        b, t, n_parts, d = stacked.shape
        out: dict[str, torch.Tensor] = {}
        if use_global_token:
            flat = stacked.reshape(b * t, n_parts, d)
            q = self.global_token.expand(b * t, 1, d)
            ctx = self.part_mha(q, flat, flat).reshape(b, t, d)
        else:
            ctx = None
        for part in PART_NAMES:
            z = latents[part]
            if part == "hands":
                vel = torch.diff(z, dim=1, prepend=z[:, :1])
                query = self.vel_proj(vel)
            else:
                query = self.query_norm(z + ctx) if ctx is not None else self.query_norm(z)
            update = self.mhca(query, kv, kv)
            out[part] = self.gates[part](z, update)
        return out


class CPA(nn.Module):
    """Cross-part attention: one pre-norm transformer block over the 4 parts."""

    def __init__(self, latent: int, heads: int):
        super().__init__()
        self.part_pos = nn.Parameter(torch.zeros(len(PART_NAMES), latent))
        nn.init.normal_(self.part_pos, std=0.02)
        self.block = TransformerBlock(
            AttentionConfig(width=latent, heads=heads, ffn=4 * latent))

    def forward(self, latents: dict[str, torch.Tensor],
                enabled: bool = True) -> dict[str, torch.Tensor]:
        if not enabled:
            return dict(latents)
        if len(latents) != len(PART_NAMES):
            raise ValueError(f"CPA expects {len(PART_NAMES)} parts, got {len(latents)}")
        stacked = torch.stack([latents[p] for p in PART_NAMES], dim=2)
        b, t, n_parts, d = stacked.shape
        h = stacked + self.part_pos[None, None]
        h = self.block(h.reshape(b * t, n_parts, d)).reshape(b, t, n_parts, d)
        return {p: h[:, :, i] for i, p in enumerate(PART_NAMES)}


# --- tokens ------------------------------------------------------------------

@dataclass
class TokenizedMotion:
    """Discrete token record for one sequence at the latent rate T' = T/4."""

    frames_latent: int
    speaker_id: int
    content: dict[str, np.ndarray]        # body part -> [T'] int64
    style: dict[str, np.ndarray]          # body part -> [layers, T'] int64
    face: np.ndarray                      # [T'] int64

    def to_json(self) -> str:
        return json.dumps({
            "frames_latent": self.frames_latent,
            "speaker_id": self.speaker_id,
            "content": {k: v.tolist() for k, v in self.content.items()},
            "style": {k: v.tolist() for k, v in self.style.items()},
            "face": self.face.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TokenizedMotion":
        doc = json.loads(text)
        return cls(
            frames_latent=doc["frames_latent"],
            speaker_id=doc["speaker_id"],
            content={k: np.asarray(v, dtype=np.int64)
                     for k, v in doc["content"].items()},
            style={k: np.asarray(v, dtype=np.int64)
                   for k, v in doc["style"].items()},
            face=np.asarray(doc["face"], dtype=np.int64),
        )


# --- the stage-1 model -------------------------------------------------------

class MotionTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, part_dims: dict[str, int],
                 audio_dim: int, categories: int, phonemes: int,
                 ablation: AblationConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.part_dims = dict(part_dims)
        self.audio_dim = audio_dim
        self.categories = categories
        self.phonemes = phonemes
        self.ablation = ablation or AblationConfig()
        torch.manual_seed(seed)
        gen = make_generator(seed)

        d = cfg.latent_dim
        self.encoders = nn.ModuleDict({
            p: PartEncoder(part_dims[p], cfg.width, d, cfg.depth, cfg.dilation_growth)
            for p in PART_NAMES})
        self.decoders = nn.ModuleDict({
            p: PartDecoder(part_dims[p], cfg.width, d, cfg.depth, cfg.dilation_growth)
            for p in PART_NAMES})
        partitions = 0 if self.ablation.a3_no_smoc else categories
        self.content_books = nn.ModuleDict({
            p: CodebookState(cfg.content_entries, d, partitions, generator=gen)
            for p in BODY_PARTS})
        self.style_books = nn.ModuleDict({
            p: nn.ModuleList([CodebookState(cfg.style_entries, d, 0,
                                            generator=gen, pin_zero=True)
                              for _ in range(cfg.style_layers)])
            for p in BODY_PARTS})
        self.face_book = CodebookState(cfg.face_entries, d, 0, generator=gen)
        self.psi = SemanticPredictor(audio_dim, d, categories)
        self.phi = nn.ModuleDict({p: PhonemePredictor(d, phonemes)
                                  for p in PART_NAMES})
        self.msaf = MSAF(d, audio_dim, cfg.msaf_heads,
                         cfg.gate_init_hands, cfg.gate_init_other)
        self.cpa = CPA(d, cfg.cpa_heads)
        self.routing_counter = 0  # frames routed through SMoC partitions

    # spec ops ---------------------------------------------------------------

    def encode_part(self, part: str, motion: torch.Tensor) -> torch.Tensor:
        single = motion.dim() == 2
        x = motion[None] if single else motion
        z = self.encoders[part](x)
        return z[0] if single else z

    def decode_part(self, part: str, latent: torch.Tensor) -> torch.Tensor:
        single = latent.dim() == 2
        z = latent[None] if single else latent
        m = self.decoders[part](z)
        return m[0] if single else m

    def semantic_logits(self, audio: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return self.psi(audio, text)

    def quantize_content(self, part: str, latent: torch.Tensor,
                         logits: torch.Tensor, intensity: torch.Tensor,
                         mode: str, generator: torch.Generator | None):
        """Flattened [N, d] content quantization for one body part."""
        book = self.content_books[part]
        if self.ablation.a3_no_smoc:
            return vq_quantize(latent, book)
        self.routing_counter += latent.shape[0]
        return smoc_quantize(latent, logits, intensity, book,
                             self.cfg.tau0, self.cfg.kappa, mode, generator)

    def msaf_fuse(self, latents: dict[str, torch.Tensor],
                  audio: torch.Tensor) -> dict[str, torch.Tensor]:
        return self.msaf(latents, audio,
                         enabled=not self.ablation.a1_no_msaf,
                         use_global_token=not self.ablation.a4_no_global_token)

    def cpa_mix(self, latents: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        return self.cpa(latents, enabled=not self.ablation.a2_no_cpa)

    # forward pass -------------------------------------------------------------

    def forward_batch(self, batch: dict[str, torch.Tensor], mode: str = "train",
                      generator: torch.Generator | None = None,
                      quantize_bypass: bool = False) -> dict:
        """Encode, quantize, fuse, decode one window batch.

        batch: parts [B, T, D_p], audio/text [B, T, D_a], intensity [B, T],
        speaker [B]. Returns latents, straight-through paths, tokens, and
        per-layer records needed by the loss and the EMA updates.

        quantize_bypass substitutes the identity for every codebook lookup
        (used by finite-difference gradient checks, which cannot see through
        the straight-through estimator's detached recombination).
        """
        b = batch["audio"].shape[0]
        t = batch["audio"].shape[1]
        t_lat = t // 4
        logits = self.semantic_logits(batch["audio"], batch["text"])
        logits_flat = logits.reshape(b * t_lat, -1)
        eta_lat = pool4(batch["intensity"][..., None])[..., 0].reshape(-1).clamp(0, 1)

        out: dict = {"psi_logits": logits, "parts": {}}
        content_st: dict[str, torch.Tensor] = {}
        for part in PART_NAMES:
            z = self.encode_part(part, batch[part])
            rec: dict = {"z": z}
            z_flat = z.reshape(b * t_lat, -1)
            if part == "face":
                idx, q = vq_quantize(z_flat, self.face_book)
                if quantize_bypass:
                    q = z_flat
                rec["content_idx"] = idx.reshape(b, t_lat)
                rec["content_q"] = q.reshape(b, t_lat, -1)
                rec["content_layer"] = {"input": z_flat, "entries": q.reshape(b * t_lat, -1),
                                        "indices": idx}
                content_st[part] = z + (rec["content_q"] - z).detach()
                rec["z_s"] = torch.zeros_like(z)
            else:
                idx, q = self.quantize_content(part, z_flat, logits_flat,
                                               eta_lat, mode, generator)
                if quantize_bypass:
                    q = z_flat
                q = q.reshape(b, t_lat, -1)
                rec["content_idx"] = idx.reshape(b, t_lat)
                rec["content_q"] = q
                rec["content_layer"] = {"input": z_flat, "entries": q.reshape(b * t_lat, -1),
                                        "indices": idx}
                content_st[part] = z + (q - z).detach()
                resid = (z - q).reshape(b * t_lat, -1)
                tokens, z_s_flat, layers = residual_quantize_style(
                    resid, list(self.style_books[part]))
                rec["style_idx"] = tokens.reshape(-1, b, t_lat).transpose(0, 1)
                rec["style_layers"] = layers
                z_s = z_s_flat.reshape(b, t_lat, -1)
                rec["z_s"] = resid.reshape(b, t_lat, -1) + (z_s - resid.reshape(b, t_lat, -1)).detach()
                rec["z_s_value"] = z_s
            out["parts"][part] = rec

        fused = self.msaf_fuse(content_st, batch["audio"])
        mixed = self.cpa_mix(fused)
        for part in PART_NAMES:
            rec = out["parts"][part]
            dec_in = mixed[part] + rec["z_s"]
            rec["recon"] = self.decode_part(part, dec_in)
        return out


# --- losses -------------------------------------------------------------------

def total_stage1_loss(tokenizer: MotionTokenizer, batch: dict, mode: str = "train",
                      generator: torch.Generator | None = None,
                      quantize_bypass: bool = False
                      ) -> tuple[torch.Tensor, dict[str, float], dict]:
    """Eq.-style combined objective with per-term breakdown.

    Terms: geodesic reconstruction, velocity, semantic BCE, InfoNCE on
    pooled style latents, phoneme CE, and two-sided commitment for every
    quantization layer (stop-gradient on one side each).
    """
    abl = tokenizer.ablation
    out = tokenizer.forward_batch(batch, mode=mode, generator=generator,
                                  quantize_bypass=quantize_bypass)
    b = batch["audio"].shape[0]
    device = batch["audio"].device
    zero = torch.zeros((), device=device)

    l_rec = zero.clone()
    l_vel = zero.clone()
    l_commit = zero.clone()
    l_phone = zero.clone()
    for part in PART_NAMES:
        rec = out["parts"][part]
        true = batch[part]
        pred = rec["recon"]
        l_rec = l_rec + geodesic_loss(features_to_blocks(pred),
                                      features_to_blocks(true), validate=False)
        l_vel = l_vel + velocity_loss(pred.reshape(b, true.shape[1], -1),
                                      true.reshape(b, true.shape[1], -1))
        layers = [rec["content_layer"]]
        if part != "face":
            layers += rec["style_layers"]
        for layer in layers:
            z_n, e_n = layer["input"], layer["entries"]
            # squared L2 over the latent dimension, mean over frames
            l_commit = l_commit + (
                (z_n.detach() - e_n).pow(2).sum(-1).mean()
                + (z_n - e_n.detach()).pow(2).sum(-1).mean())
        phi_in = rec["z"] + (rec["content_q"] - rec["z"]).detach()
        phone_logits = tokenizer.phi[part](phi_in)
        l_phone = l_phone + F.cross_entropy(
            phone_logits.reshape(-1, tokenizer.phonemes),
            batch["phonemes"].reshape(-1))
    n_parts = len(PART_NAMES)
    l_rec, l_vel, l_commit, l_phone = (x / n_parts for x in
                                       (l_rec, l_vel, l_commit, l_phone))

    sem_targets = pool4(batch["semantic"].to(out["psi_logits"].dtype))
    l_sem = F.binary_cross_entropy_with_logits(out["psi_logits"], sem_targets)

    pooled = torch.cat([out["parts"][p]["z_s"].mean(dim=1) for p in BODY_PARTS],
                       dim=-1)
    if pooled.detach().abs().sum() > 0:
        l_cl, n_pairs = infonce_style_loss(pooled, batch["speaker"],
                                           tokenizer.cfg.tau_cl)
    else:
        # degenerate all-zero style latents carry no speaker signal
        l_cl, n_pairs = pooled.new_zeros(()), 0

    use_cl = not (abl.a6_no_cl_no_phone or abl.a7_no_cl) and n_pairs > 0
    use_phone = not abl.a6_no_cl_no_phone
    total = l_rec + l_vel + l_sem + l_commit
    if use_cl:
        total = total + l_cl
    if use_phone:
        total = total + l_phone
    breakdown = {
        "rec": l_rec.item(), "vel": l_vel.item(), "sem": l_sem.item(),
        "cl": l_cl.item() if n_pairs else 0.0, "phone": l_phone.item(),
        "commit": l_commit.item(), "cl_pairs": float(n_pairs),
        "total": total.item(),
    }
    return total, breakdown, out


# --- training ------------------------------------------------------------------

def _window_batch(corpus: Corpus, entries: list[tuple[int, int]],
                  picks: np.ndarray, window: int) -> dict[str, torch.Tensor]:
    parts: dict[str, list] = {p: [] for p in PART_NAMES}
    audio, text, intensity, semantic, phonemes = [], [], [], [], []
    speakers = []
    for k in picks:
        seq_id, start = entries[int(k)]
        seq = corpus.sequences[seq_id]
        for p in PART_NAMES:
            parts[p].append(seq.parts[p][start:start + window])
        audio.append(seq.audio_features[start:start + window])
        text.append(seq.text_features[start:start + window])
        intensity.append(seq.intensity[start:start + window])
        semantic.append(seq.semantic_labels[start:start + window])
        phonemes.append(seq.phoneme_labels[start // 4:(start + window) // 4])
        speakers.append(seq.speaker_id)
    batch = {p: torch.from_numpy(np.stack(parts[p])) for p in PART_NAMES}
    batch["audio"] = torch.from_numpy(np.stack(audio))
    batch["text"] = torch.from_numpy(np.stack(text))
    batch["intensity"] = torch.from_numpy(np.stack(intensity))
    batch["semantic"] = torch.from_numpy(np.stack(semantic))
    batch["phonemes"] = torch.from_numpy(np.stack(phonemes))
    batch["speaker"] = torch.tensor(speakers, dtype=torch.long)
    return batch


@dataclass
class TokenizerTrainResult:
    tokenizer: MotionTokenizer
    log: list[dict]


def train_tokenizer(corpus: Corpus, config: ExperimentConfig,
                    seed: int | None = None) -> TokenizerTrainResult:
    """Desk-schedule stage-1 training; deterministic given (config, seed)."""
    torch.set_num_threads(1)
    cfg = config.tokenizer
    seed = config.seed if seed is None else seed
    tokenizer = MotionTokenizer(cfg, corpus.config.part_dims,
                                corpus.config.audio_dim, corpus.config.categories,
                                corpus.config.phonemes, ablation=config.ablation,
                                seed=seed)
    spec = corpus_windows(corpus, cfg.window, cfg.stride)
    if not spec.entries:
        raise TrainingDiverged("no training windows available")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    gumbel_gen = make_generator(seed + 101)
    reseed_gen = make_generator(seed + 202)
    opt = torch.optim.Adam(tokenizer.parameters(), lr=cfg.lr,
                           betas=(cfg.adam_beta1, cfg.adam_beta2),
                           weight_decay=cfg.weight_decay)
    log: list[dict] = []
    tokenizer.train()
    for it in range(cfg.iterations):
        picks = rng.integers(0, len(spec.entries), size=cfg.batch_size)
        batch = _window_batch(corpus, spec.entries, picks, cfg.window)
        total, breakdown, out = total_stage1_loss(tokenizer, batch, "train",
                                                  gumbel_gen)
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: {breakdown}")
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(tokenizer.parameters(), cfg.clip_norm)
        opt.step()
        with torch.no_grad():
            for part in BODY_PARTS:
                rec = out["parts"][part]
                book = tokenizer.content_books[part]
                layer = rec["content_layer"]
                ema_codebook_update(book, layer["input"], layer["indices"],
                                    cfg.ema_decay)
                refresh_dead_codes(book, layer["input"].detach(), layer["indices"],
                                   cfg.dead_code_threshold, cfg.dead_code_patience,
                                   reseed_gen)
                for n, layer in enumerate(rec["style_layers"]):
                    sb = tokenizer.style_books[part][n]
                    ema_codebook_update(sb, layer["input"], layer["indices"],
                                        cfg.ema_decay)
                    refresh_dead_codes(sb, layer["input"].detach(),
                                       layer["indices"], cfg.dead_code_threshold,
                                       cfg.dead_code_patience, reseed_gen)
            face_layer = out["parts"]["face"]["content_layer"]
            ema_codebook_update(tokenizer.face_book, face_layer["input"],
                                face_layer["indices"], cfg.ema_decay)
            refresh_dead_codes(tokenizer.face_book, face_layer["input"].detach(),
                               face_layer["indices"], cfg.dead_code_threshold,
                               cfg.dead_code_patience, reseed_gen)
        breakdown["iteration"] = it
        log.append(breakdown)
    tokenizer.eval()
    return TokenizerTrainResult(tokenizer, log)


# --- tokenize / detokenize -----------------------------------------------------

def _seq_batch(seq: MotionSequence) -> dict[str, torch.Tensor]:
    batch = {p: torch.from_numpy(seq.parts[p][None]) for p in PART_NAMES}
    batch["audio"] = torch.from_numpy(seq.audio_features[None])
    batch["text"] = torch.from_numpy(seq.text_features[None])
    batch["intensity"] = torch.from_numpy(seq.intensity[None])
    batch["speaker"] = torch.tensor([seq.speaker_id])
    return batch


@torch.no_grad()
def tokenize(tokenizer: MotionTokenizer, seq: MotionSequence) -> TokenizedMotion:
    """Deterministic infer-mode encoding of a sequence into token streams."""
    tokenizer.eval()
    batch = _seq_batch(seq)
    out = tokenizer.forward_batch(batch, mode="infer")
    content = {p: out["parts"][p]["content_idx"][0].numpy().astype(np.int64)
               for p in BODY_PARTS}
    style = {p: out["parts"][p]["style_idx"][0].numpy().astype(np.int64)
             for p in BODY_PARTS}
    face = out["parts"]["face"]["content_idx"][0].numpy().astype(np.int64)
    return TokenizedMotion(seq.frames // 4, seq.speaker_id, content, style, face)


@torch.no_grad()
def detokenize(tokenizer: MotionTokenizer, tokens: TokenizedMotion,
               audio: np.ndarray, orthonormalize: bool = True
               ) -> dict[str, np.ndarray]:
    """Decode token streams (plus the audio used for fusion) back to motion."""
    tokenizer.eval()
    t_lat = tokens.frames_latent
    latents: dict[str, torch.Tensor] = {}
    style_sum: dict[str, torch.Tensor] = {}
    for part in BODY_PARTS:
        idx = torch.from_numpy(tokens.content[part])
        book = tokenizer.content_books[part]
        if int(idx.min()) < 0 or int(idx.max()) >= book.size:
            raise TokenRangeError(f"{part} content token out of range")
        latents[part] = book.entries[idx][None]
        z_s = torch.zeros_like(latents[part])
        for n in range(tokenizer.cfg.style_layers):
            sb = tokenizer.style_books[part][n]
            s_idx = torch.from_numpy(tokens.style[part][n])
            if int(s_idx.min()) < 0 or int(s_idx.max()) >= sb.size:
                raise TokenRangeError(f"{part} style layer {n} token out of range")
            z_s = z_s + sb.entries[s_idx][None]
        style_sum[part] = z_s
    f_idx = torch.from_numpy(tokens.face)
    if int(f_idx.min()) < 0 or int(f_idx.max()) >= tokenizer.face_book.size:
        raise TokenRangeError("face token out of range")
    latents["face"] = tokenizer.face_book.entries[f_idx][None]
    style_sum["face"] = torch.zeros_like(latents["face"])

    audio_t = torch.from_numpy(np.asarray(audio, dtype=np.float32)[None])
    if audio_t.shape[1] != 4 * t_lat:
        raise ValueError("audio length must be 4 * T'")
    fused = tokenizer.msaf_fuse(latents, audio_t)
    mixed = tokenizer.cpa_mix(fused)
    out: dict[str, np.ndarray] = {}
    for part in PART_NAMES:
        dec = tokenizer.decode_part(part, mixed[part] + style_sum[part])[0]
        if orthonormalize:
            blocks = orthonormalize_blocks(dec.reshape(-1, 3, 3))
            dec = blocks.reshape(dec.shape[0], -1)
        out[part] = dec.numpy().astype(np.float32)
    return out


# --- checkpoints ----------------------------------------------------------------

def save_tokenizer(tokenizer: MotionTokenizer, config: ExperimentConfig,
                   path: str | Path, iteration: int | None = None,
                   seed: int | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "tokenizer",
        "config": config.to_dict(),
        "seed": config.seed if seed is None else seed,
        "iteration": iteration if iteration is not None else config.tokenizer.iterations,
        "part_dims": tokenizer.part_dims,
        "audio_dim": tokenizer.audio_dim,
        "categories": tokenizer.categories,
        "phonemes": tokenizer.phonemes,
    }
    with open(root / CHECKPOINT_JSON, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    tensors = {name: value.detach().numpy()
               for name, value in tokenizer.state_dict().items()}
    write_tensor_blob(root / CHECKPOINT_BLOB, tensors)


def load_tokenizer(path: str | Path) -> tuple[MotionTokenizer, ExperimentConfig]:
    root = Path(path)
    with open(root / CHECKPOINT_JSON, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "tokenizer":
        raise ValueError(f"{path}: not a tokenizer checkpoint")
    config = from_dict(meta["config"])
    tokenizer = MotionTokenizer(config.tokenizer, meta["part_dims"],
                                meta["audio_dim"], meta["categories"],
                                meta["phonemes"], ablation=config.ablation,
                                seed=meta["seed"])
    tensors = read_tensor_blob(root / CHECKPOINT_BLOB)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    current = tokenizer.state_dict()
    cast = {name: t.to(current[name].dtype) for name, t in state.items()}
    tokenizer.load_state_dict(cast)
    tokenizer.eval()
    return tokenizer, config
