"""Stage 2: masked content generation and residual style decoding.

One Content Masked Transformer per body part (and face) fills [MASK]
positions under a cosine schedule with semantic-aware masking/remasking and
classifier-free guidance. One Style Residual Transformer per body part
predicts the seven residual style layers in order, conditioned on content
tokens and a reference-motion style prefix.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import (BODY_PARTS, PART_NAMES, CMTConfig, ExperimentConfig,
                     SRTConfig, from_dict)
from .formats import read_tensor_blob, write_tensor_blob
from .motion_data import Corpus, MotionSequence, corpus_windows
from .nn_core import (AttentionConfig, MultiHeadAttention, TransformerBlock,
                      cosine_mask_ratio, make_generator)
from .tokenizer import MotionTokenizer, TokenizedMotion, pool4, tokenize

CHECKPOINT_JSON = "checkpoint.json"
CHECKPOINT_BLOB = "tensors.bin"


class DecodingError(RuntimeError):
    pass


# --- masking plans -------------------------------------------------------------

@dataclass
class RemaskWeights:
    """Semantic weight, confidence weight, and randomisation scale."""

    alpha: float = 0.6
    beta: float = 0.4
    rand_scale: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0.0 <= self.rand_scale <= 1.0:
            raise ValueError("rand_scale must be in [0, 1]")


@dataclass
class MaskPlan:
    t: float
    mask: torch.Tensor            # bool [L]
    qbar: torch.Tensor            # [L] in [0, 1]

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def select_by_score(scores: torch.Tensor, count: int, rand_frac: float,
                    generator: torch.Generator,
                    eligible: torch.Tensor | None = None) -> torch.Tensor:
    """Pick `count` positions: a rand_frac share uniformly at random, the
    rest in ascending (score, index) order. Returns a bool mask."""
    length = scores.shape[0]
    if eligible is None:
        eligible = torch.ones(length, dtype=torch.bool)
    pool = torch.nonzero(eligible).flatten()
    count = min(count, int(pool.numel()))
    chosen = torch.zeros(length, dtype=torch.bool)
    n_rand = int(round(rand_frac * count))
    if n_rand > 0:
        perm = torch.randperm(pool.numel(), generator=generator)
        chosen[pool[perm[:n_rand]]] = True
    remaining = eligible & ~chosen
    n_rest = count - int(chosen.sum())
    if n_rest > 0:
        idx = torch.nonzero(remaining).flatten()
        order = torch.argsort(scores[idx], stable=True)
        chosen[idx[order[:n_rest]]] = True
    return chosen


def build_mask_plan(length: int, t: float, qbar: torch.Tensor,
                    rand_scale: float, generator: torch.Generator,
                    semantic: bool = True) -> MaskPlan:
    """Masked count follows the cosine schedule; the deterministic share
    masks lowest qbar*(1-t) first (ties by position), the rand_scale share
    is uniform. With semantic=False (ablation A5) selection is all-uniform.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if qbar.shape[0] != length:
        raise ValueError("qbar length mismatch")
    n = int(round(cosine_mask_ratio(t) * length))
    if t < 1.0:
        n = max(n, 1)
    if not semantic:
        mask = select_by_score(torch.zeros(length), n, 1.0, generator)
        return MaskPlan(t=t, mask=mask, qbar=qbar)
    priority = qbar * (1.0 - t)
    mask = select_by_score(priority, n, rand_scale, generator)
    return MaskPlan(t=t, mask=mask, qbar=qbar)


def remask_scores(qbar: torch.Tensor, confidence: torch.Tensor, t: float,
                  weights: RemaskWeights, semantic: bool = True) -> torch.Tensor:
    """R = alpha * qbar * (1 - t) + beta * confidence (ascending = remask
    first). Ablation A5 uses confidence only."""
    if not semantic:
        return confidence
    return weights.alpha * qbar * (1.0 - t) + weights.beta * confidence


def guided_logits(cond: torch.Tensor, null: torch.Tensor,
                  scale: float) -> torch.Tensor:
    """CFG combination; exactly the conditional logits at scale 1."""
    if scale == 1.0:
        return cond
    return (1.0 - scale) * null + scale * cond


def nucleus_sample(probs: torch.Tensor, threshold: float,
                   generator: torch.Generator) -> torch.Tensor:
    """Cumulative-probability filtering then one draw per row."""
    sorted_probs, order = probs.sort(dim=-1, descending=True)
    cum = sorted_probs.cumsum(dim=-1)
    keep = (cum - sorted_probs) < threshold  # always keeps the top token
    filtered = sorted_probs * keep
    filtered = filtered / filtered.sum(dim=-1, keepdim=True)
    pick = torch.multinomial(filtered, 1, generator=generator)[:, 0]
    return order.gather(1, pick[:, None])[:, 0]


# --- conditions ------------------------------------------------------------------

@dataclass
class StyleCondition:
    """Reference style prefix for one body part plus its pooled summary."""

    ref_tokens: np.ndarray        # [layers, P] int64
    fraction: float
    ref_seq: torch.Tensor         # [P, width] summed layer embeddings
    global_token: torch.Tensor    # [width]


@dataclass
class ConditionEmbedding:
    speaker_id: int
    audio: torch.Tensor           # [T', D_a] latent-rate audio features


# --- CMT ----------------------------------------------------------------------------

class CMTModel(nn.Module):
    """Bidirectional transformer over [speaker, audio prefix, token frames]."""

    def __init__(self, vocab: int, max_latent: int, audio_dim: int,
                 speakers: int, cfg: CMTConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.mask_id = vocab
        width = cfg.width
        self.token_emb = nn.Embedding(vocab + 1, width)
        self.pos_emb = nn.Parameter(torch.zeros(1 + 2 * max_latent, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.spk_emb = nn.Embedding(speakers, width)
        self.audio_proj = nn.Linear(audio_dim, width)
        self.null_spk = nn.Parameter(torch.zeros(width))
        self.null_audio = nn.Parameter(torch.zeros(width))
        nn.init.normal_(self.null_spk, std=0.02)
        nn.init.normal_(self.null_audio, std=0.02)
        block_cfg = AttentionConfig(width=width, heads=cfg.heads, ffn=cfg.ffn,
                                    dropout=cfg.dropout)
        self.blocks = nn.ModuleList(
            [TransformerBlock(block_cfg) for _ in range(cfg.layers)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab)

    def forward(self, tokens: torch.Tensor, audio_latent: torch.Tensor,
                speaker: torch.Tensor, conditioned: torch.Tensor) -> torch.Tensor:
        """tokens [B, L] (mask_id allowed), audio_latent [B, L, D_a],
        speaker [B], conditioned [B] bool -> logits [B, L, vocab]."""
        b, length = tokens.shape
        spk = torch.where(conditioned[:, None], self.spk_emb(speaker),
                          self.null_spk[None].expand(b, -1))
        aud = torch.where(conditioned[:, None, None],
                          self.audio_proj(audio_latent),
                          self.null_audio[None, None].expand(b, length, -1))
        x = torch.cat([spk[:, None], aud, self.token_emb(tokens)], dim=1)
        x = x + self.pos_emb[None, :x.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[:, 1 + length:]))


def cmt_train_step(model: CMTModel, tokens: torch.Tensor,
                   audio_latent: torch.Tensor, speaker: torch.Tensor,
                   plans: list[MaskPlan],
                   generator: torch.Generator) -> tuple[torch.Tensor, int]:
    """Masked cross-entropy (mean over masked positions).

    Returns (loss, masked position count); a zero count is the caller's
    signal to regenerate plans.
    """
    mask = torch.stack([p.mask for p in plans], dim=0)
    n_masked = int(mask.sum())
    if n_masked == 0:
        return tokens.new_zeros((), dtype=torch.float32), 0
    corrupted = tokens.masked_fill(mask, model.mask_id)
    drop = torch.rand(tokens.shape[0], generator=generator) < model.cfg.cond_dropout
    logits = model(corrupted, audio_latent, speaker, conditioned=~drop)
    loss = F.cross_entropy(logits[mask], tokens[mask])
    return loss, n_masked


@torch.no_grad()
def iterative_decode(model: CMTModel, audio_latent: torch.Tensor,
                     speaker: int, qbar: torch.Tensor, steps: int,
                     cfg_scale: float, weights: RemaskWeights,
                     generator: torch.Generator,
                     locked_prefix: torch.Tensor | None = None,
                     semantic: bool = True,
                     trace: list | None = None) -> torch.Tensor:
    """Cosine-schedule iterative refinement over one token window.

    Locked prefix tokens are fixed up front and never remasked; the
    schedule then runs over the remaining free positions.
    """
    model.eval()
    length = qbar.shape[0]
    tokens = torch.full((length,), model.mask_id, dtype=torch.long)
    free = torch.ones(length, dtype=torch.bool)
    if locked_prefix is not None:
        n_lock = locked_prefix.shape[0]
        if n_lock > length:
            raise DecodingError("locked prefix longer than window")
        tokens[:n_lock] = locked_prefix
        free[:n_lock] = False
    masked = free.clone()
    n_free = int(free.sum())
    spk = torch.tensor([speaker], dtype=torch.long)
    for step in range(1, steps + 1):
        t = step / steps
        if not masked.any():
            break
        cond = model(tokens[None], audio_latent[None], spk,
                     torch.tensor([True]))[0]
        null = model(tokens[None], audio_latent[None], spk,
                     torch.tensor([False]))[0]
        logits = guided_logits(cond, null, cfg_scale)
        if not torch.isfinite(logits).all():
            raise DecodingError("non-finite logits during decoding")
        probs = logits.softmax(dim=-1)
        idx = torch.nonzero(masked).flatten()
        sampled = nucleus_sample(probs[idx], model.cfg.filter_threshold, generator)
        tokens[idx] = sampled
        confidence = probs[idx, sampled]
        n_next = int(round(cosine_mask_ratio(t) * n_free)) if step < steps else 0
        n_next = min(n_next, int(idx.numel()))
        scores_local = remask_scores(qbar[idx], confidence, t, weights,
                                     semantic=semantic)
        scores = torch.full((length,), float("inf"))
        scores[idx] = scores_local
        eligible = torch.zeros(length, dtype=torch.bool)
        eligible[idx] = True
        remask = select_by_score(scores, n_next, weights.rand_scale, generator,
                                 eligible=eligible)
        tokens[remask] = model.mask_id
        masked = remask
        if trace is not None:
            trace.append({"t": t, "masked": int(masked.sum()),
                          "target": n_next})
    return tokens


# --- SRT ------------------------------------------------------------------------------

class SRTModel(nn.Module):
    """Layer-cascade transformer over content + previously decoded style."""

    def __init__(self, content_vocab: int, style_vocab: int, style_layers: int,
                 max_latent: int, cfg: SRTConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.style_vocab = style_vocab
        self.style_layers = style_layers
        width = cfg.width
        self.content_emb = nn.Embedding(content_vocab, width)
        self.style_embs = nn.ModuleList(
            [nn.Embedding(style_vocab, width) for _ in range(style_layers)])
        self.layer_emb = nn.Embedding(style_layers, width)
        self.pos_emb = nn.Parameter(torch.zeros(max_latent, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.global_query = nn.Parameter(torch.zeros(1, width))
        nn.init.normal_(self.global_query, std=0.02)
        self.pool_attn = MultiHeadAttention(
            AttentionConfig(width=width, heads=cfg.heads, ffn=width))
        self.null_cond = nn.Parameter(torch.zeros(width))
        nn.init.normal_(self.null_cond, std=0.02)
        block_cfg = AttentionConfig(width=width, heads=cfg.heads, ffn=cfg.ffn,
                                    dropout=cfg.dropout)
        self.blocks = nn.ModuleList(
            [TransformerBlock(block_cfg) for _ in range(cfg.layers)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, style_vocab)

    def embed_reference(self, ref_tokens: torch.Tensor
                        ) -> tuple[torch.Tensor, torch.Tensor]:
        """[layers, P] reference tokens -> (summed per-frame seq, pooled token)."""
        seq = torch.zeros(ref_tokens.shape[1], self.cfg.width,
                          dtype=self.global_query.dtype)
        for layer in range(self.style_layers):
            seq = seq + self.style_embs[layer](ref_tokens[layer])
        pooled = self.pool_attn(self.global_query, seq, seq)[0]
        return seq, pooled

    def forward(self, content: torch.Tensor, style_prev: torch.Tensor,
                target_layer: torch.Tensor, ref_seq: torch.Tensor | None,
                ref_global: torch.Tensor | None,
                conditioned: torch.Tensor) -> torch.Tensor:
        """content [B, L]; style_prev [B, layers, L] (layers >= j ignored);
        target_layer [B] in [0, layers); ref_* batched ([B, P, W], [B, W]) or
        None when the whole batch is unconditioned. Returns [B, L, vocab]."""
        b, length = content.shape
        x = self.content_emb(content)
        for layer in range(self.style_layers):
            use = (target_layer > layer)[:, None, None]
            x = x + use * self.style_embs[layer](style_prev[:, layer])
        x = x + self.layer_emb(target_layer)[:, None]
        x = x + self.pos_emb[None, :length]
        if ref_seq is None:
            prefix = self.null_cond[None, None].expand(b, 1, -1)
        else:
            cond_prefix = torch.cat([ref_global[:, None], ref_seq], dim=1)
            null_prefix = self.null_cond[None, None].expand(
                b, cond_prefix.shape[1], -1)
            prefix = torch.where(conditioned[:, None, None], cond_prefix,
                                 null_prefix)
        h = torch.cat([prefix, x], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h[:, -length:]))


def sample_prefix_fraction(cfg: SRTConfig, generator: torch.Generator) -> float:
    u = torch.rand((), generator=generator).item()
    return cfg.prefix_min + (cfg.prefix_max - cfg.prefix_min) * u


def encode_style_reference(tokenizer: MotionTokenizer, srt: SRTModel,
                           reference: MotionSequence | TokenizedMotion,
                           part: str, fraction: float | None = None,
                           generator: torch.Generator | None = None
                           ) -> StyleCondition:
    """Tokenize a reference clip, take a contiguous style-prefix of the
    sampled fraction, and pool the global style token."""
    if isinstance(reference, MotionSequence):
        tokens = tokenize(tokenizer, reference)
    else:
        tokens = reference
    style = tokens.style[part]
    t_lat = style.shape[1]
    if t_lat < 8:
        raise ValueError(f"reference has {t_lat} latent frames; need >= 8")
    if fraction is None:
        if generator is None:
            raise ValueError("need a generator to sample the prefix fraction")
        fraction = sample_prefix_fraction(srt.cfg, generator)
    if not srt.cfg.prefix_min <= fraction <= srt.cfg.prefix_max:
        fraction = min(max(fraction, srt.cfg.prefix_min), srt.cfg.prefix_max)
    prefix_len = max(1, int(round(fraction * t_lat)))
    ref_tokens = style[:, :prefix_len]
    with torch.no_grad():
        ref_seq, pooled = srt.embed_reference(torch.from_numpy(ref_tokens))
    return StyleCondition(ref_tokens=ref_tokens, fraction=float(fraction),
                          ref_seq=ref_seq, global_token=pooled)


def srt_train_step(model: SRTModel, content: torch.Tensor,
                   style: torch.Tensor, ref_seq: torch.Tensor,
                   ref_global: torch.Tensor,
                   generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample a target layer per clip, mask deeper layers out of the input,
    and score cross-entropy on that layer over all positions."""
    b = content.shape[0]
    j = torch.randint(0, model.style_layers, (b,), generator=generator)
    drop = torch.rand(b, generator=generator) < model.cfg.cond_dropout
    logits = model(content, style, j, ref_seq, ref_global, conditioned=~drop)
    targets = style[torch.arange(b), j]
    loss = F.cross_entropy(logits.reshape(-1, model.style_vocab),
                           targets.reshape(-1))
    return loss, j


@torch.no_grad()
def srt_cascade_decode(model: SRTModel, content: torch.Tensor,
                       condition: StyleCondition,
                       cfg_scale: float | None = None) -> torch.Tensor:
    """Greedy layer-by-layer decoding; deterministic given inputs."""
    model.eval()
    scale = model.cfg.cfg_scale if cfg_scale is None else cfg_scale
    length = content.shape[0]
    style = torch.zeros(model.style_layers, length, dtype=torch.long)
    content_b = content[None]
    ref_seq = condition.ref_seq[None]
    ref_global = condition.global_token[None]
    for j in range(model.style_layers):
        jt = torch.tensor([j])
        cond = model(content_b, style[None], jt, ref_seq, ref_global,
                     conditioned=torch.tensor([True]))[0]
        null = model(content_b, style[None], jt, None, None,
                     conditioned=torch.tensor([False]))[0]
        logits = guided_logits(cond, null, scale)
        style[j] = logits.argmax(dim=-1)
    return style


# --- training --------------------------------------------------------------------------

@dataclass
class TokenDataset:
    """Window-level token streams plus conditioning channels."""

    content: dict[str, torch.Tensor]      # part -> [N, L] (face included)
    style: dict[str, torch.Tensor]        # body part -> [N, layers, L]
    audio_latent: torch.Tensor            # [N, L, D_a]
    qbar: torch.Tensor                    # [N, L]
    speaker: torch.Tensor                 # [N]
    latent_len: int


@torch.no_grad()
def build_token_dataset(tokenizer: MotionTokenizer, corpus: Corpus,
                        window: int, stride: int,
                        qbar_mode: str = "max_prob") -> TokenDataset:
    spec = corpus_windows(corpus, window, stride)
    content: dict[str, list] = {p: [] for p in PART_NAMES}
    style: dict[str, list] = {p: [] for p in BODY_PARTS}
    audio_lat, qbars, speakers = [], [], []
    tok_cache: dict[int, TokenizedMotion] = {}
    psi_cache: dict[int, torch.Tensor] = {}
    for seq_id, start in spec.entries:
        seq = corpus.sequences[seq_id]
        if seq_id not in tok_cache:
            tok_cache[seq_id] = tokenize(tokenizer, seq)
            psi_cache[seq_id] = tokenizer.semantic_logits(
                torch.from_numpy(seq.audio_features[None]),
                torch.from_numpy(seq.text_features[None]))[0]
        toks = tok_cache[seq_id]
        lo, hi = start // 4, (start + window) // 4
        for p in BODY_PARTS:
            content[p].append(torch.from_numpy(toks.content[p][lo:hi]))
            style[p].append(torch.from_numpy(toks.style[p][:, lo:hi]))
        content["face"].append(torch.from_numpy(toks.face[lo:hi]))
        audio = torch.from_numpy(seq.audio_features[start:start + window])
        audio_lat.append(pool4(audio[None])[0])
        qbars.append(qbar_from_logits(psi_cache[seq_id][lo:hi], qbar_mode))
        speakers.append(seq.speaker_id)
    return TokenDataset(
        content={p: torch.stack(v) for p, v in content.items()},
        style={p: torch.stack(v) for p, v in style.items()},
        audio_latent=torch.stack(audio_lat),
        qbar=torch.stack(qbars),
        speaker=torch.tensor(speakers, dtype=torch.long),
        latent_len=window // 4,
    )


def qbar_from_logits(logits: torch.Tensor, mode: str = "max_prob") -> torch.Tensor:
    """Normalized per-frame semantic score in [0, 1]."""
    probs = logits.softmax(dim=-1)
    if mode == "max_prob":
        return probs.max(dim=-1).values
    if mode == "one_minus_nogesture":
        return 1.0 - probs[..., 0]
    raise ValueError(f"unknown qbar mode {mode!r}")


@dataclass
class GeneratorBundle:
    cmts: dict[str, CMTModel]             # all four parts
    srts: dict[str, SRTModel]             # body parts only
    speakers: int
    latent_len: int


def train_cmt(dataset: TokenDataset, part: str, vocab: int, audio_dim: int,
              speakers: int, cfg: CMTConfig, seed: int,
              semantic: bool = True) -> tuple[CMTModel, list[dict]]:
    torch.set_num_threads(1)
    model = CMTModel(vocab, dataset.latent_len, audio_dim, speakers, cfg,
                     seed=seed)
    gen = make_generator(seed + 11)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.99),
                           weight_decay=1e-4)
    decay_at = int(cfg.iterations * cfg.lr_decay_frac)
    n = dataset.speaker.shape[0]
    log = []
    model.train()
    for it in range(cfg.iterations):
        if it == decay_at:
            for group in opt.param_groups:
                group["lr"] *= cfg.lr_decay_factor
        picks = rng.integers(0, n, size=min(cfg.batch_size, n))
        tokens = dataset.content[part][picks]
        plans = []
        for row in picks:
            t = torch.rand((), generator=gen).item()
            plans.append(build_mask_plan(dataset.latent_len, t,
                                         dataset.qbar[row], cfg.rand_scale,
                                         gen, semantic=semantic))
        loss, n_masked = cmt_train_step(model, tokens,
                                        dataset.audio_latent[picks],
                                        dataset.speaker[picks], plans, gen)
        if n_masked == 0:
            log.append({"iteration": it, "loss": float("nan"), "masked": 0})
            continue
        if not torch.isfinite(loss):
            raise RuntimeError(f"CMT diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        log.append({"iteration": it, "loss": loss.item(), "masked": n_masked})
    model.eval()
    return model, log


def train_srt(dataset: TokenDataset, part: str, content_vocab: int,
              style_vocab: int, style_layers: int, cfg: SRTConfig,
              seed: int) -> tuple[SRTModel, list[dict]]:
    torch.set_num_threads(1)
    model = SRTModel(content_vocab, style_vocab, style_layers,
                     dataset.latent_len, cfg, seed=seed)
    gen = make_generator(seed + 17)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.99),
                           weight_decay=1e-4)
    decay_at = int(cfg.iterations * cfg.lr_decay_frac)
    n = dataset.speaker.shape[0]
    log = []
    model.train()
    for it in range(cfg.iterations):
        if it == decay_at:
            for group in opt.param_groups:
                group["lr"] *= cfg.lr_decay_factor
        picks = rng.integers(0, n, size=min(cfg.batch_size, n))
        content = dataset.content[part][picks]
        style = dataset.style[part][picks]
        # self-reference: a contiguous style prefix of each training window
        frac = sample_prefix_fraction(cfg, gen)
        prefix_len = max(1, int(round(frac * dataset.latent_len)))
        ref_seqs, ref_globals = [], []
        for b in range(style.shape[0]):
            seq, pooled = model.embed_reference(style[b, :, :prefix_len])
            ref_seqs.append(seq)
            ref_globals.append(pooled)
        loss, _ = srt_train_step(model, content, style,
                                 torch.stack(ref_seqs),
                                 torch.stack(ref_globals), gen)
        if not torch.isfinite(loss):
            raise RuntimeError(f"SRT diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        log.append({"iteration": it, "loss": loss.item()})
    model.eval()
    return model, log


def train_generators(tokenizer: MotionTokenizer, corpus: Corpus,
                     config: ExperimentConfig
                     ) -> tuple[GeneratorBundle, dict[str, list[dict]]]:
    """Train one CMT per part (incl. face) and one SRT per body part."""
    dataset = build_token_dataset(tokenizer, corpus, config.tokenizer.window,
                                  config.tokenizer.stride,
                                  config.cmt.qbar_mode)
    semantic = not config.ablation.a5_no_sam
    speakers = corpus.config.speakers
    logs: dict[str, list[dict]] = {}
    cmts: dict[str, CMTModel] = {}
    for i, part in enumerate(PART_NAMES):
        vocab = (tokenizer.face_book.size if part == "face"
                 else tokenizer.content_books[part].size)
        cmts[part], logs[f"cmt_{part}"] = train_cmt(
            dataset, part, vocab, corpus.config.audio_dim, speakers,
            config.cmt, seed=config.seed + 1000 + i, semantic=semantic)
    srts: dict[str, SRTModel] = {}
    for i, part in enumerate(BODY_PARTS):
        srts[part], logs[f"srt_{part}"] = train_srt(
            dataset, part, tokenizer.content_books[part].size,
            config.tokenizer.style_entries, config.tokenizer.style_layers,
            config.srt, seed=config.seed + 2000 + i)
    bundle = GeneratorBundle(cmts=cmts, srts=srts, speakers=speakers,
                             latent_len=dataset.latent_len)
    return bundle, logs


# --- checkpoints --------------------------------------------------------------------------

def _dump_models(models: dict[str, nn.Module], kind: str, meta: dict,
                 path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, kind=kind)
    with open(root / CHECKPOINT_JSON, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    tensors: dict[str, np.ndarray] = {}
    for part, model in models.items():
        for name, value in model.state_dict().items():
            tensors[f"{part}.{name}"] = value.detach().numpy()
    write_tensor_blob(root / CHECKPOINT_BLOB, tensors)


def _load_state(model: nn.Module, tensors: dict[str, np.ndarray],
                prefix: str) -> None:
    state = {name[len(prefix):]: torch.from_numpy(arr)
             for name, arr in tensors.items() if name.startswith(prefix)}
    current = model.state_dict()
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
    model.eval()


def save_cmts(cmts: dict[str, CMTModel], config: ExperimentConfig,
              latent_len: int, speakers: int, path: str | Path) -> None:
    meta = {
        "config": config.to_dict(),
        "speakers": speakers,
        "latent_len": latent_len,
        "vocab": {p: m.vocab for p, m in cmts.items()},
        "audio_dim": cmts["upper"].audio_proj.in_features,
    }
    _dump_models(cmts, "cmt", meta, path)


def load_cmts(path: str | Path) -> tuple[dict[str, CMTModel], dict, ExperimentConfig]:
    root = Path(path)
    with open(root / CHECKPOINT_JSON, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "cmt":
        raise ValueError(f"{path}: not a CMT checkpoint")
    config = from_dict(meta["config"])
    tensors = read_tensor_blob(root / CHECKPOINT_BLOB)
    cmts = {}
    for part in PART_NAMES:
        model = CMTModel(meta["vocab"][part], meta["latent_len"],
                         meta["audio_dim"], meta["speakers"], config.cmt)
        _load_state(model, tensors, f"{part}.")
        cmts[part] = model
    return cmts, meta, config


def save_srts(srts: dict[str, SRTModel], config: ExperimentConfig,
              latent_len: int, content_vocab: dict[str, int],
              path: str | Path) -> None:
    meta = {
        "config": config.to_dict(),
        "latent_len": latent_len,
        "content_vocab": content_vocab,
        "style_vocab": {p: m.style_vocab for p, m in srts.items()},
    }
    _dump_models(srts, "srt", meta, path)


def load_srts(path: str | Path) -> tuple[dict[str, SRTModel], dict, ExperimentConfig]:
    root = Path(path)
    with open(root / CHECKPOINT_JSON, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "srt":
        raise ValueError(f"{path}: not an SRT checkpoint")
    config = from_dict(meta["config"])
    tensors = read_tensor_blob(root / CHECKPOINT_BLOB)
    srts = {}
    for part in BODY_PARTS:
        model = SRTModel(meta["content_vocab"][part], meta["style_vocab"][part],
                         config.tokenizer.style_layers, meta["latent_len"],
                         config.srt)
        _load_state(model, tensors, f"{part}.")
        srts[part] = model
    return srts, meta, config


def load_bundle(cmt_path: str | Path, srt_path: str | Path) -> GeneratorBundle:
    cmts, meta, _ = load_cmts(cmt_path)
    srts, _, _ = load_srts(srt_path)
    return GeneratorBundle(cmts=cmts, srts=srts, speakers=meta["speakers"],
                           latent_len=meta["latent_len"])
