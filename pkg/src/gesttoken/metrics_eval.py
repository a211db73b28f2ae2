"""Evaluation suite: JRMSE/wJRMSE, MSE/LVD, FGD, Diversity, BC/NBC,
speaker-identity probes, and the style-transition experiment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .config import BODY_PARTS, PART_NAMES
from .motion_data import Corpus, MotionSequence, audio_beat_frames
from .nn_core import orthonormalize_blocks
from .tokenizer import MotionTokenizer, detokenize, tokenize, vq_quantize


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    """Per-metric mean (and std when runs >= 2) plus run provenance."""

    values: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)
    runs: int = 1
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""

    def record(self, name: str, samples: list[float]) -> None:
        arr = np.asarray(samples, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise MetricError(f"{name}: non-finite metric value")
        self.values[name] = float(arr.mean())
        if len(samples) >= 2:
            self.stds[name] = float(arr.std(ddof=0))

    def to_dict(self) -> dict:
        return {"values": self.values, "stds": self.stds, "runs": self.runs,
                "seeds": self.seeds, "config_hash": self.config_hash}


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, samples: np.ndarray, eps: float = 1e-10) -> "GaussianMoments":
        if samples.ndim != 2:
            raise MetricError("expected [N, D] samples")
        mean = samples.mean(axis=0)
        if samples.shape[0] < 2:
            cov = np.eye(samples.shape[1]) * eps
        else:
            cov = np.cov(samples, rowvar=False)
            cov = np.atleast_2d(cov)
        return cls(mean=mean, cov=cov)


# --- reconstruction metrics -----------------------------------------------------

def jrmse(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean squared rotation-feature error over all T x D_p values."""
    if pred.shape != true.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {true.shape}")
    diff = pred.astype(np.float64) - true.astype(np.float64)
    return float((diff ** 2).mean())


def wjrmse(per_part: dict[str, float], dims: dict[str, int]) -> float:
    """Dimension-weighted aggregate: weights D_p / sum(D_p')."""
    total = sum(dims[p] for p in per_part)
    return float(sum(per_part[p] * dims[p] / total for p in per_part))


def mse_lvd(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """Positional MSE and L1 velocity discrepancy (first differences)."""
    if pred.shape != true.shape:
        raise MetricError("shape mismatch")
    if pred.shape[0] < 2:
        raise MetricError("LVD needs T >= 2")
    p = pred.astype(np.float64)
    t = true.astype(np.float64)
    mse = float(((p - t) ** 2).sum(axis=1).mean())
    vel_p = np.diff(p, axis=0)
    vel_t = np.diff(t, axis=0)
    lvd = float(np.abs(vel_p - vel_t).sum(axis=1).mean())
    return mse, lvd


# --- Frechet distance ------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray, eig_floor: float) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise MetricError(f"covariance eigenvalue {vals.min():.3e} below -1e-6")
    vals = np.maximum(vals, eig_floor)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd_from_moments(real: GaussianMoments, gen: GaussianMoments,
                     eig_floor: float = 1e-10) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2)."""
    diff = real.mean - gen.mean
    sqrt_r = _psd_sqrt(real.cov, eig_floor)
    inner = sqrt_r @ gen.cov @ sqrt_r
    cross = _psd_sqrt(inner, eig_floor)
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov)
                  - 2.0 * np.trace(cross))
    return value


def fgd(real_embeddings: np.ndarray, gen_embeddings: np.ndarray,
        eig_floor: float = 1e-10) -> float:
    """Frechet distance between Gaussian fits of two embedded gesture sets."""
    return fgd_from_moments(GaussianMoments.fit(real_embeddings, eig_floor),
                            GaussianMoments.fit(gen_embeddings, eig_floor),
                            eig_floor)


@torch.no_grad()
def embed_motion(tokenizer: MotionTokenizer, parts: dict[str, np.ndarray],
                 audio: np.ndarray, text: np.ndarray,
                 intensity: np.ndarray | None = None) -> np.ndarray:
    """Clip embedding: time-mean of the four concatenated part latents
    (quantized content plus style sum) from the tokenizer encoder."""
    t = audio.shape[0]
    batch = {p: torch.from_numpy(np.ascontiguousarray(parts[p], dtype=np.float32))[None]
             for p in PART_NAMES}
    batch["audio"] = torch.from_numpy(audio.astype(np.float32))[None]
    batch["text"] = torch.from_numpy(text.astype(np.float32))[None]
    if intensity is None:
        intensity = np.zeros(t, dtype=np.float32)
    batch["intensity"] = torch.from_numpy(intensity.astype(np.float32))[None]
    out = tokenizer.forward_batch(batch, mode="infer")
    feats = []
    for part in PART_NAMES:
        rec = out["parts"][part]
        z = rec["content_q"]
        if part != "face":
            z = z + rec["z_s_value"]
        feats.append(z[0].mean(dim=0))
    return torch.cat(feats).numpy().astype(np.float64)


def embed_sequence(tokenizer: MotionTokenizer, seq: MotionSequence) -> np.ndarray:
    return embed_motion(tokenizer, seq.parts, seq.audio_features,
                        seq.text_features, seq.intensity)


# --- diversity ---------------------------------------------------------------------

def diversity(clips: list[np.ndarray], n_samples: int, seed: int) -> float:
    """Average pairwise L1 distance over n sampled clips."""
    if len(clips) < 2:
        raise MetricError("diversity needs >= 2 clips")
    rng = np.random.default_rng(seed)
    n = min(n_samples, len(clips))
    picks = rng.choice(len(clips), size=n, replace=False)
    flat = [clips[i].astype(np.float64).ravel() for i in picks]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += np.abs(flat[i] - flat[j]).sum()
    return float(total / (n * (n - 1)))


# --- beat constancy ------------------------------------------------------------------

def motion_beat_frames(upper: np.ndarray, smooth: int = 5) -> np.ndarray:
    """Gesture beats: local minima of amplitude-normalized upper-body speed,
    smoothed with a moving average before the minimum search."""
    speed = np.linalg.norm(np.diff(upper.astype(np.float64), axis=0), axis=1)
    scale = speed.mean()
    if scale > 0:
        speed = speed / scale
    if smooth > 1 and speed.shape[0] >= smooth:
        kernel = np.ones(smooth) / smooth
        half = smooth // 2
        padded = np.pad(speed, (half, smooth - 1 - half), mode="edge")
        speed = np.convolve(padded, kernel, mode="valid")
    mins = []
    for i in range(1, speed.shape[0] - 1):
        if speed[i] <= speed[i - 1] and speed[i] < speed[i + 1]:
            mins.append(i + 1)  # +1: speed[i] spans frames i..i+1
    return np.asarray(mins, dtype=np.int64)


def beat_constancy(motion_beats: np.ndarray, audio_beats: np.ndarray,
                   sigma: float) -> tuple[float, bool]:
    """BC = mean over gesture beats of exp(-d^2 / (2 sigma^2)) against the
    nearest audio beat. Returns (value, detected) where detected=False flags
    an empty gesture-beat set (value 0.0)."""
    if sigma <= 0:
        raise MetricError("sigma must be positive")
    if motion_beats.size == 0:
        return 0.0, False
    if audio_beats.size == 0:
        raise MetricError("no audio beats supplied")
    d = np.abs(motion_beats[:, None].astype(np.float64)
               - audio_beats[None, :].astype(np.float64)).min(axis=1)
    return float(np.exp(-(d ** 2) / (2.0 * sigma ** 2)).mean()), True


def nbc(rec_upper: np.ndarray, gt_upper: np.ndarray, audio_beats: np.ndarray,
        sigma: float, smooth: int = 5) -> float:
    """Normalized BC: reconstruction BC divided by ground-truth BC."""
    bc_rec, ok_rec = beat_constancy(motion_beat_frames(rec_upper, smooth),
                                    audio_beats, sigma)
    bc_gt, ok_gt = beat_constancy(motion_beat_frames(gt_upper, smooth),
                                  audio_beats, sigma)
    if not (ok_rec and ok_gt) or bc_gt == 0.0:
        raise MetricError("beat sets empty; NBC undefined")
    return bc_rec / bc_gt


# --- probes ----------------------------------------------------------------------------

@torch.no_grad()
def pooled_latents(tokenizer: MotionTokenizer, corpus: Corpus,
                   window: int = 128, stride: int = 32
                   ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], np.ndarray]:
    """Per-clip time-pooled content and style latents per body part.

    Clips are training-length windows, matching what the contrastive loss
    sees; window > sequence length falls back to whole sequences.
    """
    content: dict[str, list] = {p: [] for p in BODY_PARTS}
    style: dict[str, list] = {p: [] for p in BODY_PARTS}
    speakers = []
    groups = []
    for seq_id, seq in enumerate(corpus):
        batch = {p: torch.from_numpy(seq.parts[p][None]) for p in PART_NAMES}
        batch["audio"] = torch.from_numpy(seq.audio_features[None])
        batch["text"] = torch.from_numpy(seq.text_features[None])
        batch["intensity"] = torch.from_numpy(seq.intensity[None])
        out = tokenizer.forward_batch(batch, mode="infer")
        starts = range(0, max(seq.frames - window, 0) + 1, stride) \
            if seq.frames >= window else [0]
        w_lat = min(window, seq.frames) // 4
        for start in starts:
            lo = start // 4
            for p in BODY_PARTS:
                rec = out["parts"][p]
                content[p].append(
                    rec["content_q"][0, lo:lo + w_lat].mean(dim=0).numpy())
                style[p].append(
                    rec["z_s_value"][0, lo:lo + w_lat].mean(dim=0).numpy())
            speakers.append(seq.speaker_id)
            groups.append(seq_id)
    return ({p: np.stack(v) for p, v in content.items()},
            {p: np.stack(v) for p, v in style.items()},
            np.asarray(speakers, dtype=np.int64),
            np.asarray(groups, dtype=np.int64))


def speaker_probe(latents: np.ndarray, speaker_ids: np.ndarray,
                  split_seed: int = 0,
                  groups: np.ndarray | None = None) -> float:
    """Held-out accuracy of a linear classifier on frozen latents.

    With `groups` (source-sequence ids) the 80/20 split is stratified by
    speaker at the group level, so sibling windows of one sequence never
    straddle the split.
    """
    if groups is None:
        x_tr, x_te, y_tr, y_te = train_test_split(
            latents, speaker_ids, test_size=0.2, random_state=split_seed,
            stratify=speaker_ids)
    else:
        rng = np.random.default_rng(split_seed)
        test_groups = []
        for spk in np.unique(speaker_ids):
            spk_groups = np.unique(groups[speaker_ids == spk])
            n_test = max(1, int(round(0.2 * spk_groups.size)))
            test_groups.extend(rng.permutation(spk_groups)[:n_test].tolist())
        test_mask = np.isin(groups, np.asarray(test_groups))
        x_tr, y_tr = latents[~test_mask], speaker_ids[~test_mask]
        x_te, y_te = latents[test_mask], speaker_ids[test_mask]
    if len(np.unique(y_tr)) < len(np.unique(speaker_ids)):
        raise MetricError("a speaker class is missing from the train split")
    clf = LogisticRegression(max_iter=3000, random_state=0)
    clf.fit(x_tr, y_tr)
    return float(clf.score(x_te, y_te))


@dataclass
class ProbeReport:
    content_acc: dict[str, float]
    style_acc: dict[str, float]
    chance: float

    def to_dict(self) -> dict:
        return {"content_to_speaker": self.content_acc,
                "style_to_speaker": self.style_acc,
                "chance": self.chance}


def disentanglement_probes(tokenizer: MotionTokenizer, corpus: Corpus,
                           split_seed: int = 0) -> ProbeReport:
    content, style, speakers, groups = pooled_latents(tokenizer, corpus)
    content_acc = {p: speaker_probe(content[p], speakers, split_seed, groups)
                   for p in BODY_PARTS}
    style_acc = {p: speaker_probe(style[p], speakers, split_seed, groups)
                 for p in BODY_PARTS}
    content_acc["all"] = speaker_probe(
        np.concatenate([content[p] for p in BODY_PARTS], axis=1),
        speakers, split_seed, groups)
    style_acc["all"] = speaker_probe(
        np.concatenate([style[p] for p in BODY_PARTS], axis=1),
        speakers, split_seed, groups)
    return ProbeReport(content_acc, style_acc,
                       chance=1.0 / corpus.config.speakers)


# --- style transition ---------------------------------------------------------------------

@torch.no_grad()
def style_transition_embedding(tokenizer: MotionTokenizer,
                               prompt_a: MotionSequence,
                               prompt_b: MotionSequence) -> np.ndarray:
    """Combine A's content tokens with B's style tokens, decode, re-embed."""
    tok_a = tokenize(tokenizer, prompt_a)
    tok_b = tokenize(tokenizer, prompt_b)
    if tok_a.frames_latent != tok_b.frames_latent:
        t = min(tok_a.frames_latent, tok_b.frames_latent)
    else:
        t = tok_a.frames_latent
    combined = tok_a.__class__(
        frames_latent=t,
        speaker_id=prompt_b.speaker_id,
        content={p: tok_a.content[p][:t] for p in BODY_PARTS},
        style={p: tok_b.style[p][:, :t] for p in BODY_PARTS},
        face=tok_a.face[:t])
    audio = prompt_a.audio_features[:4 * t]
    parts = detokenize(tokenizer, combined, audio)
    return embed_motion(tokenizer, parts, audio,
                        prompt_a.text_features[:4 * t],
                        prompt_a.intensity[:4 * t])


def style_transition_eval(tokenizer: MotionTokenizer,
                          prompts_a: list[MotionSequence],
                          prompts_b: list[MotionSequence],
                          pool_b: list[MotionSequence],
                          eig_floor: float = 1e-10) -> float:
    """FGD of A-content/B-style decodes against speaker-B's reference pool."""
    if not pool_b:
        raise MetricError("empty reference pool")
    transfers = np.stack([
        style_transition_embedding(tokenizer, a, b)
        for a, b in zip(prompts_a, prompts_b)])
    pool = np.stack([embed_sequence(tokenizer, seq) for seq in pool_b])
    return fgd(pool, transfers, eig_floor)
