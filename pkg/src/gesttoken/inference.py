"""Long-sequence generation: window planning, prefix-conditioned decoding,
shifted-Hann overlap-add assembly, and motion post-processing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import BODY_PARTS, PART_NAMES, ExperimentConfig
from .generator import (GeneratorBundle, RemaskWeights, StyleCondition,
                        iterative_decode, qbar_from_logits, srt_cascade_decode)
from .motion_data import DOWNSAMPLE
from .nn_core import make_generator
from .tokenizer import MotionTokenizer, TokenizedMotion, detokenize, pool4


class AssemblyError(RuntimeError):
    pass


@dataclass
class WindowPlan:
    total_frames: int
    window: int
    stride: int
    starts: list[int]
    padded: bool = False

    @property
    def overlap(self) -> int:
        return self.window - self.stride

    @property
    def count(self) -> int:
        return len(self.starts)


@dataclass
class AssemblyBuffer:
    """Envelope-weighted accumulation target for overlap-add."""

    frames: np.ndarray            # [T, D] float64 accumulator
    weights: np.ndarray           # [T] float64 accumulator

    @classmethod
    def empty(cls, total: int, dim: int) -> "AssemblyBuffer":
        return cls(np.zeros((total, dim)), np.zeros(total))

    def add(self, start: int, window: np.ndarray, envelope: np.ndarray) -> None:
        w = window.shape[0]
        self.frames[start:start + w] += window * envelope[:, None]
        self.weights[start:start + w] += envelope

    def resolve(self) -> np.ndarray:
        if (self.weights <= 0).any():
            bad = int(np.flatnonzero(self.weights <= 0)[0])
            raise AssemblyError(f"frame {bad} not covered by any window")
        return self.frames / self.weights[:, None]


def plan_windows(total_frames: int, window: int, stride: int) -> WindowPlan:
    """K = ceil((T - W) / S) + 1 windows; the final window is right-aligned
    at T - W when the stride does not divide evenly. T < W yields a single
    padded window flagged on the plan."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if total_frames < window:
        return WindowPlan(total_frames, window, stride, [0], padded=True)
    span = total_frames - window
    count = math.ceil(span / stride) + 1
    starts = [k * stride for k in range(count)]
    if starts[-1] > span or (count > 1 and starts[-1] != span):
        starts[-1] = span
    return WindowPlan(total_frames, window, stride, starts)


def hann_envelope(window: int) -> np.ndarray:
    """Shifted Hann h(n) = 0.5 (1 - cos(2 pi (n+1) / (W+1))); strictly
    positive over n in [0, W), so OLA denominators never vanish."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = np.arange(window)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (n + 1) / (window + 1)))


def overlap_add(windows: list[np.ndarray], plan: WindowPlan) -> np.ndarray:
    """Assemble decoded windows into a [T, D] signal by normalized OLA."""
    if len(windows) != plan.count:
        raise AssemblyError(f"{len(windows)} windows != plan count {plan.count}")
    dim = windows[0].shape[1]
    envelope = hann_envelope(plan.window)
    total = max(plan.total_frames, plan.window)
    buf = AssemblyBuffer.empty(total, dim)
    for start, win in zip(plan.starts, windows):
        if win.shape != (plan.window, dim):
            raise AssemblyError(f"window shape {win.shape} != ({plan.window}, {dim})")
        buf.add(start, win.astype(np.float64), envelope)
    out = buf.resolve()
    return out[:plan.total_frames]


@dataclass
class LongDecodeResult:
    parts: dict[str, np.ndarray]
    plan: WindowPlan
    window_tokens: list[TokenizedMotion]
    prefix_checks: list[bool] = field(default_factory=list)


@torch.no_grad()
def decode_long(tokenizer: MotionTokenizer, bundle: GeneratorBundle,
                audio: np.ndarray, text: np.ndarray, speaker: int,
                style_refs: dict[str, StyleCondition],
                config: ExperimentConfig, seed: int) -> LongDecodeResult:
    """Window-by-window generation with an 8-token locked content prefix.

    Window 0 decodes all positions; window k > 0 fixes its first
    `lock_tokens` content tokens to the final tokens of window k-1 and never
    remasks them. Style tokens are decoded independently per window, then
    windows are detokenized and blended by Hann-weighted overlap-add.
    """
    torch.set_num_threads(1)
    icfg = config.inference
    window, stride = icfg.window, icfg.stride
    total = audio.shape[0]
    flagged_pad = total < window
    if flagged_pad:
        pad = window - total
        audio = np.concatenate([audio, np.repeat(audio[-1:], pad, axis=0)])
        text = np.concatenate([text, np.repeat(text[-1:], pad, axis=0)])
    plan = plan_windows(max(total, window), window, stride)
    plan.padded = plan.padded or flagged_pad
    plan = WindowPlan(total, window, stride, plan.starts, plan.padded)

    lock = icfg.lock_tokens
    weights = RemaskWeights(config.cmt.alpha, config.cmt.beta,
                            config.cmt.rand_scale)
    semantic = not config.ablation.a5_no_sam
    gen = make_generator(seed)
    t_lat = window // DOWNSAMPLE

    prev_tokens: dict[str, torch.Tensor] = {}
    window_feats: list[np.ndarray] = []
    window_tokens: list[TokenizedMotion] = []
    prefix_checks: list[bool] = []
    part_dims = [tokenizer.part_dims[p] for p in PART_NAMES]

    for k, start in enumerate(plan.starts):
        a = torch.from_numpy(audio[start:start + window].astype(np.float32))
        x = torch.from_numpy(text[start:start + window].astype(np.float32))
        logits = tokenizer.semantic_logits(a[None], x[None])[0]
        qbar = qbar_from_logits(logits, config.cmt.qbar_mode)
        audio_lat = pool4(a[None])[0]

        content: dict[str, torch.Tensor] = {}
        for part in PART_NAMES:
            locked = None
            if k > 0 and lock > 0:
                locked = prev_tokens[part][-lock:]
            content[part] = iterative_decode(
                bundle.cmts[part], audio_lat, speaker, qbar,
                config.cmt.decode_steps, config.cmt.cfg_scale, weights, gen,
                locked_prefix=locked, semantic=semantic)
            if locked is not None:
                prefix_checks.append(bool(torch.equal(content[part][:lock], locked)))
        style: dict[str, np.ndarray] = {}
        for part in BODY_PARTS:
            decoded = srt_cascade_decode(bundle.srts[part], content[part],
                                         style_refs[part],
                                         cfg_scale=config.srt.cfg_scale)
            style[part] = decoded.numpy().astype(np.int64)
        toks = TokenizedMotion(
            frames_latent=t_lat, speaker_id=speaker,
            content={p: content[p].numpy().astype(np.int64) for p in BODY_PARTS},
            style=style, face=content["face"].numpy().astype(np.int64))
        window_tokens.append(toks)
        parts = detokenize(tokenizer, toks, audio[start:start + window])
        window_feats.append(np.concatenate([parts[p] for p in PART_NAMES], axis=1))
        prev_tokens = content

    assembled = overlap_add(window_feats, plan)
    out: dict[str, np.ndarray] = {}
    off = 0
    for part, dim in zip(PART_NAMES, part_dims):
        out[part] = assembled[:, off:off + dim].astype(np.float32)
        off += dim
    return LongDecodeResult(parts=out, plan=plan, window_tokens=window_tokens,
                            prefix_checks=prefix_checks)


def moving_average(signal: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with reflected edges, per column."""
    if window < 1:
        raise ValueError("window must be >= 1")
    half = window // 2
    padded = np.pad(signal, ((half, window - 1 - half), (0, 0)), mode="reflect")
    kernel = np.ones(window) / window
    out = np.empty_like(signal, dtype=np.float64)
    for col in range(signal.shape[1]):
        out[:, col] = np.convolve(padded[:, col], kernel, mode="valid")
    return out


def postprocess(motion: np.ndarray, velocity_channels: int,
                highpass_window: int = 60) -> np.ndarray:
    """Integrate designated translation-velocity channels (cumulative sum)
    and high-pass the result by subtracting a centered moving average.
    Rotation channels pass through untouched."""
    out = motion.astype(np.float64).copy()
    if velocity_channels <= 0:
        return out.astype(np.float32)
    vel = out[:, :velocity_channels]
    pos = np.cumsum(vel, axis=0)
    filtered = pos - moving_average(pos, highpass_window)
    # reflect-edge MA leaves a small DC residue; a true high-pass removes it
    filtered -= filtered.mean(axis=0, keepdims=True)
    out[:, :velocity_channels] = filtered
    return out.astype(np.float32)
