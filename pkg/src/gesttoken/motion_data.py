"""Motion data model, deterministic synthetic corpus, and disk round-trip.

A corpus is a set of rotation-feature sequences built from a shared bank of
per-category motion primitives (content) deformed by per-speaker smooth
style transforms (amplitude / frequency / offset signatures). Audio features
are a noisy linear image of the active primitive plus a beat-impulse track,
so speech-motion correlation and beat alignment exist by construction.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CATEGORY_NAMES, CorpusConfig, PART_NAMES
from .formats import FORMAT_VERSION, FormatError, read_matrix, write_matrix

CORPUS_VERSION = "1"
DOWNSAMPLE = 4

CAT_NOGESTURE = 0
CAT_BEAT = 1
CAT_DEICTIC = 2


class CorpusError(Exception):
    """Base class for corpus validation/serialization failures."""


class ShapeMismatch(CorpusError):
    pass


class VersionMismatch(CorpusError):
    pass


@dataclass
class MotionSequence:
    """One multi-part rotation-feature clip with its supervision channels."""

    frames: int
    parts: dict[str, np.ndarray]          # part -> [T, D_p] float32
    speaker_id: int
    intensity: np.ndarray                 # [T] float32 in [0, 1]
    semantic_labels: np.ndarray           # [T, K] uint8 multi-hot
    phoneme_labels: np.ndarray            # [T/4] int64
    audio_features: np.ndarray            # [T, D_a] float32
    text_features: np.ndarray             # [T, D_a] float32

    def validate(self) -> None:
        if self.frames % DOWNSAMPLE:
            raise CorpusError(f"T={self.frames} not divisible by {DOWNSAMPLE}")
        for name, mat in self.parts.items():
            if mat.shape[0] != self.frames:
                raise ShapeMismatch(f"part {name}: {mat.shape[0]} rows != T")
            if mat.shape[1] % 9:
                raise CorpusError(f"part {name}: D_p={mat.shape[1]} not divisible by 9")
            blocks = mat.reshape(self.frames, -1, 3, 3)
            gram = np.einsum("tbij,tbkj->tbik", blocks, blocks)
            eye = np.eye(3, dtype=blocks.dtype)
            err = np.linalg.norm(gram - eye, axis=(-2, -1)).max()
            if err >= 1e-4:
                raise CorpusError(f"part {name}: orthonormality error {err:.2e}")
            if np.linalg.det(blocks).min() <= 0:
                raise CorpusError(f"part {name}: non-positive determinant block")
        if self.intensity.shape != (self.frames,):
            raise ShapeMismatch("intensity length != T")
        if self.intensity.min() < 0 or self.intensity.max() > 1:
            raise CorpusError("intensity outside [0, 1]")
        if self.semantic_labels.shape[0] != self.frames:
            raise ShapeMismatch("semantic_labels length != T")
        if not (self.semantic_labels.sum(axis=1) >= 1).all():
            raise CorpusError("frame with no active semantic category")
        if self.phoneme_labels.shape != (self.frames // DOWNSAMPLE,):
            raise ShapeMismatch("phoneme_labels length != T/4")
        if self.audio_features.shape[0] != self.frames:
            raise ShapeMismatch("audio_features length != T")
        if self.text_features.shape != self.audio_features.shape:
            raise ShapeMismatch("text_features shape != audio_features shape")

    def equal(self, other: "MotionSequence") -> bool:
        if self.frames != other.frames or self.speaker_id != other.speaker_id:
            return False
        if set(self.parts) != set(other.parts):
            return False
        return (all(np.array_equal(self.parts[p], other.parts[p]) for p in self.parts)
                and np.array_equal(self.intensity, other.intensity)
                and np.array_equal(self.semantic_labels, other.semantic_labels)
                and np.array_equal(self.phoneme_labels, other.phoneme_labels)
                and np.array_equal(self.audio_features, other.audio_features)
                and np.array_equal(self.text_features, other.text_features))


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    sequences: list[MotionSequence]

    def __iter__(self):
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass
class CorpusManifest:
    version: str
    speakers: int
    seed: int
    feature_dims: dict
    index: list[dict] = field(default_factory=list)


@dataclass
class WindowSpec:
    window: int
    stride: int
    entries: list[tuple[int, int]]        # (sequence id, start frame)
    window_exceeds_sequence: bool = False


def audio_beat_frames(seq: MotionSequence) -> np.ndarray:
    """Ground-truth beat frame indices recovered from the impulse track."""
    return np.flatnonzero(seq.audio_features[:, 0] > 0.5)


# --- rotation helpers -------------------------------------------------------

def rotation_from_axis_angle(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues map: unit axis [3] and angles [...,] -> rotations [..., 3, 3]."""
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(angles)[..., None, None]
    c = np.cos(angles)[..., None, None]
    eye = np.eye(3)
    return eye + s * k + (1.0 - c) * (k @ k)


def rotation_to_rotvec(blocks: np.ndarray) -> np.ndarray:
    """Inverse map for valid rotations: [..., 3, 3] -> axis*angle [..., 3]."""
    trace = np.clip(np.trace(blocks, axis1=-2, axis2=-1), -1.0, 3.0)
    angle = np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0))
    skew = np.stack([
        blocks[..., 2, 1] - blocks[..., 1, 2],
        blocks[..., 0, 2] - blocks[..., 2, 0],
        blocks[..., 1, 0] - blocks[..., 0, 1],
    ], axis=-1)
    denom = 2.0 * np.sin(angle)
    scale = np.where(angle > 1e-6, angle / np.where(denom == 0, 1.0, denom), 0.5)
    return skew * scale[..., None]


def orthonormality_error(part: np.ndarray) -> float:
    blocks = part.reshape(part.shape[0], -1, 3, 3)
    gram = np.einsum("tbij,tbkj->tbik", blocks, blocks)
    return float(np.linalg.norm(gram - np.eye(3), axis=(-2, -1)).max())


# --- planted world ----------------------------------------------------------

@dataclass
class _World:
    """Shared corpus-level assets derived from the master seed."""

    axes: dict[str, np.ndarray]           # part -> [blocks, 3] unit axes
    amp: np.ndarray                       # [n_prim, total_blocks]
    freq: np.ndarray                      # [n_prim, total_blocks] (Hz)
    phase: np.ndarray                     # [n_prim, total_blocks]
    audio_proj: np.ndarray                # [n_prim, D_a - 1]
    text_proj: np.ndarray                 # [n_prim, D_a - 1]
    spk_amp: np.ndarray                   # [S]
    spk_freq: np.ndarray                  # [S]
    spk_offset: np.ndarray                # [S, total_blocks]


def _build_world(cfg: CorpusConfig, seed: int) -> _World:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    blocks_per_part = {p: cfg.part_dims[p] // 9 for p in PART_NAMES}
    total_blocks = sum(blocks_per_part.values())
    axes = {}
    for part in PART_NAMES:
        raw = rng.normal(size=(blocks_per_part[part], 3))
        axes[part] = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    n_prim = cfg.categories * cfg.primitives_per_category
    amp = rng.uniform(0.35, 0.8, size=(n_prim, total_blocks))
    freq = rng.uniform(0.4, 1.4, size=(n_prim, total_blocks))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_prim, total_blocks))
    beat_hz = cfg.fps / cfg.beat_period
    for k in range(cfg.categories):
        sl = slice(k * cfg.primitives_per_category, (k + 1) * cfg.primitives_per_category)
        if k == CAT_NOGESTURE:
            amp[sl] *= 0.18
            freq[sl] *= 0.4
        elif k == CAT_BEAT:
            # beat gestures oscillate on the audio beat grid, cosine phase so
            # velocity minima land on beat frames
            freq[sl] = beat_hz
            phase[sl] = np.pi / 2

    audio_proj = rng.normal(scale=1.0, size=(n_prim, cfg.audio_dim - 1))
    text_proj = rng.normal(scale=1.0, size=(n_prim, cfg.audio_dim - 1))

    s = cfg.speakers
    order = rng.permutation(s)
    # narrow amplitude and frequency spreads: wide dynamic spreads leak
    # speaker identity into content-token usage (conv latents are
    # velocity-sensitive); the offset signature carries the style instead
    spk_amp = 0.95 + 0.1 * np.arange(s) / max(s - 1, 1)
    spk_freq = (1.0 + 0.2 * np.arange(s) / max(s - 1, 1))[order]
    # offset signatures: farthest-point picks from a random pool keep the
    # speakers well separated while staying small against the content grid
    candidates = rng.normal(size=(16 * s, total_blocks))
    candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)
    picked = [0]
    while len(picked) < s:
        dists = np.min(
            [np.linalg.norm(candidates - candidates[p], axis=1) for p in picked],
            axis=0)
        picked.append(int(dists.argmax()))
    spk_offset = 0.10 * np.sqrt(total_blocks) * candidates[picked]
    return _World(axes, amp, freq, phase, audio_proj, text_proj,
                  spk_amp, spk_freq, spk_offset)


def _generate_sequence(cfg: CorpusConfig, world: _World, seq_id: int,
                       seed: int) -> MotionSequence:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, seq_id]))
    t_total = cfg.frames
    speaker = seq_id % cfg.speakers
    n_prim_cat = cfg.primitives_per_category

    # segment plan: (start, length, category, primitive, intensity)
    segments = []
    cursor = 0
    while cursor < t_total:
        length = int(rng.integers(cfg.segment_min // 4, cfg.segment_max // 4 + 1)) * 4
        length = min(length, t_total - cursor)
        category = int(rng.integers(0, cfg.categories))
        prim = category * n_prim_cat + int(rng.integers(0, n_prim_cat))
        if category == CAT_NOGESTURE:
            eta = float(rng.uniform(0.0, 0.25))
        else:
            eta = float(rng.uniform(0.3, 1.0))
        segments.append((cursor, length, category, prim, eta))
        cursor += length

    frames = np.arange(t_total)
    prim_of_frame = np.zeros(t_total, dtype=np.int64)
    cat_of_frame = np.zeros(t_total, dtype=np.int64)
    intensity = np.zeros(t_total, dtype=np.float64)
    total_blocks = world.amp.shape[1]
    angles = np.zeros((t_total, total_blocks), dtype=np.float64)

    # per-sequence jitter: genuine within-speaker variation, small against
    # the planted between-speaker gaps
    a_s = world.spk_amp[speaker] * (1.0 + rng.uniform(-0.03, 0.03))
    f_s = world.spk_freq[speaker] * (1.0 + rng.uniform(-0.04, 0.04))
    o_s = world.spk_offset[speaker] + rng.normal(scale=0.015, size=total_blocks)

    for start, length, category, prim, eta in segments:
        t_local = (frames[start:start + length] - start) / cfg.fps
        phase = world.phase[prim]
        # per-segment delivery noise: within-speaker variation that content
        # tokenization must average over (beat keeps its grid lock)
        amp_seg = a_s * (1.0 + rng.uniform(-0.1, 0.1))
        if category != CAT_BEAT:
            phase = phase + rng.uniform(0.0, 2 * np.pi)
            freq_seg = f_s * (1.0 + rng.uniform(-0.1, 0.1))
        else:
            freq_seg = 1.0  # beat grid frequency is absolute
        osc = np.sin(2 * np.pi * freq_seg * world.freq[prim][None, :]
                     * t_local[:, None] + phase[None, :])
        seg_angles = o_s[None, :] + eta * amp_seg * world.amp[prim][None, :] * osc
        angles[start:start + length] = seg_angles
        prim_of_frame[start:start + length] = prim
        cat_of_frame[start:start + length] = category
        intensity[start:start + length] = eta

    # per-frame measurement noise, small against the style offsets
    angles += rng.normal(scale=0.02, size=angles.shape)
    # 3-tap smoothing bounds the angle velocity across segment boundaries
    padded = np.pad(angles, ((1, 1), (0, 0)), mode="edge")
    angles = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0

    parts: dict[str, np.ndarray] = {}
    offset = 0
    for part in PART_NAMES:
        nb = cfg.part_dims[part] // 9
        mats = np.empty((t_total, nb, 3, 3), dtype=np.float64)
        for b in range(nb):
            mats[:, b] = rotation_from_axis_angle(world.axes[part][b],
                                                  angles[:, offset + b])
        parts[part] = mats.reshape(t_total, nb * 9).astype(np.float32)
        offset += nb

    # supervision channels
    semantic = np.zeros((t_total, cfg.categories), dtype=np.uint8)
    semantic[frames, cat_of_frame] = 1
    beat_mask = (frames % cfg.beat_period) == 0
    co_label = beat_mask & (intensity > 0.5) & (cat_of_frame != CAT_BEAT)
    semantic[co_label, CAT_BEAT] = 1

    latent_frames = prim_of_frame.reshape(-1, DOWNSAMPLE)
    # center-frame primitive id at the latent rate
    phonemes = latent_frames[:, DOWNSAMPLE // 2] % cfg.phonemes

    audio = np.zeros((t_total, cfg.audio_dim), dtype=np.float64)
    audio[beat_mask, 0] = 1.0
    audio[:, 1:] = (intensity[:, None] * world.audio_proj[prim_of_frame]
                    + rng.normal(scale=cfg.audio_noise, size=(t_total, cfg.audio_dim - 1)))
    text = np.zeros_like(audio)
    text[:, 1:] = (world.text_proj[prim_of_frame]
                   + rng.normal(scale=cfg.text_noise, size=(t_total, cfg.audio_dim - 1)))

    seq = MotionSequence(
        frames=t_total,
        parts=parts,
        speaker_id=speaker,
        intensity=intensity.astype(np.float32),
        semantic_labels=semantic,
        phoneme_labels=phonemes.astype(np.int64),
        audio_features=audio.astype(np.float32),
        text_features=text.astype(np.float32),
    )
    seq.validate()
    return seq


def synth_generate(cfg: CorpusConfig, seed: int) -> Corpus:
    """Generate the full synthetic corpus; pure function of (cfg, seed)."""
    cfg.validate()
    world = _build_world(cfg, seed)
    sequences = [_generate_sequence(cfg, world, i, seed)
                 for i in range(cfg.sequences)]
    return Corpus(config=cfg, seed=seed, sequences=sequences)


# --- style signatures (raw-feature speaker oracle) --------------------------

def style_signature(seq: MotionSequence) -> np.ndarray:
    """Per-sequence signature: per-block rotvec mean, std, and speed."""
    feats = []
    for part in PART_NAMES:
        mat = seq.parts[part]
        blocks = mat.reshape(seq.frames, -1, 3, 3)
        rotvec = rotation_to_rotvec(blocks)          # [T, nb, 3]
        speed = np.abs(np.diff(rotvec, axis=0)).mean(axis=0)
        feats.append(rotvec.mean(axis=0).ravel())
        feats.append(rotvec.std(axis=0).ravel())
        feats.append(speed.ravel())
    return np.concatenate(feats)


def nearest_centroid_speaker_accuracy(corpus: Corpus, train_frac: float = 0.5) -> float:
    """Centroid classifier on style signatures; the planted-style oracle."""
    sigs = np.stack([style_signature(s) for s in corpus])
    labels = np.array([s.speaker_id for s in corpus])
    n = len(corpus)
    idx = np.arange(n)
    # alternate whole speaker cycles so every speaker lands in both splits
    cycle = corpus.config.speakers
    train = (idx // cycle) % 2 == 0
    if train_frac != 0.5:
        train = idx < int(train_frac * n)
    centroids = {}
    for spk in np.unique(labels[train]):
        centroids[spk] = sigs[train & (labels == spk)].mean(axis=0)
    keys = sorted(centroids)
    cent = np.stack([centroids[k] for k in keys])
    test = ~train
    dists = np.linalg.norm(sigs[test][:, None, :] - cent[None, :, :], axis=2)
    pred = np.array(keys)[dists.argmin(axis=1)]
    return float((pred == labels[test]).mean())


# --- windowing ---------------------------------------------------------------

def slice_windows(seq_frames: int, window: int, stride: int,
                  seq_id: int = 0) -> WindowSpec:
    """Training windows: starts {0, stride, ...} with start + W <= T."""
    if stride < 1:
        raise CorpusError("stride must be >= 1")
    if window > seq_frames:
        return WindowSpec(window, stride, [], window_exceeds_sequence=True)
    count = (seq_frames - window) // stride + 1
    entries = [(seq_id, k * stride) for k in range(count)]
    return WindowSpec(window, stride, entries)


def corpus_windows(corpus: Corpus, window: int, stride: int) -> WindowSpec:
    entries: list[tuple[int, int]] = []
    flag = False
    for i, seq in enumerate(corpus):
        spec = slice_windows(seq.frames, window, stride, seq_id=i)
        entries.extend(spec.entries)
        flag = flag or spec.window_exceeds_sequence
    return WindowSpec(window, stride, entries, window_exceeds_sequence=flag)


# --- serialization -----------------------------------------------------------

def _flatten(seq: MotionSequence) -> np.ndarray:
    cols = [seq.parts[p] for p in PART_NAMES]
    cols.append(seq.intensity[:, None])
    cols.append(seq.semantic_labels.astype(np.float32))
    phon = np.repeat(seq.phoneme_labels.astype(np.float32), DOWNSAMPLE)[:, None]
    cols.append(phon)
    cols.append(seq.audio_features)
    cols.append(seq.text_features)
    return np.concatenate(cols, axis=1).astype(np.float32)


def _unflatten(mat: np.ndarray, cfg: CorpusConfig, speaker: int) -> MotionSequence:
    t = mat.shape[0]
    parts = {}
    off = 0
    for p in PART_NAMES:
        d = cfg.part_dims[p]
        parts[p] = mat[:, off:off + d].copy()
        off += d
    intensity = mat[:, off].copy()
    off += 1
    semantic = mat[:, off:off + cfg.categories].astype(np.uint8)
    off += cfg.categories
    phon = mat[:, off].reshape(-1, DOWNSAMPLE)[:, 0].astype(np.int64)
    off += 1
    audio = mat[:, off:off + cfg.audio_dim].copy()
    off += cfg.audio_dim
    text = mat[:, off:off + cfg.audio_dim].copy()
    return MotionSequence(t, parts, speaker, intensity, semantic, phon, audio, text)


def total_columns(cfg: CorpusConfig) -> int:
    return (sum(cfg.part_dims[p] for p in PART_NAMES)
            + 1 + cfg.categories + 1 + 2 * cfg.audio_dim)


def save_corpus(corpus: Corpus, path: str | Path) -> CorpusManifest:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    manifest = CorpusManifest(
        version=CORPUS_VERSION,
        speakers=cfg.speakers,
        seed=corpus.seed,
        feature_dims={
            "part_dims": dict(cfg.part_dims),
            "categories": cfg.categories,
            "phonemes": cfg.phonemes,
            "audio_dim": cfg.audio_dim,
            "columns": total_columns(cfg),
        },
    )
    for i, seq in enumerate(corpus):
        name = f"seq_{i:05d}.bin"
        flat = _flatten(seq)
        write_matrix(root / name, flat)
        manifest.index.append({
            "id": i,
            "frames": seq.frames,
            "speaker": seq.speaker_id,
            "file": name,
            "bytes": 16 + flat.size * 4,
        })
    doc = {
        "version": manifest.version,
        "format_version": FORMAT_VERSION,
        "speakers": manifest.speakers,
        "seed": manifest.seed,
        "feature_dims": manifest.feature_dims,
        "corpus_config": {
            "speakers": cfg.speakers, "sequences": cfg.sequences,
            "frames": cfg.frames, "categories": cfg.categories,
            "phonemes": cfg.phonemes,
            "primitives_per_category": cfg.primitives_per_category,
            "part_dims": dict(cfg.part_dims), "audio_dim": cfg.audio_dim,
            "beat_period": cfg.beat_period, "segment_min": cfg.segment_min,
            "segment_max": cfg.segment_max, "audio_noise": cfg.audio_noise,
            "text_noise": cfg.text_noise, "fps": cfg.fps,
        },
        "index": manifest.index,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return manifest


def load_corpus(path: str | Path) -> Corpus:
    root = Path(path)
    with open(root / "manifest.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CORPUS_VERSION:
        raise VersionMismatch(
            f"corpus version {doc.get('version')!r} != supported {CORPUS_VERSION!r}")
    cfg = CorpusConfig(**doc["corpus_config"])
    cols = total_columns(cfg)
    sequences = []
    for entry in doc["index"]:
        fpath = root / entry["file"]
        if not fpath.exists():
            raise ShapeMismatch(f"sequence {entry['id']}: file {entry['file']} missing")
        try:
            mat = read_matrix(fpath, expect_rows=entry["frames"], expect_cols=cols)
        except FormatError as exc:
            raise ShapeMismatch(f"sequence {entry['id']}: {exc}") from exc
        seq = _unflatten(mat, cfg, entry["speaker"])
        seq.validate()
        sequences.append(seq)
    return Corpus(config=cfg, seed=doc["seed"], sequences=sequences)


def corpus_digest(corpus: Corpus) -> str:
    """Stable content hash over serialized sequence bytes."""
    h = hashlib.sha256()
    cfg = corpus.config
    for seq in corpus:
        h.update(_flatten(seq).tobytes())
        h.update(np.int64(seq.speaker_id).tobytes())
    return h.hexdigest()
