"""Command-line entry points: synth, train, generate, evaluate, ablate, probe.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure. Every
command is deterministic given (config, seed); wall-clock timings live only
in run_record.json so primary artifacts are byte-identical across re-runs.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (BODY_PARTS, PART_NAMES, VARIANT_FIELDS, ConfigError,
                     ExperimentConfig, load_config)
from .formats import FormatError, read_matrix, write_matrix
from .generator import (RemaskWeights, load_bundle, load_cmts, load_srts,
                        encode_style_reference, save_cmts, save_srts,
                        train_cmt, train_srt, build_token_dataset)
from .inference import decode_long, plan_windows
from .metrics_eval import (MetricsReport, diversity, disentanglement_probes,
                           embed_motion, embed_sequence, fgd, jrmse, mse_lvd,
                           nbc, wjrmse)
from .motion_data import (Corpus, CorpusError, audio_beat_frames, corpus_digest,
                          load_corpus, save_corpus, synth_generate)
from .nn_core import make_generator
from .tokenizer import (TrainingDiverged, load_tokenizer, save_tokenizer,
                        train_tokenizer)

SCHEMA_VERSION = 1
REMASK_AB_GRID = [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5), (0.6, 0.4), (0.4, 0.6)]
REMASK_R_GRID = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


class UsageError(Exception):
    pass


@dataclass
class RunRecord:
    config_hash: str
    version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    def emit(self, out_dir: Path) -> None:
        for name in self.files:
            if not (out_dir / name).exists():
                raise RuntimeError(f"recorded file missing: {name}")
        with open(out_dir / "run_record.json", "w", encoding="utf-8") as fh:
            json.dump({"config_hash": self.config_hash, "version": self.version,
                       "timings": self.timings, "files": self.files},
                      fh, indent=1, sort_keys=True)


def write_report(report: MetricsReport, out_dir: Path, kind: str,
                 extra: dict | None = None) -> list[str]:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **report.to_dict()}
    if extra:
        doc["extra"] = extra
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std"])
        for name in sorted(report.values):
            writer.writerow([name, repr(report.values[name]),
                             repr(report.stds.get(name, ""))])
    return ["report.json", "report.csv"]


def write_loss_csv(log: list[dict], path: Path) -> None:
    if not log:
        return
    keys = sorted(log[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in log:
            writer.writerow([row.get(k, "") for k in keys])


def emit_loss_plot(log: list[dict], path: Path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    key = "total" if log and "total" in log[0] else "loss"
    ax.plot([row["iteration"] for row in log], [row[key] for row in log])
    ax.set_xlabel("iteration")
    ax.set_ylabel(key)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_metrics_plot(report: MetricsReport, path: Path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    names = sorted(report.values)
    fig, ax = plt.subplots(figsize=(max(6, len(names)), 4))
    ax.bar(names, [report.values[n] for n in names])
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=60)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --- generated-motion directory format --------------------------------------------

def motion_columns(config: ExperimentConfig) -> int:
    return sum(config.corpus.part_dims[p] for p in PART_NAMES)


def split_motion(matrix: np.ndarray, config: ExperimentConfig
                 ) -> dict[str, np.ndarray]:
    parts = {}
    off = 0
    for p in PART_NAMES:
        d = config.corpus.part_dims[p]
        parts[p] = matrix[:, off:off + d]
        off += d
    return parts


def load_generated_dir(path: Path, config: ExperimentConfig) -> list[dict]:
    records = []
    for bin_path in sorted(path.glob("motion_*.bin")):
        matrix = read_matrix(bin_path, expect_cols=motion_columns(config))
        sidecar_path = bin_path.with_suffix(".json")
        sidecar = {}
        if sidecar_path.exists():
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        records.append({"parts": split_motion(matrix, config),
                        "source_id": sidecar.get("source_id"),
                        "sidecar": sidecar})
    if not records:
        raise UsageError(f"no motion_*.bin files under {path}")
    return records


# --- commands ------------------------------------------------------------------------

def cmd_synth(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    corpus = synth_generate(config.corpus, config.seed)
    save_corpus(corpus, out)
    reloaded = load_corpus(out)
    digest = corpus_digest(reloaded)
    record.timings["synth"] = time.perf_counter() - t0
    record.files = ["manifest.json"]
    record.emit(out)
    print(f"synth: {len(corpus)} sequences, digest {digest}")
    return 0


def cmd_train(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.variant:
        config = config.with_variant(args.variant)
    corpus = load_corpus(args.corpus)
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    if args.stage == "tokenizer":
        result = train_tokenizer(corpus, config)
        stage_dir = out / "tokenizer"
        save_tokenizer(result.tokenizer, config, stage_dir)
        write_loss_csv(result.log, stage_dir / "loss_log.csv")
        if args.emit_plots:
            emit_loss_plot(result.log, stage_dir / "loss_curve.png",
                           "tokenizer loss")
        last = result.log[-1]["total"]
        print(f"tokenizer: {len(result.log)} iterations, final loss {last:.4f}")
    elif args.stage in ("cmt", "srt"):
        tok_dir = out / "tokenizer"
        if not (tok_dir / "checkpoint.json").exists():
            raise RuntimeError(f"missing tokenizer checkpoint under {tok_dir}")
        tokenizer, _ = load_tokenizer(tok_dir)
        dataset = build_token_dataset(tokenizer, corpus,
                                      config.tokenizer.window,
                                      config.tokenizer.stride,
                                      config.cmt.qbar_mode)
        stage_dir = out / args.stage
        if args.stage == "cmt":
            semantic = not config.ablation.a5_no_sam
            cmts, logs = {}, []
            for i, part in enumerate(PART_NAMES):
                vocab = (tokenizer.face_book.size if part == "face"
                         else tokenizer.content_books[part].size)
                cmts[part], log = train_cmt(
                    dataset, part, vocab, corpus.config.audio_dim,
                    corpus.config.speakers, config.cmt,
                    seed=config.seed + 1000 + i, semantic=semantic)
                logs.append((part, log))
            save_cmts(cmts, config, dataset.latent_len,
                      corpus.config.speakers, stage_dir)
        else:
            srts, logs = {}, []
            for i, part in enumerate(BODY_PARTS):
                srts[part], log = train_srt(
                    dataset, part, tokenizer.content_books[part].size,
                    config.tokenizer.style_entries,
                    config.tokenizer.style_layers, config.srt,
                    seed=config.seed + 2000 + i)
                logs.append((part, log))
            save_srts(srts, config, dataset.latent_len,
                      {p: tokenizer.content_books[p].size for p in BODY_PARTS},
                      stage_dir)
        for part, log in logs:
            write_loss_csv(log, stage_dir / f"loss_log_{part}.csv")
            if args.emit_plots:
                emit_loss_plot(log, stage_dir / f"loss_curve_{part}.png",
                               f"{args.stage} {part} loss")
        print(f"{args.stage}: trained {len(logs)} part models")
    else:
        raise UsageError(f"unknown stage {args.stage!r}")
    record.timings[f"train_{args.stage}"] = time.perf_counter() - t0
    record.emit(out)
    return 0


def _require_checkpoints(root: Path, stages: list[str]) -> None:
    for stage in stages:
        if not (root / stage / "checkpoint.json").exists():
            raise RuntimeError(f"missing {stage} checkpoint under {root / stage}")


def cmd_generate(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoints)
    _require_checkpoints(ckpt, ["tokenizer", "cmt", "srt"])
    tokenizer, tok_config = load_tokenizer(ckpt / "tokenizer")
    bundle = load_bundle(ckpt / "cmt", ckpt / "srt")
    corpus = load_corpus(args.corpus)
    if not 0 <= args.seq_id < len(corpus):
        raise UsageError(f"--seq-id {args.seq_id} outside corpus")
    if not 0 <= args.style_ref < len(corpus):
        raise UsageError(f"--style-ref {args.style_ref} outside corpus")
    seq = corpus.sequences[args.seq_id]
    ref = corpus.sequences[args.style_ref]
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    gen = make_generator(config.seed + 31)
    style_refs = {part: encode_style_reference(tokenizer, bundle.srts[part],
                                               ref, part, generator=gen)
                  for part in BODY_PARTS}
    result = decode_long(tokenizer, bundle, seq.audio_features,
                         seq.text_features, speaker=ref.speaker_id,
                         style_refs=style_refs, config=config,
                         seed=config.seed)
    motion = np.concatenate([result.parts[p] for p in PART_NAMES], axis=1)
    stem = f"motion_{args.seq_id:05d}"
    write_matrix(out / f"{stem}.bin", motion)
    sidecar = {
        "source_id": args.seq_id,
        "style_ref": args.style_ref,
        "speaker": ref.speaker_id,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "plan": {"total_frames": result.plan.total_frames,
                 "window": result.plan.window, "stride": result.plan.stride,
                 "starts": result.plan.starts, "count": result.plan.count},
        "prefix_checks": result.prefix_checks,
        "window_tokens": [json.loads(t.to_json()) for t in result.window_tokens],
    }
    with open(out / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    record.timings["generate"] = time.perf_counter() - t0
    record.files = [f"{stem}.bin", f"{stem}.json"]
    record.emit(out)
    print(f"generate: {result.plan.count} windows -> {stem}.bin")
    return 0


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoints)
    _require_checkpoints(ckpt, ["tokenizer"])
    tokenizer, _ = load_tokenizer(ckpt / "tokenizer")
    reference = load_corpus(args.reference)
    gen_path = Path(args.generated)
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    if (gen_path / "manifest.json").exists():
        gen_corpus = load_corpus(gen_path)
        generated = [{"parts": seq.parts, "source_id": i}
                     for i, seq in enumerate(gen_corpus)]
    else:
        generated = load_generated_dir(gen_path, config)
    if not generated or not len(reference):
        raise UsageError("need >= 1 generated and >= 1 reference sequence")

    pairs = []
    for i, rec in enumerate(generated):
        src = rec["source_id"] if rec["source_id"] is not None else i
        if 0 <= src < len(reference):
            pairs.append((rec, reference.sequences[src]))

    report = MetricsReport(runs=config.metrics.runs,
                           seeds=[config.seed + i for i in range(config.metrics.runs)],
                           config_hash=config.config_hash())
    per_part: dict[str, list[float]] = {p: [] for p in PART_NAMES}
    mses, lvds, nbcs, wj = [], [], [], []
    for rec, ref_seq in pairs:
        vals = {}
        for p in PART_NAMES:
            if rec["parts"][p].shape != ref_seq.parts[p].shape:
                continue
            vals[p] = jrmse(rec["parts"][p], ref_seq.parts[p])
            per_part[p].append(vals[p])
        if len(vals) == len(PART_NAMES):
            wj.append(wjrmse(vals, config.corpus.part_dims))
            gen_all = np.concatenate([rec["parts"][p] for p in PART_NAMES], axis=1)
            ref_all = np.concatenate([ref_seq.parts[p] for p in PART_NAMES], axis=1)
            m, v = mse_lvd(gen_all, ref_all)
            mses.append(m)
            lvds.append(v)
            beats = audio_beat_frames(ref_seq)
            if beats.size:
                try:
                    nbcs.append(nbc(rec["parts"]["upper"], ref_seq.parts["upper"],
                                    beats, config.metrics.sigma_bc,
                                    config.metrics.beat_smooth))
                except Exception:
                    pass
    for p in PART_NAMES:
        if per_part[p]:
            report.record(f"jrmse_{p}", per_part[p])
    if wj:
        report.record("wjrmse", wj)
        report.record("mse", mses)
        report.record("lvd", lvds)
    if nbcs:
        report.record("nbc", nbcs)

    ref_emb = np.stack([embed_sequence(tokenizer, s) for s in reference])
    gen_embs = []
    for rec in generated:
        src = rec["source_id"] if rec["source_id"] is not None else 0
        src = src if 0 <= src < len(reference) else 0
        ref_seq = reference.sequences[src]
        t = rec["parts"]["upper"].shape[0]
        gen_embs.append(embed_motion(tokenizer, rec["parts"],
                                     ref_seq.audio_features[:t],
                                     ref_seq.text_features[:t],
                                     ref_seq.intensity[:t]))
    fgd_value = fgd(ref_emb, np.stack(gen_embs), config.metrics.eig_floor)
    report.record("fgd", [fgd_value] * config.metrics.runs)
    clips = [np.concatenate([rec["parts"][p] for p in PART_NAMES], axis=1)
             for rec in generated]
    if len(clips) >= 2:
        report.record("diversity", [
            diversity(clips, config.metrics.diversity_samples, seed)
            for seed in report.seeds])
    files = write_report(report, out, kind="evaluate")
    if args.emit_plots:
        emit_metrics_plot(report, out / "metrics.png", "evaluation")
        files.append("metrics.png")
    record.timings["evaluate"] = time.perf_counter() - t0
    record.files = files
    record.emit(out)
    print("evaluate:", json.dumps(report.values, sort_keys=True))
    return 0


def cmd_probe(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoints)
    _require_checkpoints(ckpt, ["tokenizer"])
    tokenizer, _ = load_tokenizer(ckpt / "tokenizer")
    corpus = load_corpus(args.corpus)
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    probe = disentanglement_probes(tokenizer, corpus, split_seed=config.seed)
    report = MetricsReport(runs=1, seeds=[config.seed],
                           config_hash=config.config_hash())
    for part, acc in probe.content_acc.items():
        report.record(f"content_to_speaker_{part}", [acc])
    for part, acc in probe.style_acc.items():
        report.record(f"style_to_speaker_{part}", [acc])
    report.record("chance", [probe.chance])
    files = write_report(report, out, kind="probe",
                         extra={"speakers": corpus.config.speakers})
    if args.emit_plots:
        from sklearn.decomposition import PCA
        from .metrics_eval import pooled_latents
        _, style, speakers, _groups = pooled_latents(tokenizer, corpus)
        stacked = np.concatenate([style[p] for p in BODY_PARTS], axis=1)
        coords = PCA(n_components=2, random_state=0).fit_transform(stacked)
        with open(out / "style_embedding_2d.csv", "w", encoding="utf-8",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "speaker"])
            for row, spk in zip(coords, speakers):
                writer.writerow([repr(float(row[0])), repr(float(row[1])),
                                 int(spk)])
        files.append("style_embedding_2d.csv")
    record.timings["probe"] = time.perf_counter() - t0
    record.files = files
    record.emit(out)
    print("probe:", json.dumps(report.values, sort_keys=True))
    return 0


def _reconstruction_metrics(tokenizer, corpus, config, seeds) -> dict[str, float]:
    """FGD / NBC / Diversity of tokenizer reconstructions vs the corpus."""
    from .tokenizer import detokenize, tokenize
    ref_emb, gen_emb, clips, nbcs = [], [], [], []
    for seq in corpus.sequences:
        toks = tokenize(tokenizer, seq)
        parts = detokenize(tokenizer, toks, seq.audio_features)
        ref_emb.append(embed_sequence(tokenizer, seq))
        gen_emb.append(embed_motion(tokenizer, parts, seq.audio_features,
                                    seq.text_features, seq.intensity))
        clips.append(np.concatenate([parts[p] for p in PART_NAMES], axis=1))
        beats = audio_beat_frames(seq)
        try:
            nbcs.append(nbc(parts["upper"], seq.parts["upper"], beats,
                            config.metrics.sigma_bc, config.metrics.beat_smooth))
        except Exception:
            pass
    out = {"fgd": fgd(np.stack(ref_emb), np.stack(gen_emb),
                      config.metrics.eig_floor)}
    if nbcs:
        out["nbc"] = float(np.mean(nbcs))
    divs = [diversity(clips, config.metrics.diversity_samples, s) for s in seeds]
    out["diversity"] = float(np.mean(divs))
    return out


def cmd_ablate(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config_hash=config.config_hash())
    t0 = time.perf_counter()
    if args.sweep_remask:
        rows = _remask_sweep(args, config)
        table_name = "remask_sweep.json"
    else:
        variants = args.variant_list or []
        for v in variants:
            if v not in VARIANT_FIELDS:
                raise UsageError(f"unknown variant {v!r}")
        corpus = load_corpus(args.corpus)
        seeds = [config.seed + i for i in range(config.metrics.runs)]
        rows = []
        for name in ["full"] + variants:
            cfg_v = config if name == "full" else config.with_variant(name)
            result = train_tokenizer(corpus, cfg_v)
            metrics = _reconstruction_metrics(result.tokenizer, corpus,
                                              cfg_v, seeds)
            rows.append({"variant": name, **metrics})
        table_name = "ablation_table.json"
    with open(out / table_name, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    csv_name = table_name.replace(".json", ".csv")
    with open(out / csv_name, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted({k for row in rows for k in row})
        writer.writerow(keys)
        for row in rows:
            writer.writerow([row.get(k, "") for k in keys])
    record.timings["ablate"] = time.perf_counter() - t0
    record.files = [table_name, csv_name]
    record.emit(out)
    print(f"ablate: {len(rows)} rows -> {table_name}")
    return 0


def _remask_sweep(args, config: ExperimentConfig) -> list[dict]:
    """Appendix-style decode-time sweep over (alpha, beta) and r grids."""
    ckpt = Path(args.checkpoints)
    _require_checkpoints(ckpt, ["tokenizer", "cmt", "srt"])
    tokenizer, _ = load_tokenizer(ckpt / "tokenizer")
    bundle = load_bundle(ckpt / "cmt", ckpt / "srt")
    corpus = load_corpus(args.corpus)
    n_eval = min(8, len(corpus))
    gen = make_generator(config.seed + 31)
    style_refs = {part: encode_style_reference(
        tokenizer, bundle.srts[part], corpus.sequences[0], part, generator=gen)
        for part in BODY_PARTS}
    ref_emb = np.stack([embed_sequence(tokenizer, s) for s in corpus])
    rows = []
    settings = ([("alpha_beta", a, b, config.cmt.rand_scale)
                 for a, b in REMASK_AB_GRID]
                + [("rand_scale", config.cmt.alpha, config.cmt.beta, r)
                   for r in REMASK_R_GRID])
    for grid, alpha, beta, r in settings:
        embs, clips, lvds = [], [], []
        for i in range(n_eval):
            seq = corpus.sequences[i]
            sweep_cfg = _override_remask(config, alpha, beta, r)
            result = decode_long(tokenizer, bundle, seq.audio_features,
                                 seq.text_features, speaker=seq.speaker_id,
                                 style_refs=style_refs, config=sweep_cfg,
                                 seed=config.seed + i)
            motion = np.concatenate([result.parts[p] for p in PART_NAMES], axis=1)
            ref_all = np.concatenate([seq.parts[p] for p in PART_NAMES], axis=1)
            clips.append(motion)
            _, lvd = mse_lvd(motion, ref_all)
            lvds.append(lvd)
            embs.append(embed_motion(tokenizer, result.parts,
                                     seq.audio_features, seq.text_features,
                                     seq.intensity))
        row = {
            "grid": grid, "alpha": alpha, "beta": beta, "rand_scale": r,
            "fgd": fgd(ref_emb, np.stack(embs), config.metrics.eig_floor),
            "diversity": diversity(clips, config.metrics.diversity_samples,
                                   config.seed),
            "lvd": float(np.mean(lvds)),
        }
        rows.append(row)
    return rows


def _override_remask(config: ExperimentConfig, alpha: float, beta: float,
                     r: float) -> ExperimentConfig:
    from .config import from_dict
    doc = config.to_dict()
    doc["cmt"]["alpha"] = alpha
    doc["cmt"]["beta"] = beta
    doc["cmt"]["rand_scale"] = r
    return from_dict(doc)


# --- argument parsing ----------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> Parser:
    parser = Parser(prog="gesttoken",
                    description="Two-stage co-speech gesture pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--profile", choices=["desk", "full"], default=None)
        p.add_argument("--emit-plots", action="store_true")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p)
    p.add_argument("--stage", required=True, choices=["tokenizer", "cmt", "srt"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", default=None, help="ablation switch A1..A7")

    p = sub.add_parser("generate", help="long-sequence generation")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--seq-id", type=int, required=True)
    p.add_argument("--style-ref", type=int, required=True)

    p = sub.add_parser("evaluate", help="metric suite over generated motion")
    common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--checkpoints", required=True)

    p = sub.add_parser("ablate", help="train/evaluate ablation variants")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", dest="variant_list", action="append",
                   help="repeatable: A1..A7")
    p.add_argument("--sweep-remask", action="store_true")
    p.add_argument("--checkpoints", default=None,
                   help="required with --sweep-remask")

    p = sub.add_parser("probe", help="speaker probes on frozen latents")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints", required=True)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, profile=args.profile, seed=args.seed)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, CorpusError, FormatError, TrainingDiverged,
            OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
