"""Command-line entry points: simulate, train, adapt, infer, score, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence during training.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import trainer as trainer_mod
from .autograd import Tape, backward
from .config import RunConfig, effective_document, load_config, resolve_config, write_effective_config
from .encoders import ModelConfig, count_activations
from .errors import ConfigError, DataError, DivergenceError
from .features import FeatureConfig, ModelInput, read_wav
from .infer import diarize, write_posteriors
from .model import forward_posteriors, init_model, named_parameters
from .pit import pit_loss
from .scoring import DerBreakdown, der, read_rttm, write_rttm
from .simulate import SessionSpec, simulate_session, write_session
from .trainer import Adam, TrainConfig, load_checkpoint, resume_payload, save_checkpoint, train


def _require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f"'{command}' needs a seed (config key 'seed' or --seed)")
    return cfg.seed


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else resolve_config({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.simulate.session.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    seed = _require_seed(cfg, "simulate")
    if args.n_sessions is not None:
        cfg.simulate.n_sessions = args.n_sessions
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(seed)
    session_seeds = root.integers(0, 2**62, size=cfg.simulate.n_sessions)
    session_ids = []
    overlaps = []
    for i, session_seed in enumerate(session_seeds):
        spec = replace(cfg.simulate.session, seed=int(session_seed))
        session = simulate_session(spec)
        session_id = f"sess{i:04d}"
        write_session(session, out / session_id, session_id)
        session_ids.append(session_id)
        overlaps.append(session.ground_truth.overlap_ratio())
    manifest = {
        "sessions": session_ids,
        "n_channels": cfg.simulate.session.n_channels,
        "mean_overlap_ratio": float(np.mean(overlaps)),
        "seed": seed,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_effective_config(cfg, out)
    print(f"simulated {len(session_ids)} sessions into {out} (mean overlap {np.mean(overlaps):.1%})")
    return 0


# ---------------------------------------------------------------------------
# train / adapt
# ---------------------------------------------------------------------------


def _run_training(args, mode: str) -> int:
    cfg = _load_run_config(args)
    seed = _require_seed(cfg, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(cfg.train, mode=mode)
    if mode == "adapt" and args.init is None:
        raise ConfigError("adapt needs a pretrained checkpoint (--init)")

    root = np.random.default_rng(seed)
    model_seed, train_seed = (int(s) for s in root.integers(0, 2**62, size=2))
    optimizer = Adam()
    resume = None
    if mode == "adapt":
        model, meta, _ = load_checkpoint(args.init)
        if model.config.variant != cfg.model.variant:
            raise ConfigError(
                f"checkpoint variant {model.config.variant!r} != config variant {cfg.model.variant!r}"
            )
    elif args.resume:
        model, meta, optim_tensors = load_checkpoint(args.resume)
        if model.config.variant != cfg.model.variant:
            raise ConfigError(
                f"checkpoint variant {model.config.variant!r} != config variant {cfg.model.variant!r}"
            )
        resume = resume_payload(meta, optim_tensors, optimizer)
    else:
        model = init_model(cfg.model, np.random.default_rng(model_seed))

    dataset = trainer_mod.load_dataset(args.data, cfg.features, cfg.model.n_speakers)
    rng = np.random.default_rng(train_seed)
    records = train(
        model,
        dataset,
        train_cfg,
        rng,
        checkpoint_dir=out / "checkpoints",
        log_path=out / "train_log.jsonl",
        resume=resume,
        optimizer=optimizer,
    )
    save_checkpoint(out / "model.ckpt", model, optimizer)
    write_effective_config(cfg, out)
    if records:
        print(f"{mode}: {len(records)} steps, first loss {records[0]['loss']:.4f}, last loss {records[-1]['loss']:.4f}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "pretrain")


def cmd_adapt(args) -> int:
    return _run_training(args, "adapt")


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    session_dir = Path(args.session)
    wav_paths = sorted(session_dir.glob("ch*.wav"))
    if not wav_paths:
        raise DataError(f"{session_dir}: no channel WAV files")
    n_channels = args.channels if args.channels is not None else len(wav_paths)
    if n_channels > len(wav_paths):
        raise DataError(f"{session_dir}: requested {n_channels} channels, found {len(wav_paths)}")
    channels = [read_wav(p) for p in wav_paths[:n_channels]]
    session_id = session_dir.name
    posteriors, segments = diarize(
        model, channels, cfg.features, session_id,
        threshold=cfg.scoring.threshold, median_window=cfg.scoring.median_window,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rttm(segments, out / f"{session_id}.rttm")
    write_posteriors(out / f"{session_id}.post", posteriors)
    write_effective_config(cfg, out)
    print(f"inferred {session_id} with {n_channels} channel(s): {len(segments)} segments")
    return 0


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _session_ids_for_scoring(ref_dir: Path) -> list[str]:
    manifest = ref_dir / "manifest.json"
    if manifest.exists():
        with open(manifest) as f:
            return json.load(f)["sessions"]
    return sorted(p.name for p in ref_dir.iterdir() if (p / "ref.rttm").exists())


def cmd_score(args) -> int:
    cfg = _load_run_config(args)
    collar = args.collar if args.collar is not None else cfg.scoring.collar
    ref_dir, hyp_dir = Path(args.ref), Path(args.hyp)
    session_ids = _session_ids_for_scoring(ref_dir)
    if not session_ids:
        raise DataError(f"{ref_dir}: no reference sessions")
    missing = [sid for sid in session_ids if not (hyp_dir / f"{sid}.rttm").exists()]
    if missing:
        raise DataError(f"missing hypothesis RTTM for session(s): {', '.join(missing)}")
    per_session = {}
    total = DerBreakdown(0.0, 0.0, 0.0, 0.0)
    for sid in session_ids:
        ref = read_rttm(ref_dir / sid / "ref.rttm")
        hyp = read_rttm(hyp_dir / f"{sid}.rttm")
        result = der(ref, hyp, collar)
        per_session[sid] = result
        total = total + result
    report = {
        "collar": collar,
        "sessions": {
            sid: {
                "der": r.der,
                "missed": r.missed,
                "false_alarm": r.false_alarm,
                "confusion": r.confusion,
                "scored_speech": r.scored_speech,
            }
            for sid, r in per_session.items()
        },
        "aggregate": {
            "der": total.der,
            "missed": total.missed,
            "false_alarm": total.false_alarm,
            "confusion": total.confusion,
            "scored_speech": total.scored_speech,
        },
    }
    header = f"{'session':<12} {'DER':>7} {'miss':>8} {'f.a.':>8} {'conf':>8} {'ref(s)':>8}"
    print(header)
    for sid, r in per_session.items():
        print(f"{sid:<12} {r.der:>6.2%} {r.missed:>8.2f} {r.false_alarm:>8.2f} {r.confusion:>8.2f} {r.scored_speech:>8.2f}")
    print(f"{'TOTAL':<12} {total.der:>6.2%} {total.missed:>8.2f} {total.false_alarm:>8.2f} {total.confusion:>8.2f} {total.scored_speech:>8.2f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_model_config(base: ModelConfig, variant: str) -> ModelConfig:
    return replace(base, variant=variant)


def _bench_one(model_cfg: ModelConfig, n_frames: int, n_channels: int, rng) -> dict:
    model = init_model(model_cfg, rng)
    if model_cfg.variant == "transformer":
        inputs = ModelInput("transformer", single=rng.normal(size=(model_cfg.n_features, n_frames)))
    elif model_cfg.variant == "spatio_temporal":
        inputs = ModelInput(
            "spatio_temporal",
            channels=[rng.normal(size=(model_cfg.n_features, n_frames)) for _ in range(n_channels)],
        )
    else:
        inputs = ModelInput(
            "co_attention",
            single=rng.normal(size=(model_cfg.n_features, n_frames)),
            multi=[rng.normal(size=(model_cfg.n_multi_features, n_frames)) for _ in range(n_channels)],
        )
    labels = (rng.uniform(size=(model_cfg.n_speakers, n_frames)) > 0.5).astype(float)
    tracemalloc.start()
    started = time.perf_counter()
    from . import eda as eda_mod
    from .encoders import encode_session

    with Tape() as tape:
        embeddings = encode_session(inputs, model_cfg, model.encoder)
        encoder_floats = tape.recorded_output_floats()
        attractors = eda_mod.compute_attractors(embeddings, model.eda, model_cfg.n_speakers)
        posteriors = eda_mod.compute_posteriors(attractors, embeddings)
        loss, _ = pit_loss(posteriors, labels)
        backward(loss)
    wall = time.perf_counter() - started
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    report = count_activations(model_cfg, n_frames, n_channels)
    itemsize = np.dtype(model_cfg.np_dtype).itemsize
    return {
        "variant": model_cfg.variant,
        "n_channels": n_channels,
        "n_frames": n_frames,
        "analytic_floats": report.total_floats,
        "analytic_step_bytes": 2 * report.total_floats * itemsize,  # activations + gradient flow
        "per_channel_state_floats": report.per_channel_state_floats,
        "encoder_tape_floats": encoder_floats,
        "tape_floats": tape.recorded_output_floats(),
        "tape_bytes": tape.recorded_output_bytes(),
        "measured_peak_bytes": peak,
        "wall_seconds": wall,
    }


BENCH_COLUMNS = [
    "variant", "n_channels", "n_frames", "analytic_floats", "analytic_step_bytes",
    "per_channel_state_floats", "encoder_tape_floats", "tape_floats", "tape_bytes",
    "measured_peak_bytes", "wall_seconds",
]


def run_bench(model_cfg: ModelConfig, n_frames: int, channel_counts: list[int], seed: int = 0) -> list[dict]:
    rows = []
    for variant in ("transformer", "spatio_temporal", "co_attention"):
        cfg = _bench_model_config(model_cfg, variant)
        for n_channels in channel_counts:
            rng = np.random.default_rng(seed)
            rows.append(_bench_one(cfg, n_frames, n_channels, rng))
    return rows


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    channel_counts = [int(c) for c in args.channels.split(",")]
    rows = run_bench(cfg.model, args.frames, channel_counts, seed=cfg.seed or 0)
    lines = [",".join(BENCH_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in BENCH_COLUMNS))
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mceend", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("simulate", help="synthesize a dataset of conversations")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-sessions", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="pretrain a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a pretrained model (fixed lr, optional freezing)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="diarize one session directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help="directory with ch*.wav files")
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=int, default=None, help="use the first N channels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="DER against reference RTTMs")
    common(p)
    p.add_argument("--ref", required=True, help="dataset directory (sess*/ref.rttm)")
    p.add_argument("--hyp", required=True, help="directory of <session>.rttm hypotheses")
    p.add_argument("--collar", type=float, default=None)
    p.add_argument("--out", help="write a JSON report here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="activation counts and measured allocations")
    common(p)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--channels", default="1,2,4")
    p.add_argument("--out", help="write a CSV here")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
