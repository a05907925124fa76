"""Training loop: Adam with a warmup schedule, channel-subset sampling,
channel dropout, and freeze-based single-channel adaptation."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, backward
from .checkpoint import load_container, save_container
from .encoders import ModelConfig
from .errors import ConfigError, DataError, DivergenceError
from .features import FeatureBank, FeatureConfig, feature_bank, model_input_from_bank, read_wav
from .model import DiarizationModel, freeze_set, init_model, named_parameters, zero_grads
from .pit import pit_loss
from .model import forward_posteriors
from .scoring import read_rttm


@dataclass
class TrainConfig:
    chunk_frames: int = 500
    batch_size: int = 1
    epochs: int = 1
    max_steps: int | None = None
    warmup_steps: int = 100000
    noam_scale: float = 1.0
    channel_subset: int = 4
    channel_dropout: float = 0.1
    mode: str = "pretrain"
    adapt_lr: float = 1e-5
    freeze_policy: str = "none"
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.channel_dropout <= 1.0:
            raise ConfigError("channel dropout must be in [0, 1]")
        if self.channel_subset < 1:
            raise ConfigError("channel subset size must be at least 1")
        if self.mode not in ("pretrain", "adapt"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Warmup-then-decay learning rate: scale * d^-0.5 * min(s^-0.5, s*w^-1.5)."""
    if step < 1:
        raise ValueError("schedule steps start at 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam on the flat parameter map; frozen names are skipped."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float, frozen: frozenset = frozenset()) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            if name in frozen:
                continue
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ag.ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"optim.v.{name}"] = arr
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for name, arr in tensors.items():
            if name.startswith("optim.m."):
                self.m[name[len("optim.m.") :]] = arr.copy()
            elif name.startswith("optim.v."):
                self.v[name[len("optim.v.") :]] = arr.copy()


def clip_gradients(params: dict[str, Tensor], max_norm: float, frozen: frozenset = frozenset()) -> float:
    """Scale all trainable gradients so their global norm is at most max_norm."""
    total = 0.0
    grads = []
    for name, p in params.items():
        if name in frozen or p.grad is None:
            continue
        grads.append(p.grad)
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def sample_training_channels(
    available: int, subset: int, dropout: float, rng: np.random.Generator
) -> list[int]:
    """Pick a channel subset; with probability ``dropout`` collapse it to one."""
    if subset > available:
        raise ValueError(f"cannot pick {subset} of {available} channels")
    chosen = sorted(int(i) for i in rng.choice(available, size=subset, replace=False))
    if dropout > 0 and rng.random() < dropout:
        chosen = [int(rng.choice(chosen))]
    return chosen


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------


@dataclass
class SessionData:
    session_id: str
    bank: FeatureBank
    labels: np.ndarray  # (n_speakers, n_frames) binary


def load_session(session_dir, fcfg: FeatureConfig, n_speakers: int) -> SessionData:
    session_dir = Path(session_dir)
    wav_paths = sorted(session_dir.glob("ch*.wav"))
    if not wav_paths:
        raise DataError(f"{session_dir}: no channel WAV files")
    bank = feature_bank([read_wav(p) for p in wav_paths], fcfg)
    segments = read_rttm(session_dir / "ref.rttm")
    speakers = sorted({s.speaker for s in segments})
    if len(speakers) > n_speakers:
        raise DataError(f"{session_dir}: {len(speakers)} speakers exceed the configured {n_speakers}")
    labels = np.zeros((n_speakers, bank.n_frames))
    centers = (np.arange(bank.n_frames) + 0.5) * 0.1
    for seg in segments:
        row = speakers.index(seg.speaker)
        labels[row, (centers >= seg.onset) & (centers < seg.offset)] = 1.0
    return SessionData(session_id=session_dir.name, bank=bank, labels=labels)


def load_dataset(data_dir, fcfg: FeatureConfig, n_speakers: int) -> list[SessionData]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
        session_ids = manifest["sessions"]
    else:
        session_ids = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
    if not session_ids:
        raise DataError(f"{data_dir}: empty dataset")
    return [load_session(data_dir / sid, fcfg, n_speakers) for sid in session_ids]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: DiarizationModel, optimizer: Adam | None = None, extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in named_parameters(model).items()}
    meta = {"model_config": asdict(model.config)}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        meta["optimizer_step"] = optimizer.step_count
    if extra:
        meta.update(extra)
    save_container(path, tensors, meta)


def load_checkpoint(path) -> tuple[DiarizationModel, dict, dict]:
    """Rebuild a model from a container; returns (model, meta, optimizer tensors)."""
    tensors, meta = load_container(path)
    cfg = ModelConfig(**meta["model_config"])
    model = init_model(cfg, np.random.default_rng(0))
    params = named_parameters(model)
    optim_tensors = {}
    seen = set()
    for name, arr in tensors.items():
        if name.startswith("optim."):
            optim_tensors[name] = arr
            continue
        if name not in params:
            raise DataError(f"{path}: unknown parameter {name!r}")
        if tuple(arr.shape) != params[name].shape:
            raise DataError(f"{path}: shape mismatch for {name!r}")
        params[name].data = arr.astype(cfg.np_dtype)
        params[name].grad = np.zeros_like(params[name].data)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise DataError(f"{path}: missing parameters {sorted(missing)[:3]}...")
    return model, meta, optim_tensors


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0


def _chunks(dataset: list[SessionData], chunk_frames: int) -> list[tuple[int, int]]:
    chunks = []
    for i, session in enumerate(dataset):
        for t0 in range(0, session.bank.n_frames - chunk_frames + 1, chunk_frames):
            chunks.append((i, t0))
    return chunks


def train(
    model: DiarizationModel,
    dataset: list[SessionData],
    cfg: TrainConfig,
    rng: np.random.Generator,
    checkpoint_dir=None,
    log_path=None,
    resume: dict | None = None,
    optimizer: Adam | None = None,
) -> list[dict]:
    """Optimize the model; returns one log record per step.

    ``resume`` carries {"state": TrainState, "rng_state": ...} from a saved
    checkpoint so a restarted run continues exactly where it stopped.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    chunks = _chunks(dataset, cfg.chunk_frames)
    if not chunks:
        raise DataError(f"no {cfg.chunk_frames}-frame chunks; sessions are too short")
    params = named_parameters(model)
    frozen = frozenset(freeze_set(model, cfg.freeze_policy))
    optimizer = optimizer or Adam()
    state = TrainState()
    if resume:
        state = resume["state"]
        rng.bit_generator.state = resume["rng_state"]
    records = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(state.epoch, cfg.epochs):
            order = rng.permutation(len(chunks))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                batch = [chunks[i] for i in order[start : start + cfg.batch_size]]
                zero_grads(model)
                with Tape():
                    losses = []
                    for session_idx, t0 in batch:
                        session = dataset[session_idx]
                        n_avail = session.bank.n_channels
                        idxs = sample_training_channels(
                            n_avail, min(cfg.channel_subset, n_avail), cfg.channel_dropout, rng
                        )
                        inputs = model_input_from_bank(session.bank, idxs, model.config.variant)
                        inputs = _slice_inputs(inputs, t0, t0 + cfg.chunk_frames)
                        labels = session.labels[:, t0 : t0 + cfg.chunk_frames]
                        posteriors = forward_posteriors(model, inputs, shuffle=True, rng=rng)
                        loss, _ = pit_loss(posteriors, labels)
                        losses.append(loss)
                    total = losses[0] if len(losses) == 1 else ag.scale(
                        _sum_tensors(losses), 1.0 / len(losses)
                    )
                loss_value = total.item()
                if not np.isfinite(loss_value):
                    raise DivergenceError(f"non-finite loss at step {state.step}")
                backward(total)
                clip_gradients(params, cfg.grad_clip, frozen)
                state.step += 1
                if cfg.mode == "pretrain":
                    lr = noam_lr(state.step, model.config.embed_dim, cfg.warmup_steps, cfg.noam_scale)
                else:
                    lr = cfg.adapt_lr
                optimizer.step(params, lr, frozen)
                record = {"epoch": epoch, "step": state.step, "lr": lr, "loss": loss_value}
                records.append(record)
                epoch_losses.append(loss_value)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
            state.epoch = epoch + 1
            if checkpoint_dir is not None:
                _write_epoch_checkpoint(checkpoint_dir, model, optimizer, state, rng)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    return records


def _sum_tensors(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ag.add(total, t)
    return total


def _slice_inputs(inputs, start, stop):
    from .features import ModelInput

    def cut(arr):
        return arr[:, start:stop]

    return ModelInput(
        variant=inputs.variant,
        single=cut(inputs.single) if inputs.single is not None else None,
        channels=[cut(c) for c in inputs.channels] if inputs.channels is not None else None,
        multi=[cut(c) for c in inputs.multi] if inputs.multi is not None else None,
    )


def _write_epoch_checkpoint(checkpoint_dir, model, optimizer, state, rng) -> None:
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    extra = {
        "train_state": {"epoch": state.epoch, "step": state.step},
        "rng_state": rng.bit_generator.state,
    }
    save_checkpoint(checkpoint_dir / f"epoch{state.epoch:04d}.ckpt", model, optimizer, extra)
    save_checkpoint(checkpoint_dir / "latest.ckpt", model, optimizer, extra)


def resume_payload(meta: dict, optim_tensors: dict, optimizer: Adam) -> dict:
    """Turn checkpoint metadata back into the ``resume`` argument of train()."""
    optimizer.load_state(optim_tensors, meta.get("optimizer_step", 0))
    ts = meta["train_state"]
    return {
        "state": TrainState(epoch=ts["epoch"], step=ts["step"]),
        "rng_state": meta["rng_state"],
    }
