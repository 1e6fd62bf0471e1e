"""Adam optimization, the epoch loop, checkpoints, and evaluation.

A batch is one full video: the temporal losses need the whole (downsampled)
sequence, so every optimizer step consumes one forward/backward pass over a
single video. Everything is deterministic given (seed, data, config); the
RNG state is checkpointed so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import (class_weights, downsample_indices, load_features, load_manifest,
                   parse_annotations)
from .errors import (ConfigError, CorruptionError, DataError, FormatError, ParameterError,
                     TrainingError)
from .model import ModelConfig, init_params, model_forward, total_loss
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"VTCK"
CHECKPOINT_VERSION = 1

CONFIG_KEYS = {
    "learning_rate": float,
    "weight_decay": float,
    "epochs": int,
    "dropout": float,
    "seed": int,
    "lambda": float,
    "tau": float,
    "layers": int,
    "decoders": int,
    "hidden_dim": int,
    "phases": int,
    "balancing": str,
}


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    epochs: int = 150
    dropout: float = 0.3
    seed: int = 0
    smooth_weight: float = 0.15
    smooth_clamp: float = 4.0
    balancing: str = "class-weights"  # or "none"
    grad_clip: float = None  # global L2 norm cap, off by default
    downsample_limit: int = 15000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.balancing not in ("class-weights", "none"):
            raise ParameterError(f"unknown balancing mode {self.balancing!r}")


def parse_config(path):
    """Parse a ``key = value`` config file; unknown keys are errors.

    Returns (TrainConfig, dict of ModelConfig overrides).
    """
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (p.strip() for p in line.partition("="))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None

    tc = TrainConfig(
        learning_rate=values.get("learning_rate", 5e-4),
        weight_decay=values.get("weight_decay", 1e-5),
        epochs=values.get("epochs", 150),
        dropout=values.get("dropout", 0.3),
        seed=values.get("seed", 0),
        smooth_weight=values.get("lambda", 0.15),
        smooth_clamp=values.get("tau", 4.0),
        balancing=values.get("balancing", "class-weights"),
    )
    overrides = {}
    for src, dst in (("layers", "num_layers"), ("decoders", "num_decoders"),
                     ("hidden_dim", "hidden_dim"), ("phases", "num_phases")):
        if src in values:
            overrides[dst] = values[src]
    return tc, overrides


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)  # name -> first moment
    v: dict = field(default_factory=dict)  # name -> second moment
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, state: AdamState, learning_rate, weight_decay=0.0):
    """One Adam update with bias correction; coupled L2 weight decay."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _clip_gradients(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict                 # name -> float32 ndarray
    adam: AdamState = None       # optional optimizer state
    rng_state: dict = None       # numpy bit-generator state
    epoch: int = 0
    version: int = CHECKPOINT_VERSION


def _write_tensor(f, name, arr):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "adam_t": ckpt.adam.t if ckpt.adam is not None else None,
        "param_names": list(ckpt.params.keys()),
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in ckpt.params.items():
            _write_tensor(f, name, arr)
        if ckpt.adam is not None:
            for name, arr in ckpt.adam.m.items():
                _write_tensor(f, f"adam.m:{name}", arr)
            for name, arr in ckpt.adam.v.items():
                _write_tensor(f, f"adam.v:{name}", arr)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.blob):
            raise CorruptionError(f"{self.path}: checkpoint truncated", offset=len(self.blob))
        out = self.blob[self.pos: self.pos + count]
        self.pos += count
        return out

    @property
    def remaining(self):
        return len(self.blob) - self.pos


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(blob, path)
    r.take(4)
    (version,) = struct.unpack("<I", r.take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blen,) = struct.unpack("<I", r.take(4))
    meta = json.loads(r.take(blen).decode("utf-8"))

    tensors = {}
    while r.remaining:
        (nlen,) = struct.unpack("<I", r.take(4))
        name = r.take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", r.take(4))
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = r.take(count * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    params = {}
    adam_m, adam_v = {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam.m:"):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v:"):
            adam_v[name[7:]] = arr
        else:
            params[name] = arr
    missing = set(meta["param_names"]) - set(params)
    if missing:
        raise CorruptionError(f"{path}: missing parameter tensors {sorted(missing)}")

    adam = None
    if meta.get("adam_t") is not None:
        adam = AdamState(m=adam_m, v=adam_v, t=meta["adam_t"])
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        params=params,
        adam=adam,
        rng_state=meta.get("rng_state"),
        epoch=meta.get("epoch", 0),
        version=version,
    )


# ---------------------------------------------------------------------------
# data loading


@dataclass
class _Video:
    video_id: str
    features: np.ndarray  # downsampled n x d
    labels: np.ndarray
    weights: np.ndarray = None


def load_videos(entries, split, num_phases, downsample_limit=15000):
    videos = []
    for e in entries:
        if e.split != split:
            continue
        seq = load_features(e.feature_path)
        lab = parse_annotations(e.annotation_path, seq.n, num_phases)
        idx = downsample_indices(seq.n, downsample_limit)
        videos.append(_Video(video_id=seq.video_id,
                             features=seq.data[idx],
                             labels=lab.labels[idx]))
    videos.sort(key=lambda v: v.video_id)
    return videos


def _resolve_entries(manifest):
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return list(manifest)


# ---------------------------------------------------------------------------
# training


def train(manifest, model_config: ModelConfig, train_config: TrainConfig,
          resume: Checkpoint = None, log_path=None):
    """Run the epoch loop; returns (final Checkpoint, list of log lines)."""
    entries = _resolve_entries(manifest)
    videos = load_videos(entries, "train", model_config.num_phases,
                         train_config.downsample_limit)
    if not videos:
        raise DataError("manifest has no train entries")
    for v in videos:
        if v.features.shape[1] != model_config.input_dim:
            raise DataError(
                f"video {v.video_id}: feature dim {v.features.shape[1]} != "
                f"model input_dim {model_config.input_dim}"
            )
        if train_config.balancing == "class-weights":
            v.weights = class_weights(v.labels, model_config.num_phases)

    rng = np.random.default_rng(train_config.seed)
    if resume is not None:
        if resume.model_config.to_dict() != model_config.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        params = {k: Tensor(a.copy(), requires_grad=True) for k, a in resume.params.items()}
        adam = resume.adam if resume.adam is not None else AdamState()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        params = init_params(model_config, rng)
        adam = AdamState()
        start_epoch = 0

    log_lines = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch + 1, train_config.epochs + 1):
            order = rng.permutation(len(videos))
            losses, acc0, accf = [], [], []
            for vi in order:
                v = videos[vi]
                for p in params.values():
                    p.zero_grad()
                with Tape() as tape:
                    preds = model_forward(Tensor(v.features), params, model_config,
                                          training=True, rng=rng)
                    loss = total_loss(preds, v.labels, model_config, v.weights)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss {loss_val} at epoch {epoch}, video {v.video_id}"
                    )
                backward(tape, loss)
                if train_config.grad_clip is not None:
                    _clip_gradients(params, train_config.grad_clip)
                adam_step(params, adam, train_config.learning_rate,
                          train_config.weight_decay)
                losses.append(loss_val)
                acc0.append(float((preds.argmax(0) == v.labels).mean()))
                accf.append(float((preds.argmax(-1) == v.labels).mean()))
            line = (f"epoch={epoch} loss={np.mean(losses):.6f} "
                    f"acc_stage0={np.mean(acc0):.6f} acc_final={np.mean(accf):.6f}")
            log_lines.append(line)
            if log_file:
                log_file.write(line + "\n")
    finally:
        if log_file:
            log_file.close()

    ckpt = Checkpoint(
        model_config=model_config,
        params={k: p.data.copy() for k, p in params.items()},
        adam=adam,
        rng_state=rng.bit_generator.state,
        epoch=train_config.epochs,
    )
    return ckpt, log_lines


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationResult:
    reports: list               # final-stage per-video MetricsReports
    aggregate: M.AggregateReport
    stage0_reports: list
    stage0_aggregate: M.AggregateReport


def _eval_threads():
    try:
        return max(1, int(os.environ.get("VITALS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(ckpt: Checkpoint, manifest, split) -> EvaluationResult:
    """Frozen-parameter evaluation of one manifest split."""
    config = ckpt.model_config
    entries = _resolve_entries(manifest)
    try:
        videos = load_videos(entries, split, config.num_phases)
    except DataError as err:
        raise ConfigError(f"data does not match checkpoint phase count: {err}") from err
    if not videos:
        raise DataError(f"no videos in split {split!r}: nothing to report")
    params = {k: Tensor(a, requires_grad=False) for k, a in ckpt.params.items()}

    def run(v):
        if v.features.shape[1] != config.input_dim:
            raise ConfigError(
                f"video {v.video_id}: feature dim {v.features.shape[1]} != "
                f"checkpoint input_dim {config.input_dim}"
            )
        preds = model_forward(Tensor(v.features), params, config, training=False)
        final = M.video_report(v.labels, preds.argmax(-1), config.num_phases, v.video_id)
        stage0 = M.video_report(v.labels, preds.argmax(0), config.num_phases, v.video_id)
        return final, stage0

    threads = _eval_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, videos))
    else:
        results = [run(v) for v in videos]

    results.sort(key=lambda pair: pair[0].video_id)
    final_reports = [r[0] for r in results]
    stage0_reports = [r[1] for r in results]
    return EvaluationResult(
        reports=final_reports,
        aggregate=M.aggregate(final_reports),
        stage0_reports=stage0_reports,
        stage0_aggregate=M.aggregate(stage0_reports),
    )


def model_config_from_train(train_config: TrainConfig, input_dim, overrides):
    """Build the ModelConfig a CLI training run uses."""
    base = dict(
        num_phases=overrides.get("num_phases", 7),
        input_dim=input_dim,
        hidden_dim=overrides.get("hidden_dim", 64),
        num_layers=overrides.get("num_layers", 10),
        num_decoders=overrides.get("num_decoders", 3),
        dropout_rate=train_config.dropout,
        smooth_weight=train_config.smooth_weight,
        smooth_clamp=train_config.smooth_clamp,
    )
    return ModelConfig(**base)
