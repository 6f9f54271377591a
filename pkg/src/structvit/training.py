"""Training loop: SGD with momentum, cosine-annealed learning rate with a
linear warmup, CSV metrics, periodic evaluation, and binary checkpoints
that round-trip byte-for-byte."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import split_patches
from .boosting import (batch_accuracy, contrastive_loss, cross_entropy,
                       total_loss)
from .errors import ConfigError, NanLossError
from .model import Architecture, StructViT
from .synthdata import load_split, to_model_input

CHECKPOINT_MAGIC = b"SVCKPT"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "step,lr,loss_ce,loss_cl,batch_acc\n"
EVAL_HEADER = "eval_step,test_acc\n"


@dataclass
class TrainConfig:
    """Full hyperparameter set; defaults are the desk-scale recipe."""

    lr_init: float = 0.05
    momentum: float = 0.9
    total_steps: int = 3000
    warmup_steps: int = 150
    batch_size: int = 16
    alpha: float = 0.3
    sil_layer_count: int = 3
    mfb_enabled: bool = True
    contrastive_enabled: bool = True
    seed: int = 0
    image_size: int = 64
    patch_size: int = 16
    stride: int = 16
    depth: int = 4
    width: int = 64
    heads: int = 4
    ffn_width: int = 256
    gcn_hidden: int = 0
    share_gcn_weights: bool = False
    eval_interval: int = 250

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be below total_steps "
                f"{self.total_steps}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def architecture(self, n_classes: int) -> Architecture:
        return Architecture(
            image_size=self.image_size, patch_size=self.patch_size,
            stride=self.stride, depth=self.depth, width=self.width,
            heads=self.heads, ffn_width=self.ffn_width, n_classes=n_classes,
            sil_layer_count=self.sil_layer_count, mfb_enabled=self.mfb_enabled,
            gcn_hidden=self.gcn_hidden, share_gcn_weights=self.share_gcn_weights,
        )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {key}")
            kwargs[key] = _coerce(value, fields[key].type)
        return cls(**kwargs)


def _coerce(value, type_name):
    if isinstance(value, str):
        text = value.strip()
        if type_name == "bool":
            lowered = text.lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ConfigError(f"cannot parse boolean from {value!r}")
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        return text
    return value


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# optimizer


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to lr_init over the warmup, then a half cosine to 0."""
    if not (0 <= step < cfg.total_steps):
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: dict, buffers: dict, lr: float, momentum: float) -> None:
    """Classic momentum: v <- momentum*v + g; p <- p - lr*v.

    Parameters with no accumulated gradient this step still decay their
    buffer. No weight decay.
    """
    for name, p in params.items():
        v = buffers[name]
        v *= momentum
        if p.grad is not None:
            v += p.grad
        p.data -= lr * v


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path: str, model: StructViT, cfg: TrainConfig,
                    buffers: dict, rng_state: dict, step: int) -> None:
    """Versioned binary: magic, version, JSON header, float64 LE payloads.

    Parameter payloads are laid out in sorted-name order so that
    save -> load -> save is byte-identical.
    """
    names = sorted(model.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "n_classes": model.arch.n_classes,
        "step": int(step),
        "rng_state": rng_state,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(model.params[n].data.astype("<f8").tobytes())
        for n in names:
            f.write(buffers[n].astype("<f8").tobytes())


def load_checkpoint(path: str):
    """Returns (cfg, n_classes, params dict, momentum buffers, rng_state, step)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            params[entry["name"]] = arr.astype(np.float64)
        buffers = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            buffers[entry["name"]] = arr.astype(np.float64)
    cfg = TrainConfig(**header["config"])
    return cfg, int(header["n_classes"]), params, buffers, header["rng_state"], int(header["step"])


def model_from_checkpoint(path: str) -> tuple[StructViT, TrainConfig]:
    cfg, n_classes, params, _, _, _ = load_checkpoint(path)
    model = StructViT(cfg.architecture(n_classes))
    model.load_state(params)
    return model, cfg


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    final_accuracy: float
    steps: int
    checkpoint_path: str
    metrics_path: str
    eval_path: str


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def evaluate(model: StructViT, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy over a split; no augmentation, no graph recording."""
    correct = 0
    for i in range(len(images)):
        patches = split_patches(to_model_input(images[i]), model.grid)
        if model.predict(patches) == labels[i]:
            correct += 1
    return correct / len(images)


def train(cfg: TrainConfig, data_dir: str, out_dir: str,
          log_every: int = 0) -> TrainResult:
    """Run the full optimization loop.

    Deterministic given the config seed: parameter init, batch order, and
    summation orders are all fixed, so repeated runs produce identical
    metrics files.
    """
    cfg.validate()
    train_x, train_y = load_split(os.path.join(data_dir, "train"))
    test_x, test_y = load_split(os.path.join(data_dir, "test"))
    n_classes = int(train_y.max()) + 1
    if cfg.image_size != train_x.shape[1]:
        raise ConfigError(
            f"config image_size {cfg.image_size} != dataset {train_x.shape[1]}")

    rng = np.random.default_rng(cfg.seed)
    model = StructViT(cfg.architecture(n_classes), rng)
    buffers = {n: np.zeros_like(p.data) for n, p in model.params.items()}

    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    eval_path = os.path.join(out_dir, "eval.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    order = np.empty(0, dtype=np.int64)
    cursor = 0
    final_acc = 0.0
    with open(metrics_path, "w") as mf, open(eval_path, "w") as ef:
        mf.write(METRICS_HEADER)
        ef.write(EVAL_HEADER)
        for step in range(cfg.total_steps):
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(train_x))
                cursor = 0
            batch = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            labels = train_y[batch]

            features = []
            for idx in batch:
                patches = split_patches(to_model_input(train_x[idx]), model.grid)
                features.append(model.forward_image(patches).feature)
            _, pred = model.logits_for(features)
            l_ce = cross_entropy(pred, labels)
            if cfg.contrastive_enabled:
                l_cl, _ = contrastive_loss(features, labels, cfg.alpha)
            else:
                l_cl = ad.Tensor(0.0)
            loss = total_loss(l_ce, l_cl)
            if not math.isfinite(loss.item()):
                raise NanLossError(step)

            lr = lr_at(step, cfg)
            loss.backward()
            sgd_step(model.params, buffers, lr, cfg.momentum)
            model.zero_grad()

            acc = batch_accuracy(pred, labels)
            mf.write(f"{step},{_fmt(lr)},{_fmt(l_ce.item())},"
                     f"{_fmt(l_cl.item())},{_fmt(acc)}\n")
            if log_every and (step + 1) % log_every == 0:
                print(f"step {step + 1}/{cfg.total_steps} "
                      f"ce={l_ce.item():.4f} cl={l_cl.item():.4f} acc={acc:.3f}",
                      flush=True)

            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
                final_acc = evaluate(model, test_x, test_y)
                ef.write(f"{step},{_fmt(final_acc)}\n")
                ef.flush()
                save_checkpoint(ckpt_path, model, cfg, buffers,
                                rng.bit_generator.state, step + 1)
    return TrainResult(final_acc, cfg.total_steps, ckpt_path, metrics_path, eval_path)
