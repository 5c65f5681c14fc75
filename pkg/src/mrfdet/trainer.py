"""Training loop, learning-rate schedule and checkpoint IO.

SGD with momentum; L2 weight decay is decoupled from the loss and applied
to convolution weights only (not biases). The schedule is linear warmup
from a start rate to the base rate, then step drops by 0.1 at configured
epochs. Everything is seeded: two runs with identical configs produce
bit-identical checkpoints.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .anchors import match_anchors
from .dataset import load_dataset
from .detector_net import BackboneSpec, DetectorParams, Toggles, build_network, forward
from .losses import LossBreakdown, LossConfig, total_loss
from .sws_masks import AWS_THRESHOLDS, AreaThresholds, rasterize_sws_mask
from .tensor_core import ShapeError

CHECKPOINT_MAGIC = b"MRFD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 5e-3
    warmup_start_lr: float = 5e-5
    warmup_epochs: int = 3
    lr_drop_epochs: tuple = (20, 26)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    t1: float = 64.0
    t2: float = 1024.0
    num_classes: int = 3
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 64, 64)
    match_threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        drops = tuple(self.lr_drop_epochs)
        object.__setattr__(self, "lr_drop_epochs", drops)
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ShapeError("learning rates must be positive")
        if drops and not (self.warmup_epochs < drops[0] < self.epochs):
            raise ShapeError("need warmup epochs < first drop epoch < total epochs")

    @property
    def thresholds(self) -> AreaThresholds:
        if self.toggles.seg_mode == "aws":
            return AWS_THRESHOLDS
        return AreaThresholds(self.t1, self.t2)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cumulative x0.1 drops."""
    if not 0 <= epoch < config.epochs:
        raise ShapeError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        lr = config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    else:
        lr = config.base_lr
    for drop in config.lr_drop_epochs:
        if epoch >= drop:
            lr *= 0.1
    return lr


class SGD:
    """Momentum SGD with decoupled L2 decay on convolution weights."""

    def __init__(self, named_params, momentum, weight_decay):
        self.named_params = named_params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in named_params}

    def step(self, lr):
        for name, t in self.named_params:
            g = t.grad if t.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay and name.endswith(".w"):
                t.data *= 1.0 - lr * self.weight_decay
            t.data -= lr * v
            t.grad = None


@dataclass
class TrainResult:
    detector: DetectorParams
    log: list            # per-step LossBreakdown
    steps: int


def prepare_sample(det: DetectorParams, config: TrainConfig, image, boxes):
    """Precompute the match assignment and (optionally) the SWS/AWS mask."""
    gt_boxes = np.array([[b.xmin, b.ymin, b.xmax, b.ymax] for b in boxes],
                        dtype=np.float64).reshape(-1, 4)
    gt_labels = np.array([b.class_id for b in boxes], dtype=np.int64)
    assignment = match_anchors(det.anchors, gt_boxes, config.match_threshold)
    mask = None
    if det.toggles.seg_mode != "off":
        mask = rasterize_sws_mask(boxes, config.image_size, config.thresholds)
    return image.astype(np.float32), (gt_boxes, gt_labels), assignment, mask


def train(config: TrainConfig, data_dir, log_fn=None, ckpt_path=None) -> TrainResult:
    """Train on a dataset directory; aborts with diagnostics on NaN loss."""
    det = build_network(BackboneSpec(config.image_size, config.stage_channels),
                        config.num_classes, config.toggles,
                        seed=config.seed, dtype=np.float32)
    samples = [prepare_sample(det, config, img, boxes)
               for _, img, boxes in load_dataset(data_dir)]
    if not samples:
        raise ShapeError(f"no images found under {data_dir}")
    opt = SGD(det.named_params(), config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    log, step = [], 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            sums = np.zeros(5)
            n_pos = 0
            for idx in batch:
                image, gts, assignment, mask = samples[idx]
                _, outputs = forward(det, image)
                breakdown, loss = total_loss(outputs, assignment, gts, mask, config.loss)
                if not np.isfinite(breakdown.total):
                    raise FloatingPointError(
                        f"NaN/Inf loss at step {step}: l_conf={breakdown.l_conf} "
                        f"l_loc={breakdown.l_loc} l_seg={breakdown.l_seg}")
                loss.backward(np.array(1.0 / len(batch), dtype=np.float32))
                sums += [breakdown.l_conf, breakdown.l_loc, breakdown.l_det,
                         breakdown.l_seg, breakdown.total]
                n_pos += breakdown.n_pos
            opt.step(lr)
            avg = LossBreakdown(*(sums / len(batch)), n_pos=n_pos)
            log.append(avg)
            if log_fn is not None:
                log_fn(avg.record(step) + f" lr={lr:g} epoch={epoch}")
            step += 1
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, det, config, opt, step, rng)
    return TrainResult(detector=det, log=log, steps=step)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "MRFD", version u32, then repeated records of
# (name length u32, name bytes, rank u32, dims u32..., f32 little-endian).
# Metadata, optimizer state and the RNG state ride along as extra records.
# ---------------------------------------------------------------------------

def _write_record(f, name, arr):
    nb = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def _read_records(f):
    records = {}
    while True:
        head = f.read(4)
        if not head:
            return records
        (nlen,) = struct.unpack("<I", head)
        name = f.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
        records[name] = data


def save_checkpoint(path, det: DetectorParams, config: TrainConfig,
                    optimizer: SGD = None, step: int = 0, rng=None):
    meta = np.array([det.seed, det.num_classes, config.image_size,
                     int(det.toggles.mrf), int(det.toggles.extra_level),
                     ("off", "aws", "sws").index(det.toggles.seg_mode),
                     step], dtype="<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_record(f, "meta", meta)
        _write_record(f, "meta.stages", np.array(config.stage_channels, dtype="<f4"))
        # PCG64 state as raw bits so the round trip is exact.
        if rng is None:
            rng = np.random.default_rng(config.seed + 1)
        state = rng.bit_generator.state["state"]
        raw = state["state"].to_bytes(16, "little") + state["inc"].to_bytes(16, "little")
        _write_record(f, "rng.pcg64", np.frombuffer(raw, dtype="<f4").copy())
        for name, t in det.named_params():
            _write_record(f, "param." + name, t.data)
        if optimizer is not None:
            for name, v in optimizer.velocity.items():
                _write_record(f, "momentum." + name, v)


def load_checkpoint(path):
    """Rebuild the detector and return (DetectorParams, records dict)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path} is not a detector checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {version}")
        records = _read_records(f)
    meta = records["meta"]
    toggles = Toggles(mrf=bool(int(meta[3])), extra_level=bool(int(meta[4])),
                      seg_mode=("off", "aws", "sws")[int(meta[5])])
    stages = tuple(int(c) for c in records["meta.stages"])
    det = build_network(BackboneSpec(int(meta[2]), stages), int(meta[1]), toggles,
                        seed=int(meta[0]), dtype=np.float32)
    expected = {"param." + name for name, _ in det.named_params()}
    stored = {n for n in records if n.startswith("param.")}
    if expected != stored:
        raise ShapeError("checkpoint parameter names do not match the current "
                         f"network layout (missing {sorted(expected - stored)[:3]}, "
                         f"unexpected {sorted(stored - expected)[:3]})")
    for name, t in det.named_params():
        data = records["param." + name]
        if data.shape != t.data.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {data.shape}, "
                             f"expected {t.data.shape}")
        t.data = data.astype(np.float32)
    return det, records
