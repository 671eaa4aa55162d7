"""Training loops for the Siamese and triplet networks, loss history and
checkpoint serialization.

Checkpoint layout (all little-endian)::

    b"RSRT1" | u64 header length | JSON header | float64 parameters

The header holds the network kind, margin, trunk configuration and the
shape of every parameter tensor in declaration order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, load_images, sample_pairs, sample_triplets
from .nets import DEFAULT_MARGIN, SiameseModel, TripletModel, TrunkConfig
from .tensor import MomentumState, sgd_momentum_step

log = logging.getLogger(__name__)

MAGIC = b"RSRT1"
KINDS = ("siamese", "triplet")
DEFAULT_EPOCHS = {"siamese": 50, "triplet": 100}


class TrainingError(RuntimeError):
    """Non-finite loss during training."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


@dataclass
class TrainConfig:
    kind: str = "triplet"
    epochs: int | None = None  # None -> 50 (siamese) / 100 (triplet)
    samples_per_epoch: int = 5000
    batch_size: int = 50
    learning_rate: float = 0.001
    momentum: float = 0.9
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    profile: str = "full"
    val_samples: int = 1000
    positive_fraction: float = 0.5
    micro_batch: int | None = None  # split each batch for memory; sums are identical in order
    holdout_class: int | None = None  # excluded from training entirely (novelty protocol)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.kind]
        for name in ("epochs", "samples_per_epoch", "batch_size", "val_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size > self.samples_per_epoch:
            raise ValueError("batch_size must not exceed samples_per_epoch")
        if self.learning_rate < 0 or self.margin < 0:
            raise ValueError("learning_rate and margin must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def steps_per_epoch(self):
        return math.ceil(self.samples_per_epoch / self.batch_size)


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def __len__(self):
        return len(self.train)

    def rows(self):
        return [(i + 1, t, v) for i, (t, v) in enumerate(zip(self.train, self.val))]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, t, v in self.rows():
                w.writerow([epoch, repr(t), repr(v)])


def build_model(config: TrainConfig):
    init_seed = np.random.SeedSequence(config.seed).spawn(1)[0]
    rng_seed = int(init_seed.generate_state(1)[0])
    if config.kind == "siamese":
        return SiameseModel.create(config.profile, seed=rng_seed)
    return TripletModel.create(config.profile, seed=rng_seed, margin=config.margin)


def _draw(config, indices, labels, n, rng):
    if config.kind == "siamese":
        pairs = sample_pairs(indices, labels, n, config.positive_fraction, rng)
        return [(p.first, p.second, p.y) for p in pairs]
    return [(t.anchor, t.positive, t.negative) for t in sample_triplets(indices, labels, n, rng)]


def _batch_arrays(config, samples, rows, images):
    cols = list(zip(*samples))
    if config.kind == "siamese":
        first, second, y = cols
        return images[[rows[i] for i in first]], images[[rows[i] for i in second]], np.array(y, float)
    return tuple(images[[rows[i] for i in c]] for c in cols)


def batch_loss_and_grads(model, config, samples, rows, images):
    """Mean loss over ``samples`` and the gradient of that mean.

    The batch is processed in micro-batches whose gradient contributions are
    summed in batch order.
    """
    n = len(samples)
    step = config.micro_batch or n
    total, grads = 0.0, None
    for start in range(0, n, step):
        chunk = samples[start:start + step]
        loss, g = model.loss_and_grads(*_batch_arrays(config, chunk, rows, images), scale=1.0 / n)
        total += loss
        if grads is None:
            grads = g
        else:
            for acc, gi in zip(grads, g):
                acc += gi
    return total / n, grads


def mean_loss(model, config, samples, rows, images, chunk=200):
    """Mean loss over ``samples`` without touching the parameters."""
    total = 0.0
    for start in range(0, len(samples), chunk):
        arrays = _batch_arrays(config, samples[start:start + chunk], rows, images)
        total += float(np.sum(model.batch_loss(*arrays)))
    return total / len(samples)


def train(config: TrainConfig, manifest, images=None, on_epoch=None):
    """Train a fresh model on the manifest's train split.

    ``images`` may supply preprocessed images for every record (manifest
    order) at the profile's input size; otherwise they are loaded. Returns
    ``(model, history)``.
    """
    model = build_model(config)
    size = model.config.input_shape[0]
    holdout = config.holdout_class
    train_idx = manifest.indices("train", exclude_class=holdout)
    val_idx = manifest.indices("val", exclude_class=holdout)
    if len(set(manifest.labels(train_idx).tolist())) < 2:
        raise DataError("training split needs at least two classes")
    if not val_idx:
        raise DataError("validation split is empty")

    needed = sorted(set(train_idx) | set(val_idx))
    if images is None:
        images = load_images(manifest, needed, size)
        rows = {rec: k for k, rec in enumerate(needed)}
    else:
        rows = {rec: rec for rec in needed}
    if images.shape[1:] != tuple(model.config.input_shape):
        raise DataError(f"images have shape {images.shape[1:]}, model expects "
                        f"{tuple(model.config.input_shape)}")

    train_seq, val_seq = np.random.SeedSequence(config.seed).spawn(3)[1:]
    train_rng = np.random.default_rng(train_seq)
    train_labels = manifest.labels(train_idx)
    val_samples = _draw(config, val_idx, manifest.labels(val_idx), config.val_samples,
                        np.random.default_rng(val_seq))

    params = model.params()
    state = MomentumState(config.learning_rate, config.momentum)
    history = LossHistory()
    for epoch in range(1, config.epochs + 1):
        samples = _draw(config, train_idx, train_labels, config.samples_per_epoch, train_rng)
        batch_losses = []
        for b, start in enumerate(range(0, len(samples), config.batch_size)):
            loss, grads = batch_loss_and_grads(
                model, config, samples[start:start + config.batch_size], rows, images)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {b + 1}")
            sgd_momentum_step(params, grads, state)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss = mean_loss(model, config, val_samples, rows, images)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.train.append(train_loss)
        history.val.append(val_loss)
        log.info("epoch %d/%d train %.6f val %.6f", epoch, config.epochs, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    return model, history


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def _header(model):
    return {
        "kind": model.kind,
        "margin": float(getattr(model, "margin", DEFAULT_MARGIN)),
        "trunk": model.config.to_dict(),
        "params": [list(p.shape) for p in model.params()],
    }


def save_checkpoint(model, path):
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for p in model.params():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError(f"{path}: truncated payload")
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + hlen:
        raise CheckpointError(f"{path}: truncated payload")
    try:
        header = json.loads(buf[pos:pos + hlen])
        kind = header["kind"]
        trunk = TrunkConfig.from_dict(header["trunk"])
        shapes = [tuple(s) for s in header["params"]]
        margin = float(header["margin"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    pos += hlen
    if kind == "siamese":
        model = SiameseModel.create(config=trunk)
    elif kind == "triplet":
        model = TripletModel.create(config=trunk, margin=margin)
    else:
        raise CheckpointError(f"{path}: unknown network kind {kind!r}")
    params = model.params()
    if [p.shape for p in params] != shapes:
        raise CheckpointError(f"{path}: parameter shapes disagree with the trunk configuration")
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(buf) - pos < need:
        raise CheckpointError(f"{path}: truncated payload")
    if len(buf) - pos > need:
        raise CheckpointError(f"{path}: trailing bytes after payload")
    for p in params:
        n = p.size * 8
        p.data[...] = np.frombuffer(buf, dtype="<f8", count=p.size, offset=pos).reshape(p.shape)
        pos += n
    return model


def config_dict(config: TrainConfig):
    return asdict(config)
