"""Adam training loop with flip/rotate/zoom/shift augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .model import PADModel
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

# stream ids for np.random.default_rng([seed, stream]); 0 and 1 belong to model init
SHUFFLE_STREAM = 2
AUGMENT_STREAM = 3


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    zoom_min: float = 0.9
    zoom_max: float = 1.1
    translate_frac: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.learning_rate < 0:
            errors.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be positive")
        if self.epochs < 1:
            errors.append("epochs must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            errors.append("flip_prob must be in [0, 1]")
        if not 0 < self.zoom_min <= self.zoom_max:
            errors.append("zoom range must satisfy 0 < zoom_min <= zoom_max")
        if self.checkpoint_every < 0:
            errors.append("checkpoint_every must be >= 0")
        return errors


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.DimensionError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - step).astype(p.dtype)


# ---------------------------------------------------------------------------
# augmentation


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def apply_affine(image: np.ndarray, flip: bool = False, angle_deg: float = 0.0, zoom: float = 1.0,
                 shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Flip, then rotate/zoom about the centre and shift (in pixels, row/col).

    Bilinear resampling; samples falling outside take the nearest edge value.
    """
    img = flip_horizontal(image) if flip else np.asarray(image)
    if angle_deg == 0.0 and zoom == 1.0 and shift == (0.0, 0.0):
        return img.astype(image.dtype, copy=True)
    h, w = img.shape[-2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = np.deg2rad(angle_deg)
    # output -> input coordinate map: inverse rotation and zoom
    inv = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]]) / zoom
    offset = centre - inv @ (centre + np.asarray(shift, dtype=float))
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.affine_transform(img[c], inv, offset=offset, order=1, mode="nearest")
    return out


def augment(image: np.ndarray, seed, config: TrainConfig | None = None) -> np.ndarray:
    """Random flip, rotation, zoom and translation of a ``C x H x W`` image.

    ``seed`` is an int or a ``np.random.Generator``; equal seeds give equal output.
    """
    config = config or TrainConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = image.shape[-2:]
    flip = bool(rng.random() < config.flip_prob)
    angle = float(rng.uniform(-config.rotation_deg, config.rotation_deg))
    zoom = float(rng.uniform(config.zoom_min, config.zoom_max))
    shift = (float(rng.uniform(-1, 1) * config.translate_frac * h), float(rng.uniform(-1, 1) * config.translate_frac * w))
    return np.clip(apply_affine(image, flip, angle, zoom, shift), 0.0, 1.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,train_acc,val_acc\n")
            for e in self.epochs:
                val = "" if e.val_acc is None else repr(e.val_acc)
                fh.write(f"{e.epoch},{e.loss!r},{e.train_acc!r},{val}\n")


def _per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]


def accuracy(model: PADModel, images: np.ndarray, labels: np.ndarray) -> float:
    scores = model.pa_score(images)
    return float(np.mean((scores >= 0.5).astype(int) == labels))


def train(
    model: PADModel,
    dataset: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    out_dir=None,
    on_epoch: Callable[[EpochRecord], bool | None] | None = None,
) -> TrainLog:
    """Train ``model`` in place and return the per-epoch log.

    With ``out_dir`` set, ``train_log.csv`` is written there and, when
    ``config.checkpoint_every`` is positive, ``ckpt_epoch_<k>.agpd`` files.
    ``on_epoch`` is called after every epoch; returning True ends training.
    """
    images, labels = dataset
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise ValueError("dataset must contain both live and PA samples")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    shuffle_rng = np.random.default_rng([config.seed, SHUFFLE_STREAM])
    aug_rng = np.random.default_rng([config.seed, AUGMENT_STREAM])
    params = model.parameters()
    state = AdamState()
    history = TrainLog()
    n = len(images)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sample_loss = np.zeros(n)
        sample_hit = np.zeros(n, dtype=bool)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = np.stack([augment(img, aug_rng, config) for img in batch])
            model.zero_grad()
            logits = model.forward(Tensor(batch.astype(model.dtype)))
            loss = T.softmax_cross_entropy(logits, labels[idx])
            loss.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            adam_step(params, grads, state, config)
            # indexed by sample so the epoch mean does not depend on batch order
            sample_loss[idx] = _per_sample_ce(logits.data, labels[idx])
            sample_hit[idx] = logits.data.argmax(axis=1) == labels[idx]
        record = EpochRecord(epoch, float(sample_loss.mean()), float(sample_hit.mean()))
        if val is not None:
            record.val_acc = accuracy(model, *val)
        history.epochs.append(record)
        log.info("epoch %d loss %.5f train_acc %.4f val_acc %s", epoch, record.loss, record.train_acc, record.val_acc)
        if out_dir is not None:
            history.to_csv(out_dir / "train_log.csv")
            if config.checkpoint_every and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
                model.save(out_dir / f"ckpt_epoch_{epoch}.agpd")
        if on_epoch is not None and on_epoch(record):
            break
    model.zero_grad()
    return history


def average_score_fusion(score_lists: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-sample arithmetic mean of several models' PA scores."""
    if not score_lists:
        raise ValueError("need at least one score list")
    lengths = {len(s) for s in score_lists}
    if len(lengths) != 1:
        raise ValueError(f"score lists differ in length: {sorted(lengths)}")
    return np.mean(np.asarray(score_lists, dtype=np.float64), axis=0)
