"""Training loop: per-epoch order randomization, minibatched Adam with a
step learning-rate schedule, and counter-seeded determinism.

Every epoch re-shuffles both the photo order and the instance order inside
each photo; the latter is the randomization that teaches the recurrence to
handle people in any order. Minibatch loss is the sum over photos divided
by the number of contributing instance steps, so the learning-rate scale
does not drift with album sizes. Runs are bit-identical for a fixed
(dataset, config) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PhotoRecord, sole_region
from .layers import EmbedMode, ValidationError
from .numcore import AdamState, adam_step, child_rng
from .seqmodel import (Array, ModelConfig, ModelParams, SequenceBatchItem,
                       backward_train, flatten_params, forward_train,
                       init_model_params, set_flat)


@dataclass
class TrainConfig:
    """Model dimensions plus optimizer schedule.

    Defaults are the reference recipe: 512-dim embeddings and hidden state,
    unroll 22, Adam at 0.001 dropped tenfold after epoch 20, 80 epochs.
    `region` picks which per-instance feature to train on (None means the
    dataset must have exactly one). `feed_predicted` switches teacher
    forcing off, feeding the model its own argmax during training.
    """

    embed_dim: int = 512
    hidden_dim: int = 512
    unroll: int = 22
    learning_rate: float = 1e-3
    decay_factor: float = 10.0
    decay_epoch: int = 20
    total_epochs: int = 80
    batch_size: int = 16
    mode: EmbedMode = EmbedMode.MAX
    use_scene: bool = True
    seed: int = 0
    region: str | None = None
    grad_clip: float | None = None
    feed_predicted: bool = False

    def validate(self) -> None:
        if self.embed_dim < 1 or self.hidden_dim < 1 or self.unroll < 1:
            raise ValidationError("dims and unroll must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.decay_factor <= 0:
            raise ValidationError("decay_factor must be > 0")
        if not 0 <= self.decay_epoch < self.total_epochs:
            raise ValidationError("need 0 <= decay_epoch < total_epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be > 0 when set")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["mode"] = EmbedMode(d["mode"])
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_eval: list[float | None] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch_losses": self.epoch_losses,
                "epoch_eval": self.epoch_eval,
                "seed": self.seed,
                "config": self.config}


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: base rate before decay_epoch, divided by
    decay_factor from decay_epoch onward."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValidationError(f"epoch {epoch} outside 0..{cfg.total_epochs - 1}")
    if epoch < cfg.decay_epoch:
        return cfg.learning_rate
    return cfg.learning_rate / cfg.decay_factor


def shuffle_photo(photo: PhotoRecord, region: str, seed: int, epoch: int,
                  pad_to: int) -> SequenceBatchItem:
    """One jointly-permuted (features, labels) sequence for an epoch.

    The permutation stream is keyed by (seed, epoch, photo_id), so each
    photo sees a fresh order each epoch and reruns reproduce it exactly.
    """
    if photo.size < 1:
        raise ValidationError(f"photo {photo.photo_id} has no instances")
    rng = child_rng(seed, "shuffle", epoch, photo.photo_id)
    perm = rng.permutation(photo.size)
    feats = [photo.instances[j].region_feats[region] for j in perm]
    labels = [photo.instances[j].label for j in perm]
    return SequenceBatchItem(photo.photo_id, photo.scene_feat, feats, labels, pad_to)


def _clip(grad: Array, max_norm: float | None) -> Array:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad


def train(dataset: list[PhotoRecord], cfg: TrainConfig, num_identities: int,
          eval_fn=None) -> tuple[ModelParams, TrainReport]:
    """Fit a model to one split.

    eval_fn, if given, is called with the current params after each epoch
    and its float result logged (useful for held-out tracking; it does not
    influence training). Returns the final params and the per-epoch log.
    """
    cfg.validate()
    if not dataset:
        raise ValidationError("training set is empty")
    region = cfg.region if cfg.region is not None else sole_region(dataset)
    too_big = [p.photo_id for p in dataset if p.size > cfg.unroll]
    if too_big:
        raise ValidationError(
            f"photos exceed unroll {cfg.unroll}: {too_big[:5]}")
    for photo in dataset:
        for inst in photo.instances:
            if not 1 <= inst.label <= num_identities:
                raise ValidationError(
                    f"photo {photo.photo_id}: label {inst.label} outside 1..{num_identities}")

    feature_dim = dataset[0].instances[0].region_feats[region].shape[0]
    scene_dim = dataset[0].scene_feat.shape[0]
    model_cfg = ModelConfig(num_identities=num_identities,
                            feature_dim=feature_dim,
                            scene_feature_dim=scene_dim,
                            embed_dim=cfg.embed_dim,
                            hidden_dim=cfg.hidden_dim,
                            mode=cfg.mode,
                            use_scene=cfg.use_scene)
    params = init_model_params(model_cfg, cfg.seed)
    theta = flatten_params(params)
    adam = AdamState.init(theta.shape[0], cfg.learning_rate)

    report = TrainReport(seed=cfg.seed, config=cfg.to_dict())
    for epoch in range(cfg.total_epochs):
        adam.learning_rate = lr_schedule(cfg, epoch)
        order = child_rng(cfg.seed, "order", epoch).permutation(len(dataset))
        epoch_loss_sum = 0.0
        epoch_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[j] for j in order[start:start + cfg.batch_size]]
            grad_sum = np.zeros_like(theta)
            loss_sum = 0.0
            steps = 0
            for photo in batch:
                item = shuffle_photo(photo, region, cfg.seed, epoch, cfg.unroll)
                trace = forward_train(params, item, feed_predicted=cfg.feed_predicted)
                grad_sum += backward_train(params, trace)
                loss_sum += trace.loss
                steps += photo.size
            grad = _clip(grad_sum / steps, cfg.grad_clip)
            adam_step(adam, theta, grad)
            set_flat(params, theta)
            epoch_loss_sum += loss_sum
            epoch_steps += steps
        report.epoch_losses.append(epoch_loss_sum / epoch_steps)
        report.epoch_eval.append(float(eval_fn(params)) if eval_fn is not None else None)
    return params, report
