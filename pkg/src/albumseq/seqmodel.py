"""The per-photo sequence model: scene-initialized recurrence over instance
steps, per-step identity classification, summed per-step negative log
likelihood, and exact backpropagation through time.

Identity labels are 1..num_identities; label 0 is the auxiliary start
label, fed as "previous label" at the first real step and never predicted.
The classifier distribution indexes identities as label - 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import (AUX_LABEL, ClassifierGrads, ClassifierParams, EmbeddingGrads,
                     EmbeddingParams, EmbedMode, LstmGrads, LstmParams, LstmState,
                     ValidationError)
from .numcore import Array, child_rng, nll, one_hot, softmax_nll_grad


@dataclass
class ModelConfig:
    num_identities: int
    feature_dim: int
    scene_feature_dim: int
    embed_dim: int
    hidden_dim: int
    mode: EmbedMode
    use_scene: bool

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mode"] = EmbedMode(d["mode"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingParams
    lstm: LstmParams
    classifier: ClassifierParams


@dataclass
class ModelGrads:
    embedding: EmbeddingGrads
    lstm: LstmGrads
    classifier: ClassifierGrads

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "ModelGrads":
        return cls(EmbeddingGrads.zeros_like(p.embedding),
                   LstmGrads.zeros_like(p.lstm),
                   ClassifierGrads.zeros_like(p.classifier))


def init_model_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = child_rng(seed, "init")
    return ModelParams(
        config=cfg,
        embedding=layers.init_embedding_params(rng, cfg.embed_dim, cfg.num_identities,
                                               cfg.feature_dim, cfg.scene_feature_dim, cfg.mode),
        lstm=layers.init_lstm_params(rng, cfg.embed_dim, cfg.hidden_dim),
        classifier=layers.init_classifier_params(rng, cfg.num_identities, cfg.hidden_dim))


# Canonical parameter order; flattening, Adam, and checkpoints all use it.
def param_items(p: ModelParams) -> list[tuple[str, Array]]:
    return [("embedding.U_y", p.embedding.U_y),
            ("embedding.U_b", p.embedding.U_b),
            ("embedding.U_I", p.embedding.U_I),
            ("lstm.W_x", p.lstm.W_x),
            ("lstm.W_h", p.lstm.W_h),
            ("lstm.bias", p.lstm.bias),
            ("classifier.W", p.classifier.W),
            ("classifier.bias", p.classifier.bias)]


def grad_items(g: ModelGrads) -> list[tuple[str, Array]]:
    return [("embedding.U_y", g.embedding.U_y),
            ("embedding.U_b", g.embedding.U_b),
            ("embedding.U_I", g.embedding.U_I),
            ("lstm.W_x", g.lstm.W_x),
            ("lstm.W_h", g.lstm.W_h),
            ("lstm.bias", g.lstm.bias),
            ("classifier.W", g.classifier.W),
            ("classifier.bias", g.classifier.bias)]


def num_params(p: ModelParams) -> int:
    return sum(a.size for _, a in param_items(p))


def flatten_params(p: ModelParams) -> Array:
    return np.concatenate([a.ravel() for _, a in param_items(p)])


def flatten_grads(g: ModelGrads) -> Array:
    return np.concatenate([a.ravel() for _, a in grad_items(g)])


def set_flat(p: ModelParams, flat: Array) -> None:
    """Write a flat vector back into the parameter arrays, canonical order."""
    offset = 0
    for _, a in param_items(p):
        a[...] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != flat.shape[0]:
        raise ValidationError(f"flat vector has {flat.shape[0]} entries, model has {offset}")


# ---------------------------------------------------------------------------
# one photo as a training sequence
# ---------------------------------------------------------------------------

@dataclass
class SequenceBatchItem:
    """One photo, ordered: instance features paired with identity labels,
    plus the unroll length the photo is nominally padded to. Padded steps
    are skipped outright, so they contribute no loss and no gradient."""

    photo_id: str
    scene_feat: Array
    instance_feats: list[Array]
    labels: list[int]
    pad_to: int


@dataclass
class _StepCache:
    is_scene: bool
    embed_cache: object
    lstm_cache: layers.LstmStepCache
    z: Array
    probs: Array | None = None
    target: int | None = None


@dataclass
class ForwardTrace:
    distributions: list[Array]
    loss: float
    steps: list[_StepCache] = field(repr=False)


def _validate_item(cfg: ModelConfig, item: SequenceBatchItem) -> None:
    n = len(item.instance_feats)
    if n == 0 or n != len(item.labels):
        raise ValidationError(
            f"photo {item.photo_id}: {n} features vs {len(item.labels)} labels (need >= 1, equal)")
    if n > item.pad_to:
        raise ValidationError(
            f"photo {item.photo_id}: {n} instances exceed unroll length {item.pad_to}")
    for label in item.labels:
        if not 1 <= label <= cfg.num_identities:
            raise ValidationError(
                f"photo {item.photo_id}: label {label} outside 1..{cfg.num_identities}")


def forward_train(params: ModelParams, item: SequenceBatchItem,
                  feed_predicted: bool = False) -> ForwardTrace:
    """Run the unroll and sum per-step losses.

    With use_scene, step 0 consumes the projected scene feature from a zero
    state and contributes no loss. Each instance step embeds the previous
    label jointly with the current feature; by default the previous label
    is the ground truth (teacher forcing), with feed_predicted the step's
    own argmax is fed instead (the loss still scores the true labels).
    """
    cfg = params.config
    _validate_item(cfg, item)
    vocab_dim = cfg.num_identities + 1
    state = LstmState.zeros(cfg.hidden_dim)
    steps: list[_StepCache] = []
    distributions: list[Array] = []
    loss = 0.0

    if cfg.use_scene:
        x0, scene_cache = layers.scene_embed(params.embedding, item.scene_feat)
        state, z0, lstm_cache = layers.lstm_step(params.lstm, state, x0)
        steps.append(_StepCache(True, scene_cache, lstm_cache, z0))

    y_prev = AUX_LABEL
    for feat, label in zip(item.instance_feats, item.labels):
        x, embed_cache = layers.joint_embed(params.embedding, one_hot(y_prev, vocab_dim), feat)
        state, z, lstm_cache = layers.lstm_step(params.lstm, state, x)
        probs = layers.classify(params.classifier, z)
        loss += nll(probs, label - 1)
        distributions.append(probs)
        steps.append(_StepCache(False, embed_cache, lstm_cache, z, probs, label - 1))
        y_prev = int(np.argmax(probs)) + 1 if feed_predicted else label

    return ForwardTrace(distributions, loss, steps)


def backward_train(params: ModelParams, trace: ForwardTrace) -> Array:
    """Flat gradient of trace.loss over every parameter, via BPTT.

    The scene step carries no loss term of its own but still routes
    gradient into the scene projection through the recurrent chain.
    """
    grads = ModelGrads.zeros_like(params)
    dz_list: list[Array] = []
    for step in trace.steps:
        if step.is_scene:
            dz_list.append(np.zeros(params.config.hidden_dim))
        else:
            dlogits = softmax_nll_grad(step.probs, step.target)
            dz_list.append(layers.classify_backward(params.classifier, step.z,
                                                    dlogits, grads.classifier))
    lstm_grads, dx_list = layers.lstm_backward(
        params.lstm, [s.lstm_cache for s in trace.steps], dz_list)
    grads.lstm = lstm_grads
    for step, dx in zip(trace.steps, dx_list):
        if step.is_scene:
            layers.scene_embed_backward(params.embedding, step.embed_cache, dx, grads.embedding)
        else:
            layers.joint_embed_backward(params.embedding, step.embed_cache, dx, grads.embedding)
    return flatten_grads(grads)


def log_likelihood(params: ModelParams, item: SequenceBatchItem) -> float:
    """Summed log probability of the true labels under teacher forcing."""
    return -forward_train(params, item).loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Flat little-endian binary layout (all integers '<I' unless noted):
#   magic "ALBSEQ1\n" | config-JSON length, config JSON (UTF-8, sorted keys)
#   | array count | per array: name length, name, ndim, dims..., float64
#   ('<f8') data. Round-trips are bit-exact and writes are reproducible.

CHECKPOINT_MAGIC = b"ALBSEQ1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams) -> None:
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        items = param_items(params)
        fh.write(struct.pack("<I", len(items)))
        for name, a in items:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", a.ndim))
            for dim in a.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    def read_exact(fh, n: int) -> bytes:
        blob = fh.read(n)
        if len(blob) != n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        return blob

    with open(path, "rb") as fh:
        if read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        (config_len,) = struct.unpack("<I", read_exact(fh, 4))
        cfg = ModelConfig.from_dict(json.loads(read_exact(fh, config_len).decode("utf-8")))
        (count,) = struct.unpack("<I", read_exact(fh, 4))
        arrays: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read_exact(fh, 4))
            name = read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", read_exact(fh, 4))
            shape = tuple(struct.unpack("<I", read_exact(fh, 4))[0] for _ in range(ndim))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
            data = np.frombuffer(read_exact(fh, n_bytes), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)

    params = init_model_params(cfg, seed=0)
    expected = [name for name, _ in param_items(params)]
    if sorted(arrays) != sorted(expected):
        raise CheckpointError(f"{path}: parameter blocks {sorted(arrays)} != {sorted(expected)}")
    for name, target in param_items(params):
        if arrays[name].shape != target.shape:
            raise CheckpointError(
                f"{path}: block {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return params
