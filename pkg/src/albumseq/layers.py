"""Learnable building blocks with hand-derived backward passes.

Three blocks: the joint embedding that fuses the previous identity label
with the current instance feature, a standard LSTM cell, and the softmax
classifier head. Every backward pass is checked against the
central-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numcore import Array, ShapeError, relu, sigmoid, softmax

INIT_SCALE = 0.08          # uniform [-INIT_SCALE, INIT_SCALE] for all weights
FORGET_BIAS_INIT = 1.0     # keeps the cell state alive early in training
AUX_LABEL = 0              # start-of-sequence label; never a prediction target


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class EmbedMode(str, Enum):
    ADDITION = "addition"
    MAX = "max"


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingParams:
    """Joint-embedding weights.

    U_y: (embed_dim, num_identities + 1)  label branch; column 0 is the
         start label.
    U_b: (embed_dim, feature_dim)         instance-feature branch.
    U_I: (embed_dim, scene_feature_dim)   scene projection for the initial
         step.
    """

    U_y: Array
    U_b: Array
    U_I: Array
    mode: EmbedMode


@dataclass
class EmbeddingGrads:
    U_y: Array
    U_b: Array
    U_I: Array

    @classmethod
    def zeros_like(cls, p: EmbeddingParams) -> "EmbeddingGrads":
        return cls(np.zeros_like(p.U_y), np.zeros_like(p.U_b), np.zeros_like(p.U_I))


@dataclass
class LstmParams:
    """Gate weights stacked along the first axis in order i, f, o, g.

    W_x: (4 * hidden_dim, embed_dim), W_h: (4 * hidden_dim, hidden_dim),
    bias: (4 * hidden_dim,). Rows [0:H] input gate, [H:2H] forget gate,
    [2H:3H] output gate, [3H:4H] candidate.
    """

    W_x: Array
    W_h: Array
    bias: Array

    @property
    def hidden_dim(self) -> int:
        return self.W_h.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W_x.shape[1]


@dataclass
class LstmGrads:
    W_x: Array
    W_h: Array
    bias: Array

    @classmethod
    def zeros_like(cls, p: LstmParams) -> "LstmGrads":
        return cls(np.zeros_like(p.W_x), np.zeros_like(p.W_h), np.zeros_like(p.bias))


@dataclass
class LstmState:
    h: Array
    c: Array

    @classmethod
    def zeros(cls, hidden_dim: int) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


@dataclass
class ClassifierParams:
    """Affine head: logits = W @ z + bias, softmaxed into an identity
    distribution. W: (num_identities, hidden_dim)."""

    W: Array
    bias: Array

    @property
    def num_identities(self) -> int:
        return self.W.shape[0]


@dataclass
class ClassifierGrads:
    W: Array
    bias: Array

    @classmethod
    def zeros_like(cls, p: ClassifierParams) -> "ClassifierGrads":
        return cls(np.zeros_like(p.W), np.zeros_like(p.bias))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_embedding_params(rng: np.random.Generator, embed_dim: int, num_identities: int,
                          feature_dim: int, scene_feature_dim: int,
                          mode: EmbedMode) -> EmbeddingParams:
    u = lambda rows, cols: rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rows, cols))
    return EmbeddingParams(U_y=u(embed_dim, num_identities + 1),
                           U_b=u(embed_dim, feature_dim),
                           U_I=u(embed_dim, scene_feature_dim),
                           mode=mode)


def init_lstm_params(rng: np.random.Generator, embed_dim: int, hidden_dim: int) -> LstmParams:
    h = hidden_dim
    params = LstmParams(W_x=rng.uniform(-INIT_SCALE, INIT_SCALE, size=(4 * h, embed_dim)),
                        W_h=rng.uniform(-INIT_SCALE, INIT_SCALE, size=(4 * h, h)),
                        bias=np.zeros(4 * h))
    params.bias[h:2 * h] = FORGET_BIAS_INIT
    return params


def init_classifier_params(rng: np.random.Generator, num_identities: int,
                           hidden_dim: int) -> ClassifierParams:
    return ClassifierParams(W=rng.uniform(-INIT_SCALE, INIT_SCALE, size=(num_identities, hidden_dim)),
                            bias=np.zeros(num_identities))


# ---------------------------------------------------------------------------
# joint embedding (previous label + current instance feature)
# ---------------------------------------------------------------------------

@dataclass
class JointEmbedCache:
    hot_index: int
    feat: Array
    label_pre: Array     # U_y @ one_hot
    feat_pre: Array      # U_b @ feat
    pre: Array           # combined pre-activation


def _check_one_hot(y_prev: Array, vocab_dim: int) -> int:
    if y_prev.ndim != 1 or y_prev.shape[0] != vocab_dim:
        raise ShapeError(f"label one-hot has dim {y_prev.shape}, expected ({vocab_dim},)")
    hot = np.flatnonzero(y_prev)
    if hot.shape[0] != 1 or y_prev[hot[0]] != 1.0:
        raise ValidationError("previous-label vector must be exactly one-hot")
    return int(hot[0])


def joint_embed(params: EmbeddingParams, y_prev: Array, feat: Array) -> tuple[Array, JointEmbedCache]:
    """Fuse the one-hot previous label with the instance feature.

    Addition mode: relu(U_y y + U_b phi). Max mode: relu applied to the
    element-wise maximum of the two branches.
    """
    hot = _check_one_hot(np.asarray(y_prev, dtype=np.float64), params.U_y.shape[1])
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (params.U_b.shape[1],):
        raise ShapeError(f"instance feature dim {feat.shape} != ({params.U_b.shape[1]},)")
    label_pre = params.U_y[:, hot].copy()
    feat_pre = params.U_b @ feat
    if params.mode == EmbedMode.ADDITION:
        pre = label_pre + feat_pre
    else:
        pre = np.maximum(label_pre, feat_pre)
    return relu(pre), JointEmbedCache(hot, feat, label_pre, feat_pre, pre)


def joint_embed_backward(params: EmbeddingParams, cache: JointEmbedCache,
                         grad_out: Array, grads: EmbeddingGrads) -> Array:
    """Accumulate dU_y / dU_b into grads; return the feature gradient.

    Max mode routes each coordinate's gradient to the branch that attained
    the maximum; exact ties go to the label branch.
    """
    g = grad_out * (cache.pre > 0.0)
    if params.mode == EmbedMode.ADDITION:
        g_label, g_feat = g, g
    else:
        label_wins = cache.label_pre >= cache.feat_pre
        g_label = g * label_wins
        g_feat = g * ~label_wins
    grads.U_y[:, cache.hot_index] += g_label
    grads.U_b += np.outer(g_feat, cache.feat)
    return params.U_b.T @ g_feat


# ---------------------------------------------------------------------------
# scene projection for the initial step
# ---------------------------------------------------------------------------

@dataclass
class SceneEmbedCache:
    scene_feat: Array
    pre: Array


def scene_embed(params: EmbeddingParams, scene_feat: Array) -> tuple[Array, SceneEmbedCache]:
    """relu(U_I @ scene_feat): maps the global image feature into the
    embedding space so the initial recurrent step sees the scene."""
    scene_feat = np.asarray(scene_feat, dtype=np.float64)
    if scene_feat.shape != (params.U_I.shape[1],):
        raise ShapeError(f"scene feature dim {scene_feat.shape} != ({params.U_I.shape[1]},)")
    pre = params.U_I @ scene_feat
    return relu(pre), SceneEmbedCache(scene_feat, pre)


def scene_embed_backward(params: EmbeddingParams, cache: SceneEmbedCache,
                         grad_out: Array, grads: EmbeddingGrads) -> Array:
    g = grad_out * (cache.pre > 0.0)
    grads.U_I += np.outer(g, cache.scene_feat)
    return params.U_I.T @ g


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmStepCache:
    x: Array
    h_prev: Array
    c_prev: Array
    i: Array
    f: Array
    o: Array
    g: Array
    tanh_c: Array


def lstm_step(params: LstmParams, state: LstmState, x: Array) -> tuple[LstmState, Array, LstmStepCache]:
    """One cell update; returns (new state, output z, cache).

    c' = f * c + i * g, h' = o * tanh(c'); the step output z is h'.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.embed_dim,):
        raise ShapeError(f"lstm input dim {x.shape} != ({params.embed_dim},)")
    h = params.hidden_dim
    a = params.W_x @ x + params.W_h @ state.h + params.bias
    i = sigmoid(a[0:h])
    f = sigmoid(a[h:2 * h])
    o = sigmoid(a[2 * h:3 * h])
    g = np.tanh(a[3 * h:4 * h])
    c_new = f * state.c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = LstmStepCache(x, state.h, state.c, i, f, o, g, tanh_c)
    return LstmState(h_new, c_new), h_new, cache


def lstm_cell_backward(params: LstmParams, cache: LstmStepCache, dz: Array,
                       dc_next: Array, grads: LstmGrads) -> tuple[Array, Array, Array]:
    """Backward through one cell. dz is the gradient w.r.t. this step's
    output (recurrent contribution already added); dc_next flows in from
    the following step. Returns (dx, dh_prev, dc_prev)."""
    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    dc = dz * o * (1.0 - cache.tanh_c ** 2) + dc_next
    do = dz * cache.tanh_c
    di = dc * g
    df = dc * cache.c_prev
    dg = dc * i
    da = np.concatenate([di * i * (1.0 - i),
                         df * f * (1.0 - f),
                         do * o * (1.0 - o),
                         dg * (1.0 - g ** 2)])
    grads.W_x += np.outer(da, cache.x)
    grads.W_h += np.outer(da, cache.h_prev)
    grads.bias += da
    dx = params.W_x.T @ da
    dh_prev = params.W_h.T @ da
    dc_prev = dc * f
    return dx, dh_prev, dc_prev


def lstm_backward(params: LstmParams, caches: list[LstmStepCache],
                  dz_list: list[Array]) -> tuple[LstmGrads, list[Array]]:
    """Exact reverse-mode sweep over a contiguous forward unroll.

    dz_list[t] is the loss gradient w.r.t. the step-t output alone; the
    recurrent chain through h and c is reconstructed here. Weight grads
    accumulate across time; returns them plus the input gradients dx_t.
    """
    if len(caches) != len(dz_list):
        raise ShapeError(f"{len(caches)} caches vs {len(dz_list)} output grads")
    grads = LstmGrads.zeros_like(params)
    dx_list: list[Array] = [None] * len(caches)  # type: ignore[list-item]
    dh_next = np.zeros(params.hidden_dim)
    dc_next = np.zeros(params.hidden_dim)
    for t in reversed(range(len(caches))):
        dz = dz_list[t] + dh_next
        dx, dh_next, dc_next = lstm_cell_backward(params, caches[t], dz, dc_next, grads)
        dx_list[t] = dx
    return grads, dx_list


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def classify(params: ClassifierParams, z: Array) -> Array:
    """softmax(W @ z + bias): distribution over the identity vocabulary."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.W.shape[1],):
        raise ShapeError(f"classifier input dim {z.shape} != ({params.W.shape[1]},)")
    return softmax(params.W @ z + params.bias)


def classify_backward(params: ClassifierParams, z: Array, dlogits: Array,
                      grads: ClassifierGrads) -> Array:
    """Accumulate head grads given the logit gradient; return dz."""
    grads.W += np.outer(dlogits, z)
    grads.bias += dlogits
    return params.W.T @ dlogits
