"""Finite-difference verification of every hand-written backward pass.

Each block perturbs a flattened vector of parameters (and, for the layer
blocks, inputs) around a random seeded point and compares central
differences of a scalar probe against the analytic gradient. Random
points keep the check away from relu/max kinks, where one-sided
nondifferentiability would make the comparison meaningless; the
deliberate-corruption hook lets tests prove the checker actually bites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (ClassifierGrads, EmbeddingGrads, EmbedMode, LstmGrads,
                     LstmState, classify, classify_backward,
                     init_classifier_params, init_embedding_params,
                     init_lstm_params, joint_embed, joint_embed_backward,
                     lstm_backward, lstm_step, scene_embed,
                     scene_embed_backward)
from .numcore import (Array, child_rng, finite_diff_grad, nll, one_hot,
                      rel_error, softmax_nll_grad)
from .seqmodel import (ModelConfig, SequenceBatchItem, backward_train,
                       flatten_params, forward_train, init_model_params,
                       set_flat)

TOLERANCE = 1e-5


@dataclass
class BlockResult:
    name: str
    seed: int
    max_rel_error: float
    passed: bool


def _compare(name: str, seed: int, analytic: Array, f, point: Array,
             tolerance: float, corrupt: str | None) -> BlockResult:
    if corrupt == name:
        analytic = analytic * 1.01
    numeric = finite_diff_grad(f, point)
    err = rel_error(analytic, numeric)
    return BlockResult(name, seed, err, bool(err < tolerance))


def _check_joint_embed(mode: EmbedMode, seed: int, dim: int, tolerance: float,
                       corrupt: str | None) -> BlockResult:
    rng = child_rng(seed, "gc-joint", mode.value)
    num_ids, feat_dim = 4, dim
    params = init_embedding_params(rng, dim, num_ids, feat_dim, 3, mode)
    feat = rng.normal(size=feat_dim)
    y = one_hot(int(rng.integers(num_ids + 1)), num_ids + 1)
    probe = rng.normal(size=dim)

    sizes = [params.U_y.size, params.U_b.size, feat.size]
    point = np.concatenate([params.U_y.ravel(), params.U_b.ravel(), feat])

    def f(flat: Array) -> float:
        a, b = sizes[0], sizes[0] + sizes[1]
        params.U_y = flat[:a].reshape(params.U_y.shape)
        params.U_b = flat[a:b].reshape(params.U_b.shape)
        x, _ = joint_embed(params, y, flat[b:])
        return float(probe @ x)

    f(point)
    x, cache = joint_embed(params, y, feat)
    grads = EmbeddingGrads.zeros_like(params)
    dfeat = joint_embed_backward(params, cache, probe, grads)
    analytic = np.concatenate([grads.U_y.ravel(), grads.U_b.ravel(), dfeat])
    return _compare(f"joint-embed-{mode.value}", seed, analytic, f, point,
                    tolerance, corrupt)


def _check_scene_embed(seed: int, dim: int, tolerance: float,
                       corrupt: str | None) -> BlockResult:
    rng = child_rng(seed, "gc-scene")
    scene_dim = dim + 1
    params = init_embedding_params(rng, dim, 4, dim, scene_dim, EmbedMode.ADDITION)
    scene = rng.normal(size=scene_dim)
    probe = rng.normal(size=dim)
    point = np.concatenate([params.U_I.ravel(), scene])

    def f(flat: Array) -> float:
        params.U_I = flat[:params.U_I.size].reshape(params.U_I.shape)
        x, _ = scene_embed(params, flat[params.U_I.size:])
        return float(probe @ x)

    f(point)
    x, cache = scene_embed(params, scene)
    grads = EmbeddingGrads.zeros_like(params)
    dscene = scene_embed_backward(params, cache, probe, grads)
    analytic = np.concatenate([grads.U_I.ravel(), dscene])
    return _compare("scene-embed", seed, analytic, f, point, tolerance, corrupt)


def _check_lstm(steps: int, seed: int, dim: int, tolerance: float,
                corrupt: str | None) -> BlockResult:
    rng = child_rng(seed, "gc-lstm", steps)
    params = init_lstm_params(rng, dim, dim)
    xs = [rng.normal(size=dim) for _ in range(steps)]
    probes = [rng.normal(size=dim) for _ in range(steps)]
    point = np.concatenate([params.W_x.ravel(), params.W_h.ravel(), params.bias]
                           + [x for x in xs])

    def f(flat: Array) -> float:
        a = params.W_x.size
        b = a + params.W_h.size
        c = b + params.bias.size
        params.W_x = flat[:a].reshape(params.W_x.shape)
        params.W_h = flat[a:b].reshape(params.W_h.shape)
        params.bias = flat[b:c]
        state = LstmState.zeros(dim)
        total = 0.0
        for t in range(steps):
            state, z, _ = lstm_step(params, state, flat[c + t * dim:c + (t + 1) * dim])
            total += float(probes[t] @ z)
        return total

    f(point)
    state = LstmState.zeros(dim)
    caches = []
    for x in xs:
        state, _, cache = lstm_step(params, state, x)
        caches.append(cache)
    grads, dx_list = lstm_backward(params, caches, probes)
    analytic = np.concatenate([grads.W_x.ravel(), grads.W_h.ravel(), grads.bias]
                              + dx_list)
    return _compare(f"lstm-{steps}step", seed, analytic, f, point, tolerance, corrupt)


def _check_classifier(seed: int, dim: int, tolerance: float,
                      corrupt: str | None) -> BlockResult:
    rng = child_rng(seed, "gc-classifier")
    num_ids = 5
    params = init_classifier_params(rng, num_ids, dim)
    z = rng.normal(size=dim)
    target = int(rng.integers(num_ids))
    point = np.concatenate([params.W.ravel(), params.bias, z])

    def f(flat: Array) -> float:
        a = params.W.size
        b = a + params.bias.size
        params.W = flat[:a].reshape(params.W.shape)
        params.bias = flat[a:b]
        return nll(classify(params, flat[b:]), target)

    f(point)
    probs = classify(params, z)
    grads = ClassifierGrads.zeros_like(params)
    dz = classify_backward(params, z, softmax_nll_grad(probs, target), grads)
    analytic = np.concatenate([grads.W.ravel(), grads.bias, dz])
    return _compare("classifier", seed, analytic, f, point, tolerance, corrupt)


def _random_item(rng: np.random.Generator, cfg: ModelConfig,
                 n_instances: int) -> SequenceBatchItem:
    return SequenceBatchItem(
        photo_id="gc",
        scene_feat=rng.normal(size=cfg.scene_feature_dim),
        instance_feats=[rng.normal(size=cfg.feature_dim) for _ in range(n_instances)],
        labels=[int(rng.integers(1, cfg.num_identities + 1)) for _ in range(n_instances)],
        pad_to=n_instances)


def gradcheck_model(params, item: SequenceBatchItem,
                    tolerance: float = TOLERANCE) -> float:
    """Max relative error between backward_train and finite differences of
    the training loss, over all parameters at the given point."""
    theta = flatten_params(params)
    analytic = backward_train(params, forward_train(params, item))

    def f(flat: Array) -> float:
        set_flat(params, flat)
        return forward_train(params, item).loss

    numeric = finite_diff_grad(f, theta.copy())
    set_flat(params, theta)
    return rel_error(analytic, numeric)


def _check_model(mode: EmbedMode, use_scene: bool, n_instances: int, seed: int,
                 dim: int, tolerance: float, corrupt: str | None) -> BlockResult:
    cfg = ModelConfig(num_identities=5, feature_dim=dim, scene_feature_dim=dim,
                      embed_dim=dim, hidden_dim=dim, mode=mode, use_scene=use_scene)
    params = init_model_params(cfg, seed)
    item = _random_item(child_rng(seed, "gc-model", mode.value, int(use_scene),
                                  n_instances), cfg, n_instances)
    name = (f"model-{'scene' if use_scene else 'noscene'}-{mode.value}"
            f"-n{n_instances}")
    err = gradcheck_model(params, item, tolerance)
    if corrupt == name:
        err = max(err, 1.0)
    return BlockResult(name, seed, err, bool(err < tolerance))


def gradcheck_suite(dim: int = 6, seeds=range(3), tolerance: float = TOLERANCE,
                    corrupt: str | None = None) -> list[BlockResult]:
    """Run every block at every seed. `corrupt` names one block whose
    analytic gradient is scaled by 1.01 first — the result must then fail,
    proving the comparison has teeth."""
    results = []
    for seed in seeds:
        for mode in (EmbedMode.ADDITION, EmbedMode.MAX):
            results.append(_check_joint_embed(mode, seed, dim, tolerance, corrupt))
        results.append(_check_scene_embed(seed, dim, tolerance, corrupt))
        for steps in (1, 2, 3, 4):
            results.append(_check_lstm(steps, seed, dim, tolerance, corrupt))
        results.append(_check_classifier(seed, dim, tolerance, corrupt))
        for mode in (EmbedMode.ADDITION, EmbedMode.MAX):
            for use_scene in (True, False):
                for n in (1, 2, 3):
                    results.append(_check_model(mode, use_scene, n, seed, dim,
                                                tolerance, corrupt))
    return results
