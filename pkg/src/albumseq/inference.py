"""Test-time prediction.

Each instance is queried by running the recurrence over orderings that put
the query last, feeding the model its own argmax at every earlier step,
and taking the element-wise max of the query-step distributions across
orderings. The max envelope is deliberately not renormalized — only its
argmax is ever consumed. Also here: the appearance-only linear baseline
(no sequence structure at all) and the region-fusion rules for combining
models trained on different feature regions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import AccuracyCells, PhotoRecord, evaluate
from .layers import (AUX_LABEL, ValidationError, classify, joint_embed,
                     lstm_step, scene_embed)
from .numcore import (AdamState, Array, adam_step, child_rng, derive_seed,
                      one_hot, softmax, softmax_nll_grad)
from .seqmodel import LstmState, ModelParams


@dataclass
class OrderingPlan:
    """Instance orderings for one query: every ordering visits all
    instances and ends at the query. Exhaustive plans enumerate all
    (n-1)! arrangements of the others; sampled plans hold `budget`
    distinct ones."""

    query_index: int
    orderings: list[tuple[int, ...]]
    exhaustive: bool


@dataclass
class PredictionResult:
    photo_id: str
    fused: list[Array]
    labels: list[int]
    orderings_used: list[int]


def make_orderings(n_instances: int, query_index: int, budget: int,
                   seed: int) -> OrderingPlan:
    """Enumerate query-at-end orderings if (n-1)! fits the budget, else
    rejection-sample that many distinct ones."""
    if not 0 <= query_index < n_instances:
        raise ValidationError(f"query index {query_index} outside 0..{n_instances - 1}")
    if budget < 1:
        raise ValidationError("budget must be >= 1")
    others = [i for i in range(n_instances) if i != query_index]
    total = math.factorial(len(others))
    if total <= budget:
        orderings = [perm + (query_index,) for perm in itertools.permutations(others)]
        return OrderingPlan(query_index, orderings, True)

    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()
    orderings = []
    while len(orderings) < budget:
        perm = tuple(int(j) for j in rng.permutation(others)) + (query_index,)
        if perm not in seen:
            seen.add(perm)
            orderings.append(perm)
    return OrderingPlan(query_index, orderings, False)


def run_sequence(params: ModelParams, photo: PhotoRecord, region: str,
                 ordering: tuple[int, ...]) -> Array:
    """Distribution at the final (query) step of one ordering.

    The label fed at each step is the argmax of the previous step's own
    distribution (ties to the lowest index), starting from the auxiliary
    start label; the scene step comes first when the model uses it.
    """
    if sorted(ordering) != list(range(photo.size)):
        raise ValidationError(
            f"ordering {ordering} is not a permutation of photo {photo.photo_id}")
    state = LstmState.zeros(params.config.hidden_dim)
    if params.config.use_scene:
        x0, _ = scene_embed(params.embedding, photo.scene_feat)
        state, _, _ = lstm_step(params.lstm, state, x0)

    y_prev = AUX_LABEL
    probs = None
    for idx in ordering:
        feat = photo.instances[idx].region_feats[region]
        x, _ = joint_embed(params.embedding,
                           one_hot(y_prev, params.config.num_identities + 1), feat)
        state, z, _ = lstm_step(params.lstm, state, x)
        probs = classify(params.classifier, z)
        y_prev = int(np.argmax(probs)) + 1
    return probs


def predict_instance(params: ModelParams, photo: PhotoRecord, region: str,
                     query_index: int, budget: int, seed: int
                     ) -> tuple[Array, int, int]:
    """Max-fuse the query-step distributions over an ordering plan.

    Returns (fused envelope, predicted label, orderings used). The label
    is the argmax of the envelope, which dominates every component
    distribution coordinate-wise.
    """
    plan = make_orderings(photo.size, query_index, budget, seed)
    fused = None
    for ordering in plan.orderings:
        dist = run_sequence(params, photo, region, ordering)
        fused = dist if fused is None else np.maximum(fused, dist)
    return fused, int(np.argmax(fused)) + 1, len(plan.orderings)


def predict_photo(params: ModelParams, photo: PhotoRecord, region: str,
                  budget: int, seed: int) -> PredictionResult:
    """Query every instance independently; per-query ordering sampling is
    keyed by (seed, photo id, instance position) so photo and instance
    processing order are irrelevant."""
    if photo.size < 1:
        raise ValidationError(f"photo {photo.photo_id} has no instances")
    fused_all, labels, counts = [], [], []
    for idx in range(photo.size):
        inst_seed = derive_seed(seed, "orderings", photo.photo_id, idx)
        fused, label, used = predict_instance(params, photo, region, idx, budget, inst_seed)
        fused_all.append(fused)
        labels.append(label)
        counts.append(used)
    return PredictionResult(photo.photo_id, fused_all, labels, counts)


def predict_split(params: ModelParams, photos: list[PhotoRecord], region: str,
                  budget: int, seed: int) -> list[PredictionResult]:
    return [predict_photo(params, photo, region, budget, seed) for photo in photos]


# ---------------------------------------------------------------------------
# appearance-only baseline
# ---------------------------------------------------------------------------

def _instance_matrix(photos: list[PhotoRecord], region: str) -> tuple[Array, Array]:
    feats = np.stack([inst.region_feats[region]
                      for photo in photos for inst in photo.instances])
    labels = np.array([inst.label for photo in photos for inst in photo.instances])
    return feats, labels


def appearance_only_train_eval(train_photos: list[PhotoRecord],
                               eval_photos: list[PhotoRecord],
                               num_identities: int, region: str,
                               learning_rate: float = 1e-3,
                               decay_factor: float = 10.0,
                               decay_epoch: int = 20,
                               total_epochs: int = 80,
                               batch_size: int = 16,
                               seed: int = 0
                               ) -> tuple[AccuracyCells, list[list[int]]]:
    """Linear softmax over instance features alone — the no-context
    control. Weights start at zero (the objective is convex) and train
    under the same Adam schedule as the sequence model; evaluation is
    plain per-instance argmax, ties to the lowest index.
    """
    for photos, side in ((train_photos, "train"), (eval_photos, "eval")):
        for photo in photos:
            for inst in photo.instances:
                if not 1 <= inst.label <= num_identities:
                    raise ValidationError(
                        f"{side} photo {photo.photo_id}: label {inst.label} "
                        f"outside 1..{num_identities}")

    feats, labels = _instance_matrix(train_photos, region)
    dim = feats.shape[1]
    W = np.zeros((num_identities, dim))
    b = np.zeros(num_identities)
    theta = np.concatenate([W.ravel(), b])
    adam = AdamState.init(theta.shape[0], learning_rate)

    for epoch in range(total_epochs):
        adam.learning_rate = (learning_rate if epoch < decay_epoch
                              else learning_rate / decay_factor)
        order = child_rng(seed, "app-order", epoch).permutation(feats.shape[0])
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            W = theta[:num_identities * dim].reshape(num_identities, dim)
            b = theta[num_identities * dim:]
            gW = np.zeros_like(W)
            gb = np.zeros_like(b)
            for j in idx:
                probs = softmax(W @ feats[j] + b)
                dlogits = softmax_nll_grad(probs, int(labels[j]) - 1)
                gW += np.outer(dlogits, feats[j])
                gb += dlogits
            grad = np.concatenate([gW.ravel(), gb]) / len(idx)
            adam_step(adam, theta, grad)

    W = theta[:num_identities * dim].reshape(num_identities, dim)
    b = theta[num_identities * dim:]
    predictions = [[int(np.argmax(W @ inst.region_feats[region] + b)) + 1
                    for inst in photo.instances]
                   for photo in eval_photos]
    return evaluate(eval_photos, predictions), predictions


# ---------------------------------------------------------------------------
# region fusion
# ---------------------------------------------------------------------------

class FusionMode(str, Enum):
    AVG = "avg"
    MAX = "max"


def fuse_regions(distributions: list[Array], mode: FusionMode) -> tuple[Array, int]:
    """Combine per-region distributions for one instance: coordinatewise
    mean (avg) or max (max), then argmax."""
    if len(distributions) < 2:
        raise ValidationError("region fusion needs >= 2 distributions")
    dims = {d.shape[0] for d in distributions}
    if len(dims) != 1:
        raise ValidationError(f"region distributions disagree on vocabulary: {sorted(dims)}")
    stacked = np.stack(distributions)
    fused = stacked.mean(axis=0) if mode is FusionMode.AVG else stacked.max(axis=0)
    return fused, int(np.argmax(fused)) + 1


def predict_split_fused(params_by_region: dict[str, ModelParams],
                        photos: list[PhotoRecord], budget: int, seed: int,
                        mode: FusionMode) -> list[list[int]]:
    """Per-instance labels from several single-region models combined by
    fuse_regions. All regions share each instance's ordering plan, so
    their distributions answer the same queries."""
    if len(params_by_region) < 2:
        raise ValidationError("fused prediction needs >= 2 region models")
    out = []
    for photo in photos:
        row = []
        for idx in range(photo.size):
            inst_seed = derive_seed(seed, "orderings", photo.photo_id, idx)
            dists = [predict_instance(params, photo, region, idx, budget, inst_seed)[0]
                     for region, params in sorted(params_by_region.items())]
            row.append(fuse_regions(dists, mode)[1])
        out.append(row)
    return out
