"""Dataset model, on-disk formats, evaluation metrics, and the synthetic
album generator.

Datasets are line-delimited JSON, one photo per line, next to a vocabulary
file with one identity name per line (1-indexed; index 0 is the implicit
start label). JSON floats are written with shortest-round-trip precision,
so save -> load reproduces every feature bit-exactly.

The generator builds a world where identities cluster into groups that
tend to be photographed together, and groups favor particular scenes; the
two tendencies are controlled independently, which is what lets context
effects be measured against a no-context control.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import Array, child_rng


class DatasetError(ValueError):
    """Malformed dataset or vocabulary content."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    instance_id: str
    label: int
    region_feats: dict[str, Array]


@dataclass
class PhotoRecord:
    photo_id: str
    scene_feat: Array
    instances: list[Instance]

    @property
    def size(self) -> int:
        return len(self.instances)


@dataclass
class LabelVocabulary:
    """Identity names; label i is names[i - 1]. Index 0 is reserved for the
    auxiliary start label and has no name."""

    names: list[str]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise DatasetError("identity names must be unique")

    @property
    def num_identities(self) -> int:
        return len(self.names)

    def name_of(self, label: int) -> str:
        if not 1 <= label <= len(self.names):
            raise DatasetError(f"label {label} outside 1..{len(self.names)}")
        return self.names[label - 1]


@dataclass
class SplitPair:
    set_0: list[PhotoRecord]
    set_1: list[PhotoRecord]

    def __post_init__(self) -> None:
        ids_0 = {p.photo_id for p in self.set_0}
        ids_1 = {p.photo_id for p in self.set_1}
        clash = ids_0 & ids_1
        if clash:
            raise DatasetError(f"photo ids shared across splits: {sorted(clash)[:3]}")


def region_names(photos: list[PhotoRecord]) -> list[str]:
    return sorted(photos[0].instances[0].region_feats) if photos else []


def sole_region(photos: list[PhotoRecord]) -> str:
    names = region_names(photos)
    if len(names) != 1:
        raise DatasetError(f"dataset has regions {names}; specify which one to use")
    return names[0]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _photo_to_json(photo: PhotoRecord) -> dict:
    return {"photo_id": photo.photo_id,
            "scene_feat": photo.scene_feat.tolist(),
            "instances": [{"instance_id": inst.instance_id,
                           "label": inst.label,
                           "regions": {r: v.tolist() for r, v in sorted(inst.region_feats.items())}}
                          for inst in photo.instances]}


def write_dataset(fh, photos: list[PhotoRecord]) -> None:
    for photo in photos:
        fh.write(json.dumps(_photo_to_json(photo), sort_keys=True))
        fh.write("\n")


def save_dataset(path, photos: list[PhotoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_dataset(fh, photos)


def save_vocabulary(path, vocab: LabelVocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in vocab.names:
            fh.write(name + "\n")


def load_vocabulary(path) -> LabelVocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if not names:
        raise DatasetError(f"{path}: vocabulary file is empty")
    return LabelVocabulary(names)


def load_dataset(path, vocab_path) -> tuple[list[PhotoRecord], LabelVocabulary]:
    """Parse and validate a dataset; every error names the offending line.

    Checks per photo: at least one instance, labels inside the vocabulary,
    a consistent region-name set, and per-region feature dimensions that
    agree across the whole file (scene dimension likewise).
    """
    vocab = load_vocabulary(vocab_path)
    photos: list[PhotoRecord] = []
    region_set: set[str] | None = None
    region_dims: dict[str, int] = {}
    scene_dim: int | None = None

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                photo_id = raw["photo_id"]
                scene_feat = np.asarray(raw["scene_feat"], dtype=np.float64)
                raw_instances = raw["instances"]
            except (KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: missing field ({exc})") from exc

            if scene_dim is None:
                scene_dim = scene_feat.shape[0]
            elif scene_feat.shape[0] != scene_dim:
                raise DatasetError(
                    f"{path}:{lineno}: photo {photo_id} scene dim {scene_feat.shape[0]} != {scene_dim}")
            if not np.all(np.isfinite(scene_feat)):
                raise DatasetError(f"{path}:{lineno}: photo {photo_id} has non-finite scene feature")
            if not raw_instances:
                raise DatasetError(f"{path}:{lineno}: photo {photo_id} has no instances")

            instances = []
            for raw_inst in raw_instances:
                label = int(raw_inst["label"])
                if not 1 <= label <= vocab.num_identities:
                    raise DatasetError(
                        f"{path}:{lineno}: photo {photo_id} label {label} not in vocabulary")
                feats = {r: np.asarray(v, dtype=np.float64)
                         for r, v in raw_inst["regions"].items()}
                if region_set is None:
                    region_set = set(feats)
                elif set(feats) != region_set:
                    raise DatasetError(
                        f"{path}:{lineno}: photo {photo_id} regions {sorted(feats)} != {sorted(region_set)}")
                for r, v in feats.items():
                    if v.ndim != 1 or not np.all(np.isfinite(v)):
                        raise DatasetError(
                            f"{path}:{lineno}: photo {photo_id} region {r} feature malformed")
                    if r not in region_dims:
                        region_dims[r] = v.shape[0]
                    elif v.shape[0] != region_dims[r]:
                        raise DatasetError(
                            f"{path}:{lineno}: photo {photo_id} region {r} dim {v.shape[0]} "
                            f"!= {region_dims[r]}")
                instances.append(Instance(raw_inst["instance_id"], label, feats))
            photos.append(PhotoRecord(photo_id, scene_feat, instances))

    if not photos:
        raise DatasetError(f"{path}: dataset file is empty")
    return photos, vocab


def concat_regions(photo: PhotoRecord, region_order: list[str]) -> PhotoRecord:
    """Replace per-region features with one 'concat' region, concatenated
    in the given order. Feeds a single model trained on joined regions."""
    instances = []
    for inst in photo.instances:
        missing = [r for r in region_order if r not in inst.region_feats]
        if missing:
            raise DatasetError(f"instance {inst.instance_id} lacks regions {missing}")
        joined = np.concatenate([inst.region_feats[r] for r in region_order])
        instances.append(Instance(inst.instance_id, inst.label, {"concat": joined}))
    return PhotoRecord(photo.photo_id, photo.scene_feat, instances)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    """World parameters for the synthetic album generator.

    Identity prototypes come in confusable clusters: consecutive labels
    (cluster_size of them) share a random base point and sit pairwise
    `cluster_separation` apart around it, while distinct clusters are far
    apart (prototype_scale, with a guaranteed margin). Appearance accuracy
    is therefore capped by within-cluster overlap — a property of the
    world, not of any model — and the cap moves with noise_scale.
    Cluster-mates always belong to different groups, so co-occurrence and
    scene structure carry exactly the signal appearance lacks, and a
    misrecognized neighbor scatters across groups instead of always
    pointing at one wrong group.

    Defaults are the standard benchmark world: 40 identities in 8 groups,
    strong within-group co-occurrence, no scene affinity, and noise set
    so an appearance-only linear classifier lands near 70% overall.
    """

    num_identities: int = 40
    num_groups: int = 8
    num_scenes: int = 4
    feature_dim: int = 8
    scene_feature_dim: int = 8
    prototype_scale: float = 2.0
    cluster_size: int = 4
    cluster_separation: float = 1.5
    noise_scale: float = 0.6
    co_occurrence_strength: float = 0.9
    scene_affinity_strength: float = 0.0
    photos_per_split: int = 720
    instances_min: int = 1
    instances_max: int = 4
    regions: tuple[str, ...] = ("head",)
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 2 or self.feature_dim < 2 or self.scene_feature_dim < 2:
            raise DatasetError("need >= 2 identities and feature dims >= 2")
        if not 1 <= self.num_groups <= self.num_identities:
            raise DatasetError("num_groups must be in 1..num_identities")
        if self.num_scenes < 1:
            raise DatasetError("num_scenes must be >= 1")
        if not (0.0 <= self.co_occurrence_strength <= 1.0
                and 0.0 <= self.scene_affinity_strength <= 1.0):
            raise DatasetError("strengths must lie in [0, 1]")
        if self.photos_per_split < 1:
            raise DatasetError("photos_per_split must be >= 1")
        if not 1 <= self.instances_min <= self.instances_max:
            raise DatasetError("need 1 <= instances_min <= instances_max")
        if self.instances_max > self.num_identities:
            raise DatasetError("instances_max cannot exceed num_identities")
        if not self.regions or len(set(self.regions)) != len(self.regions):
            raise DatasetError("regions must be non-empty and unique")
        min_group = min(len(m) for m in _group_members(self.num_identities, self.num_groups))
        if self.co_occurrence_strength == 1.0 and self.instances_max > min_group:
            raise DatasetError(
                f"co_occurrence_strength 1.0 needs instances_max <= smallest group ({min_group})")
        if self.noise_scale < 0 or self.prototype_scale <= 0 or self.cluster_separation < 0:
            raise DatasetError(
                "prototype_scale must be > 0; noise_scale and cluster_separation >= 0")
        if self.cluster_size < 1:
            raise DatasetError("cluster_size must be >= 1")
        if self.cluster_size > 1 and self.cluster_size > self.feature_dim:
            raise DatasetError("cluster_size cannot exceed feature_dim")
        if self.seed < 0:
            raise DatasetError("seed must be >= 0")


def _group_members(num_identities: int, num_groups: int) -> list[list[int]]:
    members: list[list[int]] = [[] for _ in range(num_groups)]
    for label in range(1, num_identities + 1):
        members[(label - 1) % num_groups].append(label)
    return members


def confusable_cluster(label: int, num_identities: int, cluster_size: int) -> list[int]:
    """All labels sharing this one's prototype base point (itself
    included). Clusters are consecutive label blocks: (1..m), (m+1..2m),
    ...; the last block may be short."""
    first = ((label - 1) // cluster_size) * cluster_size + 1
    return list(range(first, min(first + cluster_size, num_identities + 1)))


def _spread_points(rng: np.random.Generator, count: int, dim: int, scale: float,
                   min_distance: float) -> list[Array]:
    """Gaussian draws thinned so no two points sit closer than
    min_distance — keeps unrelated prototypes out of each other's noise."""
    points: list[Array] = []
    attempts = 0
    while len(points) < count:
        candidate = rng.normal(0.0, scale, size=dim)
        if all(np.linalg.norm(candidate - p) >= min_distance for p in points):
            points.append(candidate)
        else:
            attempts += 1
            if attempts > 1000 * count:
                raise DatasetError(
                    "could not place identity prototypes far enough apart; "
                    "increase prototype_scale or feature_dim, or lower noise_scale")
    return points


def _clustered_prototypes(rng: np.random.Generator, num_identities: int, dim: int,
                          scale: float, cluster_size: int, separation: float,
                          noise: float) -> Array:
    """Row `label` is that identity's prototype (row 0 unused).

    Cluster members sit at the vertices of a regular simplex around a
    shared base point, pairwise `separation` apart (orthonormal offset
    directions scaled by separation/sqrt(2)); base points keep at least
    five noise deviations plus the cluster diameter between them, so the
    only systematic confusions are within clusters."""
    out = np.zeros((num_identities + 1, dim))
    n_clusters = (num_identities + cluster_size - 1) // cluster_size
    margin = 5.0 * noise + 2.0 * separation / np.sqrt(2.0)
    bases = _spread_points(rng, n_clusters, dim, scale, margin)
    for c in range(n_clusters):
        members = confusable_cluster(c * cluster_size + 1, num_identities, cluster_size)
        raw = rng.normal(size=(dim, len(members)))
        q, _ = np.linalg.qr(raw)
        offsets = q.T * (separation / np.sqrt(2.0))
        offsets -= offsets.mean(axis=0)
        for k, label in enumerate(members):
            out[label] = bases[c] + offsets[k]
    return out


def _draw_photo_labels(rng: np.random.Generator, cfg: GenConfig, group: list[int]) -> list[int]:
    n = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    used: set[int] = set()
    labels: list[int] = []
    all_labels = range(1, cfg.num_identities + 1)
    for _ in range(n):
        pool = [m for m in group if m not in used]
        if not pool or rng.random() >= cfg.co_occurrence_strength:
            pool = [m for m in all_labels if m not in used]
        labels.append(int(pool[rng.integers(len(pool))]))
        used.add(labels[-1])
    return labels


def generate_synthetic(cfg: GenConfig) -> tuple[SplitPair, LabelVocabulary, dict]:
    """Draw both evaluation splits from one world.

    Per photo: a scene, then a group (biased toward the scene's affine
    groups by scene_affinity_strength), then identities (biased toward the
    group by co_occurrence_strength, never repeating within the photo).
    Instance features are per-region identity prototypes plus Gaussian
    noise; the scene feature is the scene prototype plus the same noise.
    """
    cfg.validate()
    members = _group_members(cfg.num_identities, cfg.num_groups)
    affinity_scene = [g % cfg.num_scenes for g in range(cfg.num_groups)]
    groups_for_scene = [[g for g in range(cfg.num_groups) if affinity_scene[g] == s]
                        for s in range(cfg.num_scenes)]

    prototypes = {r: _clustered_prototypes(child_rng(cfg.seed, "prototypes", r),
                                           cfg.num_identities, cfg.feature_dim,
                                           cfg.prototype_scale, cfg.cluster_size,
                                           cfg.cluster_separation, cfg.noise_scale)
                  for r in cfg.regions}
    scene_prototypes = child_rng(cfg.seed, "scene-prototypes").normal(
        0.0, cfg.prototype_scale, size=(cfg.num_scenes, cfg.scene_feature_dim))

    splits: list[list[PhotoRecord]] = []
    for split in (0, 1):
        photos = []
        for p in range(cfg.photos_per_split):
            rng = child_rng(cfg.seed, "photo", split, p)
            scene = int(rng.integers(cfg.num_scenes))
            candidates = groups_for_scene[scene]
            if candidates and rng.random() < cfg.scene_affinity_strength:
                group = candidates[rng.integers(len(candidates))]
            else:
                group = int(rng.integers(cfg.num_groups))
            labels = _draw_photo_labels(rng, cfg, members[group])

            photo_id = f"s{split}_p{p:05d}"
            scene_feat = scene_prototypes[scene] + rng.normal(
                0.0, cfg.noise_scale, size=cfg.scene_feature_dim)
            instances = []
            for k, label in enumerate(labels):
                feats = {r: prototypes[r][label] + rng.normal(0.0, cfg.noise_scale,
                                                              size=cfg.feature_dim)
                         for r in cfg.regions}
                instances.append(Instance(f"{photo_id}_i{k}", label, feats))
            photos.append(PhotoRecord(photo_id, scene_feat, instances))
        splits.append(photos)

    vocab = LabelVocabulary([f"person_{i:03d}" for i in range(1, cfg.num_identities + 1)])
    meta = {"config": config_to_dict(cfg),
            "group_of_label": {str(label): (label - 1) % cfg.num_groups
                               for label in range(1, cfg.num_identities + 1)},
            "affinity_scene_of_group": affinity_scene,
            "confusable_cluster": {str(label): confusable_cluster(
                                       label, cfg.num_identities, cfg.cluster_size)
                                   for label in range(1, cfg.num_identities + 1)}}
    return SplitPair(splits[0], splits[1]), vocab, meta


def config_to_dict(cfg: GenConfig) -> dict:
    d = cfg.__dict__.copy()
    d["regions"] = list(cfg.regions)
    return d


def split_stats(photos: list[PhotoRecord]) -> dict:
    """Photo/instance counts, with instances from multi-instance photos
    broken out."""
    instances = sum(p.size for p in photos)
    multi = sum(p.size for p in photos if p.size >= 2)
    return {"photos": len(photos),
            "instances": instances,
            "multi_instances": multi,
            "identities": len({inst.label for p in photos for inst in p.instances})}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class AccuracyCells:
    """Accuracy over all instances, over instances in multi-instance
    photos, and over instances in single-instance photos. A cell with no
    instances is None, and its count is 0."""

    acc_overall: float
    acc_multi: float | None
    acc_single: float | None
    n_overall: int
    n_multi: int
    n_single: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyCells":
        return cls(**d)


@dataclass
class MetricsReport:
    """The two-direction protocol: train on one split, evaluate on the
    other, both ways, plus the arithmetic mean of the two directions."""

    direction_0_1: AccuracyCells
    direction_1_0: AccuracyCells
    mean: AccuracyCells

    def to_dict(self) -> dict:
        return {"direction_0_1": self.direction_0_1.to_dict(),
                "direction_1_0": self.direction_1_0.to_dict(),
                "mean": self.mean.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(AccuracyCells.from_dict(d["direction_0_1"]),
                   AccuracyCells.from_dict(d["direction_1_0"]),
                   AccuracyCells.from_dict(d["mean"]))


def evaluate(photos: list[PhotoRecord], predicted_labels: list[list[int]]) -> AccuracyCells:
    """Score per-instance predictions against the photos' true labels.

    predicted_labels[i][k] is the prediction for instance k of photos[i];
    every instance must be covered exactly once.
    """
    if len(photos) != len(predicted_labels):
        raise DatasetError(f"{len(predicted_labels)} prediction rows for {len(photos)} photos")
    correct = {"multi": 0, "single": 0}
    total = {"multi": 0, "single": 0}
    for photo, preds in zip(photos, predicted_labels):
        if len(preds) != photo.size:
            raise DatasetError(
                f"photo {photo.photo_id}: {len(preds)} predictions for {photo.size} instances")
        kind = "multi" if photo.size >= 2 else "single"
        for inst, pred in zip(photo.instances, preds):
            total[kind] += 1
            correct[kind] += int(pred == inst.label)

    n_overall = total["multi"] + total["single"]
    if n_overall == 0:
        raise DatasetError("no instances to evaluate")
    acc = lambda kind: (correct[kind] / total[kind]) if total[kind] else None
    return AccuracyCells(
        acc_overall=(correct["multi"] + correct["single"]) / n_overall,
        acc_multi=acc("multi"),
        acc_single=acc("single"),
        n_overall=n_overall,
        n_multi=total["multi"],
        n_single=total["single"])


def _mean_cell(a: float | None, b: float | None) -> float | None:
    if a is None:
        return b
    if b is None:
        return a
    return (a + b) / 2.0


def protocol_report(direction_0_1: AccuracyCells, direction_1_0: AccuracyCells) -> MetricsReport:
    mean = AccuracyCells(
        acc_overall=(direction_0_1.acc_overall + direction_1_0.acc_overall) / 2.0,
        acc_multi=_mean_cell(direction_0_1.acc_multi, direction_1_0.acc_multi),
        acc_single=_mean_cell(direction_0_1.acc_single, direction_1_0.acc_single),
        n_overall=direction_0_1.n_overall + direction_1_0.n_overall,
        n_multi=direction_0_1.n_multi + direction_1_0.n_multi,
        n_single=direction_0_1.n_single + direction_1_0.n_single)
    return MetricsReport(direction_0_1, direction_1_0, mean)
