"""Desk-scale two-step detection experiment on synthetic scenes.

The world replaces a real detector with its calibration-relevant skeleton:
every scene holds one object with a known box and an appearance vector
drawn around a class prototype; a stochastic proposal source perturbs
ground-truth boxes with configurable offset noise, an extra bias and a miss
rate for novel classes; and a proposal's feature is the IoU-weighted mix of
object appearance and a shared background direction plus keyed noise, so a
poorly localized proposal yields a background-contaminated feature. A tiny
linear head (classifier, class-agnostic box regressor, contrastive
projection) is trained by plain full-batch gradient descent.

Training runs the usual two steps: base training on abundant base-class
scenes (which also fits the reusable offset statistics), then balanced
K-shot fine-tuning over all classes. The fine-tuning baseline arm sees only
the biased proposal source; the calibrated arm additionally samples
proposals from the fitted base statistics and applies the auxiliary-head
losses with weight ``lam``. Everything is keyed off (config, seed), so
reports are reproducible byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .geometry import (
    BBox,
    apply_offsets_array,
    encode_offsets_array,
    iou_paired_array,
)
from .geometry import iou as iou_scalar
from .losses import assemble_loss, supcon_grad_arrays, supcon_loss_arrays
from .sampling import SamplerConfig, build_calibrated_set, sample_boxes_for_gt, stream_rng
from .stats import DiagonalGaussian4, OffsetAccumulator

# Regressor outputs are clamped to this range before decoding so a refined
# box always has positive size.
_PRED_CLAMP = (-0.9, 4.0)
_CLS_INIT = 0.4
_REG_INIT = 0.5
_IOU_EDGES = np.linspace(0.0, 1.0, 11)


def derive_seed(seed: int, *parts) -> int:
    """64-bit sub-seed for a labeled purpose under a master seed."""
    label = f"{int(seed)}/" + "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of the synthetic experiment; serializes to a flat JSON object."""

    c_base: int = 6
    c_novel: int = 3
    k_shot: int = 5
    j_per_instance: int = 50
    lam: float = 0.1
    tau: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    epochs_base: int = 60
    epochs_finetune: int = 250
    learning_rate: float = 1.5
    pos_neg_cap: float = 8.0
    contrastive_cap: int = 256
    contrastive_set: str = "sampled"  # "sampled" | "rpn" | "both"
    sampled_in_main: bool = False
    image_w: float = 160.0
    image_h: float = 160.0
    feature_dim: int = 16
    proj_dim: int = 128
    base_per_class: int = 200
    test_per_class: int = 30
    rpn_per_object: int = 8
    rpn_mu: tuple[float, ...] = (0.02, -0.02, 0.06, 0.04)
    rpn_sigma: tuple[float, ...] = (0.08, 0.08, 0.10, 0.10)
    novel_extra_bias: tuple[float, ...] = (0.12, 0.10, -0.06, -0.06)
    miss_rate_novel: float = 0.4
    novel_bias_spread: float = 0.28
    fg_iou: float = 0.5
    bg_iou: float = 0.3
    feature_noise: float = 0.05
    appearance_noise: float = 0.08
    min_box: float = 18.0
    max_box: float = 42.0
    margin: float = 48.0

    def __post_init__(self):
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        for name in ("c_base", "c_novel", "epochs_base", "epochs_finetune",
                     "base_per_class", "test_per_class", "rpn_per_object",
                     "feature_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.j_per_instance < 0:
            raise ValueError("j_per_instance must be >= 0")
        if not 0.0 <= self.miss_rate_novel <= 1.0:
            raise ValueError("miss_rate_novel must be in [0, 1]")
        if self.contrastive_set not in ("sampled", "rpn", "both"):
            raise ValueError(f"unknown contrastive_set {self.contrastive_set!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "rpn_mu", tuple(float(v) for v in self.rpn_mu))
        object.__setattr__(self, "rpn_sigma", tuple(float(v) for v in self.rpn_sigma))
        object.__setattr__(self, "novel_extra_bias", tuple(float(v) for v in self.novel_extra_bias))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ValueError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


@dataclass(frozen=True)
class BiasedRpnModel:
    """Stochastic proposal source with an extra offset bias for novel objects.

    Novel-class instances are proposed around ``mu + novel_extra_bias`` plus
    an instance-specific bias component with per-dimension standard
    deviation ``novel_bias_spread`` — the source systematically mislocates
    novel objects, and how it mislocates them varies from instance to
    instance.
    """

    offset_dist: DiagonalGaussian4
    novel_extra_bias: np.ndarray
    miss_rate_novel: float
    novel_bias_spread: float = 0.0

    def __post_init__(self):
        bias = np.asarray(self.novel_extra_bias, dtype=np.float64).reshape(4)
        if not 0.0 <= self.miss_rate_novel <= 1.0:
            raise ValueError("miss_rate_novel must be in [0, 1]")
        if self.novel_bias_spread < 0.0:
            raise ValueError("novel_bias_spread must be >= 0")
        object.__setattr__(self, "novel_extra_bias", bias)

    def novel_dist(self, instance_bias: np.ndarray | None = None) -> DiagonalGaussian4:
        extra = self.novel_extra_bias if instance_bias is None else self.novel_extra_bias + instance_bias
        return DiagonalGaussian4(self.offset_dist.mu + extra, self.offset_dist.var)


def make_rpn_model(config: ExperimentConfig) -> BiasedRpnModel:
    return BiasedRpnModel(
        DiagonalGaussian4(np.array(config.rpn_mu), np.array(config.rpn_sigma) ** 2),
        np.array(config.novel_extra_bias),
        config.miss_rate_novel,
        config.novel_bias_spread,
    )


@dataclass(frozen=True)
class SceneObject:
    box: BBox
    class_label: int
    appearance: np.ndarray


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    image_w: float
    image_h: float
    objects: tuple[SceneObject, ...]
    background: np.ndarray
    feature_noise: float
    feature_key: int


@dataclass(frozen=True)
class SimDataset:
    base_scenes: tuple[SyntheticScene, ...]
    finetune_scenes: tuple[SyntheticScene, ...]
    test_scenes: tuple[SyntheticScene, ...]
    prototypes: np.ndarray
    background: np.ndarray
    novel_classes: frozenset[int]


def _unit_vectors(n: int, dim: int, rng: np.random.Generator, max_dot: float = 0.3) -> np.ndarray:
    """n unit vectors with pairwise |dot| <= max_dot, by rejection."""
    out: list[np.ndarray] = []
    for _ in range(20000):
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) <= max_dot for u in out):
            out.append(v)
            if len(out) == n:
                return np.stack(out)
    raise RuntimeError(f"could not place {n} separated prototypes in {dim} dims")


def generate_dataset(config: ExperimentConfig, seed: int) -> SimDataset:
    """Base / fine-tuning / test splits with fixed class prototypes.

    Base classes get ``base_per_class`` instances; the balanced fine-tuning
    split holds exactly ``k_shot`` instances for every class (base and
    novel); the test split holds ``test_per_class`` instances per class.
    """
    c_total = config.c_base + config.c_novel
    world_rng = stream_rng(seed, "world")
    vecs = _unit_vectors(c_total + 1, config.feature_dim, world_rng)
    prototypes, background = vecs[:-1], vecs[-1]
    novel = frozenset(range(config.c_base, c_total))

    def make_scene(split: str, label: int, index: int) -> SyntheticScene:
        sid = f"{split}/{label}/{index}"
        rng = stream_rng(seed, "scene", sid)
        w = rng.uniform(config.min_box, config.max_box)
        h = rng.uniform(config.min_box, config.max_box)
        cx = rng.uniform(config.margin, config.image_w - config.margin)
        cy = rng.uniform(config.margin, config.image_h - config.margin)
        appearance = prototypes[label] + config.appearance_noise * rng.normal(size=config.feature_dim)
        obj = SceneObject(BBox(cx, cy, w, h), label, appearance)
        return SyntheticScene(
            sid, config.image_w, config.image_h, (obj,), background,
            config.feature_noise, derive_seed(seed, "feat", sid),
        )

    base_scenes = tuple(
        make_scene("base", c, i)
        for c in range(config.c_base)
        for i in range(config.base_per_class)
    )
    finetune_scenes = tuple(
        make_scene("ft", c, i) for c in range(c_total) for i in range(config.k_shot)
    )
    test_scenes = tuple(
        make_scene("test", c, i) for c in range(c_total) for i in range(config.test_per_class)
    )
    return SimDataset(base_scenes, finetune_scenes, test_scenes, prototypes, background, novel)


def proposal_feature(scene: SyntheticScene, proposal: BBox, obj: SceneObject) -> np.ndarray:
    """IoU-weighted appearance/background mix with keyed noise.

    Deterministic in (scene, proposal): the noise stream is keyed by the
    scene's feature key and the proposal's exact coordinates.
    """
    q = iou_scalar(proposal, obj.box)
    key = (scene.feature_key << 64) | int.from_bytes(
        hashlib.blake2b(proposal.as_array().tobytes(), digest_size=8).digest(), "little"
    )
    rng = np.random.Generator(np.random.Philox(key=key))
    noise = rng.normal(size=obj.appearance.shape[0])
    return q * obj.appearance + (1.0 - q) * scene.background + scene.feature_noise * noise


def _features_for(scene: SyntheticScene, boxes: np.ndarray, obj_idx: np.ndarray) -> np.ndarray:
    gt = np.stack([o.box.as_array() for o in scene.objects])[obj_idx]
    app = np.stack([o.appearance for o in scene.objects])[obj_idx]
    q = iou_paired_array(boxes, gt)[:, None]
    noise = np.empty_like(app)
    for i, row in enumerate(boxes):
        key = (scene.feature_key << 64) | int.from_bytes(
            hashlib.blake2b(np.ascontiguousarray(row).tobytes(), digest_size=8).digest(), "little"
        )
        noise[i] = np.random.Generator(np.random.Philox(key=key)).normal(size=app.shape[1])
    return q * app + (1.0 - q) * scene.background + scene.feature_noise * noise


@dataclass
class TinyRoiHead:
    """Linear classifier + class-agnostic box regressor + contrastive projection."""

    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    w_proj: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.w_cls.T + self.b_cls

    def offsets(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.w_reg.T + self.b_reg

    def embeddings(self, feats: np.ndarray) -> np.ndarray:
        raw = feats @ self.w_proj.T
        norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        return raw / norms

    def copy(self) -> TinyRoiHead:
        return TinyRoiHead(
            self.w_cls.copy(), self.b_cls.copy(),
            self.w_reg.copy(), self.b_reg.copy(), self.w_proj.copy(),
        )


def init_head(config: ExperimentConfig, seed: int) -> TinyRoiHead:
    rng = stream_rng(seed, "head-init")
    c_total = config.c_base + config.c_novel
    d = config.feature_dim
    return TinyRoiHead(
        w_cls=rng.normal(0.0, _CLS_INIT, size=(c_total + 1, d)),
        b_cls=np.zeros(c_total + 1),
        w_reg=rng.normal(0.0, _REG_INIT, size=(4, d)),
        b_reg=np.zeros(4),
        w_proj=rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.proj_dim, d)),
    )


@dataclass
class ProposalSet:
    """Flat arrays describing proposals across scenes: inputs to the head."""

    boxes: np.ndarray       # (n, 4)
    gt_boxes: np.ndarray    # (n, 4) matched ground truths
    labels: np.ndarray      # (n,) object class of the matched gt
    feats: np.ndarray       # (n, d)
    novel: np.ndarray       # (n,) bool
    q: np.ndarray           # (n,) IoU against the matched gt

    @property
    def size(self) -> int:
        return self.boxes.shape[0]


def _empty_set(d: int) -> ProposalSet:
    return ProposalSet(
        np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
        np.zeros((0, d)), np.zeros(0, dtype=bool), np.zeros(0),
    )


def _concat_sets(parts: list[ProposalSet], d: int) -> ProposalSet:
    parts = [p for p in parts if p.size]
    if not parts:
        return _empty_set(d)
    return ProposalSet(
        np.concatenate([p.boxes for p in parts]),
        np.concatenate([p.gt_boxes for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.feats for p in parts]),
        np.concatenate([p.novel for p in parts]),
        np.concatenate([p.q for p in parts]),
    )


def rpn_proposals(
    scene: SyntheticScene,
    model: BiasedRpnModel,
    config: ExperimentConfig,
    novel_classes: frozenset[int],
    seed: int,
    purpose: str,
) -> ProposalSet:
    """Draw biased detector proposals for every (non-missed) object of a scene."""
    rng = stream_rng(seed, purpose, scene.scene_id)
    boxes, idx = [], []
    for i, obj in enumerate(scene.objects):
        is_novel = obj.class_label in novel_classes
        if is_novel and rng.random() < model.miss_rate_novel:
            continue
        if is_novel:
            # instance-specific bias: a fixed property of the object, not of
            # the draw, so fine-tuning cannot see the test instances' biases
            inst = model.novel_bias_spread * stream_rng(
                seed, "novel-bias", scene.scene_id, i
            ).normal(size=4)
            dist = model.novel_dist(inst)
        else:
            dist = model.offset_dist
        b = sample_boxes_for_gt(
            obj.box.as_array(), config.rpn_per_object, dist, rng,
            (scene.image_w, scene.image_h), 16,
        )
        boxes.append(b)
        idx.extend([i] * config.rpn_per_object)
    if not boxes:
        return _empty_set(config.feature_dim)
    all_boxes = np.concatenate(boxes)
    obj_idx = np.asarray(idx, dtype=np.int64)
    gt = np.stack([o.box.as_array() for o in scene.objects])[obj_idx]
    labels = np.asarray([scene.objects[i].class_label for i in obj_idx], dtype=np.int64)
    feats = _features_for(scene, all_boxes, obj_idx)
    novel = np.asarray([scene.objects[i].class_label in novel_classes for i in obj_idx])
    return ProposalSet(all_boxes, gt, labels, feats, novel, iou_paired_array(all_boxes, gt))


def sampled_proposals(
    scene: SyntheticScene,
    stats: DiagonalGaussian4,
    config: ExperimentConfig,
    novel_classes: frozenset[int],
    seed: int,
) -> ProposalSet:
    """Calibrated proposals: J draws from the base statistics per object."""
    if config.j_per_instance == 0:
        return _empty_set(config.feature_dim)
    sampler = SamplerConfig(
        model=stats,
        j_per_instance=config.j_per_instance,
        seed=derive_seed(seed, "ft-sample"),
    )
    gts = [(o.box, o.class_label) for o in scene.objects]
    sampled, _ = build_calibrated_set(
        gts, [], sampler, image_size=(scene.image_w, scene.image_h), image_id=scene.scene_id
    )
    boxes = np.stack([p.box.as_array() for p in sampled])
    obj_idx = np.asarray([p.source_gt for p in sampled], dtype=np.int64)
    gt = np.stack([o.box.as_array() for o in scene.objects])[obj_idx]
    labels = np.asarray([p.class_label for p in sampled], dtype=np.int64)
    feats = _features_for(scene, boxes, obj_idx)
    novel = np.asarray([l in novel_classes for l in labels])
    return ProposalSet(boxes, gt, labels, feats, novel, iou_paired_array(boxes, gt))


# Loss/gradient kernels for the linear head. Cross-entropy is averaged over
# the batch; smooth-L1 is summed over the four components and averaged over
# the batch.

def _cls_loss_grads(feats, cls_targets, w, b):
    logits = feats @ w.T + b
    shift = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shift)
    probs = expl / expl.sum(axis=1, keepdims=True)
    n = feats.shape[0]
    loss = float(-(shift[np.arange(n), cls_targets] - np.log(expl.sum(axis=1))).mean())
    g = probs
    g[np.arange(n), cls_targets] -= 1.0
    g /= n
    return loss, g.T @ feats, g.sum(axis=0)


def _reg_loss_grads(feats, targets, w, b, beta=1.0):
    pred = feats @ w.T + b
    r = pred - targets
    a = np.abs(r)
    loss = float(np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta).sum(axis=1).mean())
    g = np.clip(r / beta, -1.0, 1.0) / feats.shape[0]
    return loss, g.T @ feats, g.sum(axis=0)


def _con_loss_grads(feats, labels, w_proj, tau):
    raw = feats @ w_proj.T
    norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    z = raw / norms
    loss = supcon_loss_arrays(z, labels, tau)
    dz = supcon_grad_arrays(z, labels, tau)
    draw = (dz - (dz * z).sum(axis=1, keepdims=True) * z) / norms
    return loss, draw.T @ feats


def base_train(
    head: TinyRoiHead,
    scenes: tuple[SyntheticScene, ...],
    rpn_model: BiasedRpnModel,
    epochs: int,
    config: ExperimentConfig,
    seed: int,
    novel_classes: frozenset[int] = frozenset(),
) -> tuple[TinyRoiHead, DiagonalGaussian4]:
    """Train classifier + regressor on base scenes; fit the offset statistics.

    The statistics pool the re-encoded offsets of every proposal the source
    produced, independent of the number of epochs.
    """
    head = head.copy()
    pset = _concat_sets(
        [rpn_proposals(s, rpn_model, config, novel_classes, seed, "base-rpn") for s in scenes],
        config.feature_dim,
    )
    if pset.size == 0:
        raise ValueError("base training requires at least one proposal")
    acc = OffsetAccumulator()
    acc.add_many(encode_offsets_array(pset.boxes, pset.gt_boxes))
    stats = acc.finalize()

    bg = head.w_cls.shape[0] - 1
    fg = pset.q >= config.fg_iou
    keep = fg | (pset.q < config.bg_iou)  # drop the ignore band from classification
    cls_feats = pset.feats[keep]
    cls_targets = np.where(fg, pset.labels, bg)[keep]
    reg_targets = encode_offsets_array(pset.gt_boxes[fg], pset.boxes[fg])
    feats_fg = pset.feats[fg]
    if cls_feats.shape[0] == 0:
        raise ValueError("base training requires at least one classifiable proposal")
    lr = config.learning_rate
    for _ in range(epochs):
        cls_loss, dwc, dbc = _cls_loss_grads(cls_feats, cls_targets, head.w_cls, head.b_cls)
        if fg.any():
            reg_loss, dwr, dbr = _reg_loss_grads(feats_fg, reg_targets, head.w_reg, head.b_reg)
        else:
            reg_loss, dwr, dbr = 0.0, 0.0, 0.0
        if not math.isfinite(cls_loss + reg_loss):
            raise RuntimeError(f"base training diverged: cls={cls_loss}, reg={reg_loss}")
        head.w_cls -= lr * dwc
        head.b_cls -= lr * dbc
        head.w_reg -= lr * dwr
        head.b_reg -= lr * dbr
    return head, stats


def _cap_positives(pset: ProposalSet, n_neg: int, cap: float, seed: int) -> ProposalSet:
    """Deterministically subsample sampled positives to cap * max(n_neg, 1)."""
    limit = int(cap * max(n_neg, 1))
    if pset.size <= limit:
        return pset
    keep = np.sort(stream_rng(seed, "pos-cap").choice(pset.size, size=limit, replace=False))
    return ProposalSet(
        pset.boxes[keep], pset.gt_boxes[keep], pset.labels[keep],
        pset.feats[keep], pset.novel[keep], pset.q[keep],
    )


def finetune(
    head: TinyRoiHead,
    scenes: tuple[SyntheticScene, ...],
    rpn_model: BiasedRpnModel,
    base_stats: DiagonalGaussian4,
    pdc_enabled: bool,
    config: ExperimentConfig,
    seed: int,
    novel_classes: frozenset[int],
) -> TinyRoiHead:
    """Balanced fine-tuning; the calibrated branch is active iff ``pdc_enabled``.

    Both arms share the same detector proposals, labels, schedule, and
    randomness; the calibrated arm differs only by the additional sampled
    proposals and the lam-weighted auxiliary-head losses on them. The
    feature generator (scene appearances, prototypes, noise keys) is never
    modified.
    """
    head = head.copy()
    d = config.feature_dim
    bg = head.w_cls.shape[0] - 1
    rpn = _concat_sets(
        [rpn_proposals(s, rpn_model, config, novel_classes, seed, "ft-rpn") for s in scenes], d
    )
    fg = rpn.q >= config.fg_iou
    keep = fg | (rpn.q < config.bg_iou)  # drop the ignore band from classification
    cls_feats = rpn.feats[keep]
    cls_targets = np.where(fg, rpn.labels, bg)[keep]
    reg_targets = encode_offsets_array(rpn.gt_boxes[fg], rpn.boxes[fg])
    feats_fg = rpn.feats[fg]

    sampled = _empty_set(d)
    if pdc_enabled and config.j_per_instance > 0:
        sampled = _concat_sets(
            [sampled_proposals(s, base_stats, config, novel_classes, seed) for s in scenes], d
        )
        n_neg = int((rpn.q < config.bg_iou).sum())
        sampled = _cap_positives(sampled, n_neg, config.pos_neg_cap, seed)
    branch_active = pdc_enabled and sampled.size > 0
    if branch_active:
        sampled_reg_targets = encode_offsets_array(sampled.gt_boxes, sampled.boxes)
        if config.contrastive_set == "sampled":
            con_feats, con_labels = sampled.feats, sampled.labels
        elif config.contrastive_set == "rpn":
            con_feats, con_labels = feats_fg, rpn.labels[fg]
        else:  # both
            con_feats = np.concatenate([sampled.feats, feats_fg])
            con_labels = np.concatenate([sampled.labels, rpn.labels[fg]])
    if config.sampled_in_main and branch_active:
        main_feats = np.concatenate([cls_feats, sampled.feats])
        main_cls_targets = np.concatenate([cls_targets, sampled.labels])
        main_reg_feats = np.concatenate([feats_fg, sampled.feats])
        main_reg_targets = np.concatenate([reg_targets, sampled_reg_targets])
    else:
        main_feats, main_cls_targets = cls_feats, cls_targets
        main_reg_feats, main_reg_targets = feats_fg, reg_targets

    lr = config.learning_rate
    lam = config.lam
    for epoch in range(config.epochs_finetune):
        if main_feats.shape[0]:
            cls_loss, dwc, dbc = _cls_loss_grads(main_feats, main_cls_targets, head.w_cls, head.b_cls)
        else:
            cls_loss, dwc, dbc = 0.0, np.zeros_like(head.w_cls), np.zeros_like(head.b_cls)
        if main_reg_feats.shape[0]:
            reg_loss, dwr, dbr = _reg_loss_grads(main_reg_feats, main_reg_targets, head.w_reg, head.b_reg)
        else:
            reg_loss, dwr, dbr = 0.0, np.zeros_like(head.w_reg), np.zeros_like(head.b_reg)
        base_total = cls_loss + reg_loss
        con = cls_s = reg_s = 0.0
        if branch_active:
            cls_s, dwc_s, dbc_s = _cls_loss_grads(sampled.feats, sampled.labels, head.w_cls, head.b_cls)
            reg_s, dwr_s, dbr_s = _reg_loss_grads(sampled.feats, sampled_reg_targets, head.w_reg, head.b_reg)
            con_sub = _contrastive_subset(con_feats.shape[0], config.contrastive_cap, seed, epoch)
            con, dwp = _con_loss_grads(con_feats[con_sub], con_labels[con_sub], head.w_proj, config.tau)
        breakdown = assemble_loss(base_total, con, cls_s, reg_s, lam)
        if not math.isfinite(breakdown.grand_total):
            raise RuntimeError(f"fine-tuning diverged at epoch {epoch}: {breakdown}")
        head.w_cls -= lr * dwc
        head.b_cls -= lr * dbc
        head.w_reg -= lr * dwr
        head.b_reg -= lr * dbr
        if branch_active and lam != 0.0:
            head.w_cls -= lr * lam * dwc_s
            head.b_cls -= lr * lam * dbc_s
            head.w_reg -= lr * lam * dwr_s
            head.b_reg -= lr * lam * dbr_s
            head.w_proj -= lr * lam * dwp
    return head


def _contrastive_subset(n: int, cap: int, seed: int, epoch: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(stream_rng(seed, "con-sub", epoch).choice(n, size=cap, replace=False))


@dataclass(frozen=True)
class EvalMetrics:
    """Test-set summary for one arm."""

    mean_iou: float
    novel_accuracy: float
    base_accuracy: float
    mmd_novel: float
    iou_hist: diagnostics.Histogram
    precision: diagnostics.PrecisionByBucket
    n_foreground: int
    n_novel_foreground: int


def evaluate(
    head: TinyRoiHead,
    scenes: tuple[SyntheticScene, ...],
    rpn_model: BiasedRpnModel,
    config: ExperimentConfig,
    seed: int,
    base_stats: DiagonalGaussian4,
    novel_classes: frozenset[int],
    oracle_regressor: bool = False,
) -> EvalMetrics:
    """Refine and classify test proposals; report localization and class metrics.

    ``oracle_regressor`` replaces the head's offset predictions by the true
    offsets (an upper-bound check for the refinement path).
    """
    pset = _concat_sets(
        [rpn_proposals(s, rpn_model, config, novel_classes, seed, "eval-rpn") for s in scenes],
        config.feature_dim,
    )
    if pset.size == 0:
        raise ValueError("evaluation produced no proposals")
    if oracle_regressor:
        pred = encode_offsets_array(pset.gt_boxes, pset.boxes)
    else:
        pred = head.offsets(pset.feats)
    pred = np.clip(pred, [-np.inf, -np.inf, _PRED_CLAMP[0], _PRED_CLAMP[0]],
                   [np.inf, np.inf, _PRED_CLAMP[1], _PRED_CLAMP[1]])
    refined = apply_offsets_array(pset.boxes, pred)
    refined_iou = iou_paired_array(refined, pset.gt_boxes)
    pred_labels = np.argmax(head.logits(pset.feats), axis=1)

    fg = pset.q >= config.fg_iou
    novel_fg = fg & pset.novel
    base_fg = fg & ~pset.novel
    mean_iou = float(refined_iou.mean())
    novel_acc = float((pred_labels[novel_fg] == pset.labels[novel_fg]).mean()) if novel_fg.any() else 0.0
    base_acc = float((pred_labels[base_fg] == pset.labels[base_fg]).mean()) if base_fg.any() else 0.0

    hist = diagnostics.histogram(np.clip(refined_iou, 0.0, 1.0), _IOU_EDGES)
    gts = [(i, BBox.from_array(pset.gt_boxes[i]), int(pset.labels[i])) for i in np.flatnonzero(pset.novel)]
    preds = [(BBox.from_array(pset.boxes[i]), int(pred_labels[i])) for i in np.flatnonzero(pset.novel)]
    matching = [i for i in np.flatnonzero(pset.novel)]
    precision = diagnostics.precision_by_iou(preds, gts, matching, _IOU_EDGES)

    # kernel MMD between refined foreground novel offsets and draws from the
    # base statistics: sensitive to both mean shift and spread
    novel_offsets = encode_offsets_array(refined[novel_fg], pset.gt_boxes[novel_fg])
    ref_rng = stream_rng(seed, "mmd-ref")
    ref_sample = ref_rng.normal(base_stats.mu, np.sqrt(base_stats.var), size=(2048, 4))
    mmd_novel = diagnostics.mmd_rbf(novel_offsets, ref_sample) if novel_offsets.shape[0] else float("nan")

    return EvalMetrics(
        mean_iou, novel_acc, base_acc, mmd_novel, hist, precision,
        int(fg.sum()), int(novel_fg.sum()),
    )


@dataclass(frozen=True)
class SeedResult:
    seed: int
    baseline: EvalMetrics
    pdc: EvalMetrics


@dataclass(frozen=True)
class ExperimentReport:
    config_hash: str
    results: tuple[SeedResult, ...]
    iou_wins: int
    acc_wins: int
    mmd_wins: int
    mean_iou: tuple[float, float]       # (baseline, pdc)
    mean_novel_acc: tuple[float, float]
    mean_mmd: tuple[float, float]
    output_dir: Path | None

    @property
    def n_seeds(self) -> int:
        return len(self.results)


def run_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    """Run both arms for one seed from a shared base-trained head."""
    ds = generate_dataset(config, seed)
    rpn_model = make_rpn_model(config)
    head0 = init_head(config, seed)
    base_head, stats = base_train(
        head0, ds.base_scenes, rpn_model, config.epochs_base, config, seed, ds.novel_classes
    )
    arms = {}
    for name, enabled in (("baseline", False), ("pdc", True)):
        tuned = finetune(
            base_head, ds.finetune_scenes, rpn_model, stats, enabled, config, seed, ds.novel_classes
        )
        arms[name] = evaluate(
            tuned, ds.test_scenes, rpn_model, config, seed, stats, ds.novel_classes
        )
    return SeedResult(seed, arms["baseline"], arms["pdc"])


def run_experiment(config: ExperimentConfig, out_root: Path | str | None = None) -> ExperimentReport:
    """Paired baseline-vs-calibrated comparison across all configured seeds.

    With ``out_root`` set, CSV and SVG reports are written under
    ``out_root/<config hash>/``.
    """
    results = tuple(run_seed(config, s) for s in config.seeds)
    iou_wins = sum(r.pdc.mean_iou > r.baseline.mean_iou for r in results)
    acc_wins = sum(r.pdc.novel_accuracy > r.baseline.novel_accuracy for r in results)
    mmd_wins = sum(r.pdc.mmd_novel < r.baseline.mmd_novel for r in results)
    n = max(len(results), 1)
    report = ExperimentReport(
        config_hash=config.config_hash(),
        results=results,
        iou_wins=iou_wins,
        acc_wins=acc_wins,
        mmd_wins=mmd_wins,
        mean_iou=(
            sum(r.baseline.mean_iou for r in results) / n,
            sum(r.pdc.mean_iou for r in results) / n,
        ),
        mean_novel_acc=(
            sum(r.baseline.novel_accuracy for r in results) / n,
            sum(r.pdc.novel_accuracy for r in results) / n,
        ),
        mean_mmd=(
            sum(r.baseline.mmd_novel for r in results) / n,
            sum(r.pdc.mmd_novel for r in results) / n,
        ),
        output_dir=None,
    )
    if out_root is not None:
        outdir = Path(out_root) / config.config_hash()
        write_report(report, config, outdir)
        report = dataclasses.replace(report, output_dir=outdir)
    return report


def _sum_histograms(hists: list[diagnostics.Histogram]) -> diagnostics.Histogram:
    edges = hists[0].edges
    counts = np.sum([h.counts for h in hists], axis=0)
    return diagnostics.Histogram(edges, counts, int(counts.sum()))


def _sum_precisions(reports: list[diagnostics.PrecisionByBucket]) -> diagnostics.PrecisionByBucket:
    first = reports[0].buckets
    buckets = []
    for i, proto in enumerate(first):
        n = sum(r.buckets[i].n_boxes for r in reports)
        c = sum(r.buckets[i].n_correct for r in reports)
        buckets.append(
            diagnostics.PrecisionBucket(proto.lo, proto.hi, n, c, (c / n) if n else None)
        )
    return diagnostics.PrecisionByBucket(tuple(buckets))


def write_report(report: ExperimentReport, config: ExperimentConfig, outdir: Path) -> None:
    """Emit config echo, per-seed CSV, summary CSV, and histogram CSV/SVG files."""
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(config.to_json() + "\n")

    lines = ["seed,arm,mean_iou,novel_accuracy,base_accuracy,mmd_novel,n_foreground,n_novel_foreground"]
    for r in report.results:
        for arm, m in (("baseline", r.baseline), ("pdc", r.pdc)):
            lines.append(
                f"{r.seed},{arm},{m.mean_iou!r},{m.novel_accuracy!r},{m.base_accuracy!r},"
                f"{m.mmd_novel!r},{m.n_foreground},{m.n_novel_foreground}"
            )
    (outdir / "per_seed.csv").write_text("\n".join(lines) + "\n")

    n = report.n_seeds
    summary = [
        "metric,baseline_mean,pdc_mean,pdc_wins,n_seeds",
        f"mean_iou,{report.mean_iou[0]!r},{report.mean_iou[1]!r},{report.iou_wins},{n}",
        f"novel_accuracy,{report.mean_novel_acc[0]!r},{report.mean_novel_acc[1]!r},{report.acc_wins},{n}",
        f"mmd_novel,{report.mean_mmd[0]!r},{report.mean_mmd[1]!r},{report.mmd_wins},{n}",
    ]
    (outdir / "summary.csv").write_text("\n".join(summary) + "\n")

    for arm in ("baseline", "pdc"):
        hist = _sum_histograms([getattr(r, arm).iou_hist for r in report.results])
        prec = _sum_precisions([getattr(r, arm).precision for r in report.results])
        (outdir / f"iou_hist_{arm}.csv").write_text(diagnostics.histogram_to_csv(hist))
        (outdir / f"iou_hist_{arm}.svg").write_text(
            diagnostics.histogram_to_svg(hist, f"refined-box IoU ({arm})")
        )
        (outdir / f"precision_by_iou_{arm}.csv").write_text(diagnostics.precision_to_csv(prec))
