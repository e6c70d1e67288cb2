"""Shared encoder with supervised, rotation and BYOL heads, and their losses.

The online branch is encoder -> {classifier, rotation head, projector ->
predictor}. The target branch (encoder and projector copies) is updated only
by :func:`ema_update` and never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import serialize
from . import tensor as T
from .augment import AugmentSpec, augment_batch, rotate_batch, sample_rotations
from .nn import MLP, ConvEncoder, EncoderConfig, Linear, MlpConfig, Module
from .rng import stream
from .tensor import Tensor

__all__ = [
    "TASKS",
    "VIEW_POLICIES",
    "parse_tasks",
    "parse_view_policy",
    "HeadConfig",
    "MultiTaskModel",
    "TaskLossSet",
    "AugmentSet",
    "Views",
    "supervised_loss",
    "rotation_loss",
    "byol_pair_loss",
    "byol_loss",
    "ema_update",
    "make_views",
    "task_losses",
    "total_loss",
    "CheckpointError",
]

TASKS = ("supervised", "rotation", "byol")
VIEW_POLICIES = ("separate_views", "shared_views", "two_view_supervised")

_TASK_ALIASES = {"sup": "supervised", "supervised": "supervised", "rot": "rotation",
                 "rotation": "rotation", "byol": "byol"}
_POLICY_ALIASES = {"separate": "separate_views", "separate_views": "separate_views",
                   "shared": "shared_views", "shared_views": "shared_views",
                   "two_view": "two_view_supervised", "two_view_supervised": "two_view_supervised"}


def parse_tasks(tasks: str | Iterable[str]) -> frozenset[str]:
    """``"sup,byol"`` or an iterable of names -> canonical task set."""
    if isinstance(tasks, str):
        tasks = [t for t in tasks.replace("+", ",").split(",") if t.strip()]
    out = set()
    for t in tasks:
        key = t.strip().lower()
        if key not in _TASK_ALIASES:
            raise ValueError(f"unknown task {t!r}; expected one of sup, rot, byol")
        out.add(_TASK_ALIASES[key])
    if not out:
        raise ValueError("at least one task must be active")
    return frozenset(out)


def parse_view_policy(name: str) -> str:
    try:
        return _POLICY_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown view policy {name!r}; expected separate, shared or two_view") from None


class CheckpointError(ValueError):
    """Checkpoint does not match the model it is loaded into."""


@dataclass(frozen=True)
class HeadConfig:
    rotation: MlpConfig
    projector: MlpConfig
    predictor: MlpConfig

    @classmethod
    def default(cls, embedding_dim: int, projector_hidden: int | None = None,
                projection_dim: int | None = None) -> "HeadConfig":
        """Head sizes scaled from the embedding size.

        Rotation: E -> E (BN, ReLU) -> E -> 4. Projector and predictor:
        linear -> BN -> ReLU -> linear, hidden ``2E`` and output ``E // 4``
        (at least 16) unless given.
        """
        e = embedding_dim
        hidden = projector_hidden or 2 * e
        proj = projection_dim or max(e // 4, 16)
        return cls(
            rotation=MlpConfig.chain([e, e, e, 4], linear_only=(1,)),
            projector=MlpConfig.chain([e, hidden, proj]),
            predictor=MlpConfig.chain([proj, hidden, proj]),
        )


class MultiTaskModel(Module):
    def __init__(
        self,
        encoder_config: EncoderConfig,
        num_classes: int,
        heads: HeadConfig | None = None,
        tau: float = 0.99,
        symmetric_byol: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if not 0.0 <= tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {tau}")
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        heads = heads or HeadConfig.default(encoder_config.embedding_dim)
        e = encoder_config.embedding_dim
        if heads.rotation.in_dim != e or heads.projector.in_dim != e:
            raise ValueError("head input sizes must equal the embedding size")
        if heads.rotation.out_dim != 4:
            raise ValueError("rotation head must output 4 logits")
        if heads.predictor.in_dim != heads.projector.out_dim or heads.predictor.out_dim != heads.projector.out_dim:
            raise ValueError("predictor must map projection space to itself")
        rng = stream(seed, "init")
        self.encoder_config = encoder_config
        self.head_config = heads
        self.num_classes = num_classes
        self.tau = float(tau)
        self.symmetric_byol = symmetric_byol
        self.step = 0
        self.encoder = ConvEncoder(encoder_config, rng)
        self.classifier = Linear(e, num_classes, rng)
        self.rotation_head = MLP(heads.rotation, rng)
        self.projector = MLP(heads.projector, rng)
        self.predictor = MLP(heads.predictor, rng)
        self.target_encoder = self.encoder.clone().requires_grad_(False)
        self.target_projector = self.projector.clone().requires_grad_(False)
        self.name_parameters()

    def task_modules(self, tasks: Iterable[str]) -> list[str]:
        tasks = set(tasks)
        mods = ["encoder"]
        if "supervised" in tasks:
            mods.append("classifier")
        if "rotation" in tasks:
            mods.append("rotation_head")
        if "byol" in tasks:
            mods += ["projector", "predictor"]
        return mods

    def online_parameters(self, tasks: Iterable[str] = TASKS) -> dict[str, T.Parameter]:
        """Trainable parameters used by ``tasks``, in a fixed order."""
        out: dict[str, T.Parameter] = {}
        for mod in self.task_modules(tasks):
            out.update(getattr(self, mod).named_parameters(mod + "."))
        return out

    def target_parameters(self) -> dict[str, T.Parameter]:
        out = dict(self.target_encoder.named_parameters("target_encoder."))
        out.update(self.target_projector.named_parameters("target_projector."))
        return out

    def embed(self, images, training: bool = True) -> Tensor:
        return self.encoder(images, training)

    # -- checkpoints -------------------------------------------------------
    def checkpoint_entries(self) -> dict[str, np.ndarray]:
        entries = dict(self.state_dict())
        entries["meta.tau"] = np.float32(self.tau)
        entries["meta.step"] = np.float32(self.step)
        return entries

    def save_checkpoint(self, path) -> None:
        serialize.save(path, self.checkpoint_entries())

    def load_checkpoint(self, path_or_entries) -> None:
        entries = path_or_entries if isinstance(path_or_entries, dict) else serialize.load(path_or_entries)
        own = self.state_dict()
        missing = sorted(set(own) - set(entries))
        extra = sorted(set(entries) - set(own) - {"meta.tau", "meta.step"})
        if missing or extra:
            raise CheckpointError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in own.items():
            if entries[name].shape != arr.shape:
                raise CheckpointError(f"{name}: checkpoint shape {entries[name].shape} != model shape {arr.shape}")
        self.load_state_dict(entries)
        if "meta.step" in entries:
            self.step = int(entries["meta.step"])


# ---------------------------------------------------------------------------
# per-task losses
# ---------------------------------------------------------------------------


def supervised_loss(model: MultiTaskModel, images, labels, training: bool = True) -> Tensor:
    """Mean cross-entropy of the linear classifier on encoder features."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return _supervised_from_embedding(model, model.embed(images, training), labels)


def _supervised_from_embedding(model, emb: Tensor, labels) -> Tensor:
    return T.softmax_cross_entropy(model.classifier(emb), labels)


def rotation_loss(model: MultiTaskModel, images, rng: np.random.Generator, training: bool = True):
    """Rotate each image by one sampled quarter turn and classify the turn.

    Returns ``(loss, labels)``; the batch is not replicated.
    """
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    labels = sample_rotations(rng, len(images))
    rotated = rotate_batch(images, labels)
    logits = model.rotation_head(model.embed(rotated, training), training)
    return T.softmax_cross_entropy(logits, labels), labels


def byol_pair_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Per-pair squared distance between unit-normalised rows, in [0, 4]."""
    p = T.l2_normalize(prediction, axis=1)
    z = T.l2_normalize(target, axis=1)
    d = p - z
    return T.sum(d * d, axis=1)


def _target_projection(model: MultiTaskModel, view, training: bool) -> Tensor:
    with T.no_grad():
        return model.target_projector(model.target_encoder(view, training), training)


def _byol_from_embedding(model, emb_online: Tensor, target_view, training: bool) -> Tensor:
    pred = model.predictor(model.projector(emb_online, training), training)
    return T.mean(byol_pair_loss(pred, _target_projection(model, target_view, training)))


def byol_loss(model: MultiTaskModel, view_a, view_b, training: bool = True) -> Tensor:
    """Online prediction from ``view_a`` against the target projection of ``view_b``.

    With ``model.symmetric_byol`` the swapped direction is added and the
    two are averaged.
    """
    loss = _byol_from_embedding(model, model.embed(view_a, training), view_b, training)
    if model.symmetric_byol:
        back = _byol_from_embedding(model, model.embed(view_b, training), view_a, training)
        loss = (loss + back) * 0.5
    return loss


def ema_update(model: MultiTaskModel) -> None:
    """target <- tau * target + (1 - tau) * online, for encoder and projector."""
    tau = model.tau
    pairs = [(model.target_encoder, model.encoder), (model.target_projector, model.projector)]
    for target_mod, online_mod in pairs:
        for (_, t), (_, o) in zip(target_mod.named_parameters(), online_mod.named_parameters()):
            t.data = (tau * t.data + (1 - tau) * o.data).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# views and the combined objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSet:
    """Pipelines per task. Shared-view policies use ``byol`` for every task."""

    supervised: AugmentSpec
    rotation: AugmentSpec
    byol: AugmentSpec

    @classmethod
    def standard(cls, crop_size: int, padding: int = 4, supervised: str = "default") -> "AugmentSet":
        return cls(
            supervised=AugmentSpec.preset(supervised, crop_size, padding),
            rotation=AugmentSpec.default(crop_size, padding),
            byol=AugmentSpec.hard(crop_size),
        )


@dataclass
class Views:
    """Augmented inputs for one batch.

    ``supervised`` holds one array (two for ``two_view_supervised``);
    ``rotation`` is the pre-rotation input; ``byol`` is the (online, target)
    pair. Arrays may be shared between tasks; ``n_generated`` counts distinct
    augmented views produced per image.
    """

    supervised: list[np.ndarray] = field(default_factory=list)
    rotation: np.ndarray | None = None
    byol: list[np.ndarray] | None = None
    n_generated: int = 0


def make_views(
    images: np.ndarray,
    indices,
    active: Iterable[str],
    policy: str,
    augment: AugmentSet,
    seed: int,
    epoch: int = 0,
    traces: list | None = None,
) -> Views:
    active = set(active)
    policy = parse_view_policy(policy)
    indices = np.asarray(indices)

    def aug(spec: AugmentSpec, name: str) -> np.ndarray:
        return augment_batch(spec, images, seed, ("augment", name, epoch), indices, traces)

    views = Views()
    if policy == "separate_views":
        if "supervised" in active:
            views.supervised = [aug(augment.supervised, "supervised")]
            views.n_generated += 1
        if "rotation" in active:
            views.rotation = aug(augment.rotation, "rotation")
            views.n_generated += 1
        if "byol" in active:
            views.byol = [aug(augment.byol, "byol_a"), aug(augment.byol, "byol_b")]
            views.n_generated += 2
        return views

    first = aug(augment.byol, "shared_a")
    views.n_generated = 1
    second = None
    if "byol" in active or policy == "two_view_supervised":
        second = aug(augment.byol, "shared_b")
        views.n_generated = 2
    if "supervised" in active:
        views.supervised = [first] if policy == "shared_views" else [first, second]
    if "rotation" in active:
        views.rotation = first
    if "byol" in active:
        views.byol = [first, second]
    return views


@dataclass
class TaskLossSet:
    supervised: Tensor | None
    rotation: Tensor | None
    byol: Tensor | None
    total: Tensor
    rotation_labels: np.ndarray | None = None

    def as_floats(self) -> dict[str, float | None]:
        f = lambda t: None if t is None else float(t.data)  # noqa: E731
        return {"supervised": f(self.supervised), "rotation": f(self.rotation),
                "byol": f(self.byol), "total": f(self.total)}


def task_losses(
    model: MultiTaskModel,
    views: Views,
    labels,
    active: Iterable[str],
    policy: str,
    rotation_rng: np.random.Generator | None = None,
    weights: dict[str, float] | None = None,
    training: bool = True,
) -> TaskLossSet:
    """Compute every active loss on prepared views and their (weighted) sum.

    Embeddings of the same array are computed once and reused across
    tasks, which is what makes shared views cheaper.
    """
    active = set(active)
    if not active:
        raise ValueError("at least one task must be active")
    unknown = active - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    policy = parse_view_policy(policy)
    weights = weights or {}
    cache: dict[int, Tensor] = {}

    def emb(arr: np.ndarray) -> Tensor:
        key = id(arr)
        if key not in cache:
            cache[key] = model.embed(arr, training)
        return cache[key]

    sup = rot = byl = None
    rot_labels = None
    if "supervised" in active:
        if not views.supervised:
            raise ValueError("supervised task active but no supervised view")
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
            raise ValueError(f"labels must lie in [0, {model.num_classes})")
        parts = [_supervised_from_embedding(model, emb(v), labels) for v in views.supervised]
        sup = parts[0] if len(parts) == 1 else (parts[0] + parts[1]) * 0.5
    if "rotation" in active:
        if views.rotation is None:
            raise ValueError("rotation task active but no rotation view")
        rng = rotation_rng if rotation_rng is not None else np.random.default_rng(0)
        rot, rot_labels = rotation_loss(model, views.rotation, rng, training)
    if "byol" in active:
        if views.byol is None or len(views.byol) < 2 or views.byol[1] is None:
            raise ValueError("BYOL needs two augmented views per image")
        a, b = views.byol[0], views.byol[1]
        byl = _byol_from_embedding(model, emb(a), b, training)
        if model.symmetric_byol:
            byl = (byl + _byol_from_embedding(model, emb(b), a, training)) * 0.5

    total = None
    for name, loss in (("supervised", sup), ("rotation", rot), ("byol", byl)):
        if loss is None:
            continue
        w = weights.get(name, 1.0)
        term = loss if w == 1.0 else loss * w
        total = term if total is None else total + term
    return TaskLossSet(sup, rot, byl, total, rot_labels)


def total_loss(
    model: MultiTaskModel,
    images: np.ndarray,
    labels,
    active: Iterable[str],
    view_policy: str,
    augment: AugmentSet,
    seed: int,
    epoch: int = 0,
    step: int = 0,
    indices=None,
    weights: dict[str, float] | None = None,
    traces: list | None = None,
) -> TaskLossSet:
    """Build views for a raw batch and return all active losses plus their sum."""
    indices = np.arange(len(images)) if indices is None else indices
    views = make_views(images, indices, active, view_policy, augment, seed, epoch, traces)
    return task_losses(model, views, labels, active, view_policy,
                       rotation_rng=stream(seed, "rotation", epoch, step), weights=weights)
