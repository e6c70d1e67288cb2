"""N-way K-shot evaluation on frozen embeddings with a per-episode linear learner."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .nn import ConvEncoder
from .rng import stream

__all__ = [
    "EpisodeSpec",
    "Episode",
    "EvalReport",
    "LinearClassifier",
    "sample_episode",
    "fit_base_learner",
    "embed_images",
    "evaluate",
    "evaluate_embeddings",
    "confidence_interval",
    "aggregate_runs",
]


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 15
    n_episodes: int = 250
    seed: int = 0

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.q_query, self.n_episodes) < 1:
            raise ValueError("n_way, k_shot, q_query and n_episodes must all be >= 1")

    def check(self, dataset: LabeledDataset) -> None:
        if self.n_way > dataset.num_classes:
            raise ValueError(f"{self.n_way}-way episodes need {self.n_way} classes, split has {dataset.num_classes}")
        counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
        need = self.k_shot + self.q_query
        short = [dataset.class_names[k] for k in np.flatnonzero(counts < need)]
        if short:
            raise ValueError(f"classes {short[:5]} have fewer than K+Q={need} examples")


@dataclass
class Episode:
    """Index sets into the split plus episode-local labels.

    Support rows are grouped by episode label (K each), likewise query rows
    (Q each). ``class_map[j]`` is the split label of episode label ``j``.
    """

    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_map: np.ndarray


def sample_episode(dataset: LabeledDataset, spec: EpisodeSpec, rng: np.random.Generator,
                   by_class: Sequence[np.ndarray] | None = None) -> Episode:
    """Draw N distinct classes, then K support and Q query examples per class
    without replacement and without overlap."""
    by_class = dataset.indices_by_class() if by_class is None else by_class
    need = spec.k_shot + spec.q_query
    short = [dataset.class_names[k] for k, idx in enumerate(by_class) if len(idx) < need]
    if short:
        raise ValueError(f"classes {short[:5]} have fewer than K+Q={need} examples")
    if len(by_class) < spec.n_way:
        raise ValueError(f"{spec.n_way}-way episodes need {spec.n_way} classes, split has {len(by_class)}")
    classes = rng.choice(len(by_class), size=spec.n_way, replace=False)
    sup, qry = [], []
    for k in classes:
        pick = rng.choice(by_class[k], size=spec.k_shot + spec.q_query, replace=False)
        sup.append(pick[: spec.k_shot])
        qry.append(pick[spec.k_shot :])
    return Episode(
        support=np.concatenate(sup),
        support_labels=np.repeat(np.arange(spec.n_way), spec.k_shot),
        query=np.concatenate(qry),
        query_labels=np.repeat(np.arange(spec.n_way), spec.q_query),
        class_map=np.asarray(classes),
    )


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (n_way, dim)
    bias: np.ndarray  # (n_way,)
    steps: int = 0
    final_loss: float = float("nan")

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def _ce_and_grad(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray):
    z = x @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1
    d /= n
    return loss, d.T @ x, d.sum(axis=0)


def fit_base_learner(
    embeddings: np.ndarray,
    labels: np.ndarray,
    n_way: int | None = None,
    max_steps: int = 300,
    loss_threshold: float = 0.01,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> LinearClassifier:
    """Fresh zero-initialised linear classifier trained by full-batch SGD.

    Stops before a step once the support cross-entropy is below
    ``loss_threshold``; never runs more than ``max_steps`` steps. Weight
    decay applies to the weight matrix only.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    n_way = int(y.max()) + 1 if n_way is None else n_way
    w = np.zeros((n_way, x.shape[1]))
    b = np.zeros(n_way)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    steps = 0
    loss = float("nan")
    while True:
        loss, gw, gb = _ce_and_grad(x, y, w, b)
        if loss < loss_threshold or steps >= max_steps:
            break
        vw = momentum * vw + gw + weight_decay * w
        vb = momentum * vb + gb
        w = w - lr * vw
        b = b - lr * vb
        steps += 1
    return LinearClassifier(w, b, steps, float(loss))


def embed_images(encoder: ConvEncoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings without recording lineage."""
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(encoder(images[lo : lo + batch_size], training=False).data)
    return np.concatenate(out).astype(np.float64)


def confidence_interval(accuracies: Sequence[float]) -> float | None:
    """1.96 * sample std / sqrt(n); ``None`` when n < 2."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return None
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


@dataclass
class EvalReport:
    """Accuracies in percent. ``ci95`` is ``None`` (and flagged) for one episode."""

    mean_accuracy: float
    ci95: float | None
    n_episodes: int
    per_episode_accuracies: list[float]
    seed: int
    checkpoint_id: str = ""
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 15
    ci_undefined: bool = False
    base_learner_steps: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def write_per_episode_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# fewshot-ssl per-episode accuracy v1\n")
            w = csv.writer(fh)
            w.writerow(["episode", "accuracy", "base_learner_steps"])
            steps = self.base_learner_steps or [""] * self.n_episodes
            for i, (a, s) in enumerate(zip(self.per_episode_accuracies, steps)):
                w.writerow([i, repr(a), s])

    def summary(self) -> str:
        ci = "n/a (single episode)" if self.ci95 is None else f"{self.ci95:.2f}"
        return (f"{self.n_way}-way {self.k_shot}-shot over {self.n_episodes} episodes: "
                f"{self.mean_accuracy:.2f}% +- {ci}")


def _report(accs: list[float], steps: list[int], spec: EpisodeSpec, checkpoint_id: str) -> EvalReport:
    pct = [100.0 * a for a in accs]
    ci = confidence_interval(pct)
    return EvalReport(
        mean_accuracy=float(np.mean(pct)),
        ci95=ci,
        n_episodes=len(pct),
        per_episode_accuracies=pct,
        seed=spec.seed,
        checkpoint_id=checkpoint_id,
        n_way=spec.n_way,
        k_shot=spec.k_shot,
        q_query=spec.q_query,
        ci_undefined=ci is None,
        base_learner_steps=steps,
    )


def evaluate_embeddings(
    embeddings: np.ndarray,
    dataset: LabeledDataset,
    spec: EpisodeSpec,
    checkpoint_id: str = "",
    **learner_opts,
) -> EvalReport:
    """Run the episodic protocol on precomputed embeddings (one row per image).

    Episode ``i`` draws from its own stream, so reports do not depend on
    evaluation order.
    """
    spec.check(dataset)
    by_class = dataset.indices_by_class()
    accs, steps = [], []
    for i in range(spec.n_episodes):
        ep = sample_episode(dataset, spec, stream(spec.seed, "episode", i), by_class)
        clf = fit_base_learner(embeddings[ep.support], ep.support_labels, spec.n_way, **learner_opts)
        pred = clf.predict(embeddings[ep.query])
        accs.append(float(np.mean(pred == ep.query_labels)))
        steps.append(clf.steps)
    return _report(accs, steps, spec, checkpoint_id)


def evaluate(
    encoder: ConvEncoder,
    dataset: LabeledDataset,
    spec: EpisodeSpec,
    train_classes: Iterable[str] = (),
    checkpoint_id: str = "",
    **learner_opts,
) -> EvalReport:
    """Freeze ``encoder``, embed the held-out split once, and score episodes."""
    overlap = sorted(set(train_classes) & set(dataset.class_names))
    if overlap:
        raise ValueError(f"evaluation classes overlap training classes: {overlap[:5]}")
    spec.check(dataset)
    emb = embed_images(encoder, dataset.images)
    return evaluate_embeddings(emb, dataset, spec, checkpoint_id, **learner_opts)


def aggregate_runs(reports: Sequence[EvalReport]) -> tuple[float, float | None]:
    """Mean over runs of each run's mean accuracy, with a CI across runs."""
    means = [r.mean_accuracy for r in reports]
    return float(np.mean(means)), confidence_interval(means)
