"""Run configuration: an INI file with one section per component.

Relative paths are resolved against the directory holding the config file.
The snapshot written at train start has every value filled in and absolute
paths, so training from it repeats the run.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import AugmentSpec
from .data import DatasetManifest
from .episodic import EpisodeSpec
from .model import TASKS, AugmentSet, HeadConfig, parse_tasks, parse_view_policy
from .nn import EncoderConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "FEWSHOT_SSL_OUTPUT_ROOT"
SNAPSHOT_NAME = "config.snapshot.ini"

_SECTIONS = {
    "dataset": {"manifest"},
    "encoder": {"input_channels", "input_size", "stage_widths", "block_kind", "embedding_dim"},
    "heads": {"projector_hidden", "projection_dim"},
    "train": {"epochs", "batch_size", "lr", "momentum", "weight_decay", "decay_epochs", "decay_factor",
              "tau", "tasks", "view_policy", "seed", "symmetric_byol", "task_weights", "checkpoint_every"},
    "eval": {"split", "n_way", "k_shot", "q_query", "episodes", "seed", "max_steps", "loss_threshold"},
    "augment": {"crop_size", "padding", "supervised"},
    "output": {"dir"},
}


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    split: str = "test"
    episodes: EpisodeSpec = field(default_factory=EpisodeSpec)
    max_steps: int = 300
    loss_threshold: float = 0.01

    def learner_options(self) -> dict:
        return {"max_steps": self.max_steps, "loss_threshold": self.loss_threshold}


@dataclass
class RunConfig:
    manifest_path: Path
    encoder: EncoderConfig
    train: TrainConfig
    eval: EvalConfig
    crop_size: int
    padding: int = 4
    supervised_augment: str = "default"
    projector_hidden: int | None = None
    projection_dim: int | None = None
    output_dir: Path | None = None
    source: Path | None = None

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.manifest_path)

    def heads(self) -> HeadConfig:
        return HeadConfig.default(self.encoder.embedding_dim, self.projector_hidden, self.projection_dim)

    def augment(self) -> AugmentSet:
        return AugmentSet.standard(self.crop_size, self.padding, self.supervised_augment)

    def resolved_output_dir(self) -> Path:
        """Config value, else ``$FEWSHOT_SSL_OUTPUT_ROOT/<config name>``, else ``runs/<config name>``."""
        if self.output_dir is not None:
            return self.output_dir
        name = self.source.stem if self.source is not None else "run"
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs") / name

    def with_overrides(self, seed=None, tasks=None, view_policy=None, epochs=None, output_dir=None) -> "RunConfig":
        """Command-line values replace file values; ``None`` keeps the file value."""
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if tasks is not None:
            changes["active_tasks"] = parse_tasks(tasks)
        if view_policy is not None:
            changes["view_policy"] = parse_view_policy(view_policy)
        if epochs is not None:
            changes["epochs"] = int(epochs)
            kept = tuple(e for e in self.train.decay_epochs if e < int(epochs))
            changes["decay_epochs"] = kept
        try:
            train = replace(self.train, **changes) if changes else self.train
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out = Path(output_dir) if output_dir is not None else self.output_dir
        return replace(self, train=train, output_dir=out)

    def to_ini(self) -> str:
        t, e, ev = self.train, self.encoder, self.eval
        cp = configparser.ConfigParser(interpolation=None)
        cp["dataset"] = {"manifest": str(Path(self.manifest_path).resolve())}
        cp["encoder"] = {
            "input_channels": str(e.input_channels),
            "input_size": str(e.input_size),
            "stage_widths": ",".join(str(w) for w in e.stage_widths),
            "block_kind": e.block_kind,
            "embedding_dim": str(e.embedding_dim),
        }
        heads = self.heads()
        cp["heads"] = {
            "projector_hidden": str(heads.projector.layer_dims[0][1]),
            "projection_dim": str(heads.projector.out_dim),
        }
        cp["train"] = {
            "epochs": str(t.epochs),
            "batch_size": str(t.batch_size),
            "lr": repr(t.lr),
            "momentum": repr(t.momentum),
            "weight_decay": repr(t.weight_decay),
            "decay_epochs": ",".join(str(d) for d in t.decay_epochs),
            "decay_factor": repr(t.decay_factor),
            "tau": repr(t.tau),
            "tasks": ",".join(k for k in TASKS if k in t.active_tasks),
            "view_policy": t.view_policy,
            "seed": str(t.seed),
            "symmetric_byol": str(t.symmetric_byol).lower(),
            "task_weights": ",".join(f"{k}={t.task_weights[k]!r}" for k in sorted(t.task_weights)),
            "checkpoint_every": str(t.checkpoint_every),
        }
        cp["eval"] = {
            "split": ev.split,
            "n_way": str(ev.episodes.n_way),
            "k_shot": str(ev.episodes.k_shot),
            "q_query": str(ev.episodes.q_query),
            "episodes": str(ev.episodes.n_episodes),
            "seed": str(ev.episodes.seed),
            "max_steps": str(ev.max_steps),
            "loss_threshold": repr(ev.loss_threshold),
        }
        cp["augment"] = {"crop_size": str(self.crop_size), "padding": str(self.padding),
                         "supervised": self.supervised_augment}
        cp["output"] = {"dir": str(self.resolved_output_dir().resolve())}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def write_snapshot(self, directory) -> Path:
        path = Path(directory) / SNAPSHOT_NAME
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _weights(text: str) -> dict[str, float]:
    out = {}
    for item in (p.strip() for p in text.split(",")):
        if not item:
            continue
        key, _, val = item.partition("=")
        (task,) = parse_tasks(key)
        out[task] = float(val)
    return out


def load_config(path) -> RunConfig:
    """Parse and validate a run config. Every problem raises :class:`ConfigError`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(cp[section]) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    base = path.parent

    def get(section: str, key: str, default=None):
        return cp.get(section, key, fallback=default) if cp.has_section(section) else default

    try:
        manifest_text = get("dataset", "manifest")
        if not manifest_text:
            raise ConfigError(f"{path}: [dataset] manifest is required")
        manifest_path = (base / manifest_text).resolve()
        if not manifest_path.is_file():
            raise ConfigError(f"{path}: manifest {manifest_path} does not exist")
        manifest = DatasetManifest.load(manifest_path)

        size = int(get("encoder", "input_size", manifest.image_size))
        encoder = EncoderConfig(
            input_channels=int(get("encoder", "input_channels", manifest.channels)),
            input_size=size,
            stage_widths=_ints(get("encoder", "stage_widths", "32,64,128,256")),
            block_kind=get("encoder", "block_kind", "plain_conv"),
            embedding_dim=int(get("encoder", "embedding_dim", 256)),
        )
        if encoder.input_channels != manifest.channels:
            raise ConfigError(f"encoder expects {encoder.input_channels} channels, dataset has {manifest.channels}")

        defaults = TrainConfig()
        train = TrainConfig(
            epochs=int(get("train", "epochs", defaults.epochs)),
            batch_size=int(get("train", "batch_size", defaults.batch_size)),
            lr=float(get("train", "lr", defaults.lr)),
            momentum=float(get("train", "momentum", defaults.momentum)),
            weight_decay=float(get("train", "weight_decay", defaults.weight_decay)),
            decay_epochs=_ints(get("train", "decay_epochs", ",".join(map(str, defaults.decay_epochs)))),
            decay_factor=float(get("train", "decay_factor", defaults.decay_factor)),
            tau=float(get("train", "tau", defaults.tau)),
            active_tasks=parse_tasks(get("train", "tasks", "sup")),
            view_policy=get("train", "view_policy", defaults.view_policy),
            seed=int(get("train", "seed", 0)),
            symmetric_byol=cp.getboolean("train", "symmetric_byol", fallback=False) if cp.has_section("train") else False,
            task_weights=_weights(get("train", "task_weights", "")),
            checkpoint_every=int(get("train", "checkpoint_every", 0)),
        )
        ev = EvalConfig(
            split=get("eval", "split", "test"),
            episodes=EpisodeSpec(
                n_way=int(get("eval", "n_way", 5)),
                k_shot=int(get("eval", "k_shot", 5)),
                q_query=int(get("eval", "q_query", 15)),
                n_episodes=int(get("eval", "episodes", 250)),
                seed=int(get("eval", "seed", 0)),
            ),
            max_steps=int(get("eval", "max_steps", 300)),
            loss_threshold=float(get("eval", "loss_threshold", 0.01)),
        )
        if ev.split not in manifest.splits:
            raise ConfigError(f"eval split {ev.split!r} not in manifest splits {sorted(manifest.splits)}")
        if ev.max_steps < 0:
            raise ConfigError("eval max_steps must be >= 0")
        crop = int(get("augment", "crop_size", size))
        padding = int(get("augment", "padding", 4))
        sup_aug = get("augment", "supervised", "default")
        AugmentSpec.preset(sup_aug, crop, padding)
        if crop != size:
            raise ConfigError(f"augment crop_size {crop} must equal encoder input_size {size}")
        hidden = get("heads", "projector_hidden")
        proj = get("heads", "projection_dim")
        out = get("output", "dir")
        return RunConfig(
            manifest_path=manifest_path,
            encoder=encoder,
            train=train,
            eval=ev,
            crop_size=crop,
            padding=padding,
            supervised_augment=sup_aug,
            projector_hidden=int(hidden) if hidden else None,
            projection_dim=int(proj) if proj else None,
            output_dir=(base / out) if out else None,
            source=path,
        )
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
