"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .dataio import Dataset, gen_synthetic, load_binary, make_split
from .errors import InputError, StructuralError
from .ops import SearchSpace
from .retrain import RetrainConfig
from .supernet import NodeNormMode, SuperNetConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # data
    data: str = "synthetic"  # "synthetic" or a path to an IDRT file
    classes: int = 4
    n_per_class: int = 250
    image_size: int = 16
    noise: float = 0.1
    data_seed: int = 0
    frac_train_w: float = 0.4
    frac_train_alpha: float = 0.4
    frac_test: float = 0.2
    discretize_fraction: float = 0.1
    # network
    space: str = "S3"
    cells: int = 5
    init_channels: int = 8
    nodes: int = 4
    k: int = 2
    stem_multiplier: int = 3
    # search
    norm: str = "off"
    seed: int = 0
    epochs: int = 50
    batch_size: int = 32
    lr_w_max: float = 0.025
    lr_w_min: float = 0.001
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    lr_alpha: float = 3e-3
    weight_decay_alpha: float = 1e-3
    freeze_epochs: int = -1  # -1 -> 30% of epochs
    grad_clip: float = 5.0
    diag_interval: int = 10
    precision: str = "f32"
    # discretization
    disc_batch_size: int = 16
    # retraining
    retrain_epochs: int = 20
    retrain_batch_size: int = 32
    retrain_lr_max: float = 0.025
    retrain_lr_min: float = 0.001
    # output
    out: str = "out"

    def __post_init__(self):
        try:
            NodeNormMode(self.norm)
        except ValueError:
            raise StructuralError(f"norm must be off, pre or post, got {self.norm!r}") from None
        if self.precision not in ("f32", "f64"):
            raise StructuralError(f"precision must be f32 or f64, got {self.precision!r}")
        SearchSpace.parse(self.space)

    # --- derived objects

    @property
    def fractions(self) -> tuple:
        return (self.frac_train_w, self.frac_train_alpha, self.frac_test)

    def search_space(self) -> SearchSpace:
        return SearchSpace.parse(self.space)

    def net_config(self, in_channels: int = 1) -> SuperNetConfig:
        return SuperNetConfig(self.cells, self.init_channels, self.nodes, self.k, self.classes,
                              in_channels, self.stem_multiplier)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_w_max=self.lr_w_max, lr_w_min=self.lr_w_min,
            momentum=self.momentum, weight_decay_w=self.weight_decay_w, lr_alpha=self.lr_alpha,
            weight_decay_alpha=self.weight_decay_alpha,
            freeze_epochs=None if self.freeze_epochs < 0 else self.freeze_epochs,
            seed=self.seed, mode=self.norm, precision=self.precision, grad_clip=self.grad_clip,
            diag_interval=self.diag_interval,
        )

    def retrain_config(self) -> RetrainConfig:
        return RetrainConfig(epochs=self.retrain_epochs, batch_size=self.retrain_batch_size,
                             lr_max=self.retrain_lr_max, lr_min=self.retrain_lr_min,
                             momentum=self.momentum, weight_decay=self.weight_decay_w,
                             grad_clip=self.grad_clip, seed=self.seed)

    def dataset(self) -> Dataset:
        if self.data == "synthetic":
            return gen_synthetic(self.classes, self.n_per_class, self.image_size, self.data_seed,
                                 noise=self.noise)
        return load_binary(self.data, self.classes)

    def split(self, data: Dataset):
        return make_split(data, self.fractions, self.data_seed, self.discretize_fraction)

    # --- text form

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict, source: str = "config") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise InputError(f"{source}: unknown key {key!r}")
            kind = type(getattr(defaults, key))
            try:
                kwargs[key] = kind(raw) if kind is not bool else str(raw).lower() in ("1", "true", "yes")
            except (TypeError, ValueError):
                raise InputError(f"{source}: bad value {raw!r} for {key} (expected {kind.__name__})") from None
        try:
            return cls(**kwargs)
        except StructuralError as exc:
            raise InputError(f"{source}: {exc}") from exc

    @classmethod
    def parse(cls, text: str, source: str = "config") -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise InputError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return cls.from_dict(values, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        return cls.parse(text, str(path))


def documented_defaults() -> str:
    """Default config text, one key per line."""
    return RunConfig().to_text()
