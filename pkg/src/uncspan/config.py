"""Experiment configuration files and seed derivation.

A config is an INI-style file: ``[section]`` headers followed by
``key = value`` lines. Lists are comma-separated; vectors inside a list are
space-separated (``means = -1 0, 1 0``). Unknown keys are rejected so typos
fail loudly. See ``DEFAULT_CONFIG`` for every key and its default.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .attacks import ADAPTER_FACTORIES, AttackConfig
from .data import Component, MixtureSpec
from .errors import ConfigError
from .training import MODES, TrainConfig, inner_attack_config

DEFAULT_CONFIG = """\
[experiment]
seed = 0
out_dir = uncspan-out

[data]
means = -1 0, 1 0
sigmas = 1, 1
weights = 0.5, 0.5
labels = 0, 1
n_train = 50000
n_test = 8000
n_out = 800
osr_offset = 0 3
ood_scale = 10

[model]
hidden = 32, 32
activation = relu

[train]
modes = standard, adversarial
epochs = 200
batch_size = 256
learning_rate = 0.05
momentum = 0.9
epsilon = 0.25
inner_steps = 10

[attack]
epsilons = 0, 0.05, 0.1, 0.25
steps = 150
random_start = false
box = none
kind = prediction

[metrics]
buckets = 15
scenarios = ood, osr
calibration_epsilon = 0.25

[theory]
grid_n = 1000000
convergence_tolerance = 0.05
"""


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """63-bit seed from SHA-256 of ``"<master>:<label>:<index>"``."""
    digest = hashlib.sha256(f"{master}:{label}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: Path
    spec: MixtureSpec
    n_train: int
    n_test: int
    n_out: int
    osr_offset: tuple
    ood_scale: float
    hidden: tuple
    activation: str
    modes: tuple
    train: TrainConfig
    train_epsilon: float
    inner_steps: int
    epsilons: tuple
    attack: AttackConfig
    attack_kind: str
    buckets: int
    scenarios: tuple
    calibration_epsilon: float
    grid_n: int
    convergence_tolerance: float
    data_section: tuple

    def train_config(self, mode: str) -> TrainConfig:
        seed = derive_seed(self.seed, f"train/{mode}")
        inner = inner_attack_config(self.train_epsilon, self.inner_steps) if mode == "adversarial" else None
        return TrainConfig(
            self.train.epochs, self.train.batch_size, self.train.learning_rate,
            self.train.momentum, seed, mode, inner,
        )

    def attack_config(self, epsilon: float) -> AttackConfig:
        return self.attack.with_epsilon(epsilon)

    @property
    def dims(self) -> list:
        return [self.spec.feature_dim, *self.hidden, self.spec.num_classes]

    def spec_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.data_section)
        return hashlib.sha256(text.encode()).hexdigest()


class _Reader:
    def __init__(self, parser):
        self.parser = parser

    def raw(self, section, key):
        return self.parser.get(section, key).strip()

    def _err(self, section, key, msg):
        return ConfigError(msg, field=f"{section}.{key}")

    def integer(self, section, key, minimum=None):
        try:
            v = int(self.raw(section, key))
        except ValueError:
            raise self._err(section, key, f"expected an integer, got {self.raw(section, key)!r}") from None
        if minimum is not None and v < minimum:
            raise self._err(section, key, f"must be >= {minimum}, got {v}")
        return v

    def real(self, section, key):
        try:
            return float(self.raw(section, key))
        except ValueError:
            raise self._err(section, key, f"expected a number, got {self.raw(section, key)!r}") from None

    def boolean(self, section, key):
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise self._err(section, key, "expected true or false") from None

    def items(self, section, key):
        text = self.raw(section, key)
        return [t.strip() for t in text.split(",") if t.strip()]

    def reals(self, section, key):
        try:
            return [float(t) for t in self.items(section, key)]
        except ValueError:
            raise self._err(section, key, "expected comma-separated numbers") from None

    def vectors(self, section, key):
        try:
            return [tuple(float(v) for v in t.split()) for t in self.items(section, key)]
        except ValueError:
            raise self._err(section, key, "expected comma-separated vectors") from None


def _parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.read_string(DEFAULT_CONFIG)
    user = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for section in user.sections():
        if not parser.has_section(section):
            raise ConfigError(f"unknown section [{section}]", field=section)
        for key, value in user.items(section):
            if not parser.has_option(section, key):
                raise ConfigError("unknown key", field=f"{section}.{key}")
            parser.set(section, key, value)
    return parser


def parse_config(text: str, out_dir: Optional[str] = None) -> ExperimentConfig:
    parser = _parser(text)
    r = _Reader(parser)

    means = r.vectors("data", "means")
    sigmas = r.reals("data", "sigmas")
    weights = r.reals("data", "weights")
    try:
        labels = [int(v) for v in r.items("data", "labels")]
    except ValueError:
        raise ConfigError("expected integers", field="data.labels") from None
    if not (len(means) == len(sigmas) == len(weights) == len(labels)) or not means:
        raise ConfigError("means, sigmas, weights and labels need one entry per component", field="data")
    for i, s in enumerate(sigmas):
        if not s > 0:
            raise ConfigError(f"component {i}: sigma must be > 0, got {s}", field="data.sigmas")
    dim = len(means[0])
    try:
        spec = MixtureSpec(
            tuple(Component(l, m, s, w) for l, m, s, w in zip(labels, means, sigmas, weights)), dim
        )
    except ConfigError as exc:
        raise ConfigError(str(exc), field="data") from None
    osr_offset = r.vectors("data", "osr_offset")
    if len(osr_offset) != 1 or len(osr_offset[0]) != dim:
        raise ConfigError(f"expected one vector of dimension {dim}", field="data.osr_offset")

    hidden = tuple(int(h) for h in r.items("model", "hidden"))
    activation = r.raw("model", "activation")
    if activation not in ("relu", "tanh", "identity"):
        raise ConfigError(f"unknown activation {activation!r}", field="model.activation")

    modes = tuple(r.items("train", "modes"))
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}", field="train.modes")
    train = TrainConfig(
        epochs=r.integer("train", "epochs", 0),
        batch_size=r.integer("train", "batch_size", 1),
        learning_rate=r.real("train", "learning_rate"),
        momentum=r.real("train", "momentum"),
    )
    train_eps = r.real("train", "epsilon")
    if train_eps < 0:
        raise ConfigError("must be >= 0", field="train.epsilon")

    epsilons = tuple(r.reals("attack", "epsilons"))
    if not epsilons:
        raise ConfigError("need at least one budget", field="attack.epsilons")
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError("budgets must be sorted ascending", field="attack.epsilons")
    if epsilons[0] < 0:
        raise ConfigError("budgets must be >= 0", field="attack.epsilons")
    box_text = r.raw("attack", "box").lower()
    box = None
    if box_text not in ("none", ""):
        lo_hi = r.reals("attack", "box")
        if len(lo_hi) != 2:
            raise ConfigError("expected 'lo, hi' or none", field="attack.box")
        box = tuple(lo_hi)
    kind = r.raw("attack", "kind")
    if kind not in ADAPTER_FACTORIES:
        raise ConfigError(f"unknown attack kind {kind!r}", field="attack.kind")
    seed = r.integer("experiment", "seed", 0)
    attack = AttackConfig(
        epsilon=max(epsilons[-1], 0.0),
        steps=r.integer("attack", "steps", 0),
        random_start=r.boolean("attack", "random_start"),
        box=box,
        seed=derive_seed(seed, "attack"),
    )
    scenarios = tuple(r.items("metrics", "scenarios"))
    for s in scenarios:
        if s not in ("ood", "osr"):
            raise ConfigError(f"unknown scenario {s!r}", field="metrics.scenarios")

    return ExperimentConfig(
        seed=seed,
        out_dir=Path(out_dir if out_dir is not None else r.raw("experiment", "out_dir")),
        spec=spec,
        n_train=r.integer("data", "n_train", 1),
        n_test=r.integer("data", "n_test", 1),
        n_out=r.integer("data", "n_out", 1),
        osr_offset=osr_offset[0],
        ood_scale=r.real("data", "ood_scale"),
        hidden=hidden,
        activation=activation,
        modes=modes,
        train=train,
        train_epsilon=train_eps,
        inner_steps=r.integer("train", "inner_steps", 1),
        epsilons=epsilons,
        attack=attack,
        attack_kind=kind,
        buckets=r.integer("metrics", "buckets", 1),
        scenarios=scenarios,
        calibration_epsilon=r.real("metrics", "calibration_epsilon"),
        grid_n=r.integer("theory", "grid_n", 3),
        convergence_tolerance=r.real("theory", "convergence_tolerance"),
        data_section=tuple(sorted(parser.items("data"))),
    )


def load_config(path, out_dir: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    return parse_config(text, out_dir)
