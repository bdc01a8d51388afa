"""Isotropic Gaussian mixtures with exact Bayes posteriors, and CSV persistence."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, ParseError


@dataclass(frozen=True)
class Component:
    label: int
    mean: tuple
    sigma: float
    weight: float


@dataclass(frozen=True)
class MixtureSpec:
    """Generative distribution P(X, Y): one isotropic Gaussian per component.

    Several components may share a label. Labels must cover ``0..c-1``.
    """

    components: tuple
    feature_dim: int

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, Component) else Component(*c) for c in self.components
        )
        comps = tuple(
            Component(int(c.label), tuple(float(m) for m in c.mean), float(c.sigma), float(c.weight))
            for c in comps
        )
        object.__setattr__(self, "components", comps)
        if self.feature_dim < 1:
            raise ConfigError("must be positive", field="feature_dim")
        for i, c in enumerate(comps):
            if len(c.mean) != self.feature_dim:
                raise ConfigError(
                    f"mean has {len(c.mean)} entries, expected {self.feature_dim}",
                    field=f"components[{i}].mean",
                )
            if not np.all(np.isfinite(c.mean)):
                raise ConfigError("non-finite mean", field=f"components[{i}].mean")
            if not (c.sigma > 0 and np.isfinite(c.sigma)):
                raise ConfigError(f"sigma must be > 0, got {c.sigma}", field=f"components[{i}].sigma")
            if not c.weight > 0:
                raise ConfigError(f"weight must be > 0, got {c.weight}", field=f"components[{i}].weight")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"weights sum to {total}, expected 1", field="weights")
        labels = sorted({c.label for c in comps})
        if labels != list(range(len(labels))):
            raise ConfigError(f"labels must be 0..c-1, got {labels}", field="labels")

    @property
    def num_classes(self) -> int:
        return len({c.label for c in self.components})

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.components])

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.components], dtype=np.int64)

    def shifted(self, offset) -> "MixtureSpec":
        offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (self.feature_dim,))
        return MixtureSpec(
            tuple(
                Component(c.label, tuple(np.asarray(c.mean) + offset), c.sigma, c.weight)
                for c in self.components
            ),
            self.feature_dim,
        )


def default_spec() -> MixtureSpec:
    """Two overlapping 2-D classes: means (-1, 0) and (+1, 0), unit sigma."""
    return MixtureSpec(
        (Component(0, (-1.0, 0.0), 1.0, 0.5), Component(1, (1.0, 0.0), 1.0, 0.5)),
        feature_dim=2,
    )


def blob_spec(separation=3.0, sigma=0.1, dim=2) -> MixtureSpec:
    mean = np.zeros(dim)
    mean[0] = separation
    return MixtureSpec(
        (Component(0, tuple(-mean), sigma, 0.5), Component(1, tuple(mean), sigma, 0.5)),
        feature_dim=dim,
    )


@dataclass
class LabeledDataset:
    """Feature rows with integer labels.

    ``row_ids`` identify rows independently of their position, so per-sample
    seeds survive shuffling. ``num_classes`` counts in-distribution classes;
    outlier rows carry the sentinel label ``num_classes``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    row_ids: Optional[np.ndarray] = None
    spec: Optional[MixtureSpec] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InputError(
                f"features {self.features.shape} and labels {self.labels.shape} do not align"
            )
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise InputError(f"labels outside [0, {self.num_classes}]")
        if self.row_ids is None:
            self.row_ids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.row_ids = np.asarray(self.row_ids, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.num_classes, self.row_ids[idx], self.spec
        )

    def with_features(self, features) -> "LabeledDataset":
        return LabeledDataset(features, self.labels, self.num_classes, self.row_ids, self.spec)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.row_ids, other.row_ids)
        )


def _draw(spec, n, rng):
    comp = rng.choice(len(spec.components), size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.feature_dim))
    X = spec.means[comp] + spec.sigmas[comp, None] * noise
    return X, spec.labels[comp]


def sample(spec: MixtureSpec, n: int, seed) -> LabeledDataset:
    if n < 1:
        raise InputError("n must be >= 1")
    X, y = _draw(spec, n, np.random.default_rng(seed))
    return LabeledDataset(X, y, spec.num_classes, spec=spec)


def _log_class_joint(spec, X):
    """log p(x, y=k) for every row of ``X`` and every class ``k``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sq = ((X[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
    s2 = spec.sigmas ** 2
    logc = (
        np.log(spec.weights)
        - 0.5 * spec.feature_dim * np.log(2 * np.pi * s2)
        - sq / (2 * s2)
    )
    out = np.full((X.shape[0], spec.num_classes), -np.inf)
    for j, lab in enumerate(spec.labels):
        out[:, lab] = np.logaddexp(out[:, lab], logc[:, j])
    return out


def true_posterior(spec: MixtureSpec, x) -> np.ndarray:
    """Bayes posterior p(y | x); one row per input row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.feature_dim or not np.all(np.isfinite(x)):
        raise InputError(f"expected finite input of dimension {spec.feature_dim}")
    lj = _log_class_joint(spec, x)
    lj -= lj.max(axis=1, keepdims=True)
    p = np.exp(lj)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if x.ndim == 1 else p


def _mean_subspaces(spec):
    """Orthonormal bases of the span of mean differences and of its complement."""
    means = spec.means
    d = spec.feature_dim
    diffs = means[1:] - means[0]
    if diffs.size == 0 or not np.any(diffs):
        return np.zeros((0, d)), np.eye(d)
    _, s, vt = np.linalg.svd(diffs, full_matrices=True)
    rank = int(np.sum(s > 1e-12 * s.max()))
    return vt[:rank], vt[rank:]


def _ood_draw(spec, ood_scale, n, rng):
    disc, comp = _mean_subspaces(spec)
    s = float(spec.sigmas.mean())
    d = spec.feature_dim
    if len(comp):
        u = comp[0]
        # deterministic orientation: first nonzero entry positive
        nz = np.flatnonzero(np.abs(u) > 1e-12)
        u = u if u[nz[0]] > 0 else -u
    else:
        u = np.zeros(d)
        u[-1] = 1.0
    center = spec.means.mean(axis=0) + ood_scale * s * u
    g = rng.standard_normal((n, d))
    narrow, wide = g[:, : len(disc)], g[:, len(disc):]
    X = center + (s / ood_scale) * (narrow @ disc) + (ood_scale * s) * (wide @ comp)
    return X


def make_osr_and_ood_sets(
    spec: MixtureSpec, osr_offset, ood_scale: float, n_out: int, seed
):
    """Near-distribution (open-set) and far (out-of-distribution) outlier sets.

    Open-set rows come from the mixture displaced by ``osr_offset``.

    OOD rows come from a Gaussian centred ``ood_scale * s`` (``s`` the mean
    component sigma) away from the centroid of the means, along a direction
    orthogonal to every mean difference. It is wide (std ``ood_scale * s``)
    across that orthogonal complement and narrow (std ``s / ood_scale``)
    along the mean differences, so for equal-sigma mixtures the Bayes
    posterior over the set sits near the class priors: no feature in it
    carries label information. Both sets carry the sentinel label ``c``.
    """
    if n_out < 1:
        raise InputError("n_out must be >= 1")
    if not ood_scale > 0:
        raise ConfigError(f"must be > 0, got {ood_scale}", field="ood_scale")
    c = spec.num_classes
    rng = np.random.default_rng(seed)
    osr_rng, ood_rng = rng.spawn(2)
    X_osr, _ = _draw(spec.shifted(osr_offset), n_out, osr_rng)
    X_ood = _ood_draw(spec, ood_scale, n_out, ood_rng)
    sentinel = np.full(n_out, c, dtype=np.int64)
    return (
        LabeledDataset(X_osr, sentinel, c, spec=spec),
        LabeledDataset(X_ood, sentinel.copy(), c, spec=spec),
    )


# --- CSV --------------------------------------------------------------------


def save_csv(ds: LabeledDataset, path) -> None:
    lines = [f"d={ds.dim},c={ds.num_classes}"]
    for row, lab in zip(ds.features, ds.labels):
        lines.append(",".join(format(float(v), ".17g") for v in row) + f",{int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(text, path):
    try:
        parts = dict(p.split("=", 1) for p in text.strip().split(","))
        return int(parts["d"]), int(parts["c"])
    except (ValueError, KeyError):
        raise ParseError(f"bad header {text!r}, expected 'd=<int>,c=<int>'", line=1, path=path) from None


def load_csv(path) -> LabeledDataset:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header", path=path)
    d, c = _parse_header(lines[0], path)
    X = np.empty((len(lines) - 1, d))
    y = np.empty(len(lines) - 1, dtype=np.int64)
    n = 0
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        cells = text.split(",")
        if len(cells) != d + 1:
            raise ParseError(f"expected {d + 1} cells, got {len(cells)}", line=lineno, path=path)
        try:
            X[n] = [float(v) for v in cells[:d]]
            y[n] = int(cells[d])
        except ValueError:
            raise ParseError("non-numeric cell", line=lineno, path=path) from None
        if not np.all(np.isfinite(X[n])):
            raise ParseError("non-finite value", line=lineno, path=path)
        if not 0 <= y[n] <= c:
            raise ParseError(f"label {y[n]} outside [0, {c}]", line=lineno, path=path)
        n += 1
    return LabeledDataset(X[:n], y[:n], c)


def probe_grid(spec: MixtureSpec, n: int = 2001, half_width: float = 4.0) -> np.ndarray:
    """Evenly spaced points on the line through the first two class means.

    The line is centred on their midpoint and extends ``half_width`` sigmas
    each way.
    """
    means = spec.means
    a = means[spec.labels == 0][0]
    b = means[spec.labels == 1][0]
    axis = b - a
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ConfigError("class means coincide; no inter-mean axis", field="components")
    axis /= norm
    t = np.linspace(-half_width, half_width, n) * float(spec.sigmas.mean())
    return (a + b) / 2 + t[:, None] * axis[None, :]
