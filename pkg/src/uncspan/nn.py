"""Feed-forward softmax classifier with hand-written reverse-mode gradients.

All arrays are float64. Batches are row-major: ``X`` has shape ``(n, d)``,
probabilities ``(n, c)``. Functions that take a single feature vector return
a single vector (or scalar); passing a 2-D array evaluates the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericalError, ParseError

ACTIVATIONS = ("relu", "tanh", "identity")
PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = "uncspan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelParams:
    """Weights and biases of an MLP.

    ``layers[k]`` is ``(W, b)`` with ``W`` of shape ``(out, in)``.
    ``activations[k]`` applies after hidden layer ``k``; the last layer
    always feeds the softmax directly.
    """

    layers: tuple
    activations: tuple

    def __post_init__(self):
        layers = tuple(
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activations", tuple(self.activations))
        if not layers:
            raise ConfigError("model needs at least one layer", field="layers")
        if len(self.activations) != len(layers) - 1:
            raise ConfigError(
                f"expected {len(layers) - 1} activations, got {len(self.activations)}",
                field="activations",
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}", field="activations")
        prev = None
        for k, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {k}: bad weight/bias shapes", field="layers")
            if prev is not None and w.shape[1] != prev:
                raise ConfigError(
                    f"layer {k}: input dim {w.shape[1]} does not chain with {prev}",
                    field="layers",
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {k}: non-finite parameters", field="layers")
            prev = w.shape[0]
        if prev < 2:
            raise ConfigError("num_classes must be >= 2", field="layers")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def unflat(self, vec) -> "ModelParams":
        """Inverse of :meth:`flat`: same architecture, new parameter values."""
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            out.append((vec[pos:pos + nw].reshape(w.shape), vec[pos + nw:pos + nw + nb]))
            pos += nw + nb
        if pos != vec.size:
            raise InputError(f"expected {pos} parameters, got {vec.size}")
        return ModelParams(tuple(out), self.activations)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.activations == other.activations and len(self.layers) == len(
            other.layers
        ) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    __hash__ = None


def init_params(dims: Sequence[int], activation="relu", seed=0) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``dims`` lists layer widths from input to output, e.g. ``[2, 32, 32, 2]``.
    """
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims", field="dims")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(tuple(layers), (activation,) * (len(dims) - 2))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise InputError(
            f"input has shape {x.shape}, model expects dimension {params.input_dim}"
        )
    if not np.all(np.isfinite(X)):
        raise InputError("input contains non-finite values")
    return X, single


def _forward_cache(params, X, check=True):
    acts, pre = [X], []
    a = X
    last = len(params.layers) - 1
    # overflow is reported below (or flagged by the caller), not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for k, (w, b) in enumerate(params.layers):
            z = a @ w.T + b
            pre.append(z)
            if k < last:
                a = _act(params.activations[k], z)
                acts.append(a)
    logits = pre[-1]
    if check and not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    return logits, acts, pre


def softmax(logits):
    with np.errstate(invalid="ignore"):
        z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(params: ModelParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    out = _forward_cache(params, X)[0]
    return out[0] if single else out


def forward(params: ModelParams, x) -> np.ndarray:
    """Softmax probabilities for one vector ``x`` or a batch of rows."""
    X, single = _as_batch(params, x)
    p = softmax(_forward_cache(params, X)[0])
    return p[0] if single else p


def argmax(probs) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index (numpy semantics)."""
    return np.argmax(probs, axis=-1)


# --- loss adapters ---------------------------------------------------------

LOSS_KINDS = (
    "cross_entropy_target",
    "negative_class_logprob",
    "mean_negative_logprob",
    "signed_msp",
)


@dataclass(frozen=True)
class LossAdapter:
    """Scalar objective over the softmax output, minimized by the attacks.

    ``target`` is a probability vector (or one row per sample) for
    ``cross_entropy_target``, and a class index (or one per sample) for
    ``negative_class_logprob`` and ``signed_msp``. ``sign`` multiplies the
    objective; it may be an array with one entry per sample.
    """

    kind: str
    target: object = None
    sign: object = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}", field="kind")
        if self.kind != "mean_negative_logprob" and self.target is None:
            raise ConfigError(f"{self.kind} requires a target", field="target")
        sign = np.asarray(self.sign, dtype=np.float64)
        if not np.all(np.abs(sign) == 1.0):
            raise ConfigError("sign must be +1 or -1", field="sign")

    def select(self, idx) -> "LossAdapter":
        """Restrict a per-sample adapter to rows ``idx``."""
        target = self.target
        if target is not None:
            t = np.asarray(target)
            per_sample = t.ndim == 2 if self.kind == "cross_entropy_target" else t.ndim == 1
            if per_sample:
                target = t[idx]
        sign = np.asarray(self.sign, dtype=np.float64)
        if sign.ndim == 1:
            sign = sign[idx]
        return LossAdapter(self.kind, target, sign)

    def _target_matrix(self, n, c):
        if self.kind == "mean_negative_logprob":
            return np.full((n, c), 1.0 / c)
        if self.kind == "cross_entropy_target":
            t = np.asarray(self.target, dtype=np.float64)
            if t.shape not in ((c,), (n, c)):
                raise ConfigError(
                    f"target distribution has shape {t.shape}, expected ({c},) or ({n}, {c})",
                    field="target",
                )
            if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9):
                raise ConfigError("target is not a probability vector", field="target")
            return np.broadcast_to(t, (n, c))
        k = np.asarray(self.target)
        if not np.issubdtype(k.dtype, np.integer) or k.shape not in ((), (n,)):
            raise ConfigError(f"bad class-index target {self.target!r}", field="target")
        if np.any(k < 0) or np.any(k >= c):
            raise ConfigError(f"class index out of range [0, {c})", field="target")
        t = np.zeros((n, c))
        t[np.arange(n), np.broadcast_to(k, (n,))] = 1.0
        return t

    def value_and_dlogits(self, probs):
        """Per-sample loss and its gradient with respect to the logits."""
        n, c = probs.shape
        sign = np.broadcast_to(np.asarray(self.sign, dtype=np.float64), (n,))
        t = self._target_matrix(n, c)
        if self.kind == "signed_msp":
            pk = (probs * t).sum(axis=1)
            loss = pk
            pg = t * pk[:, None]
        else:
            clamped = np.maximum(probs, PROB_FLOOR)
            loss = -(t * np.log(clamped)).sum(axis=1)
            # p_k * dL/dp_k, zero where the floor is active
            pg = -t * (probs > PROB_FLOOR)
        dz = pg - probs * pg.sum(axis=1, keepdims=True)
        return sign * loss, dz * sign[:, None]


def cross_entropy_adapter(target) -> LossAdapter:
    return LossAdapter("cross_entropy_target", target)


# --- evaluation and gradients ----------------------------------------------


def _check_adapter(params, adapter, n):
    adapter._target_matrix(n, params.num_classes)


def loss_value(params: ModelParams, x, adapter: LossAdapter):
    X, single = _as_batch(params, x)
    _check_adapter(params, adapter, X.shape[0])
    probs = softmax(_forward_cache(params, X)[0])
    loss, _ = adapter.value_and_dlogits(probs)
    return float(loss[0]) if single else loss


def _backward(params, acts, pre, dz):
    """Backpropagate ``dz`` (gradient at the logits) through every layer."""
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        grads[k] = (dz.T @ acts[k], dz.sum(axis=0))
        da = dz @ w
        if k > 0:
            dz = da * _act_grad(params.activations[k - 1], pre[k - 1], acts[k])
    return grads, da


def value_and_grad_input(params: ModelParams, X, adapter: LossAdapter):
    """Batch helper: per-row loss, probabilities and d(loss_i)/d(x_i)."""
    logit, acts, pre = _forward_cache(params, X)
    probs = softmax(logit)
    loss, dz = adapter.value_and_dlogits(probs)
    _, dx = _backward(params, acts, pre, dz)
    return loss, probs, dx


def grad_input(params: ModelParams, x, adapter: LossAdapter) -> np.ndarray:
    """Gradient of the adapter loss with respect to the input.

    For a batch, row ``i`` is the gradient of sample ``i``'s own loss.
    """
    X, single = _as_batch(params, x)
    _check_adapter(params, adapter, X.shape[0])
    _, _, dx = value_and_grad_input(params, X, adapter)
    return dx[0] if single else dx


def loss_and_grad_params(params: ModelParams, X, adapter: LossAdapter):
    """Mean loss over the batch and its parameter gradient (same layout as params)."""
    X, _ = _as_batch(params, X)
    n = X.shape[0]
    if n == 0:
        raise InputError("empty batch")
    _check_adapter(params, adapter, n)
    logit, acts, pre = _forward_cache(params, X)
    probs = softmax(logit)
    loss, dz = adapter.value_and_dlogits(probs)
    grads, _ = _backward(params, acts, pre, dz / n)
    return float(loss.mean()), ModelParams(tuple(grads), params.activations)


def grad_params(params: ModelParams, X, adapter: LossAdapter) -> ModelParams:
    return loss_and_grad_params(params, X, adapter)[1]


# --- checkpoints -----------------------------------------------------------


def _fmt(values):
    return ",".join(format(float(v), ".17g") for v in values)


def save_params(params: ModelParams, path) -> None:
    """Write a versioned text checkpoint; doubles round-trip exactly."""
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"layers = {len(params.layers)}",
        "activations = " + ",".join(params.activations),
    ]
    for k, (w, b) in enumerate(params.layers):
        lines.append(f"weight {k} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"bias {k} {b.shape[0]}")
        lines.append(_fmt(b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ModelParams:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of file", line=pos + 1, path=path)
        pos += 1
        return lines[pos - 1].strip()

    def numbers(text, expected):
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise ParseError("non-numeric value", line=pos, path=path) from None
        if len(vals) != expected:
            raise ParseError(f"expected {expected} values, got {len(vals)}", line=pos, path=path)
        return vals

    def keyval(key):
        text = take()
        name, sep, value = text.partition("=")
        if not sep or name.strip() != key:
            raise ParseError(f"expected '{key} = ...'", line=pos, path=path)
        return value.strip()

    if not lines:
        raise ParseError("missing header", path=path)
    header = take().split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise ParseError("missing header", line=1, path=path)
    if header[1] != str(CHECKPOINT_VERSION):
        raise ParseError(f"unsupported checkpoint version {header[1]}", line=1, path=path)
    try:
        n_layers = int(keyval("layers"))
    except ValueError:
        raise ParseError("bad layer count", line=pos, path=path) from None
    act_text = keyval("activations")
    activations = tuple(a.strip() for a in act_text.split(",")) if act_text else ()
    layers = []
    for k in range(n_layers):
        head = take().split()
        if len(head) != 4 or head[:2] != ["weight", str(k)]:
            raise ParseError(f"expected 'weight {k} <out> <in>'", line=pos, path=path)
        rows, cols = int(head[2]), int(head[3])
        w = np.array([numbers(take(), cols) for _ in range(rows)], dtype=np.float64)
        head = take().split()
        if head != ["bias", str(k), str(rows)]:
            raise ParseError(f"expected 'bias {k} {rows}'", line=pos, path=path)
        b = np.array(numbers(take(), rows), dtype=np.float64)
        layers.append((w.reshape(rows, cols), b))
    try:
        return ModelParams(tuple(layers), activations)
    except ConfigError as exc:
        raise ParseError(str(exc), path=path) from None
