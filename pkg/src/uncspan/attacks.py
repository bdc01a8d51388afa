"""L-infinity PGD and the loss adapters used by prediction and uncertainty attacks.

The engine works on a batch of rows at once. Rows never interact: every
quantity (step, projection, best-iterate bookkeeping, random start) is
computed per row, and random starts are seeded from ``(cfg.seed, row_id)``,
so a row's result does not depend on which other rows share its batch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConfigError, InputError, NumericalError
from .nn import LossAdapter, ModelParams

CHUNK_ROWS = 512


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 150
    step_size: Optional[float] = None
    random_start: bool = False
    box: Optional[tuple] = None
    seed: int = 0
    keep_best: bool = True

    def __post_init__(self):
        if not (self.epsilon >= 0 and np.isfinite(self.epsilon)):
            raise ConfigError(f"must be finite and >= 0, got {self.epsilon}", field="epsilon")
        if self.steps < 0:
            raise ConfigError(f"must be >= 0, got {self.steps}", field="steps")
        if self.epsilon > 0:
            step = self.step
            if not step > 0:
                raise ConfigError(f"must be > 0, got {step}", field="step_size")
            if step > 2 * self.epsilon:
                raise ConfigError(
                    f"{step} exceeds 2*epsilon = {2 * self.epsilon}", field="step_size"
                )
        if self.box is not None:
            lo, hi = self.box
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ConfigError("lower bound exceeds upper bound", field="box")

    @property
    def step(self) -> float:
        """Configured step size, or 2.5 * epsilon / steps by default."""
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / max(self.steps, 1)

    def with_epsilon(self, epsilon) -> "AttackConfig":
        """Same settings at a new budget; an explicit step size is rescaled."""
        step = None
        if self.step_size is not None and self.epsilon > 0:
            step = self.step_size * epsilon / self.epsilon
        return AttackConfig(
            epsilon, self.steps, step, self.random_start, self.box, self.seed, self.keep_best
        )


@dataclass
class AttackOutcome:
    delta: np.ndarray
    achieved_loss: float
    loss_trace: np.ndarray
    evaluations: int
    flagged: bool = False


@dataclass
class BatchOutcome:
    """Array form of many :class:`AttackOutcome` records.

    ``trace`` has shape ``(steps + 1, n)``; with ``keep_best`` it holds the
    best-so-far loss, otherwise the loss of each iterate. ``failed_at`` is the
    iteration where a row produced a non-finite value (-1 if none).
    """

    delta: np.ndarray
    loss: np.ndarray
    trace: np.ndarray
    evaluations: int
    failed_at: np.ndarray

    @property
    def flagged(self) -> np.ndarray:
        return self.failed_at >= 0

    def outcome(self, i) -> AttackOutcome:
        return AttackOutcome(
            self.delta[i].copy(),
            float(self.loss[i]),
            self.trace[:, i].copy(),
            self.evaluations,
            bool(self.failed_at[i] >= 0),
        )


def project(delta, X, cfg: AttackConfig):
    """Clip onto the epsilon ball, then onto the feature box when configured."""
    delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    if cfg.box is not None:
        lo, hi = cfg.box
        delta = np.clip(X + delta, lo, hi) - X
    return delta


def row_rng(seed, row_id):
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(row_id))))


def _evaluate(params, X, delta, adapter):
    logit, acts, pre = nn._forward_cache(params, X + delta, check=False)
    probs = nn.softmax(logit)
    with np.errstate(invalid="ignore", over="ignore"):
        loss, dz = adapter.value_and_dlogits(probs)
        _, grad = nn._backward(params, acts, pre, dz)
    return loss, probs, grad


def pgd_batch(
    params: ModelParams,
    X,
    adapter: LossAdapter,
    cfg: AttackConfig,
    row_ids=None,
    init_delta=None,
    criterion: Optional[Callable] = None,
) -> BatchOutcome:
    """Sign-gradient descent on the adapter loss for every row of ``X``.

    ``init_delta`` warm-starts the search (it is projected first). With
    ``cfg.keep_best`` the returned perturbation is the best iterate seen,
    starting point included. ``criterion(probs)`` optionally replaces the
    adapter loss as the score used to rank iterates; the loss still drives
    the gradient steps. A ``signed_msp`` adapter additionally rejects any
    iterate whose argmax leaves the adapter's target class and reverts that
    row to its best feasible iterate.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d != params.input_dim:
        raise InputError(f"input dimension {d} != model dimension {params.input_dim}")
    adapter._target_matrix(n, params.num_classes)
    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids)

    if init_delta is None:
        delta = np.zeros_like(X)
        if cfg.random_start and cfg.epsilon > 0:
            delta = np.stack(
                [row_rng(cfg.seed, r).uniform(-cfg.epsilon, cfg.epsilon, d) for r in row_ids]
            )
    else:
        delta = np.array(init_delta, dtype=np.float64)
    delta = project(delta, X, cfg)

    constrained = adapter.kind == "signed_msp"
    if constrained:
        keep_class = np.broadcast_to(np.asarray(adapter.target), (n,))

    failed_at = np.full(n, -1, dtype=np.int64)
    steps = cfg.steps if cfg.epsilon > 0 else 0

    loss, probs, grad = _evaluate(params, X, delta, adapter)
    evaluations = 1
    bad = ~(np.isfinite(loss) & np.all(np.isfinite(grad), axis=1))
    failed_at[bad] = 0
    score = criterion(probs) if criterion is not None else loss

    best_delta, best_loss, best_score = delta.copy(), loss.copy(), score.copy()
    best_grad = grad.copy()
    trace = np.empty((steps + 1, n))
    trace[0] = loss

    for it in range(1, steps + 1):
        alive = failed_at < 0
        if not alive.any():
            trace[it:] = trace[it - 1]
            break
        step_dir = np.where(alive[:, None], np.sign(grad), 0.0)
        delta = project(delta - cfg.step * step_dir, X, cfg)
        loss, probs, grad = _evaluate(params, X, delta, adapter)
        evaluations += 1
        bad = alive & ~(np.isfinite(loss) & np.all(np.isfinite(grad), axis=1))
        failed_at[bad] = it
        alive &= ~bad

        ok = alive.copy()
        if constrained:
            feasible = nn.argmax(probs) == keep_class
            revert = alive & ~feasible
            delta[revert] = best_delta[revert]
            loss[revert] = best_loss[revert]
            grad[revert] = best_grad[revert]
            ok &= feasible
        score = criterion(probs) if criterion is not None else loss
        improved = ok & (score < best_score)
        best_delta[improved] = delta[improved]
        best_loss[improved] = loss[improved]
        best_score[improved] = score[improved]
        best_grad[improved] = grad[improved]
        trace[it] = np.where(alive, best_loss if cfg.keep_best else loss, trace[it - 1])

    if cfg.keep_best:
        out_delta, out_loss = best_delta, best_loss
    else:
        out_delta, out_loss = delta, loss
    failed = failed_at >= 0
    if failed.any():
        out_delta[failed] = 0.0
        out_loss = out_loss.copy()
        out_loss[failed] = np.nan
    return BatchOutcome(out_delta, out_loss, trace, evaluations, failed_at)


def pgd(params: ModelParams, x, adapter: LossAdapter, cfg: AttackConfig, row_id=0) -> AttackOutcome:
    """Attack a single feature vector; raises if the gradient goes non-finite."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("pgd expects a single feature vector; use pgd_batch for batches")
    res = pgd_batch(params, x[None, :], adapter, cfg, row_ids=[row_id])
    if res.failed_at[0] >= 0:
        raise NumericalError("non-finite loss or gradient", iteration=int(res.failed_at[0]))
    return res.outcome(0)


# --- adapters ----------------------------------------------------------------


def adapter_prediction(y) -> LossAdapter:
    """Untargeted misclassification: minimize log f_y, i.e. raise true-class surprisal."""
    return LossAdapter("negative_class_logprob", np.asarray(y, dtype=np.int64), -1.0)


def adapter_overconfidence(params: ModelParams, x) -> LossAdapter:
    """-log f_yhat with yhat the clean prediction; drives entropy toward 0."""
    yhat = nn.argmax(nn.forward(params, x))
    return LossAdapter("negative_class_logprob", np.asarray(yhat, dtype=np.int64))


def adapter_underconfidence(c: int) -> LossAdapter:
    """Cross-entropy to the uniform vector; drives entropy toward ln c."""
    if c < 2:
        raise ConfigError("need at least two classes", field="c")
    return LossAdapter("mean_negative_logprob", np.full(c, 1.0 / c))


def adapter_msp_selective(params: ModelParams, x, correct) -> LossAdapter:
    """gamma * f_yhat with gamma = +1 on correct rows and -1 on misclassified ones."""
    yhat = nn.argmax(nn.forward(params, x))
    gamma = np.where(np.asarray(correct, dtype=bool), 1.0, -1.0)
    return LossAdapter("signed_msp", np.asarray(yhat, dtype=np.int64), gamma)


def prediction(params, X, y):
    return adapter_prediction(y)


def overconfidence(params, X, y):
    return adapter_overconfidence(params, X)


def underconfidence(params, X, y):
    return adapter_underconfidence(params.num_classes)


def msp_selective(params, X, y):
    correct = nn.argmax(nn.forward(params, X)) == y
    return adapter_msp_selective(params, X, correct)


ADAPTER_FACTORIES = {
    "prediction": prediction,
    "overconfidence": overconfidence,
    "underconfidence": underconfidence,
    "msp_selective": msp_selective,
}


# --- datasets ------------------------------------------------------------------


def attack_rows(
    params, X, y, row_ids, adapter_factory, cfg, init_delta=None, criterion=None, threads=1
) -> BatchOutcome:
    """Run :func:`pgd_batch` over fixed-size row chunks, optionally in threads.

    Chunk boundaries depend only on row positions, so the result is the same
    for any thread count.
    """
    n = len(X)
    bounds = [(s, min(s + CHUNK_ROWS, n)) for s in range(0, n, CHUNK_ROWS)]

    def run(b):
        s, e = b
        adapter = adapter_factory(params, X[s:e], y[s:e])
        init = None if init_delta is None else init_delta[s:e]
        return pgd_batch(params, X[s:e], adapter, cfg, row_ids[s:e], init, criterion)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return BatchOutcome(
        np.concatenate([p.delta for p in parts]),
        np.concatenate([p.loss for p in parts]),
        np.concatenate([p.trace for p in parts], axis=1),
        max(p.evaluations for p in parts),
        np.concatenate([p.failed_at for p in parts]),
    )


def attack_dataset(
    params: ModelParams,
    data: LabeledDataset,
    adapter_factory,
    cfg: AttackConfig,
    init_delta=None,
    criterion=None,
    threads: int = 1,
):
    """Perturb every row; returns the perturbed dataset and per-row outcomes.

    A row whose attack hits a non-finite value keeps ``delta = 0`` and its
    outcome is flagged; the run continues.
    """
    if len(data) == 0:
        raise InputError("empty dataset")
    if isinstance(adapter_factory, str):
        adapter_factory = ADAPTER_FACTORIES[adapter_factory]
    res = attack_rows(
        params, data.features, data.labels, data.row_ids, adapter_factory, cfg,
        init_delta, criterion, threads,
    )
    perturbed = data.with_features(data.features + res.delta)
    return perturbed, [res.outcome(i) for i in range(len(data))]
