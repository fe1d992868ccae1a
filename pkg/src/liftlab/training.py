"""Empirical loss, gradients, gradient-flow integration, discrete optimizers.

The continuous object is the flow dtheta/dt = -grad L(theta); here it is
realized as explicit Euler with a caller-chosen step. Discrete optimizers
(sgd, adam) follow the usual mini-batch recipe with replacement sampling.
Trajectories record (time, loss, distance from initialization) and serialize
to CSV with full float precision so identical runs produce identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import GradientState, _forward_with_args, pull_back
from .bundles import Section
from .modules import LiftedModule, ReadoutCoeffs, linear_readout

__all__ = [
    "Dataset",
    "ParamState",
    "Trajectory",
    "OptimizerConfig",
    "ConvergenceCertificate",
    "EmptyDataset",
    "NonFiniteLoss",
    "empirical_loss",
    "loss_gradient",
    "run_gradient_flow",
    "halve_step_until_monotone",
    "run_optimizer",
    "criterion_bound",
    "check_convergence_criterion",
]


class EmptyDataset(ValueError):
    """A loss or gradient was requested over zero samples."""


class NonFiniteLoss(RuntimeError):
    """Training diverged; carries the trajectory recorded so far (None if empty)."""

    def __init__(self, message: str, trajectory: "Trajectory | None"):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class Dataset:
    """Named input assignments with target vectors; optional sample weights."""

    inputs: tuple[Mapping[str, np.ndarray], ...]
    targets: tuple[np.ndarray, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise EmptyDataset("dataset must contain at least one sample")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        targets = tuple(np.asarray(t, dtype=np.float64).reshape(-1) for t in self.targets)
        if any(t.shape != targets[0].shape for t in targets):
            raise ValueError("all targets must have the same length")
        object.__setattr__(self, "targets", targets)
        if self.weights is not None:
            if len(self.weights) != len(self.inputs):
                raise ValueError("one weight per sample")
            if any(not w >= 0 for w in self.weights):
                raise ValueError("sample weights must be nonnegative")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            inputs=tuple(self.inputs[i] for i in indices),
            targets=tuple(self.targets[i] for i in indices),
            weights=None if self.weights is None else tuple(self.weights[i] for i in indices),
        )

    def normalized_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        w = np.asarray(self.weights)
        total = w.sum()
        if not total > 0:
            raise ValueError("sample weights must not all vanish")
        return w / total


@dataclass(frozen=True)
class ParamState:
    """Trainable state: edge weights plus readout coefficients.

    With ``train_readout`` False the readout stays at its initial value and
    is excluded from the optimization variable and from distance records.
    """

    weights: Section
    readout: ReadoutCoeffs
    train_readout: bool = True

    def to_flat(self) -> np.ndarray:
        if self.train_readout:
            return np.concatenate([self.weights.to_flat(), self.readout.to_flat()])
        return self.weights.to_flat()

    def with_flat(self, flat: np.ndarray) -> "ParamState":
        nw = self.weights.bundle.total_dim
        w = Section.from_flat(self.weights.bundle, flat[:nw])
        if self.train_readout:
            return replace(self, weights=w, readout=self.readout.from_flat(flat[nw:]))
        if flat.shape[0] != nw:
            raise ValueError("flat vector does not match trainable size")
        return replace(self, weights=w)


@dataclass(frozen=True)
class Trajectory:
    """Loss curve along training, with distance from initialization."""

    times: tuple[float, ...]
    losses: tuple[float, ...]
    dist_from_init: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        if len(self.times) == 0:
            raise ValueError("trajectory must contain at least one record")
        if len(self.times) != len(self.losses) or len(self.times) != len(self.dist_from_init):
            raise ValueError("times, losses, distances must align")
        if self.times[0] != 0.0:
            raise ValueError("trajectories start at time 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("times must be strictly increasing")

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())

    def to_csv_text(self) -> str:
        lines = ["time,loss,dist_from_init"]
        for t, l, d in zip(self.times, self.losses, self.dist_from_init):
            lines.append(f"{t!r},{l!r},{d!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path: str | Path, label: str = "") -> "Trajectory":
        lines = Path(path).read_text().strip().splitlines()
        if not lines or lines[0].strip() != "time,loss,dist_from_init":
            raise ValueError("expected header 'time,loss,dist_from_init'")
        t, l, d = [], [], []
        for line in lines[1:]:
            a, b, c = line.split(",")
            t.append(float(a))
            l.append(float(b))
            d.append(float(c))
        return cls(tuple(t), tuple(l), tuple(d), label=label)


def _sample_terms(lm, w, a, ds: Dataset):
    """Yield (weight, squared error, forward state, prediction, target)."""
    probs = ds.normalized_weights()
    for x, y, p in zip(ds.inputs, ds.targets, probs):
        acts, args_at = _forward_with_args(lm, w, x)
        pred = linear_readout(a, Section(lm.activation_bundle, acts), lm)
        err = pred - y
        yield p, float(err @ err), (acts, args_at), err


def empirical_loss(lm: LiftedModule, w: Section, a: ReadoutCoeffs, ds: Dataset) -> float:
    """Weighted mean squared Euclidean error of the readout over ``ds``."""
    return sum(p * sq for p, sq, _, _ in _sample_terms(lm, w, a, ds))


def loss_gradient(lm: LiftedModule, w: Section, a: ReadoutCoeffs, batch: Dataset) -> GradientState:
    """Gradient of the batch loss; cotangent 2*(pred - target)*weight per sample."""
    gw = None
    ga = None
    acc = None
    for p, _sq, state, err in _sample_terms(lm, w, a, batch):
        g = pull_back(lm, w, a, state[0], state[1], 2.0 * p * err)
        if acc is None:
            acc = g
            gw = [v.copy() for v in g.weight_cotangent.values]
            ga = [r.copy() for r in g.readout_cotangent.rows]
        else:
            for i, v in enumerate(g.weight_cotangent.values):
                gw[i] += v
            for i, r in enumerate(g.readout_cotangent.rows):
                ga[i] += r
    return GradientState(
        act_cotangent=acc.act_cotangent,
        weight_cotangent=Section(lm.weight_bundle, gw),
        readout_cotangent=ReadoutCoeffs(a.k, a.vertices, tuple(ga)),
    )


def _loss_and_grad_flat(lm, params: ParamState, ds: Dataset) -> tuple[float, np.ndarray]:
    loss = 0.0
    gw = [np.zeros(d) for d in lm.weight_bundle.dims]
    ga = [np.zeros_like(r) for r in params.readout.rows]
    for p, sq, state, err in _sample_terms(lm, params.weights, params.readout, ds):
        loss += p * sq
        g = pull_back(lm, params.weights, params.readout, state[0], state[1], 2.0 * p * err)
        for i, v in enumerate(g.weight_cotangent.values):
            gw[i] += v
        for i, r in enumerate(g.readout_cotangent.rows):
            ga[i] += r
    flat = [np.concatenate(gw) if gw else np.zeros(0)]
    if params.train_readout:
        flat.append(np.concatenate([r.ravel() for r in ga]) if ga else np.zeros(0))
    return loss, np.concatenate(flat)


def _finish(times, losses, dists, label) -> Trajectory:
    return Trajectory(tuple(times), tuple(losses), tuple(dists), label=label)


def _partial(times, losses, dists, label) -> Trajectory | None:
    if not times:
        return None
    return _finish(times, losses, dists, label)


def run_gradient_flow(
    lm: LiftedModule,
    params: ParamState,
    ds: Dataset,
    step: float,
    horizon: float,
    record_every: int = 1,
) -> Trajectory:
    """Explicit Euler on the full-batch gradient up to time ``horizon``.

    Records t = k*step for k = 0, record_every, 2*record_every, ... and the
    final step. Raises NonFiniteLoss (with the partial trajectory attached)
    as soon as the loss stops being finite.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    n_steps = max(1, int(round(horizon / step)))
    theta0 = params.to_flat()
    theta = theta0.copy()
    times, losses, dists = [], [], []
    for k in range(n_steps + 1):
        state = params.with_flat(theta)
        loss, grad = _loss_and_grad_flat(lm, state, ds)
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became non-finite at time {k * step}",
                _partial(times, losses, dists, "gradient-flow"),
            )
        if k % record_every == 0 or k == n_steps:
            times.append(k * step)
            losses.append(loss)
            dists.append(float(np.linalg.norm(theta - theta0)))
        if k < n_steps:
            theta -= step * grad
    return _finish(times, losses, dists, "gradient-flow")


def halve_step_until_monotone(
    lm: LiftedModule,
    params: ParamState,
    ds: Dataset,
    step: float,
    horizon: float,
    tol: float = 1e-9,
    max_halvings: int = 20,
) -> tuple[float, Trajectory]:
    """Halve the Euler step until the recorded losses are nonincreasing within ``tol``."""
    for _ in range(max_halvings + 1):
        try:
            tr = run_gradient_flow(lm, params, ds, step, horizon)
        except NonFiniteLoss:
            step /= 2.0
            continue
        if all(b <= a + tol for a, b in zip(tr.losses, tr.losses[1:])):
            return step, tr
        step /= 2.0
    raise RuntimeError(f"no monotone step found after {max_halvings} halvings")


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    step: float
    batch: int
    iters: int
    seed: int = 0
    record_every: int = 100

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.batch < 1 or self.iters < 0 or self.record_every < 1:
            raise ValueError("batch, iters, record_every must be positive")


def run_optimizer(
    lm: LiftedModule,
    params: ParamState,
    ds: Dataset,
    opt: OptimizerConfig,
) -> Trajectory:
    """Mini-batch training with replacement sampling; time is the iteration index.

    The recorded loss is the full-dataset empirical loss at t = 0, every
    ``record_every`` iterations, and the final iteration. Adam uses moment
    decays 0.9/0.999 and eps 1e-8 with bias correction.
    """
    if opt.batch > len(ds):
        raise ValueError("batch size exceeds the dataset")
    rng = np.random.default_rng(opt.seed)
    theta0 = params.to_flat()
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    times, losses, dists = [], [], []

    def record(it: int) -> None:
        state = params.with_flat(theta)
        loss = empirical_loss(lm, state.weights, state.readout, ds)
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became non-finite at iteration {it}",
                _partial(times, losses, dists, f"{opt.method} (heuristic)"),
            )
        times.append(float(it))
        losses.append(loss)
        dists.append(float(np.linalg.norm(theta - theta0)))

    record(0)
    for it in range(1, opt.iters + 1):
        idx = rng.integers(0, len(ds), size=opt.batch)
        _, grad = _loss_and_grad_flat(lm, params.with_flat(theta), ds.subset(idx))
        if opt.method == "sgd":
            theta -= opt.step * grad
        else:
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            mhat = m / (1.0 - 0.9**it)
            vhat = v / (1.0 - 0.999**it)
            theta -= opt.step * mhat / (np.sqrt(vhat) + 1e-8)
        if it % opt.record_every == 0 or it == opt.iters:
            record(it)
    return _finish(times, losses, dists, f"{opt.method} (heuristic)")


@dataclass(frozen=True)
class ConvergenceCertificate:
    """Check of the decay bound loss(t) <= epsilon + (kappa*t + 1/c)^(-1/3).

    ``c`` is the cube of the initial loss. ``worst_margin`` is the smallest
    bound-minus-loss over recorded times; negative means failure, and
    ``first_violation`` is the earliest failing time. ``heuristic`` marks
    certificates evaluated on discrete-optimizer trajectories, where the
    continuous-time criterion does not strictly apply.
    """

    passed: bool
    epsilon: float
    kappa: float
    c: float
    worst_margin: float
    worst_time: float
    first_violation: float | None
    heuristic: bool = False


def criterion_bound(t: float, epsilon: float, kappa: float, c: float) -> float:
    """The decay bound; kappa = inf gives epsilon for t > 0 and epsilon + c^(1/3) at 0."""
    inv_c = math.inf if c == 0.0 else 1.0 / c
    if math.isinf(kappa):
        base = inv_c if t == 0.0 else math.inf
    else:
        base = kappa * t + inv_c
    if math.isinf(base):
        return epsilon
    return epsilon + base ** (-1.0 / 3.0)


def check_convergence_criterion(
    tr: Trajectory, epsilon: float, kappa: float, heuristic: bool | None = None
) -> ConvergenceCertificate:
    """Evaluate the decay bound at every recorded time of ``tr``."""
    if epsilon < 0 or (not kappa >= 0):
        raise ValueError("epsilon must be nonnegative and kappa positive or inf")
    c = tr.losses[0] ** 3
    worst_margin = math.inf
    worst_time = 0.0
    first_violation = None
    for t, loss in zip(tr.times, tr.losses):
        if t == 0.0:
            # kappa drops out at t = 0: the bound is exactly epsilon + loss(0)
            bound = epsilon + tr.losses[0]
        else:
            bound = criterion_bound(t, epsilon, kappa, c)
        margin = bound - loss
        if margin < worst_margin:
            worst_margin = margin
            worst_time = t
        if margin < 0 and first_violation is None:
            first_violation = t
    if heuristic is None:
        heuristic = "heuristic" in tr.label
    return ConvergenceCertificate(
        passed=first_violation is None,
        epsilon=epsilon,
        kappa=kappa,
        c=c,
        worst_margin=worst_margin,
        worst_time=worst_time,
        first_violation=first_violation,
        heuristic=heuristic,
    )
