"""Config-driven experiment harness emitting CSV tables, SVG plots, and JSON reports.

Four experiment kinds share one config shape:

- ``sine-quantiles``: train lifts of a one-dimensional regressor on a fixed
  sine target at several widths, report final-loss deciles per width.
- ``mnist-compare``: train a dense baseline against sparse lifts over a
  (width, lambda) grid, report test accuracy and exact parameter counts.
- ``witness-cover``: sample lifts at growing widths and search each for a
  covering matching of a fixed witness, report success frequencies next to
  the theoretical lower bound.
- ``theory-report``: evaluate the guarantee constants of a witness at each
  requested width and emit them as JSON.

Every run is reproducible: the config's master seed determines the dataset,
every initialization, and every batch stream, so identical configs produce
identical output bytes. Per-trial rows are appended to ``trials.csv`` and
flushed as they complete, so partial results survive a crash.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .blueprints import (
    LiftPlan,
    ParseError,
    ValidationError,
    bundled_blueprint_path,
    load_blueprint_file,
)
from .fastpath import DenseMLP, FastScalarModule, fast_train, identity_readout
from .mnist_io import default_mnist_dir, load_mnist_arrays, locate_mnist
from .modules import forward, linear_readout
from .sparse import config_from_plan, sample_from_plan
from .theory import (
    PartialMorphism,
    TheoryReport,
    alpha_parameter,
    covering_probability_bound,
    find_covering_morphism,
    threshold_constants,
    verify_covering,
)
from .training import OptimizerConfig

__all__ = [
    "KINDS",
    "DESK_ITERS",
    "PAPER_ITERS",
    "DESK_MAX_WIDTH",
    "ConfigError",
    "ExperimentConfig",
    "QuantileTable",
    "AccuracyTable",
    "CoverTable",
    "TheoryDocument",
    "run_experiment",
    "train_one",
    "emit_results",
    "load_plan_ref",
]

KINDS = ("sine-quantiles", "mnist-compare", "witness-cover", "theory-report")

# desk-scale defaults; --paper-scale restores the full settings
DESK_ITERS = 20_000
PAPER_ITERS = 100_000
DESK_MAX_WIDTH = 1024

SINE_SAMPLES = 10_000
SINE_RANGE = (0.0, 100.0)
SINE_AMPLITUDE = 2.0
SINE_FREQUENCY = 0.5
SINE_PHASE = 0.42

# full-dataset loss at every record point is too costly for MNIST; the
# recorded trajectory uses a fixed subsample (training itself is unaffected)
EVAL_SUBSAMPLE = 2_000
THEORY_PROBES = 32


class ConfigError(ValueError):
    """The experiment configuration is malformed or out of supported range."""


_DEFAULT_BLUEPRINT = {
    "sine-quantiles": "sine",
    "mnist-compare": "mnist",
    "witness-cover": "cover",
    "theory-report": "sine",
}
_DEFAULT_WIDTHS = {
    "sine-quantiles": (20, 100),
    "mnist-compare": (128,),
    "witness-cover": (50, 100, 200),
    "theory-report": (100,),
}
_DEFAULT_LAMBDAS = {
    "sine-quantiles": (),
    "mnist-compare": (10.0,),
    "witness-cover": (),
    "theory-report": (),
}
_DEFAULT_SEEDS = {
    "sine-quantiles": 20,
    "mnist-compare": 1,
    "witness-cover": 100,
    "theory-report": 1,
}
_DEFAULT_OPTIMIZER = {
    "sine-quantiles": {"method": "adam", "step": 1e-2, "batch": 10},
    "mnist-compare": {"method": "adam", "step": 1e-3, "batch": 100},
    "witness-cover": {"method": "adam", "step": 1e-2, "batch": 10},
    "theory-report": {"method": "adam", "step": 1e-2, "batch": 10},
}

_CONFIG_KEYS = {
    "kind", "blueprint", "widths", "lambdas", "seeds", "optimizer",
    "out_dir", "seed", "eta", "witness_width", "witness_seed",
    "epsilon", "delta", "mnist_dir",
}

# seed-derivation tags so distinct roles never share an RNG stream
_TAG_DATA, _TAG_INIT, _TAG_TRAIN, _TAG_PROBE = 0, 1, 2, 3


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: what to run, at which sizes, and where to write.

    ``widths`` instantiates the blueprint's free width symbol; ``lambdas``
    overrides the sparsity of the blueprint's Bernoulli edges (the sparse
    family grid for mnist-compare, a single value elsewhere). ``seeds`` is
    the number of independent trials per grid cell, all derived from the
    master ``seed``. The witness and tolerance fields only matter for
    witness-cover and theory-report.
    """

    kind: str
    blueprint: str | None
    widths: tuple[int, ...]
    lambdas: tuple[float, ...]
    seeds: int
    optimizer: OptimizerConfig
    out_dir: str
    seed: int = 0
    eta: float = 0.5
    witness_width: int = 4
    witness_seed: int = 0
    epsilon: float = 0.01
    delta: float = 0.1
    mnist_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if not self.widths:
            raise ConfigError("widths must be nonempty")
        if any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError("widths must be strictly ascending")
        if any(not lam > 0 for lam in self.lambdas):
            raise ConfigError("lambdas must be positive")
        if not self.eta >= 0:
            raise ConfigError("eta must be nonnegative")
        if self.witness_width < 1:
            raise ConfigError("witness_width must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], paper_scale: bool = False) -> "ExperimentConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(doc) - _CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        kind = str(doc.get("kind", ""))
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")

        widths = doc.get("widths", _DEFAULT_WIDTHS[kind])
        try:
            widths = tuple(sorted({int(w) for w in widths}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"widths must be a list of integers: {exc}") from exc
        if not paper_scale and widths and max(widths) > DESK_MAX_WIDTH:
            raise ConfigError(
                f"width {max(widths)} exceeds the desk-scale cap {DESK_MAX_WIDTH}; "
                "rerun with --paper-scale to allow it"
            )

        lambdas = doc.get("lambdas", _DEFAULT_LAMBDAS[kind])
        try:
            lambdas = tuple(float(l) for l in lambdas)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"lambdas must be a list of numbers: {exc}") from exc

        opt_doc = dict(_DEFAULT_OPTIMIZER[kind])
        opt_doc["iters"] = PAPER_ITERS if paper_scale else DESK_ITERS
        user_opt = doc.get("optimizer", {})
        if not isinstance(user_opt, Mapping):
            raise ConfigError("optimizer must be an object")
        opt_doc.update(user_opt)
        try:
            optimizer = OptimizerConfig(
                method=str(opt_doc.get("method", "adam")),
                step=float(opt_doc["step"]),
                batch=int(opt_doc["batch"]),
                iters=int(opt_doc["iters"]),
                seed=int(opt_doc.get("seed", 0)),
                record_every=int(opt_doc.get("record_every", 100)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer block: {exc}") from exc

        try:
            return cls(
                kind=kind,
                blueprint=None if doc.get("blueprint") is None else str(doc["blueprint"]),
                widths=widths,
                lambdas=lambdas,
                seeds=int(doc.get("seeds", _DEFAULT_SEEDS[kind])),
                optimizer=optimizer,
                out_dir=str(doc.get("out_dir", "results")),
                seed=int(doc.get("seed", 0)),
                eta=float(doc.get("eta", 0.5)),
                witness_width=int(doc.get("witness_width", 4)),
                witness_seed=int(doc.get("witness_seed", 0)),
                epsilon=float(doc.get("epsilon", 0.01)),
                delta=float(doc.get("delta", 0.1)),
                mnist_dir=None if doc.get("mnist_dir") is None else str(doc["mnist_dir"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path, paper_scale: bool = False) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, paper_scale=paper_scale)

    def to_dict(self) -> dict[str, Any]:
        opt = self.optimizer
        return {
            "kind": self.kind,
            "blueprint": self.blueprint,
            "widths": list(self.widths),
            "lambdas": list(self.lambdas),
            "seeds": self.seeds,
            "optimizer": {
                "method": opt.method,
                "step": opt.step,
                "batch": opt.batch,
                "iters": opt.iters,
                "seed": opt.seed,
                "record_every": opt.record_every,
            },
            "out_dir": self.out_dir,
            "seed": self.seed,
            "eta": self.eta,
            "witness_width": self.witness_width,
            "witness_seed": self.witness_seed,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "mnist_dir": self.mnist_dir,
        }

    def load_plan(self) -> LiftPlan:
        """Resolve the blueprint field: an explicit path, or a bundled name."""
        return load_plan_ref(self.blueprint or _DEFAULT_BLUEPRINT[self.kind])


def load_plan_ref(ref: str) -> LiftPlan:
    """Load a blueprint given either a file path or a bundled plan name."""
    try:
        p = Path(ref)
        if p.suffix == ".json" or p.exists():
            return load_blueprint_file(p)
        return load_blueprint_file(bundled_blueprint_path(ref))
    except (ParseError, ValidationError) as exc:
        raise ConfigError(f"blueprint {ref!r}: {exc}") from exc


def _derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of role tags; avoids stream collisions."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


def _width_symbol(plan: LiftPlan) -> str:
    syms = plan.symbols()
    if len(syms) != 1:
        raise ConfigError(
            f"experiment blueprints need exactly one free width symbol, found {list(syms)}"
        )
    return syms[0]


def _sparse_override(plan: LiftPlan, lam: float | None) -> dict[int, float] | None:
    """Map a single grid lambda onto every Bernoulli edge of the plan."""
    if lam is None:
        return None
    return {i: lam for i, el in enumerate(plan.edge_lifts) if el.mode == "sparse"}


# ---------------------------------------------------------------- tables


def _fmt(x: float) -> str:
    """Shortest round-trip decimal form, stable across runs."""
    return repr(float(x))


@dataclass(frozen=True)
class QuantileTable:
    """Final-loss deciles per width; rows follow the widths in order."""

    widths: tuple[int, ...]
    rows: tuple[tuple[float, float, float, float, float], ...]
    filename: str = "quantiles.csv"

    def __post_init__(self):
        if len(self.widths) != len(self.rows):
            raise ValueError("one quantile row per width")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly ascending")
        for w, row in zip(self.widths, self.rows):
            if len(row) != 5:
                raise ValueError(f"width {w}: expected 5 quantiles")
            if any(b < a for a, b in zip(row, row[1:])):
                raise ValueError(f"width {w}: quantiles must be nondecreasing")

    @classmethod
    def from_samples(cls, samples: Mapping[int, Sequence[float]]) -> "QuantileTable":
        widths = tuple(sorted(samples))
        rows = []
        for w in widths:
            vals = np.asarray(samples[w], dtype=np.float64)
            if vals.size == 0:
                raise ValueError(f"width {w} has no samples")
            q = np.quantile(vals, [0.10, 0.25, 0.50, 0.75, 0.90])
            rows.append(tuple(float(x) for x in q))
        return cls(widths, tuple(rows))

    def median(self, width: int) -> float:
        return self.rows[self.widths.index(width)][2]

    def to_csv_text(self) -> str:
        lines = ["width,p10,p25,p50,p75,p90"]
        for w, row in zip(self.widths, self.rows):
            lines.append(f"{w}," + ",".join(_fmt(x) for x in row))
        return "\n".join(lines) + "\n"

    def plot_svg(self) -> str:
        xs = [float(w) for w in self.widths]
        names = ("p10", "p25", "p50", "p75", "p90")
        series = [(nm, xs, [row[i] for row in self.rows]) for i, nm in enumerate(names)]
        return _svg_plot(
            "final training loss quantiles", "width", "loss",
            series, log_x=True, log_y=True,
        )


@dataclass(frozen=True)
class AccuracyTable:
    """Test accuracy per trained model; one row per trial.

    ``lam`` is None for the dense family (empty CSV cell). ``parameters`` is
    the exact trained parameter count: for sparse lifts the realized edge
    count of that trial's sample, not the expectation.
    """

    rows: tuple[tuple[str, int, float | None, int, float], ...]
    filename: str = "accuracy.csv"

    def to_csv_text(self) -> str:
        lines = ["family,width,lambda,parameters,accuracy"]
        for family, width, lam, params, acc in self.rows:
            cell = "" if lam is None else _fmt(lam)
            lines.append(f"{family},{width},{cell},{params},{_fmt(acc)}")
        return "\n".join(lines) + "\n"

    def plot_svg(self) -> str:
        groups: dict[str, dict[float, list[float]]] = {}
        for family, width, lam, _, acc in self.rows:
            key = family if lam is None else f"{family} lam={lam:g}"
            groups.setdefault(key, {}).setdefault(float(width), []).append(acc)
        series = []
        for key in sorted(groups):
            pts = sorted(groups[key].items())
            series.append((key, [x for x, _ in pts], [float(np.mean(v)) for _, v in pts]))
        return _svg_plot("test accuracy", "width", "accuracy", series, log_x=True)


@dataclass(frozen=True)
class CoverTable:
    """Covering-search success frequency per lift width, with the lower bound."""

    rows: tuple[tuple[int, int, int, float, float], ...]
    filename: str = "cover.csv"

    def to_csv_text(self) -> str:
        lines = ["n,successes,trials,frequency,lower_bound"]
        for n, succ, trials, freq, bound in self.rows:
            lines.append(f"{n},{succ},{trials},{_fmt(freq)},{_fmt(bound)}")
        return "\n".join(lines) + "\n"

    def plot_svg(self) -> str:
        xs = [float(r[0]) for r in self.rows]
        return _svg_plot(
            "covering matchings found", "width", "frequency",
            [
                ("empirical", xs, [r[3] for r in self.rows]),
                ("lower bound", xs, [r[4] for r in self.rows]),
            ],
        )


@dataclass(frozen=True)
class TheoryDocument:
    """Guarantee constants per requested width, rendered as one JSON file."""

    reports: tuple[tuple[int, TheoryReport], ...]
    filename: str = "theory_report.json"

    def to_json_text(self) -> str:
        doc = [
            {"width": w, **json.loads(r.to_json(indent=None))}
            for w, r in self.reports
        ]
        return json.dumps(doc, indent=2) + "\n"

    def plot_svg(self) -> None:
        return None


# ------------------------------------------------------------- trial pool


def _run_pool(
    fn: Callable[..., tuple],
    jobs: Sequence[tuple],
    threads: int,
    log_path: Path,
    header: str,
    fmt_row: Callable[[tuple], str],
) -> list[tuple]:
    """Run trials, appending each finished row to the log in job order.

    With threads > 1 the jobs run on a pool but rows are still written in
    submission order by the calling thread, so log bytes are deterministic
    and file writes never race.
    """
    results: list[tuple] = []
    with open(log_path, "w") as fh:
        fh.write(header + "\n")
        fh.flush()
        if threads <= 1:
            for job in jobs:
                row = fn(*job)
                results.append(row)
                fh.write(fmt_row(row) + "\n")
                fh.flush()
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(fn, *job) for job in jobs]
                for fut in futures:
                    row = fut.result()
                    results.append(row)
                    fh.write(fmt_row(row) + "\n")
                    fh.flush()
    return results


# ------------------------------------------------------------ experiments


def _sine_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    data_rng = np.random.default_rng(_derive_seed(cfg.seed, _TAG_DATA))
    X = data_rng.uniform(*SINE_RANGE, size=(SINE_SAMPLES, 1))
    Y = SINE_AMPLITUDE * np.sin(SINE_FREQUENCY * X + SINE_PHASE)
    return X, Y


def _sine_trial(cfg: ExperimentConfig, plan: LiftPlan, sym: str,
                X: np.ndarray, Y: np.ndarray, wi: int, width: int, t: int):
    lm, w0 = sample_from_plan(plan, {sym: width}, seed=_derive_seed(cfg.seed, _TAG_INIT, wi, t))
    model = FastScalarModule(lm, loss="mse")
    model.set_section(w0)
    opt = replace(cfg.optimizer, seed=_derive_seed(cfg.seed, _TAG_TRAIN, wi, t))
    return fast_train(model, X, Y, opt)


def train_one(cfg: ExperimentConfig, width: int | None = None):
    """A single regression trial; reproduces trial 0 of the sine experiment.

    With ``width`` given it must be one of the config's widths; the returned
    trajectory is bit-identical to that width's first trial in a full run.
    """
    w = cfg.widths[0] if width is None else int(width)
    if w not in cfg.widths:
        raise ConfigError(f"width {w} is not in the config widths {list(cfg.widths)}")
    plan = cfg.load_plan()
    sym = _width_symbol(plan)
    X, Y = _sine_data(cfg)
    return _sine_trial(cfg, plan, sym, X, Y, cfg.widths.index(w), w, 0)


def _run_sine(cfg: ExperimentConfig, out_dir: Path, threads: int):
    plan = cfg.load_plan()
    sym = _width_symbol(plan)
    X, Y = _sine_data(cfg)

    def trial(wi: int, width: int, t: int) -> tuple:
        tr = _sine_trial(cfg, plan, sym, X, Y, wi, width, t)
        return (width, t, tr.final_loss, tr.dist_from_init[-1])

    jobs = [(wi, w, t) for wi, w in enumerate(cfg.widths) for t in range(cfg.seeds)]
    rows = _run_pool(
        trial, jobs, threads, out_dir / "trials.csv",
        "width,trial,final_loss,dist_from_init",
        lambda r: f"{r[0]},{r[1]},{_fmt(r[2])},{_fmt(r[3])}",
    )
    samples: dict[int, list[float]] = {w: [] for w in cfg.widths}
    for width, _, loss, _ in rows:
        samples[width].append(loss)
    return [QuantileTable.from_samples(samples)]


def _run_mnist(cfg: ExperimentConfig, out_dir: Path, threads: int):
    root = Path(cfg.mnist_dir) if cfg.mnist_dir else None
    train_paths = locate_mnist("train", root)
    test_paths = locate_mnist("test", root)
    if train_paths is None or test_paths is None:
        raise ConfigError(
            f"MNIST idx files not found under {root or default_mnist_dir()}; "
            "supply mnist_dir or set LIFTLAB_MNIST_DIR"
        )
    Xtr, ytr = load_mnist_arrays(*train_paths)
    Xte, yte = load_mnist_arrays(*test_paths)
    eval_idx = np.arange(min(EVAL_SUBSAMPLE, Xtr.shape[0]))

    plan = cfg.load_plan()
    sym = _width_symbol(plan)
    if not any(el.mode == "sparse" for el in plan.edge_lifts):
        raise ConfigError("mnist-compare needs a blueprint with Bernoulli edges")
    if not cfg.lambdas:
        raise ConfigError("mnist-compare needs at least one lambda")
    n_in = Xtr.shape[1]

    def trial(family: str, fam_tag: int, wi: int, width: int, lam: float | None, t: int) -> tuple:
        init = _derive_seed(cfg.seed, _TAG_INIT, fam_tag, wi, t)
        opt = replace(cfg.optimizer, seed=_derive_seed(cfg.seed, _TAG_TRAIN, fam_tag, wi, t))
        if family == "dense":
            model: Any = DenseMLP.init((n_in, width, width, 10), np.random.default_rng(init))
            params = model.n_parameters
        else:
            lm, w0 = sample_from_plan(
                plan, {sym: width}, seed=init, lam_override=_sparse_override(plan, lam)
            )
            model = FastScalarModule(lm, loss="xent")
            model.set_section(w0)
            params = lm.weight_bundle.total_dim
        fast_train(model, Xtr, ytr, opt, eval_indices=eval_idx)
        acc = float(np.mean(model.predict(Xte).argmax(axis=1) == yte))
        return (family, width, lam, t, params, acc)

    jobs: list[tuple] = []
    for wi, w in enumerate(cfg.widths):
        for t in range(cfg.seeds):
            jobs.append(("dense", 0, wi, w, None, t))
        for li, lam in enumerate(cfg.lambdas):
            for t in range(cfg.seeds):
                jobs.append(("sparse", 1 + li, wi, w, lam, t))
    rows = _run_pool(
        trial, jobs, threads, out_dir / "trials.csv",
        "family,width,lambda,trial,parameters,accuracy",
        lambda r: f"{r[0]},{r[1]},{'' if r[2] is None else _fmt(r[2])},{r[3]},{r[4]},{_fmt(r[5])}",
    )
    table = AccuracyTable(tuple((f, w, lam, p, a) for f, w, lam, _, p, a in rows))
    return [table]


def _run_cover(cfg: ExperimentConfig, out_dir: Path, threads: int):
    plan = cfg.load_plan()
    sym = _width_symbol(plan)
    override = _sparse_override(plan, cfg.lambdas[0]) if cfg.lambdas else None
    lm_star, w_star = sample_from_plan(
        plan, {sym: cfg.witness_width}, seed=cfg.witness_seed, lam_override=override
    )

    per_width: dict[int, tuple] = {}
    for n in cfg.widths:
        lift_cfg = config_from_plan(plan, {sym: n}, lam_override=override)
        alpha = alpha_parameter(
            lm_star, w_star, lift_cfg.lam, cfg.eta, lift_cfg.n,
            ball_seed=_derive_seed(cfg.seed, _TAG_PROBE),
        )
        bound = covering_probability_bound(lm_star, alpha, lift_cfg.n)
        per_width[n] = (alpha, bound)

    def trial(ni: int, n: int, t: int) -> tuple:
        alpha, _ = per_width[n]
        lm, w = sample_from_plan(
            plan, {sym: n}, seed=_derive_seed(cfg.seed, _TAG_INIT, ni, t), lam_override=override
        )
        found = find_covering_morphism(lm, w, lm_star, w_star, alpha, cfg.eta)
        ok = isinstance(found, PartialMorphism) and verify_covering(
            found, lm, w, lm_star, w_star
        ).ok
        matched = len(found.pairs) if isinstance(found, PartialMorphism) else 0
        return (n, t, matched, int(ok))

    jobs = [(ni, n, t) for ni, n in enumerate(cfg.widths) for t in range(cfg.seeds)]
    rows = _run_pool(
        trial, jobs, threads, out_dir / "trials.csv",
        "n,trial,matched,success",
        lambda r: f"{r[0]},{r[1]},{r[2]},{r[3]}",
    )
    out_rows = []
    for n in cfg.widths:
        hits = [ok for nn, _, _, ok in rows if nn == n]
        out_rows.append((n, sum(hits), len(hits), sum(hits) / len(hits), per_width[n][1]))
    return [CoverTable(tuple(out_rows))]


def _run_theory(cfg: ExperimentConfig, out_dir: Path):
    plan = cfg.load_plan()
    sym = _width_symbol(plan)
    override = _sparse_override(plan, cfg.lambdas[0]) if cfg.lambdas else None
    lm_star, w_star = sample_from_plan(
        plan, {sym: cfg.witness_width}, seed=cfg.witness_seed, lam_override=override
    )
    a_star = identity_readout(lm_star)

    rng = np.random.default_rng(_derive_seed(cfg.seed, _TAG_PROBE))
    dims = {name: lm_star.activation_bundle.dims[v] for v, name in lm_star.naming}
    X = [
        {name: rng.standard_normal(d) for name, d in sorted(dims.items())}
        for _ in range(THEORY_PROBES)
    ]
    preds = np.stack([linear_readout(a_star, forward(lm_star, w_star, x), lm_star) for x in X])
    f_star_norm = float(np.sqrt(np.mean(np.sum(preds * preds, axis=1))))

    reports = []
    for width in cfg.widths:
        lift_cfg = config_from_plan(plan, {sym: width}, lam_override=override)
        rep = threshold_constants(
            lm_star, w_star, a_star, lift_cfg.lam, cfg.delta, cfg.epsilon,
            f_star_norm, X, f_star=preds,
        )
        reports.append((width, rep))
    return [TheoryDocument(tuple(reports))]


def run_experiment(cfg: ExperimentConfig, threads: int = 1, plots: bool = False) -> list[Path]:
    """Run one experiment and return every file written (trial log included)."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    written = [out_dir / "config.json"]

    if cfg.kind == "sine-quantiles":
        tables = _run_sine(cfg, out_dir, threads)
        written.append(out_dir / "trials.csv")
    elif cfg.kind == "mnist-compare":
        tables = _run_mnist(cfg, out_dir, threads)
        written.append(out_dir / "trials.csv")
    elif cfg.kind == "witness-cover":
        tables = _run_cover(cfg, out_dir, threads)
        written.append(out_dir / "trials.csv")
    else:
        tables = _run_theory(cfg, out_dir)
    return written + emit_results(tables, out_dir, plots=plots)


def emit_results(results: Sequence[Any], out_dir: str | Path, plots: bool = False) -> list[Path]:
    """Write result tables as CSV (JSON for theory documents), plus SVG plots.

    An empty result list writes nothing and warns. OS-level write failures
    propagate as OSError.
    """
    if not results:
        warnings.warn("no results to emit; nothing written", stacklevel=2)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for r in results:
        if hasattr(r, "to_csv_text"):
            payload = r.to_csv_text()
        elif hasattr(r, "to_json_text"):
            payload = r.to_json_text()
        else:
            raise TypeError(f"cannot emit result of type {type(r).__name__}")
        path = out / r.filename
        path.write_text(payload)
        written.append(path)
        if plots:
            svg = r.plot_svg()
            if svg is not None:
                svg_path = path.with_suffix(".svg")
                svg_path.write_text(svg)
                written.append(svg_path)
    return written


# -------------------------------------------------------------- svg plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 72, 620, 46, 352


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        import math

        lo_e = math.floor(math.log10(lo))
        hi_e = math.ceil(math.log10(hi))
        ticks = [10.0**e for e in range(lo_e, hi_e + 1)]
        return [t for t in ticks if lo <= t <= hi] or [lo, hi]
    if hi == lo:
        return [lo]
    step = (hi - lo) / 4.0
    return [lo + i * step for i in range(5)]


def _tick_label(v: float) -> str:
    return f"{v:g}"


def _svg_plot(
    title: str,
    x_label: str,
    y_label: str,
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    log_x: bool = False,
    log_y: bool = False,
) -> str:
    """Minimal self-contained line plot; log axes fall back to linear when the
    data includes nonpositive values."""
    import math

    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    log_x = log_x and min(xs_all) > 0
    log_y = log_y and min(ys_all) > 0

    def span(vals: list[float], log: bool) -> tuple[float, float]:
        lo, hi = min(vals), max(vals)
        if log:
            if hi == lo:
                return lo / 2.0, hi * 2.0
            return lo / 1.3, hi * 1.3
        pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.5
        return lo - pad, hi + pad

    x_lo, x_hi = span(xs_all, log_x)
    y_lo, y_hi = span(ys_all, log_y)

    def sx(v: float) -> float:
        a, b = (math.log10(x_lo), math.log10(x_hi)) if log_x else (x_lo, x_hi)
        t = (math.log10(v) if log_x else v)
        return _LEFT + (_RIGHT - _LEFT) * (t - a) / (b - a)

    def sy(v: float) -> float:
        a, b = (math.log10(y_lo), math.log10(y_hi)) if log_y else (y_lo, y_hi)
        t = (math.log10(v) if log_y else v)
        return _BOTTOM - (_BOTTOM - _TOP) * (t - a) / (b - a)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{(_LEFT + _RIGHT) / 2:.1f}" y="24" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<rect x="{_LEFT}" y="{_TOP}" width="{_RIGHT - _LEFT}" height="{_BOTTOM - _TOP}" '
        'fill="none" stroke="#333"/>',
    ]
    for tx in _ticks(x_lo, x_hi, log_x):
        px = sx(tx)
        parts.append(f'<line x1="{px:.2f}" y1="{_BOTTOM}" x2="{px:.2f}" y2="{_BOTTOM + 4}" stroke="#333"/>')
        parts.append(
            f'<text x="{px:.2f}" y="{_BOTTOM + 16}" text-anchor="middle">{_tick_label(tx)}</text>'
        )
    for ty in _ticks(y_lo, y_hi, log_y):
        py = sy(ty)
        parts.append(f'<line x1="{_LEFT - 4}" y1="{py:.2f}" x2="{_LEFT}" y2="{py:.2f}" stroke="#333"/>')
        parts.append(
            f'<text x="{_LEFT - 7}" y="{py + 3.5:.2f}" text-anchor="end">{_tick_label(ty)}</text>'
        )
    parts.append(
        f'<text x="{(_LEFT + _RIGHT) / 2:.1f}" y="{_H - 8}" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(_TOP + _BOTTOM) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(_TOP + _BOTTOM) / 2:.1f})">{y_label}</text>'
    )
    for i, (name, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(zip(xs, ys))
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        if len(pts) > 1:
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        ly = _TOP + 14 + 14 * i
        parts.append(f'<line x1="{_RIGHT - 120}" y1="{ly}" x2="{_RIGHT - 100}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_RIGHT - 94}" y="{ly + 3.5}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
