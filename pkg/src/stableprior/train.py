"""Stochastic gradient ascent with momentum, dampening, and a table prior.

Each update assembles g = (mean log-likelihood gradient over the batch)
plus c times the tabulated log-prior derivative of every prior-masked
weight.  The prior term is added once per update; it does not scale
with batch size.  The very first step applies the raw gradient and
seeds the momentum buffer with it; every later step blends the buffer
as beta <- m*beta + (1 - tau)*g and moves theta by lr*beta.  All signs
are ascent: the likelihood and the prior both push uphill.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import sparsity_fraction
from .datasets import AugmentFlags, LabeledDataset, augment
from .net import Model, save_checkpoint
from .rng import named_stream
from .table import DerivTable, StableParams, build_table, lookup_grad_many

__all__ = [
    "TrainConfig",
    "TrainReport",
    "SgdMomentum",
    "NonFiniteGradient",
    "TableDomainWarning",
    "schedule_lr",
    "train",
    "evaluate",
    "gaussian_log_deriv",
    "laplacian_log_deriv",
    "run_experiment_grid",
    "report_to_csv",
    "grid_to_csv",
    "GRID_COLUMNS",
]


class NonFiniteGradient(RuntimeError):
    pass


class TableDomainWarning(UserWarning):
    """More than 1% of prior lookups fell outside the tabulated range."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run."""

    epochs: int
    batch_size: int
    prior_scale_c: float = 0.0
    momentum_m: float = 0.9
    dampening_tau: float = 0.0
    lr_schedule: tuple = ((0.0, 0.01), (1.0, 0.01))
    seed: int = 0
    dropout_rate: float = 0.0
    augment_flip: bool = False
    augment_cutout: bool = False
    cutout_size: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prior_scale_c < 0:
            raise ValueError("prior_scale_c must be >= 0")
        if not 0 < self.momentum_m <= 1:
            raise ValueError("momentum_m must be in (0, 1]")
        if not 0 <= self.dampening_tau < 1:
            raise ValueError("dampening_tau must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.cutout_size < 1:
            raise ValueError("cutout_size must be >= 1")
        knots = tuple((float(f), float(r)) for f, r in self.lr_schedule)
        if len(knots) < 2 or knots[0][0] != 0.0 or knots[-1][0] != 1.0:
            raise ValueError("lr_schedule must start at fraction 0 and end at 1")
        fracs = [f for f, _ in knots]
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise ValueError("lr_schedule fractions must be strictly increasing")
        if any(r <= 0 for _, r in knots):
            raise ValueError("lr_schedule rates must be > 0")
        object.__setattr__(self, "lr_schedule", knots)


@dataclass
class TrainReport:
    train_accuracy: list[float]
    train_log_likelihood: list[float]
    test_accuracy: list[float]
    test_log_likelihood: list[float]
    saturation_fraction: list[float]
    lr_sequence: list[float]
    wall_clock_s: float
    seed: int
    checkpoint: bytes


def schedule_lr(knots, fraction: float) -> float:
    """Piecewise-linear interpolation of (fraction, rate) knots."""
    xs = [k[0] for k in knots]
    ys = [k[1] for k in knots]
    return float(np.interp(fraction, xs, ys))


class SgdMomentum:
    """Ascent steps over a fixed list of live parameter arrays."""

    def __init__(self, momentum: float, dampening: float, params):
        self.momentum = momentum
        self.dampening = dampening
        self.params = list(params)
        self.beta = None

    def step(self, grads, lr: float):
        if self.beta is None:
            self.beta = [np.array(g, dtype=np.float64) for g in grads]
            for theta, g in zip(self.params, grads):
                theta += lr * g
            return
        for buf, g in zip(self.beta, grads):
            buf *= self.momentum
            buf += (1.0 - self.dampening) * g
        for theta, buf in zip(self.params, self.beta):
            theta += lr * buf


def _one_hot(labels, k):
    return np.eye(k)[labels]


def evaluate(model: Model, dataset: LabeledDataset, batch_size: int = 512):
    """(accuracy, mean log-likelihood) with frozen statistics, no dropout."""
    n = len(dataset)
    correct = 0
    ll_sum = 0.0
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        probs = model.forward(x, training=False)[-1]
        correct += int(np.count_nonzero(np.argmax(probs, axis=1) == labels))
        picked = probs[np.arange(len(labels)), labels]
        ll_sum += float(np.log(np.maximum(picked, 1e-300)).sum())
    return correct / n, ll_sum / n


def _dropout_positions(model: Model):
    specs = model.specs
    return [i for i in range(1, len(specs))
            if specs[i].kind == "relu" and specs[i - 1].kind == "dense"]


def train(model: Model, train_set: LabeledDataset, test_set: LabeledDataset,
          prior, config: TrainConfig) -> TrainReport:
    """Run the full ascent loop; the model is updated in place.

    ``prior`` is a DerivTable (quantized lookups, rescaled to the
    config's c), a callable theta -> d/dtheta ln h(theta) (closed forms;
    scaled by c here), or None.  c = 0 disables the prior entirely and
    is bitwise identical to passing None.
    """
    t0 = time.perf_counter()
    n = len(train_set)
    k = train_set.class_count
    batch_count = -(-n // config.batch_size)
    total_steps = config.epochs * batch_count
    use_prior = prior is not None and config.prior_scale_c > 0
    table = None
    prior_fn = None
    if use_prior:
        if isinstance(prior, DerivTable):
            table = prior.with_scale(config.prior_scale_c)
        elif callable(prior):
            prior_fn = prior
        else:
            raise TypeError(f"prior must be a DerivTable, callable, or None, not {type(prior)}")

    refs = model.parameters()
    masked = [r for r in refs if r.prior_mask]
    opt = SgdMomentum(config.momentum_m, config.dampening_tau,
                      [model.get_param(r) for r in refs])
    shuffle_rng = named_stream(config.seed, "shuffle")
    flags = AugmentFlags(flip=config.augment_flip, cutout=config.augment_cutout,
                         cutout_size=config.cutout_size)
    augmenting = config.augment_flip or config.augment_cutout
    drop_at = _dropout_positions(model) if config.dropout_rate > 0 else []

    report = TrainReport([], [], [], [], [], [], 0.0, config.seed, b"")
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        correct = 0
        ll_sum = 0.0
        saturated = 0
        looked = 0
        for b in range(batch_count):
            sel = order[b * config.batch_size:(b + 1) * config.batch_size]
            x = train_set.images[sel]
            y = _one_hot(train_set.labels[sel], k)
            if augmenting:
                x = augment(x, flags, config.seed, step)
            masks = None
            if drop_at:
                drng = named_stream(config.seed, "dropout", step)
                masks = {}
                for i in drop_at:
                    shape = (len(sel),) + model.out_shapes[i]
                    keep = drng.random(shape) >= config.dropout_rate
                    masks[i] = keep / (1.0 - config.dropout_rate)
            acts = model.forward(x, training=True, dropout_masks=masks)
            model.backward(acts, y, dropout_masks=masks)
            if use_prior:
                for r in masked:
                    w = model.get_param(r)
                    g = model.get_grad(r)
                    if table is not None:
                        raw = np.floor(w / table.delta)
                        saturated += int(np.count_nonzero(
                            (raw < -table.n_grid) | (raw > table.n_grid)))
                        looked += w.size
                        g += lookup_grad_many(table, w)
                    else:
                        g += config.prior_scale_c * prior_fn(w)
            for r in refs:
                g = model.get_grad(r)
                if not np.all(np.isfinite(g)):
                    bad = int(np.count_nonzero(~np.isfinite(g)))
                    raise NonFiniteGradient(
                        f"step {step}: parameter {r.key} has {bad} non-finite "
                        f"gradient entries (epoch {epoch}, batch {b})")
            frac = step / (total_steps - 1) if total_steps > 1 else 0.0
            lr = schedule_lr(config.lr_schedule, frac)
            report.lr_sequence.append(lr)
            opt.step([model.get_grad(r) for r in refs], lr)
            probs = acts[-1]
            correct += int(np.count_nonzero(
                np.argmax(probs, axis=1) == train_set.labels[sel]))
            picked = probs[np.arange(len(sel)), train_set.labels[sel]]
            ll_sum += float(np.log(np.maximum(picked, 1e-300)).sum())
            step += 1
        sat_frac = saturated / looked if looked else 0.0
        if sat_frac > 0.01:
            warnings.warn(
                f"epoch {epoch}: {100 * sat_frac:.1f}% of prior lookups fell "
                f"outside [-epsilon, epsilon]; rebuild the table with a larger "
                f"epsilon", TableDomainWarning)
        test_acc, test_ll = evaluate(model, test_set)
        report.train_accuracy.append(correct / n)
        report.train_log_likelihood.append(ll_sum / n)
        report.test_accuracy.append(test_acc)
        report.test_log_likelihood.append(test_ll)
        report.saturation_fraction.append(sat_frac)
    report.wall_clock_s = time.perf_counter() - t0
    report.checkpoint = save_checkpoint(model)
    return report


def gaussian_log_deriv(gamma: float):
    """Slope of the log of the alpha=2 stable density: -theta/(2 gamma^2)."""
    def fn(theta):
        return -np.asarray(theta, dtype=np.float64) / (2.0 * gamma * gamma)
    return fn


def laplacian_log_deriv(gamma: float):
    """Laplace(scale gamma) log-density slope: -sign(theta)/gamma.

    Not a stable law; kept in closed form as the comparison prior.  The
    subgradient at exactly 0 is taken as 0.
    """
    def fn(theta):
        return -np.sign(np.asarray(theta, dtype=np.float64)) / gamma
    return fn


GRID_COLUMNS = ("prior", "alpha", "gamma", "c", "seed", "train_accuracy",
                "test_accuracy", "test_log_likelihood", "sparsity", "error")


def run_experiment_grid(base_config: TrainConfig, alphas, gammas, cs, seeds,
                        train_set: LabeledDataset, test_set: LabeledDataset,
                        model_factory, epsilon: float = 0.8, n_grid: int = 400,
                        include_laplacian: bool = False, sparsity_tau: float = 1e-3,
                        table_factory=None) -> list[dict]:
    """Sweep prior x gamma x c x seed, one result row per run.

    Cells never abort the grid: a failing run yields a row whose error
    column names the exception.  Cells with more than one seed get an
    extra aggregate row (seed column "mean") over the successful runs.
    model_factory(seed) must return a freshly initialized model so runs
    sharing a seed start from identical weights, which is what makes
    per-seed pairings across cells meaningful.
    """
    if table_factory is None:
        def table_factory(params, eps, ng):
            return build_table(params, eps, ng, prior_scale_c=1.0)

    priors = [("sas", a) for a in alphas]
    if include_laplacian:
        priors.append(("laplacian", None))
    tables: dict[tuple, DerivTable] = {}
    rows = []
    for kind, alpha in priors:
        for gamma in gammas:
            for c in cs:
                cell = []
                for seed in seeds:
                    row = {"prior": kind, "alpha": alpha, "gamma": gamma,
                           "c": c, "seed": seed, "train_accuracy": None,
                           "test_accuracy": None, "test_log_likelihood": None,
                           "sparsity": None, "error": ""}
                    try:
                        prior = None
                        if c > 0 and kind == "sas":
                            key = (alpha, gamma)
                            if key not in tables:
                                tables[key] = table_factory(
                                    StableParams(alpha, gamma=gamma), epsilon, n_grid)
                            prior = tables[key]
                        elif c > 0 and kind == "laplacian":
                            prior = laplacian_log_deriv(gamma)
                        config = replace(base_config, prior_scale_c=c, seed=seed)
                        model = model_factory(seed)
                        rep = train(model, train_set, test_set, prior, config)
                        row["train_accuracy"] = rep.train_accuracy[-1]
                        row["test_accuracy"] = rep.test_accuracy[-1]
                        row["test_log_likelihood"] = rep.test_log_likelihood[-1]
                        row["sparsity"] = sparsity_fraction(model, sparsity_tau)
                    except Exception as exc:
                        row["error"] = f"{type(exc).__name__}: {exc}"
                    rows.append(row)
                    cell.append(row)
                good = [r for r in cell if not r["error"]]
                if len(seeds) > 1 and good:
                    rows.append({
                        "prior": kind, "alpha": alpha, "gamma": gamma, "c": c,
                        "seed": "mean",
                        "train_accuracy": float(np.mean([r["train_accuracy"] for r in good])),
                        "test_accuracy": float(np.mean([r["test_accuracy"] for r in good])),
                        "test_log_likelihood": float(np.mean([r["test_log_likelihood"] for r in good])),
                        "sparsity": float(np.mean([r["sparsity"] for r in good])),
                        "error": "",
                    })
    return rows


def _cell_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def report_to_csv(report: TrainReport) -> str:
    lines = ["epoch,train_accuracy,train_log_likelihood,test_accuracy,"
             "test_log_likelihood,saturation_fraction"]
    for e in range(len(report.train_accuracy)):
        lines.append(",".join([str(e)] + [
            repr(float(v)) for v in (report.train_accuracy[e],
                              report.train_log_likelihood[e],
                              report.test_accuracy[e],
                              report.test_log_likelihood[e],
                              report.saturation_fraction[e])]))
    return "\n".join(lines) + "\n"


def grid_to_csv(rows: list[dict]) -> str:
    lines = [",".join(GRID_COLUMNS)]
    for row in rows:
        lines.append(",".join(_cell_text(row[c]).replace(",", ";") for c in GRID_COLUMNS))
    return "\n".join(lines) + "\n"
