"""Plaintext reference world for the secure protocol.

Synthetic convex tasks stand in for the usual image benchmarks: quadratics
with a known spectrum and an l2-regularized logistic family. On top of them
live a float64 mirror of the two-stage protocol, retraining baselines, the
closed-form recovery-distance bound, and exact-arithmetic oracles for the
individual gates.

The mirror deliberately tracks the fixed-point pipeline: client gradients are
snapped to the codec grid before use and every discrete decision (keep flags,
threshold flags, curvature screens) is evaluated on values both worlds agree
on. What remains of the secure-vs-mirror drift is truncation noise, which the
acceptance harness budgets per truncation event.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    AssumptionError,
    ConfigError,
    DegenerateRoundError,
    DivisionDomainError,
    ShapeError,
    SingularRevealError,
    UnknownFunctionality,
)
from .fixedpoint import FixedPointCodec
from .sharing import STREAM_BASELINE, STREAM_DATA, keyed_rng
from .unlearn import ClientPool, UnlearnConfig, client_round


# -- synthetic convex tasks ---------------------------------------------------


@dataclass
class QuadraticClient:
    """Local objective 0.5 (M - opt)' A (M - opt) with an SPD curvature A."""

    matrix: np.ndarray
    opt: np.ndarray
    weight: int = 1

    def gradient(self, model: np.ndarray) -> np.ndarray:
        return self.matrix @ (model - self.opt)

    def objective(self, model: np.ndarray) -> float:
        d = model - self.opt
        return 0.5 * float(d @ self.matrix @ d)

    @classmethod
    def empty(cls, m: int) -> "QuadraticClient":
        """A client that holds no data: zero weight, zero gradient."""
        return cls(matrix=np.zeros((m, m)), opt=np.zeros(m), weight=0)


@dataclass
class LogisticClient:
    """l2-regularized logistic loss over a private sample (labels in +-1)."""

    features: np.ndarray
    labels: np.ndarray
    reg: float

    @property
    def weight(self) -> int:
        return int(self.labels.size)

    def gradient(self, model: np.ndarray) -> np.ndarray:
        z = self.labels * (self.features @ model)
        s = -self.labels / (1.0 + np.exp(z))
        return self.features.T @ s / self.labels.size + self.reg * model

    def objective(self, model: np.ndarray) -> float:
        z = self.labels * (self.features @ model)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.reg * float(model @ model))

    def hessian(self, model: np.ndarray) -> np.ndarray:
        z = self.features @ model
        w = 1.0 / ((1.0 + np.exp(z)) * (1.0 + np.exp(-z)))
        m = model.size
        return (self.features.T * w) @ self.features / self.labels.size + self.reg * np.eye(m)


@dataclass
class ConvexTask:
    """A federated convex objective with declared curvature bounds.

    mu and lip bound the averaged Hessian from below and above. They may be
    loose (any valid sandwich works; a loose lip is how callers pin a wanted
    mu/L step size) but never invalid.
    """

    kind: str
    clients: list
    initial_model: np.ndarray
    mu: float
    lip: float
    heldout: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "logistic"):
            raise ConfigError(f"unknown task family {self.kind!r}")
        if not (0.0 < self.mu <= self.lip):
            raise ConfigError(f"curvature bounds need 0 < mu <= L, got {self.mu}, {self.lip}")
        self.initial_model = np.asarray(self.initial_model, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.clients)

    @property
    def m(self) -> int:
        return int(self.initial_model.size)

    def pool(self) -> ClientPool:
        return ClientPool(clients=list(self.clients), initial_model=self.initial_model.copy())

    def _included(self, excluded):
        picked = [c for j, c in enumerate(self.clients) if j != excluded]
        weights = np.array([c.weight for c in picked], dtype=np.float64)
        if weights.sum() <= 0:
            raise ConfigError("no data left after exclusion")
        return picked, weights / weights.sum()

    def gradient(self, model: np.ndarray, excluded: int | None = None) -> np.ndarray:
        """Data-size weighted average gradient of the included clients."""
        picked, w = self._included(excluded)
        return np.einsum("j,jk->k", w, np.stack([c.gradient(model) for c in picked]))

    def objective(self, model: np.ndarray, excluded: int | None = None) -> float:
        picked, w = self._included(excluded)
        return float(sum(wi * c.objective(model) for wi, c in zip(w, picked)))

    def optimum(self, excluded: int | None = None) -> np.ndarray:
        """Minimizer of the (weighted) average objective.

        Closed form for quadratics; a short Newton run for the logistic
        family, which the regularizer keeps strictly convex.
        """
        picked, w = self._included(excluded)
        if self.kind == "quadratic":
            lhs = sum(wi * c.matrix for wi, c in zip(w, picked))
            rhs = sum(wi * (c.matrix @ c.opt) for wi, c in zip(w, picked))
            return np.linalg.solve(lhs, rhs)
        model = np.zeros(self.m)
        for _ in range(100):
            g = self.gradient(model, excluded=excluded)
            if float(np.linalg.norm(g)) < 1e-13:
                break
            h = sum(wi * c.hessian(model) for wi, c in zip(w, picked))
            model = model - np.linalg.solve(h, g)
        return model

    def objective_gap(self, excluded: int | None = None) -> float:
        return self.objective(self.initial_model, excluded) - self.objective(self.optimum(excluded), excluded)

    def test_error(self, model: np.ndarray) -> float:
        """Held-out error: excess objective for quadratics, misclassification
        rate on the reserved sample for logistic tasks."""
        if self.kind == "quadratic":
            return max(0.0, self.objective(model) - self.objective(self.optimum()))
        x, y = self.heldout
        predicted = np.where(x @ model >= 0.0, 1.0, -1.0)
        return float(np.mean(predicted != y))


def quadratic_task(
    n: int,
    m: int,
    *,
    mu: float = 4.0,
    lam_max: float | None = None,
    lip: float | None = None,
    spread: float = 1.0,
    start: float = 1.0,
    heterogeneity: float = 0.4,
    seed: int = 0,
) -> ConvexTask:
    """Quadratic clients sharing one curvature shape, scaled per client.

    The scales are centered on 1, so the averaged Hessian keeps the base
    spectrum [mu, lam_max] and the declared bounds are honest and tight.
    Passing a larger lip loosens the smoothness constant on purpose.
    """
    if n < 2 or m < 1:
        raise ConfigError("need at least two clients and one coordinate")
    lam_max = 1.25 * mu if lam_max is None else float(lam_max)
    if lam_max < mu:
        raise ConfigError("lam_max below mu")
    lip = lam_max if lip is None else float(lip)
    if lip < lam_max:
        raise ConfigError("declared smoothness below the actual spectrum")
    rng = keyed_rng(seed, STREAM_DATA, 0)
    basis, _ = np.linalg.qr(rng.normal(size=(m, m)))
    lam = rng.uniform(mu, lam_max, size=m)
    lam[0] = mu
    lam[-1] = lam_max
    base = (basis * lam) @ basis.T
    base = 0.5 * (base + base.T)
    scales = 1.0 + heterogeneity * rng.uniform(-1.0, 1.0, size=n)
    scales = scales / scales.mean()
    center = rng.normal(size=m) / math.sqrt(m)
    opts = center + spread * rng.normal(size=(n, m)) / math.sqrt(m)
    direction = rng.normal(size=m)
    m0 = center + start * direction / float(np.linalg.norm(direction))
    clients = [QuadraticClient(matrix=scales[j] * base, opt=opts[j]) for j in range(n)]
    return ConvexTask("quadratic", clients, m0, mu=mu, lip=lip)


def logistic_task(
    n: int,
    m: int,
    *,
    samples: int = 16,
    reg: float = 0.5,
    scale: float = 1.0,
    seed: int = 0,
    heldout_samples: int = 256,
) -> ConvexTask:
    """Synthetic binary classification split evenly across clients."""
    if n < 2 or m < 1 or samples < 1:
        raise ConfigError("need two clients, one coordinate, one sample")
    if reg <= 0.0:
        raise ConfigError("the regularizer is what makes the task strongly convex")
    rng = keyed_rng(seed, STREAM_DATA, 1)
    truth = rng.normal(size=m) * (3.0 / math.sqrt(m))

    def draw(count):
        x = scale * rng.normal(size=(count, m)) / math.sqrt(m)
        probs = 1.0 / (1.0 + np.exp(-(x @ truth)))
        y = np.where(rng.uniform(size=count) < probs, 1.0, -1.0)
        return x, y

    clients = []
    for _ in range(n):
        x, y = draw(samples)
        clients.append(LogisticClient(features=x, labels=y, reg=reg))
    heldout = draw(heldout_samples)
    stacked = np.vstack([c.features for c in clients])
    # sigmoid'' <= 1/4 bounds the data term's curvature
    lip = reg + float(np.linalg.eigvalsh(stacked.T @ stacked)[-1]) / (4.0 * stacked.shape[0])
    return ConvexTask("logistic", clients, np.zeros(m), mu=reg, lip=lip, heldout=heldout)


# -- plaintext protocol mirror ------------------------------------------------


@dataclass
class PlainHistory:
    """Stage-I artifacts in the clear: public models, quantized gradients,
    and the raw (unsnapped) norms and thresholds each client reported."""

    models: np.ndarray   # (T+1, m)
    grads: np.ndarray    # (T, n, m), on the codec grid
    norms: np.ndarray    # (T, n)
    deltas: np.ndarray   # (T, n)

    @property
    def t(self) -> int:
        return self.grads.shape[0]

    def model_updates(self) -> np.ndarray:
        return np.diff(self.models, axis=0)


def _as_pool(task) -> ClientPool:
    return task.pool() if isinstance(task, ConvexTask) else task


def plaintext_history(config: UnlearnConfig, pool: ClientPool, codec: FixedPointCodec) -> PlainHistory:
    """Mirror of stage I; the model track is bit-identical to the secure run
    because gradient sums of grid values are exact in float64."""
    if pool.n != config.n:
        raise ConfigError(f"pool has {pool.n} clients, config says {config.n}")
    n, m, t = config.n, config.m, config.t
    models = np.zeros((t + 1, m))
    models[0] = np.asarray(pool.initial_model, dtype=np.float64)
    grads = np.zeros((t, n, m))
    norms = np.zeros((t, n))
    deltas = np.zeros((t, n))
    for i in range(t):
        for j in range(n):
            grads[i, j], norms[i, j], deltas[i, j] = client_round(pool, j, models[i], config.alpha, codec)
        avg = grads[i].sum(axis=0) / n
        models[i + 1] = models[i] - config.eta_l * avg
    return PlainHistory(models=models, grads=grads, norms=norms, deltas=deltas)


def selection_scores(history: PlainHistory, target: int, codec: FixedPointCodec):
    """Cosine scores of the target's stored gradients against the public
    model updates, evaluated on the grid the secure selector sees.

    Returns (scores, keep): rounds whose stored gradient norm snaps to zero
    are unkeepable and get a -inf score.
    """
    updates = codec.quantize(history.model_updates())
    dnorm = codec.quantize(np.linalg.norm(history.model_updates(), axis=1))
    if np.any(dnorm == 0.0):
        raise DegenerateRoundError("a training round moved the model by less than one grid step")
    grads = history.grads[:, target]
    gnorm = codec.quantize(history.norms[:, target])
    keep = gnorm > 0.0
    u = (grads * updates).sum(axis=1)
    v = np.where(keep, gnorm * dnorm, 1.0)
    return np.where(keep, u / v, -np.inf), keep


def cosine_selection(history: PlainHistory, target: int, t_prime: int, codec: FixedPointCodec) -> np.ndarray:
    """Chronological indices of the top-t_prime rounds by cosine score."""
    scores, keep = selection_scores(history, target, codec)
    kept = np.flatnonzero(keep)
    order = kept[np.argsort(-scores[kept], kind="stable")]
    return np.sort(order[: min(t_prime, kept.size)])


def selection_margin(history: PlainHistory, target: int, t_prime: int, codec: FixedPointCodec) -> float:
    """Score gap across the selection boundary (inf if nothing is rejected).

    Tie-free harnesses assert this is wide relative to one truncation ulp
    over the smallest norm product, which is the slack the secure comparator
    can consume.
    """
    scores, keep = selection_scores(history, target, codec)
    ranked = np.sort(scores[keep])[::-1]
    if ranked.size <= t_prime:
        return math.inf
    return float(ranked[t_prime - 1] - ranked[t_prime])


@dataclass
class PlainRun:
    """One recovery trajectory plus everything needed to audit it."""

    trajectory: np.ndarray   # (rounds+1, m)
    selected: np.ndarray
    corrections: dict
    check_flags: list        # (round counter, per-remaining-client 0/1 list)
    history: PlainHistory

    @property
    def model(self) -> np.ndarray:
        return self.trajectory[-1]


def _plain_estimate(g_round: np.ndarray, pairs: list, codec: FixedPointCodec) -> np.ndarray:
    """Float mirror of the shared gradient estimator.

    Same rank-one recursion, same exact-zero curvature screen: a pair whose
    inner product is identically zero never touches that client's lane.
    """
    if not pairs:
        return g_round.copy()
    nr, m = g_round.shape
    eye = np.eye(m)
    h = np.broadcast_to(eye, (nr, m, m)).copy()
    used = False
    for dg, dm in pairs:
        dm_q = codec.quantize(dm)
        u = dg @ dm_q
        live = np.flatnonzero(u != 0.0)
        if live.size == 0:
            continue
        rho = 1.0 / u[live]
        rdg = rho[:, None] * dg[live]
        v = eye - rdg[:, :, None] * dm_q[None, None, :]
        vt = np.swapaxes(v, -1, -2)
        h[live] = vt @ h[live] @ v + rdg[:, :, None] * dg[live][:, None, :]
        used = True
    if not used:
        return g_round.copy()
    return (h @ g_round[:, :, None])[..., 0]


def _plain_recovery(
    config: UnlearnConfig,
    pool: ClientPool,
    history: PlainHistory,
    selected: np.ndarray,
    target: int,
    codec: FixedPointCodec,
) -> PlainRun:
    remaining = [j for j in range(config.n) if j != target]
    thresholds = codec.quantize(history.deltas.max(axis=0)[remaining])
    pairs: list = []
    m_hat = history.models[0].copy()
    trajectory = [m_hat.copy()]
    corrections = {j: 0 for j in remaining}
    check_flags: list = []

    for i, r in enumerate(selected, start=1):
        g_round = history.grads[r][remaining]
        estimates = _plain_estimate(g_round, pairs, codec)
        if i % config.t_c == 0:
            flags = (np.abs(estimates) >= thresholds[:, None]).any(axis=1)
            estimates = estimates.copy()
            for idx, j in enumerate(remaining):
                if flags[idx]:
                    corrections[j] += 1
                    estimates[idx] = codec.quantize(pool.gradient(j, m_hat))
            check_flags.append((i, flags.astype(int).tolist()))
        m_hat_prev = m_hat
        m_hat = m_hat - config.eta_u * (estimates.sum(axis=0) / len(remaining))
        trajectory.append(m_hat.copy())
        if config.buffer_b > 0:
            pairs.append((estimates - g_round, m_hat_prev - history.models[r]))
            del pairs[: -config.buffer_b]

    return PlainRun(
        trajectory=np.array(trajectory),
        selected=np.asarray(selected, dtype=np.int64),
        corrections=corrections,
        check_flags=check_flags,
        history=history,
    )


def plaintext_starfish(config: UnlearnConfig, task, target: int, codec: FixedPointCodec | None = None) -> PlainRun:
    """Float mirror of the full two-stage protocol for one unlearned client."""
    codec = FixedPointCodec() if codec is None else codec
    if not (0 <= target < config.n):
        raise ConfigError(f"target {target} outside client range")
    pool = _as_pool(task)
    history = plaintext_history(config, pool, codec)
    selected = cosine_selection(history, target, config.t_prime, codec)
    return _plain_recovery(config, pool, history, selected, target, codec)


def random_selection_baseline(config: UnlearnConfig, task, target: int, codec: FixedPointCodec | None = None) -> PlainRun:
    """Same recovery loop on a uniformly drawn round subset."""
    codec = FixedPointCodec() if codec is None else codec
    if not (0 <= target < config.n):
        raise ConfigError(f"target {target} outside client range")
    pool = _as_pool(task)
    history = plaintext_history(config, pool, codec)
    rng = keyed_rng(config.seed, STREAM_BASELINE, target)
    picked = rng.choice(config.t, size=min(config.t_prime, config.t), replace=False)
    return _plain_recovery(config, pool, history, np.sort(picked), target, codec)


def train_from_scratch(
    config: UnlearnConfig,
    task: ConvexTask,
    excluded: int | None = None,
    rounds: int | None = None,
    eta: float | None = None,
) -> np.ndarray:
    """Weighted FedAvg over the remaining clients; returns the whole
    trajectory, one row per round, starting at the initial model.

    The step size defaults to the recovery rate so retrained and recovered
    trajectories are directly comparable.
    """
    rounds = config.t if rounds is None else int(rounds)
    if rounds < 0:
        raise ConfigError("round count cannot be negative")
    eta = config.eta_u if eta is None else float(eta)
    model = task.initial_model.copy()
    trajectory = [model.copy()]
    for _ in range(rounds):
        model = model - eta * task.gradient(model, excluded=excluded)
        trajectory.append(model.copy())
    return np.array(trajectory)


# -- recovery-distance bound --------------------------------------------------


def theorem1_bound(task: ConvexTask, config: UnlearnConfig, t_i: int) -> float:
    """Closed-form cap on the recovered-vs-retrained model distance after
    t_i recovery rounds: 2 sqrt(eta_u [1/mu + 1/(sigma (mu-2))] dF t_i).

    Only proved for mu > 2 and eta_u = mu/L, so both are enforced here.
    """
    if task.mu <= 2.0:
        raise AssumptionError(f"the distance bound needs mu > 2, task has mu={task.mu}")
    if t_i < 0:
        raise ConfigError("checkpoint index cannot be negative")
    eta_req = task.mu / task.lip
    if not math.isclose(config.eta_u, eta_req, rel_tol=1e-9, abs_tol=1e-15):
        raise AssumptionError(
            f"the bound assumes eta_u = mu/L = {eta_req}, config has {config.eta_u}"
        )
    gap = max(0.0, task.objective_gap())
    inner = eta_req * (1.0 / task.mu + 1.0 / (config.sigma * (task.mu - 2.0))) * gap * t_i
    return 2.0 * math.sqrt(inner)


@dataclass
class BoundReport:
    """Measured distances against the closed-form cap, one row per checkpoint."""

    checkpoints: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    margin: np.ndarray   # bound - measured

    def violations(self) -> int:
        return int(np.sum(self.margin < 0.0))

    def as_dict(self) -> dict:
        return {
            "checkpoints": [int(t) for t in self.checkpoints],
            "measured": [float(x) for x in self.measured],
            "bound": [float(x) for x in self.bound],
            "margin": [float(x) for x in self.margin],
            "violations": self.violations(),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def bound_report(
    task: ConvexTask,
    config: UnlearnConfig,
    target: int,
    codec: FixedPointCodec | None = None,
    recovered: np.ndarray | None = None,
) -> BoundReport:
    """Score a recovery trajectory against the bound at every checkpoint.

    Checkpoint t_i compares the recovered model after t_i rounds with the
    from-scratch model after ceil(t_i / sigma) rounds. A precomputed
    trajectory (e.g. from the secure engine) can be passed in; by default
    the plaintext mirror is run.
    """
    if recovered is None:
        recovered = plaintext_starfish(config, task, target, codec=codec).trajectory
    steps = recovered.shape[0] - 1
    horizon = math.ceil(steps / config.sigma) if steps else 0
    retrained = train_from_scratch(config, task, excluded=target, rounds=horizon)
    checkpoints = np.arange(1, steps + 1)
    measured = np.array([
        float(np.linalg.norm(recovered[i] - retrained[math.ceil(i / config.sigma)]))
        for i in checkpoints
    ])
    bound = np.array([theorem1_bound(task, config, int(i)) for i in checkpoints])
    return BoundReport(checkpoints=checkpoints, measured=measured,
                       bound=bound, margin=bound - measured)


# -- exact gate oracles --------------------------------------------------------


#: Absolute per-element error allowed between a secure gate and its exact
#: oracle. Zero means the gate is exact on the grid. Truncating gates carry
#: one probabilistic truncation (2^-p) plus representation slack; the masked
#: inverse also amplifies by the revealed product's conditioning, so its
#: budget assumes the benign operands the tests draw.
ERROR_BUDGETS = {
    "sec_add": 0.0,
    "sec_rec": 0.0,
    "sec_ge": 0.0,
    "sec_sel": 0.0,
    "sec_max": 0.0,
    "sec_srt": 0.0,
    "sec_tc": 0.0,
    "sec_mul": 2.0 ** -12,
    "sec_sp": 2.0 ** -12,
    "sec_div": 2.0 ** -12,
    "sec_mi": 2.0 ** -9,
}


def _fractions(arr) -> list:
    return [Fraction(float(x)) for x in np.asarray(arr, dtype=np.float64).ravel()]


def _from_fractions(values, shape) -> np.ndarray:
    return np.array([float(v) for v in values], dtype=np.float64).reshape(shape)


def _exact_mul(x, y) -> np.ndarray:
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    vals = [a * b for a, b in zip(_fractions(x), _fractions(y))]
    return _from_fractions(vals, x.shape)


def _exact_sp(x, y) -> np.ndarray:
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    if x.ndim == 0:
        raise ShapeError("inner product needs at least one axis")
    flat_x = x.reshape(-1, x.shape[-1])
    flat_y = y.reshape(-1, y.shape[-1])
    vals = [
        sum(Fraction(float(a)) * Fraction(float(b)) for a, b in zip(rx, ry))
        for rx, ry in zip(flat_x, flat_y)
    ]
    return _from_fractions(vals, x.shape[:-1])


def _exact_div(u, v) -> np.ndarray:
    u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
    out = []
    for a, b in zip(_fractions(u), _fractions(v)):
        if b == 0:
            raise DivisionDomainError("division by exact zero")
        out.append(a / b)
    return _from_fractions(out, u.shape)


def _exact_minv(mat) -> np.ndarray:
    """Gauss-Jordan over rationals; mirrors the singularity error."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"matrix inverse needs a square matrix, got {mat.shape}")
    m = mat.shape[0]
    a = [[Fraction(float(x)) for x in row] for row in mat]
    inv = [[Fraction(int(i == j)) for j in range(m)] for i in range(m)]
    for col in range(m):
        pivot = next((r for r in range(col, m) if a[r][col] != 0), None)
        if pivot is None:
            raise SingularRevealError("exact inverse of a singular matrix")
        a[col], a[pivot] = a[pivot], a[col]
        inv[col], inv[pivot] = inv[pivot], inv[col]
        scale = a[col][col]
        a[col] = [x / scale for x in a[col]]
        inv[col] = [x / scale for x in inv[col]]
        for r in range(m):
            if r == col or a[r][col] == 0:
                continue
            factor = a[r][col]
            a[r] = [x - factor * y for x, y in zip(a[r], a[col])]
            inv[r] = [x - factor * y for x, y in zip(inv[r], inv[col])]
    return np.array([[float(x) for x in row] for row in inv])


def exact_gate_oracle(gate: str, *inputs, codec: FixedPointCodec | None = None):
    """Exact-arithmetic mirror of one gate's plaintext function.

    Inputs are plain float values already on the codec grid; comparisons and
    selections come back as int64, everything else as float64 computed over
    rationals. Domain errors match the secure gates.
    """
    if gate == "sec_add":
        x, y = inputs
        return np.asarray(x, float) + np.asarray(y, float)
    if gate == "sec_rec":
        (x,) = inputs
        return np.asarray(x, float)
    if gate == "sec_mul":
        return _exact_mul(*inputs)
    if gate == "sec_sp":
        return _exact_sp(*inputs)
    if gate == "sec_ge":
        x, y = np.broadcast_arrays(*(np.asarray(a, float) for a in inputs))
        return (x >= y).astype(np.int64)
    if gate == "sec_sel":
        v0, v1, b = inputs
        return np.where(np.asarray(b) != 0, np.asarray(v1, float), np.asarray(v0, float))
    if gate == "sec_max":
        (x,) = inputs
        return np.max(np.asarray(x, float), axis=-1)
    if gate == "sec_srt":
        keys, payload = inputs
        order = np.argsort(-np.asarray(keys, float), kind="stable")
        return np.asarray(payload)[order]
    if gate == "sec_tc":
        est, delta = inputs
        est = np.asarray(est, float)
        delta = np.asarray(delta, float)
        return (np.abs(est) >= delta[..., None]).any(axis=-1).astype(np.int64)
    if gate == "sec_div":
        return _exact_div(*inputs)
    if gate == "sec_mi":
        (x,) = inputs
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim <= 1:
            flat = np.atleast_1d(arr)
            out = np.empty_like(flat)
            for i, v in enumerate(flat):
                if v == 0.0:
                    raise SingularRevealError("exact inverse of zero")
                out[i] = float(1 / Fraction(float(v)))
            return out.reshape(arr.shape)
        if arr.ndim == 2:
            return _exact_minv(arr)
        return np.stack([_exact_minv(block) for block in arr])
    raise UnknownFunctionality(f"no exact oracle for {gate!r}")


# -- metrics -------------------------------------------------------------------


def metrics(
    task: ConvexTask,
    config: UnlearnConfig,
    recovered: np.ndarray,
    retrained: np.ndarray,
    transcript: list | None = None,
) -> dict:
    """JSON-ready report: held-out error, distance curve, participation.

    ARP counts, per remaining client, the checking rounds whose flag fired:
    100 (1 - T_r / T). With no corrections at all it is exactly 100.
    """
    recovered = np.asarray(recovered, dtype=np.float64)
    retrained = np.asarray(retrained, dtype=np.float64)
    steps = recovered.shape[0] - 1
    distances = []
    for i in range(1, steps + 1):
        ref = min(math.ceil(i / config.sigma), retrained.shape[0] - 1)
        distances.append(float(np.linalg.norm(recovered[i] - retrained[ref])))
    flag_totals = None
    for rec in transcript or []:
        if rec.get("op") == "sec_tc" and rec.get("flags") is not None:
            flags = np.asarray(rec["flags"], dtype=np.int64)
            flag_totals = flags if flag_totals is None else flag_totals + flags
    if flag_totals is None:
        arp = 100.0
    else:
        arp = float(np.mean((config.t - flag_totals) / config.t) * 100.0)
    return {
        "ter_recovered": task.test_error(recovered[-1]),
        "ter_retrained": task.test_error(retrained[-1]),
        "distance_final": float(np.linalg.norm(recovered[-1] - retrained[-1])),
        "distances": distances,
        "arp": arp,
    }
