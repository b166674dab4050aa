"""Cumulative link model: priors, data generation, likelihood, and scores.

The observation model is ordinal regression with ordered cut-points:

    P(y <= j | x) = F(alpha^j + beta' x),   j = 1, ..., c,

with the dummy cut-points alpha^0 = -inf, alpha^1 = 0, alpha^c = +inf never
stored, and the free ones constrained to 0 < alpha^2 < ... < alpha^{c-1}.
When c = 2 the parameter reduces to theta = beta and the model is binary
probit. Covariates are uniform on the unit cube and the link is probit; both
are kept behind small spec types so the formulas stay generic.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .sampling import RngStream

_NORM_CONST = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateCellError(ValueError):
    """Raised when a cell probability vanishes where it must be positive."""


class NumericalFailure(RuntimeError):
    """Raised when a numeric routine produces an unusable result."""


def _phi(z):
    return _NORM_CONST * np.exp(-0.5 * np.asarray(z, dtype=float) ** 2)


@dataclasses.dataclass(frozen=True)
class LinkSpec:
    """A link CDF with its density and log-density derivative."""

    kind: str
    F: object
    f: object
    dlogf: object


def probit_link() -> LinkSpec:
    return LinkSpec(kind="probit", F=ndtr, f=_phi, dlogf=lambda z: -np.asarray(z, dtype=float))


PROBIT = probit_link()


@dataclasses.dataclass(frozen=True)
class CovariateSpec:
    """Covariate dimension and law; only the uniform unit cube is built in."""

    p: int = 1
    law: str = "uniform-unit-cube"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("covariate dimension must be >= 1")
        if self.law != "uniform-unit-cube":
            raise ValueError(f"unsupported covariate law: {self.law!r}")

    def moments(self):
        """Mean vector and second moment matrix E[x x'] of the covariate law."""
        mu = np.full(self.p, 0.5)
        second = np.full((self.p, self.p), 0.25)
        np.fill_diagonal(second, 1.0 / 3.0)
        return mu, second


@dataclasses.dataclass(frozen=True)
class PriorSpec:
    """Normal scales for the cut-points and slopes, gamma law for g**2.

    The cut-point prior is independent N(0, sigma_alpha^2) per coordinate
    restricted to the ordered cone, the slope prior is spherical
    N(0, sigma_beta^2 I), and the working scale of marginal augmentation has
    g^2 ~ Gamma(a0, b0).
    """

    sigma_alpha: float = 10.0
    sigma_beta: float = 10.0
    a0: float = 0.5
    b0: float = 0.5

    def __post_init__(self):
        for name in ("sigma_alpha", "sigma_beta", "a0", "b0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclasses.dataclass(frozen=True, eq=False)
class Theta:
    """Model parameter: ordered free cut-points and regression vector."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        a = self.alpha
        if a.size:
            if not np.all(a > 0) or not np.all(np.diff(a) > 0):
                raise ValueError(f"cut-points must satisfy 0 < a2 < ... : {a}")

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return (np.array_equal(self.alpha, other.alpha)
                and np.array_equal(self.beta, other.beta))

    def __hash__(self):
        return hash((self.alpha.tobytes(), self.beta.tobytes()))

    @property
    def c(self) -> int:
        return self.alpha.size + 2

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def dim(self) -> int:
        return self.alpha.size + self.beta.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @staticmethod
    def from_vector(vec, c: int, p: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.size != c - 2 + p:
            raise ValueError(f"expected length {c - 2 + p}, got {vec.size}")
        return Theta(alpha=vec[: c - 2], beta=vec[c - 2 :])


@dataclasses.dataclass(frozen=True)
class ExpandedTheta:
    """Parameter of the scale-expanded model: (theta, g) with g > 0.

    The identified parameter is g * theta; g itself is a working scale that
    only exists inside the sampler.
    """

    theta: Theta
    g: float = 1.0

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("g must be positive")

    def identified(self) -> Theta:
        return Theta(alpha=self.g * self.theta.alpha, beta=self.g * self.theta.beta)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    c: int = 2
    link: LinkSpec = PROBIT
    covariates: CovariateSpec = CovariateSpec()
    prior: PriorSpec = PriorSpec()

    def __post_init__(self):
        if self.c < 2:
            raise ValueError("need at least two categories")

    @property
    def p(self) -> int:
        return self.covariates.p

    @property
    def dim(self) -> int:
        return self.c - 2 + self.p

    def validate_theta(self, theta: Theta):
        if theta.alpha.size != self.c - 2 or theta.beta.size != self.p:
            raise ValueError(
                f"theta shaped for (c={theta.c}, p={theta.p}); "
                f"config wants (c={self.c}, p={self.p})"
            )


@dataclasses.dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    c: int
    true_theta: Theta | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_2d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=int))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y row counts differ")
        if self.y.size and (self.y.min() < 1 or self.y.max() > self.c):
            raise ValueError("labels must lie in 1..c")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def full_cuts(theta: Theta, c: int) -> np.ndarray:
    """All cut-points including the dummies: [-inf, 0, alpha..., +inf]."""
    return np.concatenate([[-np.inf, 0.0], theta.alpha, [np.inf]])


def cumulative_probs(cfg: ModelConfig, theta: Theta, x) -> np.ndarray:
    """Matrix F(alpha^j + beta'x) for j = 0..c over rows of x."""
    cfg.validate_theta(theta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cuts = full_cuts(theta, cfg.c)
    bx = x @ theta.beta
    arg = cuts[None, :] + bx[:, None]
    out = np.empty_like(arg)
    out[:, 0] = 0.0
    out[:, -1] = 1.0
    out[:, 1:-1] = cfg.link.F(arg[:, 1:-1])
    return out


def cell_probabilities(cfg: ModelConfig, theta: Theta, x) -> np.ndarray:
    """Matrix of P(y = j | x) for j = 1..c over rows of x."""
    cum = cumulative_probs(cfg, theta, x)
    return np.diff(cum, axis=1)


def cell_probability(cfg: ModelConfig, theta: Theta, x, j: int) -> float:
    """P(y = j | x) for a single covariate row."""
    if not 1 <= j <= cfg.c:
        raise ValueError(f"label {j} outside 1..{cfg.c}")
    probs = cell_probabilities(cfg, theta, np.atleast_2d(x))
    return float(probs[0, j - 1])


def sample_dataset(cfg: ModelConfig, theta0: Theta, n: int, seed: int) -> Dataset:
    """Generate n observations: x uniform on the unit cube, y from the model."""
    cfg.validate_theta(theta0)
    rng = RngStream(seed, "dataset")
    gen = rng.generator
    x = gen.random((n, cfg.p))
    cum = cumulative_probs(cfg, theta0, x)[:, 1:-1]
    u = gen.random(n)
    y = 1 + np.sum(u[:, None] >= cum, axis=1)
    return Dataset(x=x, y=y, c=cfg.c, true_theta=theta0, seed=int(seed))


def score_eta(cfg: ModelConfig, theta: Theta, x, j: int) -> np.ndarray:
    """Score-type vector eta = grad_theta p / (2 sqrt(p)) at one observation.

    The cut-point component i picks up f(alpha^i + beta'x) with sign +1 when
    y = i and -1 when y = i + 1; the slope component is
    x (f(alpha^y + beta'x) - f(alpha^{y-1} + beta'x)); everything is divided
    by 2 sqrt(p(x, y)).
    """
    grad, prob = _cell_gradient(cfg, theta, x, j)
    if prob <= 1e-300:
        raise DegenerateCellError("cell probability vanished under the score")
    return grad / (2.0 * math.sqrt(prob))


def _cell_gradient(cfg: ModelConfig, theta: Theta, x, j: int):
    cfg.validate_theta(theta)
    if not 1 <= j <= cfg.c:
        raise ValueError(f"label {j} outside 1..{cfg.c}")
    x = np.asarray(x, dtype=float).reshape(cfg.p)
    cuts = full_cuts(theta, cfg.c)
    bx = float(x @ theta.beta)
    f = cfg.link.f

    def dens(arg):
        return float(f(arg)) if math.isfinite(arg) else 0.0

    upper = dens(cuts[j] + bx)
    lower = dens(cuts[j - 1] + bx)

    d_alpha = np.zeros(cfg.c - 2)
    for i in range(2, cfg.c):
        val = dens(cuts[i] + bx)
        d_alpha[i - 2] = val * (float(j == i) - float(j == i + 1))
    d_beta = x * (upper - lower)
    prob = cell_probability(cfg, theta, x, j)
    return np.concatenate([d_alpha, d_beta]), prob


def normalized_score(cfg: ModelConfig, theta: Theta, data: Dataset) -> np.ndarray:
    """Z_n = n^{-1/2} sum_i grad_theta log p(x_i, y_i | theta)."""
    cfg.validate_theta(theta)
    probs = cell_probabilities(cfg, theta, data.x)
    chosen = probs[np.arange(data.n), data.y - 1]
    if np.any(chosen <= 1e-300):
        raise DegenerateCellError("a cell probability vanished in the score sum")

    cuts = full_cuts(theta, cfg.c)
    bx = data.x @ theta.beta
    f = cfg.link.f
    dens = np.zeros((data.n, cfg.c + 1))
    finite = np.isfinite(cuts)
    dens[:, finite] = f(cuts[None, finite] + bx[:, None])

    upper = dens[np.arange(data.n), data.y]
    lower = dens[np.arange(data.n), data.y - 1]

    total = np.zeros(cfg.dim)
    for i in range(2, cfg.c):
        contrib = dens[:, i] * ((data.y == i) - 1.0 * (data.y == i + 1))
        total[i - 2] = np.sum(contrib / chosen)
    total[cfg.c - 2 :] = data.x.T @ ((upper - lower) / chosen)
    return total / math.sqrt(data.n)


@dataclasses.dataclass(frozen=True)
class FisherInformation:
    matrix: np.ndarray
    method: str
    detail: dict

    def __array__(self, dtype=None):
        return np.asarray(self.matrix, dtype=dtype)


def fisher_information(cfg: ModelConfig, theta: Theta, mc_size: int = 100_000,
                       seed: int = 20_240_601, quad_tol: float = 1e-10) -> FisherInformation:
    """Information matrix I(theta) = E[grad log p grad log p'] over (x, y).

    Quadrature over the unit interval when p = 1, Monte Carlo over the cube
    otherwise; the integration settings land in ``detail`` so reports can
    cite them. Raises NumericalFailure if the result is not positive
    definite beyond rounding.
    """
    cfg.validate_theta(theta)
    d = cfg.dim

    def contrib(xrow):
        out = np.zeros((d, d))
        for j in range(1, cfg.c + 1):
            grad, prob = _cell_gradient(cfg, theta, xrow, j)
            if prob <= 1e-300:
                continue
            out += np.outer(grad, grad) / prob
        return out

    if cfg.p == 1:
        res = integrate.quad_vec(
            lambda t: contrib(np.array([t])).reshape(-1),
            0.0, 1.0, epsabs=quad_tol, epsrel=quad_tol,
        )
        matrix = res[0].reshape(d, d)
        detail = {"quad_tol": quad_tol, "quad_error": float(np.max(res[1]))}
        method = "quadrature"
    else:
        gen = RngStream(seed, "fisher-mc").generator
        xs = gen.random((mc_size, cfg.p))
        acc = np.zeros((d, d))
        acc2 = np.zeros((d, d))
        for xrow in xs:
            term = contrib(xrow)
            acc += term
            acc2 += term * term
        matrix = acc / mc_size
        var = acc2 / mc_size - matrix * matrix
        detail = {
            "mc_size": mc_size,
            "seed": seed,
            "entry_se_max": float(np.sqrt(np.max(var) / mc_size)),
        }
        method = "monte-carlo"

    matrix = 0.5 * (matrix + matrix.T)
    eigs = np.linalg.eigvalsh(matrix)
    if eigs.min() <= -1e-8 * max(eigs.max(), 1.0):
        raise NumericalFailure(f"information matrix not positive definite: {eigs}")
    detail["min_eig"] = float(eigs.min())
    return FisherInformation(matrix=matrix, method=method, detail=detail)


def scale_constants(link: LinkSpec, quad_tol: float = 1e-12):
    """Density-weighted scale constants of the link.

    K = int (1 + z dlogf(z))^2 f(z) dz and
    L = int dlogf(z) (z dlogf(z) + 1) f(z) dz.

    The f(z) dz weighting is what every downstream closed form needs; the
    unweighted integrals do not even converge for the probit link.
    """
    f, dlogf = link.f, link.dlogf

    def k_int(z):
        return (1.0 + z * float(dlogf(z))) ** 2 * float(f(z))

    def l_int(z):
        d = float(dlogf(z))
        return d * (z * d + 1.0) * float(f(z))

    K, kerr = integrate.quad(k_int, -np.inf, np.inf, epsabs=quad_tol, epsrel=quad_tol)
    L, lerr = integrate.quad(l_int, -np.inf, np.inf, epsabs=quad_tol, epsrel=quad_tol)
    if max(kerr, lerr) > 1e-8:
        raise NumericalFailure("scale constant quadrature did not converge")
    if K <= 0:
        raise NumericalFailure("K must be positive for a usable link")
    return float(K), float(L)


def score_second_moment(link: LinkSpec, quad_tol: float = 1e-12) -> float:
    """J0 = int (f'(z)/f(z))^2 f(z) dz, the per-draw latent score variance."""
    val, err = integrate.quad(
        lambda z: float(link.dlogf(z)) ** 2 * float(link.f(z)),
        -np.inf, np.inf, epsabs=quad_tol, epsrel=quad_tol,
    )
    if err > 1e-8:
        raise NumericalFailure("latent score quadrature did not converge")
    return float(val)


def project_binary(data: Dataset, i: int) -> Dataset:
    """Collapse an ordinal dataset at cut i: labels become 1 + 1(y > i)."""
    if not 2 <= i <= data.c - 1:
        raise ValueError(f"cut index {i} outside 2..{data.c - 1}")
    y = 1 + (data.y > i).astype(int)
    return Dataset(x=data.x.copy(), y=y, c=2, true_theta=None, seed=data.seed)


def log_prior(cfg: ModelConfig, alpha, beta) -> np.ndarray:
    """Unnormalized log prior density over batches of (alpha, beta).

    Rows violating the ordered cone get -inf. ``alpha`` has shape (B, c-2)
    and ``beta`` (B, p).
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    pr = cfg.prior
    out = -0.5 * np.sum(alpha * alpha, axis=1) / pr.sigma_alpha ** 2
    out = out - 0.5 * np.sum(beta * beta, axis=1) / pr.sigma_beta ** 2
    if alpha.shape[1]:
        ok = np.all(alpha > 0, axis=1) & np.all(np.diff(alpha, axis=1) > 0, axis=1)
        out = np.where(ok, out, -np.inf)
    return out


def log_likelihood_batch(cfg: ModelConfig, alpha, beta, data: Dataset,
                         chunk: int = 4096) -> np.ndarray:
    """Log likelihood of the dataset at a batch of parameter values.

    Vectorized over a (B, c-2) cut block and (B, p) slope block; data rows
    are processed in chunks to bound memory. Rows with an invalid cone get
    -inf.
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    B = alpha.shape[0]
    out = np.zeros(B)
    valid = np.ones(B, dtype=bool)
    if alpha.shape[1]:
        valid = np.all(alpha > 0, axis=1) & np.all(np.diff(alpha, axis=1) > 0, axis=1)

    cuts = np.concatenate(
        [np.full((B, 1), -np.inf), np.zeros((B, 1)), alpha, np.full((B, 1), np.inf)],
        axis=1,
    )
    F = cfg.link.F
    for start in range(0, data.n, chunk):
        xs = data.x[start : start + chunk]
        ys = data.y[start : start + chunk]
        bx = beta @ xs.T
        hi = cuts[:, ys] + bx
        lo = cuts[:, ys - 1] + bx
        ph = np.where(np.isfinite(hi), F(np.where(np.isfinite(hi), hi, 0.0)), 1.0)
        pl = np.where(np.isfinite(lo), F(np.where(np.isfinite(lo), lo, 0.0)), 0.0)
        cell = ph - pl
        bad = cell <= 0
        cell = np.where(bad, 1.0, cell)
        out += np.sum(np.log(cell), axis=1)
        out[np.any(bad, axis=1)] = -np.inf
    out[~valid] = -np.inf
    return out


def log_posterior_batch(cfg: ModelConfig, alpha, beta, data: Dataset) -> np.ndarray:
    """Unnormalized log posterior over a batch of parameter values."""
    return log_prior(cfg, alpha, beta) + log_likelihood_batch(cfg, alpha, beta, data)


def prior_theta_draws(cfg: ModelConfig, size: int, rng: RngStream,
                      max_tries: int = 10_000) -> np.ndarray:
    """i.i.d. draws of theta from the prior restricted to the ordered cone.

    Rejection on the cone: sort the normals (the conditioned law of an
    exchangeable vector given an ordering is its order statistics) and keep
    draws whose smallest coordinate is positive.
    """
    gen = rng.generator
    k = cfg.c - 2
    out = np.empty((size, cfg.dim))
    filled = 0
    for _ in range(max_tries):
        if filled >= size:
            break
        need = size - filled
        beta = gen.normal(0.0, cfg.prior.sigma_beta, (need, cfg.p))
        if k:
            alpha = np.sort(gen.normal(0.0, cfg.prior.sigma_alpha, (need, k)), axis=1)
            ok = alpha[:, 0] > 0
            alpha, beta = alpha[ok], beta[ok]
        else:
            alpha = np.empty((need, 0))
        got = alpha.shape[0]
        out[filled : filled + got] = np.concatenate([alpha, beta], axis=1)
        filled += got
    else:
        raise NumericalFailure("cone rejection sampler starved")
    return out


def save_dataset(data: Dataset, path) -> None:
    """Write the dataset as CSV (x1..xp,y) with a JSON sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k + 1}" for k in range(data.p)] + ["y"])
        for row, label in zip(data.x, data.y):
            writer.writerow([format(v, ".17g") for v in row] + [int(label)])
    sidecar = {
        "n": data.n,
        "c": data.c,
        "p": data.p,
        "seed": data.seed,
        "theta0": None
        if data.true_theta is None
        else {
            "alpha": [float(v) for v in data.true_theta.alpha],
            "beta": [float(v) for v in data.true_theta.beta],
        },
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    rows = []
    labels = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        p = len(header) - 1
        for row in reader:
            rows.append([float(v) for v in row[:p]])
            labels.append(int(row[p]))
    theta0 = None
    if meta.get("theta0") is not None:
        theta0 = Theta(alpha=np.asarray(meta["theta0"]["alpha"], dtype=float),
                       beta=np.asarray(meta["theta0"]["beta"], dtype=float))
    return Dataset(x=np.asarray(rows), y=np.asarray(labels), c=int(meta["c"]),
                   true_theta=theta0, seed=meta.get("seed"))
