"""Gibbs kernels for the cumulative link model, batched over chains.

Two parameterizations of the latent representation are supported:

* ``null``: z_i is standard (scale 1/g) normal truncated to
  (a^{y-1} + b'x_i, a^y + b'x_i]; the cut-points and slopes enter through
  the truncation window.
* ``beta``: the regression part is absorbed into the latent law,
  z_i ~ N(-b'x_i, 1/g^2) truncated to (a^{y-1}, a^y].

Each comes with and without marginal augmentation by a working scale g whose
square is Gamma(a0, b0) a priori; without augmentation g stays fixed at 1.
All updates operate on a batch of chains at once (leading axis B) so that a
whole replicate set advances under one RNG stream, making results
independent of how work is scheduled across threads.
"""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import gamma as gamma_dist

from .model import Dataset, ModelConfig, Theta, prior_theta_draws
from .sampling import (
    DegenerateIntervalError,
    RngStream,
    gamma_draw,
    truncated_normal_extended,
    truncated_normal_vec,
)

VARIANT_NAMES = ("binary-null", "binary-beta", "null", "beta", "null-ma", "beta-ma")


@dataclasses.dataclass(frozen=True)
class VariantId:
    """Which latent parameterization, and whether the scale is augmented."""

    name: str
    parameterization: str
    augmented: bool
    binary: bool

    @staticmethod
    def parse(name: str) -> "VariantId":
        table = {
            "binary-null": ("null", False, True),
            "binary-beta": ("beta", False, True),
            "null": ("null", False, False),
            "beta": ("beta", False, False),
            "null-ma": ("null", True, False),
            "beta-ma": ("beta", True, False),
        }
        if name not in table:
            raise ValueError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
        param, aug, binary = table[name]
        return VariantId(name=name, parameterization=param, augmented=aug, binary=binary)


@dataclasses.dataclass
class ChainState:
    """State of a batch of chains: (B, c-2) cuts, (B, p) slopes, (B,) scales."""

    alpha: np.ndarray
    beta: np.ndarray
    g: np.ndarray
    z: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if not (self.alpha.shape[0] == self.beta.shape[0] == self.g.shape[0]):
            raise ValueError("batch sizes of alpha, beta, g disagree")
        if np.any(self.g <= 0):
            raise ValueError("scales must be positive")

    @property
    def batch(self) -> int:
        return self.g.shape[0]

    def theta_matrix(self) -> np.ndarray:
        """Raw parameter rows (alpha then beta), shape (B, c-2+p)."""
        return np.concatenate([self.alpha, self.beta], axis=1)

    def identified_matrix(self) -> np.ndarray:
        """Identified parameter g * theta, shape (B, c-2+p)."""
        return self.g[:, None] * self.theta_matrix()

    def copy(self) -> "ChainState":
        return ChainState(
            alpha=self.alpha.copy(),
            beta=self.beta.copy(),
            g=self.g.copy(),
            z=None if self.z is None else self.z.copy(),
        )

    def check_cone(self):
        a = self.alpha
        if a.shape[1] and (np.any(a <= 0) or np.any(np.diff(a, axis=1) <= 0)):
            raise AssertionError("cut-point ordering violated")


def _full_cuts_batch(state: ChainState, c: int) -> np.ndarray:
    B = state.batch
    return np.concatenate(
        [
            np.full((B, 1), -np.inf),
            np.zeros((B, 1)),
            state.alpha,
            np.full((B, 1), np.inf),
        ],
        axis=1,
    )


def draw_latent(cfg: ModelConfig, data: Dataset, state: ChainState,
                variant: VariantId, rng: RngStream) -> np.ndarray:
    """Refresh the latent block z | theta, g for every chain in the batch."""
    cuts = _full_cuts_batch(state, cfg.c)
    bx = state.beta @ data.x.T
    lo = cuts[:, data.y - 1]
    hi = cuts[:, data.y]
    if variant.parameterization == "null":
        lo = lo + bx
        hi = hi + bx
        mean = np.zeros_like(lo)
    else:
        mean = -bx
    sd = (1.0 / state.g)[:, None]
    try:
        z = truncated_normal_vec(mean, sd, lo, hi, rng)
    except DegenerateIntervalError:
        z = _draw_latent_careful(mean, sd, lo, hi, rng)
    state.z = z
    return z


def _draw_latent_careful(mean, sd, lo, hi, rng: RngStream) -> np.ndarray:
    """Elementwise fallback when a bulk latent window underflows double mass."""
    mean, sd, lo, hi = np.broadcast_arrays(mean, sd, lo, hi)
    out = np.empty(mean.shape)
    flat = [a.reshape(-1) for a in (mean, sd, lo, hi)]
    res = out.reshape(-1)
    for idx in range(res.size):
        m, s, a, b = (float(arr[idx]) for arr in flat)
        try:
            res[idx] = truncated_normal_vec(m, s, a, b, rng)
        except DegenerateIntervalError:
            res[idx] = truncated_normal_extended(m, s, a, b, rng)
    return out


def _ensure_open(lo: np.ndarray, hi: np.ndarray):
    """Nudge rounding-collapsed windows back open; real windows are a.s. nonempty."""
    return lo, np.maximum(hi, np.nextafter(lo, np.inf))


def _scan_alpha(cfg: ModelConfig, data: Dataset, state: ChainState,
                witness: np.ndarray, rng: RngStream):
    """One increasing sweep over the free cut-points.

    ``witness`` is z - b'x in the null parameterization and z in the beta
    one; category j requires a^j >= witness on {y = j} and a^j < witness on
    {y = j + 1}, on top of the ordering with the neighbors.
    """
    c = cfg.c
    sd = (cfg.prior.sigma_alpha / state.g)[:, None]
    for j in range(2, c):
        col = j - 2
        m_low = data.y == j
        m_high = data.y == j + 1
        lo = np.where(m_low[None, :], witness, -np.inf).max(axis=1)
        hi = np.where(m_high[None, :], witness, np.inf).min(axis=1)
        if col > 0:
            lo = np.maximum(lo, state.alpha[:, col - 1])
        else:
            lo = np.maximum(lo, 0.0)
        if col < c - 3:
            hi = np.minimum(hi, state.alpha[:, col + 1])
        lo, hi = _ensure_open(lo, hi)
        state.alpha[:, col] = truncated_normal_vec(
            0.0, sd[:, 0], lo, hi, rng
        )


def _scan_beta_null(cfg: ModelConfig, data: Dataset, state: ChainState,
                    rng: RngStream):
    """Coordinate sweep for the slopes in the null parameterization.

    Observation i confines b'x_i to [z_i - a^{y_i}, z_i - a^{y_i - 1});
    with the other coordinates held the window divides through by
    x_{ik} > 0.
    """
    cuts = _full_cuts_batch(state, cfg.c)
    au = cuts[:, data.y]
    al = cuts[:, data.y - 1]
    z = state.z
    bx = state.beta @ data.x.T
    sd = cfg.prior.sigma_beta / state.g
    for k in range(cfg.p):
        xk = data.x[:, k]
        rest = bx - state.beta[:, k][:, None] * xk[None, :]
        lo = ((z - au - rest) / xk[None, :]).max(axis=1)
        hi = ((z - al - rest) / xk[None, :]).min(axis=1)
        lo, hi = _ensure_open(lo, hi)
        new = truncated_normal_vec(0.0, sd, lo, hi, rng)
        bx = rest + new[:, None] * xk[None, :]
        state.beta[:, k] = new


def _beta_chol(cfg: ModelConfig, data: Dataset) -> np.ndarray:
    a = data.x.T @ data.x + np.eye(cfg.p) / cfg.prior.sigma_beta ** 2
    return cholesky(a, lower=True)


def _draw_beta_gaussian(cfg: ModelConfig, data: Dataset, state: ChainState,
                        rng: RngStream):
    """Conjugate slope draw in the beta parameterization.

    With A = X'X + I / sigma_beta^2 the conditional is
    N(-A^{-1} X'z, (g^2 A)^{-1}).
    """
    L = _beta_chol(cfg, data)
    rhs = -(state.z @ data.x)
    mean = cho_solve((L, True), rhs.T).T
    xi = rng.generator.standard_normal((state.batch, cfg.p))
    shift = solve_triangular(L, xi.T, lower=True, trans=1).T
    state.beta = mean + shift / state.g[:, None]


def update_theta_null(cfg: ModelConfig, data: Dataset, state: ChainState,
                      rng: RngStream, scans: int = 1):
    if scans < 1:
        raise ValueError("need at least one scan")
    for _ in range(scans):
        bx = state.beta @ data.x.T
        _scan_alpha(cfg, data, state, state.z - bx, rng)
        _scan_beta_null(cfg, data, state, rng)
    state.check_cone()
    return state


def update_theta_beta(cfg: ModelConfig, data: Dataset, state: ChainState,
                      rng: RngStream):
    _scan_alpha(cfg, data, state, state.z, rng)
    _draw_beta_gaussian(cfg, data, state, rng)
    state.check_cone()
    return state


def update_g(cfg: ModelConfig, data: Dataset, state: ChainState,
             variant: VariantId, rng: RngStream):
    """Draw the working scale: g^2 | z, theta is Gamma.

    Shape a0 + (n + c - 2 + p) / 2; the rate adds half the latent sum of
    squares (recentred by b'x in the beta parameterization) and the
    prior quadratic forms of the raw parameters.
    """
    if not variant.augmented:
        return state
    pr = cfg.prior
    if variant.parameterization == "null":
        resid = state.z
    else:
        resid = state.z + state.beta @ data.x.T
    shape = pr.a0 + 0.5 * (data.n + cfg.c - 2 + cfg.p)
    rate = (
        pr.b0
        + 0.5 * np.sum(resid * resid, axis=1)
        + 0.5 * np.sum(state.alpha * state.alpha, axis=1) / pr.sigma_alpha ** 2
        + 0.5 * np.sum(state.beta * state.beta, axis=1) / pr.sigma_beta ** 2
    )
    state.g = np.sqrt(gamma_draw(shape, rate, rng))
    return state


def kernel_step(cfg: ModelConfig, data: Dataset, state: ChainState,
                variant: VariantId, rng: RngStream, scans: int = 1):
    """One full Gibbs sweep: latents, then scale (if augmented), then theta."""
    draw_latent(cfg, data, state, variant, rng)
    update_g(cfg, data, state, variant, rng)
    if variant.parameterization == "null":
        update_theta_null(cfg, data, state, rng, scans=scans)
    else:
        update_theta_beta(cfg, data, state, rng)
    return state


def step_binary_null(cfg: ModelConfig, data: Dataset, state: ChainState,
                     rng: RngStream):
    """Binary probit sweep, truncation-window parameterization."""
    if cfg.c != 2:
        raise ValueError("binary kernels require c = 2")
    return kernel_step(cfg, data, state, VariantId.parse("binary-null"), rng)


def step_binary_beta(cfg: ModelConfig, data: Dataset, state: ChainState,
                     rng: RngStream):
    """Binary probit sweep, latent-shift parameterization."""
    if cfg.c != 2:
        raise ValueError("binary kernels require c = 2")
    return kernel_step(cfg, data, state, VariantId.parse("binary-beta"), rng)


def transform_names(variant: VariantId, c: int, p: int) -> list[str]:
    names = []
    if variant.augmented:
        names += [f"galpha{j}" for j in range(2, c)]
        names += [f"gbeta{k}" for k in range(1, p + 1)]
    if c >= 4:
        names += [f"ratio{j + 1}{j}" for j in range(2, c - 1)]
    return names


def transform_values(alpha: np.ndarray, beta: np.ndarray, g: np.ndarray,
                     variant: VariantId, c: int, p: int) -> np.ndarray:
    """Derived trace columns matching transform_names; inputs (..., dim)."""
    cols = []
    if variant.augmented:
        cols += [g[..., None] * alpha, g[..., None] * beta]
    if c >= 4:
        cols += [alpha[..., 1:] / alpha[..., :-1]]
    if not cols:
        return np.empty(alpha.shape[:-1] + (0,))
    return np.concatenate(cols, axis=-1)


@dataclasses.dataclass
class ChainTrace:
    """Recorded states of a batch of chains: arrays shaped (records, B, .)."""

    variant: VariantId
    c: int
    p: int
    steps: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    g: np.ndarray

    @property
    def records(self) -> int:
        return self.steps.size

    @property
    def batch(self) -> int:
        return self.g.shape[1]

    def theta(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta], axis=-1)

    def identified(self) -> np.ndarray:
        return self.g[..., None] * self.theta()

    def header(self) -> list[str]:
        cols = (
            ["step"]
            + [f"alpha{j}" for j in range(2, self.c)]
            + [f"beta{k}" for k in range(1, self.p + 1)]
            + ["g"]
        )
        return cols + transform_names(self.variant, self.c, self.p)

    def save(self, path, rep: int = 0) -> None:
        """Write one chain of the batch as CSV (step,alpha...,beta...,g,...)."""
        extra = transform_values(
            self.alpha[:, rep], self.beta[:, rep], self.g[:, rep],
            self.variant, self.c, self.p,
        )
        body = np.concatenate(
            [self.alpha[:, rep], self.beta[:, rep], self.g[:, rep, None], extra],
            axis=1,
        )
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for step, row in zip(self.steps, body):
                writer.writerow([int(step)] + [format(v, ".17g") for v in row])


def trace_filename(variant: VariantId, n: int, rep: int) -> str:
    return f"{variant.name}_n{n}_r{rep}.csv"


def load_trace(path) -> dict:
    """Read a saved chain CSV back into named columns."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows)
    return {name: arr[:, i] for i, name in enumerate(header)}


def initial_state(cfg: ModelConfig, variant: VariantId, batch: int,
                  rng: RngStream, *, init: str = "fixed",
                  theta: Theta | None = None, g0: float = 1.0,
                  reference: np.ndarray | None = None,
                  g_quantiles: np.ndarray | None = None) -> ChainState:
    """Build a batch start: a fixed point, prior draws, or bank rows.

    ``reference`` rows are draws of the identified parameter; augmented
    variants convert a row u into (theta, g) = (u / g, g) with a fresh prior
    scale, which reproduces the exact joint posterior of the expanded model.
    ``g_quantiles`` maps given uniforms through the prior quantile function
    instead of drawing the scales, so callers can stratify over the scale
    mixture; the rows stay independent of the scales either way.
    """
    if init == "fixed":
        if theta is None:
            raise ValueError("fixed init needs a theta")
        cfg.validate_theta(theta)
        alpha = np.tile(theta.alpha, (batch, 1))
        beta = np.tile(theta.beta, (batch, 1))
        g = np.full(batch, float(g0) if variant.augmented else 1.0)
        return ChainState(alpha=alpha, beta=beta, g=g)
    if init == "prior":
        vec = prior_theta_draws(cfg, batch, rng.child("init-theta"))
    elif init == "reference-posterior":
        if reference is None:
            raise ValueError("reference-posterior init needs a draw bank")
        bank = np.atleast_2d(np.asarray(reference, dtype=float))
        gen = rng.child("init-pick").generator
        if batch <= bank.shape[0]:
            idx = gen.permutation(bank.shape[0])[:batch]
        else:
            idx = gen.integers(0, bank.shape[0], size=batch)
        vec = bank[idx]
    else:
        raise ValueError(f"unknown init policy {init!r}")
    if variant.augmented:
        if g_quantiles is not None:
            q = np.asarray(g_quantiles, dtype=float)
            if q.shape != (batch,):
                raise ValueError("g_quantiles must have one value per chain")
            g = np.sqrt(gamma_dist.ppf(q, a=cfg.prior.a0,
                                       scale=1.0 / cfg.prior.b0))
        else:
            g = np.sqrt(gamma_draw(cfg.prior.a0, cfg.prior.b0,
                                   rng.child("init-g"), size=batch))
        vec = vec / g[:, None]
    else:
        g = np.ones(batch)
    return ChainState(alpha=vec[:, : cfg.c - 2], beta=vec[:, cfg.c - 2 :], g=g)


def run_chain(cfg: ModelConfig, data: Dataset, variant: VariantId | str,
              n_steps: int, rng: RngStream, *, init: str = "fixed",
              theta: Theta | None = None, g0: float = 1.0,
              reference: np.ndarray | None = None, batch: int = 1,
              record_every: int = 1, scans: int = 1,
              state: ChainState | None = None) -> ChainTrace:
    """Advance a batch of chains n_steps, recording every record_every-th state.

    The initial state is recorded as step 0. Pass ``state`` to continue from
    an existing batch instead of building one from the init policy.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if state is None:
        state = initial_state(cfg, variant, batch, rng, init=init, theta=theta,
                              g0=g0, reference=reference)
    recs = [0] + [t for t in range(1, n_steps + 1) if t % record_every == 0]
    R = len(recs)
    alpha = np.empty((R, state.batch, cfg.c - 2))
    beta = np.empty((R, state.batch, cfg.p))
    g = np.empty((R, state.batch))
    slot = 0

    def record(t):
        nonlocal slot
        alpha[slot] = state.alpha
        beta[slot] = state.beta
        g[slot] = state.g
        slot += 1

    record(0)
    for t in range(1, n_steps + 1):
        kernel_step(cfg, data, state, variant, rng, scans=scans)
        if t % record_every == 0:
            record(t)
    return ChainTrace(variant=variant, c=cfg.c, p=cfg.p,
                      steps=np.asarray(recs), alpha=alpha, beta=beta, g=g)
