"""Reference posteriors, information matrices, and kernel approximations.

The "true posterior" that risks are measured against is an empirical sample:
either a long thinned run of the best-mixing implemented kernel
(``build_reference``), or importance resampling from an inflated Laplace
proposal (``build_reference_sir``) when many independent references are
needed cheaply. A normal surrogate N(theta_hat, I^{-1}/n) rides along as a
cross-check, not as the target.

The information side provides the augmented-model matrix K_M in two flavors:
the quoted closed form (``km_matrix``) and the form our Monte Carlo score
oracle actually supports (``km_matrix_effective``); where the two disagree
the discrepancy is reported and downstream consumers use the effective one.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, stats

from .kernels import VariantId, run_chain
from .metrics import EmpiricalMeasure, central_value
from .model import (
    Dataset,
    ModelConfig,
    NumericalFailure,
    Theta,
    fisher_information,
    log_posterior_batch,
    scale_constants,
    score_second_moment,
)
from .sampling import RngStream


@dataclasses.dataclass
class ReferencePosterior:
    """Empirical reference sample of the identified parameter."""

    sample: np.ndarray
    theta_hat: np.ndarray
    bvm_mean: np.ndarray
    bvm_cov: np.ndarray
    n: int
    provenance: dict
    warnings: list = dataclasses.field(default_factory=list)

    def __post_init__(self):
        self.sample = np.atleast_2d(np.asarray(self.sample, dtype=float))
        self.theta_hat = np.asarray(self.theta_hat, dtype=float)
        self.bvm_mean = np.asarray(self.bvm_mean, dtype=float)
        self.bvm_cov = np.atleast_2d(np.asarray(self.bvm_cov, dtype=float))

    @property
    def size(self) -> int:
        return self.sample.shape[0]

    @property
    def dim(self) -> int:
        return self.sample.shape[1]

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.bvm_cov))

    def save(self, path) -> None:
        """CSV of the sample plus a JSON sidecar with the summaries."""
        path = Path(path)
        header = ",".join(f"t{k + 1}" for k in range(self.dim))
        np.savetxt(path, self.sample, delimiter=",", header=header,
                   comments="", fmt="%.17g")
        sidecar = {
            "theta_hat": self.theta_hat.tolist(),
            "bvm_mean": self.bvm_mean.tolist(),
            "bvm_cov": self.bvm_cov.tolist(),
            "n": self.n,
            "provenance": self.provenance,
            "warnings": self.warnings,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    @staticmethod
    def load(path) -> "ReferencePosterior":
        path = Path(path)
        sample = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = json.loads(path.with_suffix(".json").read_text())
        return ReferencePosterior(
            sample=sample,
            theta_hat=np.asarray(meta["theta_hat"]),
            bvm_mean=np.asarray(meta["bvm_mean"]),
            bvm_cov=np.asarray(meta["bvm_cov"]),
            n=int(meta["n"]),
            provenance=meta["provenance"],
            warnings=list(meta.get("warnings", [])),
        )


def _split_half_ks(sample: np.ndarray) -> float:
    """Smallest per-coordinate KS p-value between the run's two halves."""
    half = sample.shape[0] // 2
    pvals = []
    for d in range(sample.shape[1]):
        res = stats.ks_2samp(sample[:half, d], sample[half : 2 * half, d])
        pvals.append(res.pvalue)
    return float(min(pvals))


def build_reference(cfg: ModelConfig, data: Dataset, seed: int,
                    length: int = 200_000, burn: int = 10_000,
                    thin: int = 10) -> ReferencePosterior:
    """Long-run reference: the latent-shift kernel, thinned after burn-in.

    The latent-shift (beta) parameterization is the best-mixing implemented
    kernel, and shares its stationary law with the others, so it serves as
    the reference for all of them. A split-half KS check guards against
    non-convergence: on failure the run length is doubled once and a warning
    is recorded either way.
    """
    variant = VariantId.parse("binary-beta" if cfg.c == 2 else "beta")
    rng = RngStream(seed, "reference")
    mode = _posterior_mode(cfg, data)
    warnings = []
    cur_length = length
    for attempt in range(2):
        trace = run_chain(
            cfg, data, variant, burn + cur_length, rng.child("run", attempt),
            init="fixed", theta=mode, batch=1, record_every=thin,
        )
        keep = trace.steps > burn
        sample = trace.theta()[keep, 0, :]
        pmin = _split_half_ks(sample)
        if pmin >= 1e-3:
            break
        warnings.append(
            f"split-half KS p={pmin:.2e} at length {cur_length}; doubling"
        )
        cur_length *= 2
    else:
        warnings.append(f"split-half KS still failing (p={pmin:.2e}) after doubling")

    theta_hat = central_value(EmpiricalMeasure.from_points(sample))
    info = fisher_information(cfg, Theta.from_vector(theta_hat, cfg.c, cfg.p))
    bvm_cov = np.linalg.inv(info.matrix) / data.n
    return ReferencePosterior(
        sample=sample,
        theta_hat=theta_hat,
        bvm_mean=theta_hat,
        bvm_cov=bvm_cov,
        n=data.n,
        provenance={
            "method": "chain",
            "variant": variant.name,
            "length": cur_length,
            "burn": burn,
            "thin": thin,
            "seed": seed,
            "split_half_ks_p": pmin,
            "fisher": info.detail | {"method": info.method},
        },
        warnings=warnings,
    )


def _cone_to_free(theta: Theta) -> np.ndarray:
    a = theta.alpha
    if a.size == 0:
        return theta.beta.copy()
    incs = np.diff(np.concatenate([[0.0], a]))
    return np.concatenate([np.log(incs), theta.beta])


def _free_to_cone(vec: np.ndarray, c: int, p: int) -> Theta:
    k = c - 2
    alpha = np.cumsum(np.exp(vec[:k])) if k else np.empty(0)
    return Theta(alpha=alpha, beta=vec[k:])


def _posterior_mode(cfg: ModelConfig, data: Dataset) -> Theta:
    """Posterior mode via a smooth reparameterization of the ordering cone."""
    k = cfg.c - 2

    def neg(v):
        th = _free_to_cone(v, cfg.c, cfg.p)
        val = log_posterior_batch(cfg, th.alpha[None, :], th.beta[None, :], data)[0]
        return -val if np.isfinite(val) else 1e12

    v0 = np.concatenate([np.full(k, math.log(0.5)), np.zeros(cfg.p)])
    res = optimize.minimize(neg, v0, method="Nelder-Mead",
                            options={"maxiter": 2000, "xatol": 1e-6, "fatol": 1e-8})
    if not np.all(np.isfinite(res.x)):
        raise NumericalFailure("posterior mode search failed")
    return _free_to_cone(res.x, cfg.c, cfg.p)


def _hessian_fd(fun, x0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    d = x0.size
    H = np.empty((d, d))
    steps = h * (1.0 + np.abs(x0))
    f0 = fun(x0)
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = steps[i]
            ej[j] = steps[j]
            if i == j:
                val = (fun(x0 + ei) - 2.0 * f0 + fun(x0 - ei)) / steps[i] ** 2
            else:
                val = (
                    fun(x0 + ei + ej) - fun(x0 + ei - ej)
                    - fun(x0 - ei + ej) + fun(x0 - ei - ej)
                ) / (4.0 * steps[i] * steps[j])
            H[i, j] = H[j, i] = val
    return H


def _log_posterior_vec(cfg: ModelConfig, data: Dataset, vec: np.ndarray,
                       chunk: int = 1024) -> np.ndarray:
    vec = np.atleast_2d(vec)
    k = cfg.c - 2
    out = np.empty(vec.shape[0])
    for start in range(0, vec.shape[0], chunk):
        block = vec[start : start + chunk]
        out[start : start + chunk] = log_posterior_batch(
            cfg, block[:, :k], block[:, k:], data
        )
    return out


def build_reference_sir(cfg: ModelConfig, data: Dataset, size: int,
                        rng: RngStream, pool: int = 8192,
                        inflate: float = 1.6, info: dict | None = None) -> np.ndarray:
    """Posterior bank by sampling-importance-resampling from a Laplace proposal.

    The proposal is a normal at the posterior mode with inflated inverse
    Hessian covariance; importance weights correct it exactly up to
    effective-sample-size loss, and the bank is drawn without replacement by
    Gumbel-top-k on the log weights, so it carries no duplicate states. When
    the effective sample size falls under 5% of the pool the proposal is
    widened and the pool redrawn (up to three rounds).
    """
    mode = _posterior_mode(cfg, data)
    x0 = mode.as_vector()
    H = _hessian_fd(lambda v: -_log_posterior_vec(cfg, data, v[None, :])[0], x0)
    try:
        cov = np.linalg.inv(0.5 * (H + H.T))
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        fi = fisher_information(cfg, mode)
        cov = np.linalg.inv(fi.matrix) / data.n
    d = x0.size

    best = None
    scale = inflate
    for attempt in range(3):
        prop_cov = scale ** 2 * cov
        gen = rng.child("pool", attempt).generator
        draws = gen.multivariate_normal(x0, prop_cov, size=pool,
                                        method="cholesky")
        logq = stats.multivariate_normal(mean=x0, cov=prop_cov,
                                         allow_singular=False).logpdf(draws)
        logp = _log_posterior_vec(cfg, data, draws)
        logw = logp - logq
        logw[~np.isfinite(logw)] = -np.inf
        shifted = logw - logw.max()
        w = np.exp(shifted)
        ess = float(w.sum() ** 2 / np.sum(w * w))
        if best is None or ess > best[0]:
            best = (ess, draws, logw, scale)
        if ess >= 0.05 * pool:
            break
        scale *= 1.5
    ess, draws, logw, scale = best
    if ess < size:
        raise NumericalFailure(
            f"importance sampler too weak: ess={ess:.1f} < bank size {size}"
        )
    gumbel = rng.child("topk").generator.gumbel(size=pool)
    keys = logw + gumbel
    idx = np.argpartition(-keys, size - 1)[:size]
    if info is not None:
        info.update({"ess": ess, "pool": pool, "inflate": scale,
                     "mode": x0.tolist()})
    return draws[idx]


def sir_reference(cfg: ModelConfig, data: Dataset, size: int, seed: int,
                  pool: int = 8192) -> ReferencePosterior:
    """Package a SIR bank as a ReferencePosterior with the BvM surrogate."""
    meta: dict = {}
    bank = build_reference_sir(cfg, data, size, RngStream(seed, "sir"),
                               pool=pool, info=meta)
    theta_hat = central_value(EmpiricalMeasure.from_points(bank))
    fi = fisher_information(cfg, Theta.from_vector(theta_hat, cfg.c, cfg.p))
    return ReferencePosterior(
        sample=bank,
        theta_hat=theta_hat,
        bvm_mean=theta_hat,
        bvm_cov=np.linalg.inv(fi.matrix) / data.n,
        n=data.n,
        provenance={"method": "sir", "seed": seed} | meta,
    )


@dataclasses.dataclass(frozen=True)
class FisherBlocks:
    """Observed-model information partitioned by the moving block, plus K_M."""

    I: np.ndarray
    m_mask: np.ndarray
    K_M: np.ndarray
    findings: tuple = ()

    def __post_init__(self):
        I = np.atleast_2d(np.asarray(self.I, dtype=float))
        K = np.atleast_2d(np.asarray(self.K_M, dtype=float))
        if not np.allclose(I, I.T, atol=1e-10) or not np.allclose(K, K.T, atol=1e-10):
            raise ValueError("information matrices must be symmetric")
        object.__setattr__(self, "I", I)
        object.__setattr__(self, "K_M", K)
        object.__setattr__(self, "m_mask", np.asarray(self.m_mask, dtype=bool))

    @property
    def I_M(self) -> np.ndarray:
        return self.I[np.ix_(self.m_mask, self.m_mask)]

    @property
    def I_MF(self) -> np.ndarray:
        return self.I[np.ix_(self.m_mask, ~self.m_mask)]

    @property
    def J_M(self) -> np.ndarray:
        return self.K_M - self.I_M

    def check_psd(self, tol: float = 1e-6) -> list:
        """Information-inequality check; violations are reported, not hidden."""
        out = list(self.findings)
        eigs = np.linalg.eigvalsh(self.J_M)
        if eigs.min() < -tol:
            out.append(f"J_M not PSD: min eigenvalue {eigs.min():.3e}")
        return out


def km_matrix(variant: VariantId | str, g: float, K: float, L: float,
              Sigma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Quoted closed form of the augmented-model information K_M.

    For the augmented null kernel the moving block is the working scale g
    and K_M = K / g^2. For the augmented beta kernel the moving block is
    (beta, g) and the quoted matrix is [[g^2 K Sigma, L mu], [L mu', K/g^2]].
    This is the form as stated; ``km_matrix_effective`` is what the score
    simulation supports (see that docstring).
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if not variant.augmented:
        raise ValueError("quoted K_M forms exist for augmented variants only")
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if variant.parameterization == "null":
        return np.array([[K / g ** 2]])
    p = Sigma.shape[0]
    out = np.empty((p + 1, p + 1))
    out[:p, :p] = g ** 2 * K * Sigma
    out[:p, p] = L * mu
    out[p, :p] = L * mu
    out[p, p] = K / g ** 2
    return out


def km_matrix_effective(variant: VariantId | str, g: float, J0: float, K: float,
                        L: float, Sigma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """K_M with the slope block carrying J0 = E (f'/f)^2 instead of K.

    Differentiating the complete-data log density in beta gives a score
    -g w x with w standard under the model, whose second moment is
    g^2 J0 Sigma; the quoted form puts K there instead, which for the probit
    link overstates the block by a factor of two. The g-block K / g^2 and
    the L-coupling agree between the two. The slope-only (unaugmented) beta
    kernel fits the same scheme with g = 1 and no g row.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if variant.parameterization == "null":
        if not variant.augmented:
            raise ValueError("the unaugmented null kernel has no normal-score block")
        return np.array([[K / g ** 2]])
    if not variant.augmented:
        return J0 * Sigma
    p = Sigma.shape[0]
    out = np.empty((p + 1, p + 1))
    out[:p, :p] = g ** 2 * J0 * Sigma
    out[:p, p] = L * mu
    out[p, :p] = L * mu
    out[p, p] = K / g ** 2
    return out


def mc_km_matrix(variant: VariantId | str, cfg: ModelConfig, theta: Theta,
                 g: float = 1.0, size: int = 100_000,
                 seed: int = 20_240_602) -> np.ndarray:
    """Monte Carlo second moment of the per-observation moving-block score.

    Simulates (x, z) from the augmented complete-data model at (theta, g)
    and averages the outer product of the score in the moving block. This
    is the adjudicating oracle for the K_M closed forms.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    gen = RngStream(seed, "km-oracle", variant.name).generator
    if variant.parameterization == "null":
        if not variant.augmented:
            raise ValueError("no score-based K_M for the unaugmented null kernel")
        z = gen.normal(0.0, 1.0 / g, size)
        score = (1.0 / g - g * z * z)[:, None]
        return score.T @ score / size
    x = gen.random((size, cfg.p))
    w = gen.standard_normal(size)
    score_beta = -g * w[:, None] * x
    if not variant.augmented:
        return score_beta.T @ score_beta / size
    score_g = ((1.0 - w * w) / g)[:, None]
    score = np.concatenate([score_beta, score_g], axis=1)
    return score.T @ score / size


def fisher_blocks(variant: VariantId | str, cfg: ModelConfig, theta: Theta,
                  data: Dataset | None = None, g: float = 1.0) -> FisherBlocks:
    """Assemble I and K_M for a beta-type kernel's moving block.

    For the unaugmented beta kernels the moving block is the slope vector
    (at c = 2 that is all of theta); the observed information comes from
    fisher_information and K_M from the effective closed form, using the
    dataset's empirical covariate moments when data is given (these are the
    moments the kernel actually sees) and the population moments otherwise.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if variant.parameterization != "beta" or variant.augmented:
        raise ValueError("fisher_blocks covers the unaugmented beta kernels")
    fi = fisher_information(cfg, theta)
    dim = cfg.dim
    m_mask = np.zeros(dim, dtype=bool)
    m_mask[cfg.c - 2 :] = True
    if data is not None:
        Sigma = data.x.T @ data.x / data.n
        mu = data.x.mean(axis=0)
        source = "empirical"
    else:
        mu, Sigma = cfg.covariates.moments()
        source = "population"
    K, L = scale_constants(cfg.link)
    J0 = score_second_moment(cfg.link)
    K_M = km_matrix_effective(variant, g, J0, K, L, Sigma, mu)
    findings = (f"K_M slope block uses J0-form with {source} moments",)
    return FisherBlocks(I=fi.matrix, m_mask=m_mask, K_M=K_M, findings=findings)


@dataclasses.dataclass(frozen=True)
class KernelApprox:
    mean: np.ndarray
    cov: np.ndarray
    blocks: FisherBlocks
    findings: tuple


def kernel_normal_approx(variant: VariantId | str, cfg: ModelConfig,
                         data: Dataset, reference: ReferencePosterior,
                         theta: Theta) -> KernelApprox:
    """Normal approximation to one step of a beta-type kernel's moving block.

    Mean theta_hat_M + K_M^{-1} J_M (theta_M - theta_hat_M)
              + K_M^{-1} I_{ M,F } (theta_F - theta_hat_F),
    covariance n^{-1} K_M^{-1} + n^{-1} K_M^{-1} J_M K_M^{-1}, with hat
    quantities at the reference central value: closed-form K_M, integrated
    information I. The mixed sources are recorded in the findings.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    that = Theta.from_vector(reference.theta_hat, cfg.c, cfg.p)
    blocks = fisher_blocks(variant, cfg, that, data=data)
    K_M = blocks.K_M
    try:
        K_inv = np.linalg.inv(K_M)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"singular K_M: {K_M}") from exc
    J_M = blocks.J_M
    findings = blocks.check_psd()

    m = blocks.m_mask
    vec = theta.as_vector()
    hat = reference.theta_hat
    mean = hat[m] + K_inv @ J_M @ (vec[m] - hat[m])
    if (~m).any():
        mean = mean + K_inv @ blocks.I_MF @ (vec[~m] - hat[~m])
    n = data.n
    cov = K_inv / n + K_inv @ J_M @ K_inv / n
    cov = 0.5 * (cov + cov.T)
    return KernelApprox(mean=mean, cov=cov, blocks=blocks,
                        findings=tuple(findings))


@dataclasses.dataclass(frozen=True)
class TwoPointTest:
    """A two-observation test against a covariate-ball alternative.

    ``z_i`` is a point of the covariate support, ``delta`` the ball radius,
    ``p_i`` the covariate mass of the ball, and ``c_i`` the weight placed on
    the matched-label statistic; c_i in (1/2, 1) makes the expected value at
    the truth fall below 1/2 while the runaway-parameter limit exceeds it.
    """

    i: int
    z_i: float
    delta: float
    c_i: float
    p_i: float = dataclasses.field(init=False)

    def __post_init__(self):
        if not 0 < self.delta:
            raise ValueError("delta must be positive")
        if not 0 < self.c_i < 1:
            raise ValueError("c_i must be in (0, 1)")
        lo, hi = self.bounds()
        object.__setattr__(self, "p_i", hi - lo)
        if self.p_i <= 0:
            raise ValueError("the covariate ball carries no mass")

    def bounds(self):
        return max(0.0, self.z_i - self.delta), min(1.0, self.z_i + self.delta)


def two_point_test_value(test: TwoPointTest, theta: Theta, cfg: ModelConfig,
                         quad_tol: float = 1e-10) -> float:
    """Expected value of the two-observation test statistic at theta.

    (1 - p_i^2) / 2 + c_i (int_B F(theta x) P(dx))^2
                    + c_i (int_B (1 - F(theta x)) P(dx))^2
    for the binary model with scalar covariate uniform on the unit
    interval; B is the ball around z_i.
    """
    if cfg.c != 2 or cfg.p != 1:
        raise ValueError("the two-point test is built for the binary scalar model")
    lo, hi = test.bounds()
    b = float(theta.beta[0])
    F = cfg.link.F

    a_int, a_err = integrate.quad(lambda x: float(F(b * x)), lo, hi,
                                  epsabs=quad_tol, epsrel=quad_tol)
    if a_err > 1e-8:
        raise NumericalFailure("two-point test quadrature did not converge")
    b_int = (hi - lo) - a_int
    return float(
        (1.0 - test.p_i ** 2) / 2.0
        + test.c_i * a_int ** 2
        + test.c_i * b_int ** 2
    )
