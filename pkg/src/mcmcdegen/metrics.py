"""Distances between chain output and posterior, and degeneracy statistics.

The ground metric everywhere is d(u, v) = min(|u - v|_2, 1), optionally
rescaled by sqrt(n) ("localized"): because the rescaling is applied to both
arguments, the centering point cancels and localization reduces to a scale
factor on the metric.

Three estimators live here:

* ``estimate_Rprime``: average distance between a chain's start and its next
  m states, which equals the bounded-Lipschitz distance between the start's
  point mass and the m-step empirical measure.
* ``estimate_R``: bounded-Lipschitz distance (solved as a linear program)
  between the chain's empirical measure and a reference posterior sample.
* ``one_step_statistic``: mean localized one-step motion of a transform of
  the state along a stationarity-started chain; its decay in n is what
  separates degenerate from locally consistent kernels.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import optimize, sparse

from .kernels import ChainState, ChainTrace, VariantId, initial_state, kernel_step
from .model import Dataset, ModelConfig, NumericalFailure, Theta, sample_dataset
from .sampling import RngStream

TRANSFORMS = ("theta", "g-theta", "alpha", "theta-norm", "alpha-ratio")


def apply_transform(alpha, beta, g, name: str) -> np.ndarray:
    """Evaluate a named functional of the state on (B, .) blocks.

    ``theta`` is the raw parameter, ``g-theta`` the identified rescaling,
    ``alpha`` the cut-point block, ``theta-norm`` the parameter norm, and
    ``alpha-ratio`` the consecutive cut-point ratios (needs c >= 4).
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if name == "theta":
        return np.concatenate([alpha, beta], axis=1)
    if name == "g-theta":
        return g[:, None] * np.concatenate([alpha, beta], axis=1)
    if name == "alpha":
        if not alpha.shape[1]:
            raise ValueError("alpha transform needs c >= 3")
        return alpha.copy()
    if name == "theta-norm":
        full = np.concatenate([alpha, beta], axis=1)
        return np.linalg.norm(full, axis=1, keepdims=True)
    if name == "alpha-ratio":
        if alpha.shape[1] < 2:
            raise ValueError("alpha-ratio transform needs c >= 4")
        return alpha[:, 1:] / alpha[:, :-1]
    raise ValueError(f"unknown transform {name!r}; expected one of {TRANSFORMS}")


def transform_state(state: ChainState, name: str) -> np.ndarray:
    return apply_transform(state.alpha, state.beta, state.g, name)


def table1_transform(variant: VariantId | str, c: int) -> str:
    """The transform whose one-step motion witnesses each classification cell.

    Unaugmented kernels are judged on the raw parameter, except the beta
    parameterization at c >= 3 where only the cut-point block freezes.
    Augmented kernels are judged on the identified parameter when it can
    move as a whole (c = 2 for the null side, c <= 3 for the beta side);
    what remains frozen beyond that is the raw parameter for the null side
    and the scale-free cut-point ratios for the beta side.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if variant.parameterization == "null":
        if not variant.augmented:
            return "theta"
        return "g-theta" if c == 2 else "theta"
    if not variant.augmented:
        return "theta" if c == 2 else "alpha"
    return "g-theta" if c <= 3 else "alpha-ratio"


@dataclasses.dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud; weights normalized to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] != w.shape[0] or pts.shape[0] < 1:
            raise ValueError("points and weights disagree or are empty")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def from_points(points) -> "EmpiricalMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = pts.shape[0]
        return EmpiricalMeasure(points=pts, weights=np.full(k, 1.0 / k))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def ground_metric(u, v, scale: float = 1.0) -> np.ndarray:
    """d(u, v) = min(scale * |u - v|_2, 1), broadcasting over rows."""
    diff = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    if diff.ndim == 1:
        return min(scale * float(np.linalg.norm(diff)), 1.0)
    return np.minimum(scale * np.linalg.norm(diff, axis=-1), 1.0)


def _distance_matrix(pts: np.ndarray, scale: float) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.minimum(scale * np.sqrt(np.sum(diff * diff, axis=-1)), 1.0)


class BLValue(float):
    """The distance as a float, carrying how it was computed."""

    support: int
    resampled: bool
    subsample_seed: int | None

    def __new__(cls, value, support, resampled, subsample_seed):
        obj = super().__new__(cls, value)
        obj.support = support
        obj.resampled = resampled
        obj.subsample_seed = subsample_seed
        return obj


SUPPORT_CAP = 400


def _resample(measure: EmpiricalMeasure, k: int, rng: RngStream) -> EmpiricalMeasure:
    idx = rng.generator.choice(measure.size, size=k, replace=True, p=measure.weights)
    return EmpiricalMeasure.from_points(measure.points[idx])


def bl_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure, *, scale: float = 1.0,
                cap: int = SUPPORT_CAP, rng: RngStream | None = None) -> BLValue:
    """Bounded-Lipschitz distance between two weighted point clouds.

    Solves the dual linear program max sum_k a_k f_k over potentials f on
    the pooled support with |f_k| <= 1 and |f_k - f_l| <= d(x_k, x_l),
    where a carries the signed weights. Beyond ``cap`` pooled support
    points, both sides are i.i.d.-resampled down to cap/2 points each and
    the value is the resampled one (seed recorded on the result).
    """
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    resampled = False
    seed = None
    if mu.size + nu.size > cap:
        if rng is None:
            rng = RngStream(0, "bl-subsample", mu.size, nu.size)
        seed = rng.seed
        mu = _resample(mu, cap // 2, rng.child("mu"))
        nu = _resample(nu, cap // 2, rng.child("nu"))
        resampled = True

    pts = np.concatenate([mu.points, nu.points], axis=0)
    a = np.concatenate([mu.weights, -nu.weights])
    pts, inv = np.unique(pts, axis=0, return_inverse=True)
    signed = np.zeros(pts.shape[0])
    np.add.at(signed, inv.reshape(-1), a)
    k = pts.shape[0]
    if k == 1:
        return BLValue(0.0, 1, resampled, seed)

    dist = _distance_matrix(pts, scale)
    ii, jj = np.triu_indices(k, 1)
    npairs = ii.size
    rows = np.repeat(np.arange(2 * npairs), 2)
    cols = np.empty(4 * npairs, dtype=np.int64)
    cols[0::4], cols[1::4] = ii, jj
    cols[2::4], cols[3::4] = jj, ii
    vals = np.tile([1.0, -1.0], 2 * npairs)
    a_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * npairs, k))
    # rows alternate (f_i - f_j) and (f_j - f_i) per pair, same bound each
    b_ub = np.repeat(dist[ii, jj], 2)

    res = optimize.linprog(
        c=-signed, A_ub=a_ub, b_ub=b_ub, bounds=(-1.0, 1.0), method="highs",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if res.status != 0:
        raise NumericalFailure(
            f"linear program failed: status={res.status} message={res.message!r} "
            f"support={k} scale={scale}"
        )
    return BLValue(max(-res.fun, 0.0), k, resampled, seed)


def central_value(mu: EmpiricalMeasure, tol: float = 1e-10) -> np.ndarray:
    """Per-coordinate root of sum_i w_i arctan(x_i - t) = 0.

    The map is strictly decreasing in t, so the root is unique and lies in
    [min x, max x]; bisection runs until the residual drops below ``tol``.
    """
    out = np.empty(mu.dim)
    for d in range(mu.dim):
        x = mu.points[:, d]
        w = mu.weights
        lo, hi = float(x.min()), float(x.max())
        if hi - lo == 0.0:
            out[d] = lo
            continue

        def resid(t):
            return float(np.sum(w * np.arctan(x - t)))

        for _ in range(200):
            mid = 0.5 * (lo + hi)
            r = resid(mid)
            if abs(r) < tol:
                break
            if r > 0:
                lo = mid
            else:
                hi = mid
        out[d] = mid
    return out


def localize(obj, theta_hat, n: int, transform: str = "theta") -> np.ndarray:
    """Rescale a series to sqrt(n) * (value - theta_hat).

    ``obj`` may be an array of points (rows) or a ChainTrace, in which case
    the named transform is evaluated per record first. Returns the localized
    series as an array.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    if isinstance(obj, ChainTrace):
        series = np.stack(
            [
                apply_transform(obj.alpha[r], obj.beta[r], obj.g[r], transform)
                for r in range(obj.records)
            ]
        )
    else:
        series = np.asarray(obj, dtype=float)
    return math.sqrt(n) * (series - theta_hat)


def wprime_from_series(series: np.ndarray, scale: float = 1.0) -> float:
    """m^{-1} sum_i d(theta(0), theta(i)) for a single chain's state rows.

    This is the distance between the start's point mass and the m-step
    empirical measure: integrating the ground metric against an empirical
    measure attains the bounded-Lipschitz supremum against a point mass.
    """
    series = np.atleast_2d(np.asarray(series, dtype=float))
    if series.shape[0] < 2:
        raise ValueError("need the start plus at least one step")
    gaps = np.linalg.norm(series[1:] - series[0], axis=-1)
    return float(np.mean(np.minimum(scale * gaps, 1.0)))


def split_half_distance(points: np.ndarray, scale: float, rng: RngStream,
                        cap: int = SUPPORT_CAP) -> float:
    """Noise floor: distance between two disjoint halves of one sample."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx = rng.generator.permutation(pts.shape[0])
    half = pts.shape[0] // 2
    mu = EmpiricalMeasure.from_points(pts[idx[:half]])
    nu = EmpiricalMeasure.from_points(pts[idx[half : 2 * half]])
    return float(bl_distance(mu, nu, scale=scale, cap=cap, rng=rng.child("bl")))


@dataclasses.dataclass
class DiagnosticsReport:
    """Estimates with Monte Carlo standard errors for one experiment cell."""

    variant: str
    n: int
    m: int
    replications: int
    estimates: dict
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("need at least two replications for an s.e.")
        for key, entry in self.estimates.items():
            if "value" not in entry or "se" not in entry:
                raise ValueError(f"estimate {key!r} lacks value/se")

    def value(self, key: str) -> float:
        return float(self.estimates[key]["value"])

    def se(self, key: str) -> float:
        return float(self.estimates[key]["se"])

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, default=_jsonable)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def load(path) -> "DiagnosticsReport":
        raw = json.loads(Path(path).read_text())
        return DiagnosticsReport(**raw)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _mean_se(values) -> dict:
    values = np.asarray(values, dtype=float)
    r = values.size
    return {
        "value": float(values.mean()),
        "se": float(values.std(ddof=1) / math.sqrt(r)) if r > 1 else float("nan"),
    }


def _cluster_se(values, clusters) -> dict:
    """Mean with a cluster-robust s.e. when replications share a dataset."""
    values = np.asarray(values, dtype=float)
    clusters = np.asarray(clusters)
    mean = float(values.mean())
    labels = np.unique(clusters)
    if labels.size < 2:
        return _mean_se(values)
    resid_sums = np.array(
        [np.sum(values[clusters == lab] - mean) for lab in labels]
    )
    d = labels.size
    var = d / (d - 1) * np.sum(resid_sums ** 2) / values.size ** 2
    return {"value": mean, "se": float(math.sqrt(var))}


def _stationary_bank(cfg, data, size, rng, pool=8192):
    from . import asymptotics

    return asymptotics.build_reference_sir(cfg, data, size=size, rng=rng, pool=pool)


def estimate_Rprime(variant: VariantId | str, cfg: ModelConfig, n: int, m: int,
                    R: int, master_seed: int, *, theta0: Theta,
                    start: str = "reference-posterior",
                    theta_start: Theta | None = None,
                    transform: str = "theta", bank_size: int = 512,
                    scans: int = 1) -> DiagnosticsReport:
    """Average distance between a chain's start and its next m states.

    Each replication generates a fresh dataset, starts one chain (from an
    approximate posterior draw by default, or from a fixed point), advances
    it m steps, and evaluates m^{-1} sum_i d(F(s(0)), F(s(i))) on both the
    unlocalized and the sqrt(n)-localized scale.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if m < 2:
        raise ValueError("need m >= 2")
    root = RngStream(master_seed, "rprime", variant.name, n, m)
    raw, loc = [], []
    for r in range(R):
        rep = root.child("rep", r)
        data = sample_dataset(cfg, theta0, n, seed=rep.child("data").seed_int())
        if start == "fixed":
            state = initial_state(cfg, variant, 1, rep, init="fixed",
                                  theta=theta_start or theta0)
        elif start == "reference-posterior":
            bank = _stationary_bank(cfg, data, bank_size, rep.child("bank"))
            state = initial_state(cfg, variant, 1, rep, init="reference-posterior",
                                  reference=bank)
        else:
            raise ValueError(f"unknown start policy {start!r}")
        chain = rep.child("chain")
        series = np.empty((m + 1, transform_state(state, transform).shape[1]))
        series[0] = transform_state(state, transform)[0]
        for t in range(1, m + 1):
            kernel_step(cfg, data, state, variant, chain, scans=scans)
            series[t] = transform_state(state, transform)[0]
        raw.append(wprime_from_series(series, 1.0))
        loc.append(wprime_from_series(series, math.sqrt(n)))
    return DiagnosticsReport(
        variant=variant.name, n=n, m=m, replications=R,
        estimates={"Rprime": _mean_se(raw), "Rprime_localized": _mean_se(loc)},
        metadata={"start": start, "transform": transform,
                  "master_seed": master_seed},
    )


def estimate_R(variant: VariantId | str, cfg: ModelConfig, n: int, m: int,
               R: int, reference_size: int, master_seed: int, *,
               theta0: Theta, init: str = "fixed",
               theta_start: Theta | None = None, transform: str = "theta",
               scans: int = 1) -> DiagnosticsReport:
    """Distance between the chain's m-step empirical measure and the posterior.

    Per replication: fresh dataset, a reference posterior sample, one chain
    of m steps from the configured start; the bounded-Lipschitz distance is
    taken between the chain's empirical measure (states 1..m) and an
    equal-size subsample of the reference, on the sqrt(n)-localized scale
    (and unlocalized, for orientation). The central value of the reference
    sample per replication is recorded as localization metadata.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    root = RngStream(master_seed, "risk", variant.name, n, m)
    raw, loc, centers = [], [], []
    for r in range(R):
        rep = root.child("rep", r)
        data = sample_dataset(cfg, theta0, n, seed=rep.child("data").seed_int())
        bank = _stationary_bank(cfg, data, reference_size, rep.child("bank"))
        state = initial_state(
            cfg, variant, 1, rep, init=init,
            theta=theta_start or theta0,
            reference=bank if init == "reference-posterior" else None,
        )
        chain = rep.child("chain")
        series = np.empty((m, transform_state(state, transform).shape[1]))
        for t in range(m):
            kernel_step(cfg, data, state, variant, chain, scans=scans)
            series[t] = transform_state(state, transform)[0]
        nsup = min(m, SUPPORT_CAP // 2)
        pick = rep.child("ref-pick").generator
        ref_pts = bank[pick.permutation(bank.shape[0])[:nsup]]
        mu = EmpiricalMeasure.from_points(series)
        nu = EmpiricalMeasure.from_points(ref_pts)
        sub = rep.child("bl")
        raw.append(float(bl_distance(mu, nu, scale=1.0, rng=sub)))
        loc.append(float(bl_distance(mu, nu, scale=math.sqrt(n), rng=sub)))
        centers.append(central_value(nu))
    return DiagnosticsReport(
        variant=variant.name, n=n, m=m, replications=R,
        estimates={"R": _mean_se(raw), "R_localized": _mean_se(loc)},
        metadata={"init": init, "transform": transform,
                  "master_seed": master_seed,
                  "theta_hat": np.asarray(centers),
                  "reference_size": reference_size},
    )


def one_step_pairs(points0: np.ndarray, points1: np.ndarray, scale: float) -> np.ndarray:
    """Localized motions d(F(s0), F(s1)) for paired rows."""
    p0 = np.atleast_2d(np.asarray(points0, dtype=float))
    p1 = np.atleast_2d(np.asarray(points1, dtype=float))
    return np.minimum(scale * np.linalg.norm(p1 - p0, axis=-1), 1.0)


def one_step_statistic(variant: VariantId | str, cfg: ModelConfig, n: int,
                       R: int, transform: str, master_seed: int, *,
                       theta0: Theta, datasets: int | None = None,
                       inner: int = 12, starts: int = 1, coords=None,
                       bank_size: int = 1024, pool: int = 8192,
                       scans: int = 1) -> DiagnosticsReport:
    """Mean localized one-step motion of a transform at stationarity.

    R replications are spread over several fresh datasets; each replication
    runs ``starts`` chains from independent approximate posterior draws for
    ``inner`` + 1 steps and contributes the mean of min(sqrt(n) |F(s(t+1)) -
    F(s(t))|, 1) over its chains and consecutive pairs (every pair of a
    stationary chain is a stationary pair, and averaging within a
    replication only reduces variance). For augmented variants the starting
    scales within a replication are stratified over the prior scale law
    (one uniform per stratum), which is unbiased for the same expectation
    and removes most of the scale-mixture variance. ``coords`` restricts
    the transform to selected output coordinates. The s.e. is
    cluster-robust over datasets.
    """
    if isinstance(variant, str):
        variant = VariantId.parse(variant)
    if R < 2:
        raise ValueError("need at least two replication units")
    if datasets is None:
        datasets = max(2, min(8, math.ceil(R / 16)))
    per = math.ceil(R / datasets)
    root = RngStream(master_seed, "one-step", variant.name, n, transform)
    scale = math.sqrt(n)

    def functional(state):
        out = transform_state(state, transform)
        return out if coords is None else out[:, list(np.atleast_1d(coords))]

    values, labels = [], []
    unit = 0
    for d in range(datasets):
        if unit >= R:
            break
        rep = root.child("data", d)
        data = sample_dataset(cfg, theta0, n, seed=rep.child("gen").seed_int())
        bank = _stationary_bank(cfg, data, bank_size, rep.child("bank"), pool=pool)
        b = min(per, R - unit)
        quantiles = None
        if variant.augmented and starts > 1:
            u = rep.child("g-strata").generator.random((b, starts))
            quantiles = ((np.arange(starts)[None, :] + u) / starts).reshape(-1)
        state = initial_state(cfg, variant, b * starts, rep,
                              init="reference-posterior", reference=bank,
                              g_quantiles=quantiles)
        chain = rep.child("chain")
        prev = functional(state)
        motions = np.zeros((inner, b * starts))
        for t in range(inner):
            kernel_step(cfg, data, state, variant, chain, scans=scans)
            cur = functional(state)
            motions[t] = one_step_pairs(prev, cur, scale)
            prev = cur
        values.extend(motions.reshape(inner, b, starts).mean(axis=(0, 2)))
        labels.extend([d] * b)
        unit += b
    return DiagnosticsReport(
        variant=variant.name, n=n, m=inner, replications=len(values),
        estimates={"D": _cluster_se(values, labels)},
        metadata={"transform": transform, "coords": None if coords is None
                  else list(np.atleast_1d(coords)), "datasets": datasets,
                  "starts": starts, "bank_size": bank_size, "pool": pool,
                  "master_seed": master_seed},
    )


def classify_table1(results: dict) -> dict:
    """Label kernels from one-step statistics on the n-grid {100, 400, 1600}.

    ``results`` maps cell keys to {n: DiagnosticsReport}. X (degenerate)
    needs D strictly decreasing over the grid and D_1600 below half of
    D_100 by more than three pooled standard errors; O (moving) needs
    D_400 and D_1600 to stay within [2/3, 3/2] of D_100. Everything else
    is inconclusive. Raw numbers ride along so the thresholds stay
    auditable.
    """
    grid = (100, 400, 1600)
    out = {}
    for cell, by_n in results.items():
        missing = [n for n in grid if n not in by_n]
        if missing:
            raise ValueError(f"cell {cell}: missing n = {missing}")
        d = {n: by_n[n].value("D") for n in grid}
        se = {n: by_n[n].se("D") for n in grid}
        decreasing = d[100] > d[400] > d[1600]
        margin = d[100] / 2.0 - d[1600]
        pooled = math.sqrt((se[100] / 2.0) ** 2 + se[1600] ** 2)
        if decreasing and margin > 3.0 * pooled:
            label = "X"
        elif all(2.0 / 3.0 <= d[n] / d[100] <= 1.5 for n in (400, 1600)):
            label = "O"
        else:
            label = "inconclusive"
        out[cell] = {
            "label": label,
            "D": d,
            "se": se,
            "ratio": d[1600] / d[100] if d[100] > 0 else float("inf"),
        }
    return out


def lag1_autocorr(series: np.ndarray) -> float:
    """Lag-one autocorrelation of a scalar series (for monitoring only)."""
    s = np.asarray(series, dtype=float).reshape(-1)
    s = s - s.mean()
    denom = float(np.dot(s, s))
    if denom == 0.0:
        return 1.0
    return float(np.dot(s[1:], s[:-1]) / denom)
