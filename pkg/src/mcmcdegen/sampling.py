"""Low-level exact samplers shared by every kernel.

Everything here is either a thin, reproducible wrapper around numpy's
counter-based Philox generator or an exact sampler built on top of it:
truncated normals (inverse CDF in the bulk, exponential rejection past 6 sd),
gamma draws, and a grid inverse-CDF sampler kept around as a cross-check tool.

All functions take an explicit :class:`RngStream`; nothing touches global
random state, so identical stream keys reproduce identical draws bit for bit
regardless of scheduling.
"""

from __future__ import annotations

import dataclasses
import math
import zlib

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

TAIL_CUTOFF = 6.0
MASS_FLOOR = 1e-300
_MAX_REJECTION_ROUNDS = 64


class DegenerateIntervalError(ValueError):
    """Raised when a truncation interval carries no representable mass."""


class SamplingError(RuntimeError):
    """Raised when a sampler fails to converge (rejection loop, bracketing)."""


@dataclasses.dataclass(frozen=True)
class Interval:
    """A nonempty real interval, possibly unbounded on either side.

    The closed/open flags are metadata only: draws from continuous
    distributions do not distinguish them, but callers use them to document
    which side of a constraint is attained.
    """

    lo: float = -math.inf
    hi: float = math.inf
    closed_lo: bool = True
    closed_hi: bool = True

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise DegenerateIntervalError("interval endpoint is NaN")
        if not self.lo < self.hi:
            raise DegenerateIntervalError(
                f"empty interval: lo={self.lo!r} >= hi={self.hi!r}"
            )

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x) -> bool:
        return bool(np.all((np.asarray(x) >= self.lo) & (np.asarray(x) <= self.hi)))


def _path_entry(part) -> int:
    """Map a stream path component to a stable nonnegative integer."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be nonnegative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream path entries must be int or str, got {type(part)!r}")


class RngStream:
    """Counter-based random stream keyed by (master seed, *path).

    Two streams with different paths are statistically independent, and a
    stream is fully determined by its key: the same (seed, path) always
    reproduces the same draws. Child streams extend the path, which is how
    replications, chains, and steps get their own independent randomness
    without any sequential coupling.

    A stream owns a single lazily created generator and must not be shared
    across threads; derive children instead.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(_path_entry(p) for p in path)
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    def child(self, *path) -> "RngStream":
        stream = RngStream.__new__(RngStream)
        stream.seed = self.seed
        stream.path = self.path + tuple(_path_entry(p) for p in path)
        stream._gen = None
        return stream

    def seed_int(self) -> int:
        """A stable 63-bit integer derived from this stream's key.

        Handy where an API wants a plain seed (e.g. dataset sidecars) but
        the value must still be keyed to the stream hierarchy.
        """
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def _standard_truncated(a, b, gen):
    """Draw standard normals conditioned on the interval [a, b] elementwise.

    ``a`` and ``b`` are broadcast arrays (may contain +-inf). The bulk uses
    the inverse CDF; intervals lying entirely past TAIL_CUTOFF standard
    deviations use the translated-exponential rejection sampler, which stays
    exact arbitrarily far out where the CDF has no resolution left.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    if a.size == 0:
        return np.empty(a.shape)
    if np.any(~(a < b)):
        raise DegenerateIntervalError("empty truncation interval (lo >= hi)")

    # Work on the left half-line: intervals starting right of zero are
    # reflected so the CDF is evaluated where it keeps absolute accuracy.
    flip = a > 0.0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)

    tail = hi <= -TAIL_CUTOFF
    out = np.empty(a.shape)

    bulk = ~tail
    if np.any(bulk):
        fa = ndtr(lo[bulk])
        fb = ndtr(hi[bulk])
        mass = fb - fa
        if np.any(mass < MASS_FLOOR):
            raise DegenerateIntervalError(
                "truncation interval mass underflows double precision"
            )
        u = fa + gen.random(int(bulk.sum())) * mass
        x = ndtri(u)
        out[bulk] = np.clip(x, lo[bulk], hi[bulk])

    if np.any(tail):
        # Reflect once more so the rejection runs on a right tail [tlo, thi),
        # tlo >= TAIL_CUTOFF, and check the mass is representable at all.
        tlo = -hi[tail]
        thi = -lo[tail]
        mass = ndtr(-tlo) - ndtr(-thi)
        if np.any(mass < MASS_FLOOR):
            raise DegenerateIntervalError(
                "truncation interval mass underflows double precision"
            )
        draws = np.empty(tlo.shape)
        pending = np.ones(tlo.shape, dtype=bool)
        alpha = 0.5 * (tlo + np.sqrt(tlo * tlo + 4.0))
        for _ in range(_MAX_REJECTION_ROUNDS):
            k = int(pending.sum())
            if k == 0:
                break
            lo_p = tlo[pending]
            al_p = alpha[pending]
            z = lo_p - np.log(gen.random(k)) / al_p
            accept = gen.random(k) <= np.exp(-0.5 * (z - al_p) ** 2)
            accept &= z <= thi[pending]
            idx = np.flatnonzero(pending)[accept]
            draws[idx] = z[accept]
            remaining = pending.copy()
            remaining[idx] = False
            pending = remaining
        if np.any(pending):
            # Intervals too narrow for rejection to land in: invert the
            # conditional survival function in log space, which keeps full
            # relative precision arbitrarily far out.
            lo_p = tlo[pending]
            hi_p = thi[pending]
            lq_lo = log_ndtr(-lo_p)
            lq_hi = log_ndtr(-hi_p)
            one_minus_ratio = -np.expm1(lq_hi - lq_lo)
            u = gen.random(int(pending.sum()))
            q = np.exp(lq_lo) * (1.0 - one_minus_ratio * u)
            z = -ndtri(np.fmax(q, 1e-310))
            draws[pending] = np.clip(z, lo_p, hi_p)
        out[tail] = -draws

    result = np.where(flip, -out, out)
    assert np.all(result >= a) and np.all(result <= b)
    return result


def truncated_normal_vec(mean, sd, lo, hi, rng: RngStream):
    """Vectorized exact draws from N(mean, sd^2) restricted to [lo, hi].

    All arguments broadcast; the output has the broadcast shape. Used by the
    kernels where a whole latent vector (or a batch of chains) is drawn in
    one call, which also pins down the randomness consumption order.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    z = _standard_truncated(a, b, rng.generator)
    x = mean + sd * z
    # Standardizing can round endpoints; clamp back onto the requested
    # interval so membership is exact for downstream hard assertions.
    x = np.clip(x, lo, hi)
    return x


def truncated_normal(mean: float, sd: float, iv: Interval, rng: RngStream) -> float:
    """Exact draw from N(mean, sd^2) restricted to a nonempty interval."""
    x = truncated_normal_vec(mean, sd, iv.lo, iv.hi, rng)
    return float(x) if x.ndim == 0 else float(x.reshape(-1)[0])


def truncated_normal_extended(mean, sd, lo, hi, rng: RngStream):
    """Slow high-precision fallback for intervals whose mass underflows.

    Reflects the interval onto the right half-line, evaluates the survival
    function at 60 significant digits with mpmath (where it keeps relative
    precision arbitrarily far out), and inverts the conditional draw by
    bisection. Raises DegenerateIntervalError if the interval carries no
    mass even at that precision. Scalar only; this path is for rescue, not
    throughput.
    """
    import mpmath as mp

    with mp.workdps(60):
        m, s = mp.mpf(mean), mp.mpf(sd)
        a = (mp.mpf(lo) - m) / s if math.isfinite(lo) else mp.mpf("-inf")
        b = (mp.mpf(hi) - m) / s if math.isfinite(hi) else mp.mpf("inf")
        flip = b <= 0
        if flip:
            a, b = -b, -a

        def surv(t):
            return mp.ncdf(-t)

        qa = surv(a) if mp.isfinite(a) else mp.mpf(1)
        qb = surv(b) if mp.isfinite(b) else mp.mpf(0)
        mass = qa - qb
        if mass <= 0:
            raise DegenerateIntervalError(
                "interval mass is zero even at extended precision"
            )
        target = qa - mp.mpf(rng.generator.random()) * mass
        t0 = a if mp.isfinite(a) else mp.mpf(-45)
        t1 = b if mp.isfinite(b) else max(t0 + 10, mp.mpf(45))
        for _ in range(260):
            if t1 - t0 <= mp.mpf("1e-45") * (1 + abs(t0)):
                break
            mid = (t0 + t1) / 2
            if surv(mid) >= target:
                t0 = mid
            else:
                t1 = mid
        z = (t0 + t1) / 2
        x = float(m + s * (-z if flip else z))
    return min(max(x, lo), hi)


def gamma_draw(shape, rate, rng: RngStream, size=None):
    """Gamma(shape, rate) draws; broadcasts over array arguments."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("gamma shape and rate must be positive")
    out = rng.generator.gamma(shape, 1.0 / rate, size=size)
    return out


def _bracket_support(logdensity, support: Interval):
    """Return finite [lo, hi] covering essentially all density mass."""
    lo, hi = support.lo, support.hi
    if math.isfinite(lo) and math.isfinite(hi):
        return lo, hi

    anchor = 0.0
    if not (lo < anchor < hi):
        anchor = lo + 1.0 if math.isfinite(lo) else hi - 1.0
    peak = logdensity(anchor)
    if not math.isfinite(peak):
        raise SamplingError("logdensity not finite at the scan anchor")

    def scan(direction, bound):
        edge = anchor
        step = 1.0
        best = peak
        for _ in range(64):
            nxt = edge + direction * step
            if (direction > 0 and nxt >= bound) or (direction < 0 and nxt <= bound):
                return bound
            val = logdensity(nxt)
            if math.isfinite(val):
                best = max(best, val)
                if val < best - 45.0:
                    return nxt
            edge = nxt
            step *= 2.0
        raise SamplingError("density mass escapes support scan")

    new_lo = lo if math.isfinite(lo) else scan(-1.0, lo)
    new_hi = hi if math.isfinite(hi) else scan(+1.0, hi)
    return new_lo, new_hi


def grid_inverse_cdf(logdensity, support: Interval, gridsize: int, rng: RngStream,
                     size=None, return_tv=False):
    """Draw from a 1-D density known up to a constant, via a grid inverse CDF.

    The density is approximated by its piecewise-linear interpolant on a
    uniform grid of ``gridsize`` cells and sampled exactly from that
    interpolant, so the total-variation error decays like gridsize**-2 for
    smooth densities. With ``return_tv`` the draws come back with a second
    routine's crude estimate of that TV error (based on second differences).

    Infinite support endpoints are bracketed by scanning outward until the
    log density falls 45 nats below the running maximum.
    """
    if gridsize < 8:
        raise ValueError("gridsize must be at least 8")
    lo, hi = _bracket_support(logdensity, support)
    grid = np.linspace(lo, hi, gridsize + 1)
    logf = np.asarray([logdensity(float(t)) for t in grid], dtype=float)
    if not np.any(np.isfinite(logf)):
        raise SamplingError("logdensity not finite anywhere on the grid")
    logf = np.where(np.isfinite(logf), logf, -np.inf)
    f = np.exp(logf - np.max(logf))
    h = (hi - lo) / gridsize

    cell_mass = 0.5 * (f[:-1] + f[1:]) * h
    total = float(cell_mass.sum())
    if total <= 0:
        raise SamplingError("density mass vanished on the grid")
    cum = np.concatenate([[0.0], np.cumsum(cell_mass)])

    scalar = size is None
    n = 1 if scalar else int(np.prod(size))
    u = rng.generator.random(n) * total
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, gridsize - 1)
    v = u - cum[k]
    f0 = f[k]
    f1 = f[k + 1]
    slope = (f1 - f0) / h
    # Invert the quadratic CDF of the linear piece; fall back to the flat
    # formula when the slope underflows.
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = np.maximum(f0 * f0 + 2.0 * slope * v, 0.0)
        t_lin = (np.sqrt(disc) - f0) / slope
        t_flat = v / np.maximum(f0, 1e-300)
    t = np.where(np.abs(slope) * h > 1e-12 * np.maximum(f0, f1), t_lin, t_flat)
    t = np.clip(t, 0.0, h)
    draws = grid[k] + t

    out = float(draws[0]) if scalar else draws.reshape(size)
    if return_tv:
        second = np.abs(np.diff(f, 2))
        tv = 0.125 * float(second.sum()) * h / total
        return out, tv
    return out
