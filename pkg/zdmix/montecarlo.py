"""zdmix montecarlo - batch-means estimators on simulated orbits.

Each estimator splits its trajectories into at least 32 batches. Batch b
draws from the Philox stream keyed by (seed, b), so its numbers do not
depend on which worker ran it, and batch means are combined by a pairwise
tree in batch order. Results are therefore identical for any worker count.
"""

import hashlib
import logging
import math
import threading
from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import Pool

import numpy as np
import scipy.stats

from zdmix import billiard as bl
from zdmix import zd_spectral as zd
from zdmix.coefficients import (
    DEFAULT_LADDER,
    DEFAULT_RATIO_N,
    MC_RTOL,
    CellObservable,
    CorrelationProvider,
    markov_base,
)
from zdmix.core import BudgetExhaustedError, ConfigError, GeometryError
from zdmix.tensor import SymTensor

logger = logging.getLogger(__name__)

MIN_BATCHES = 32
DEFAULT_BATCHES = 64
DEFAULT_TRAJECTORIES = 1 << 16
CAP_HIT_LIMIT = 1e-9
NOISE_SIGMAS = 3.0


# ── Random streams ───────────────────────────────────────────────────────


def stream(seed: int, index: int) -> np.random.Generator:
    """Generator for stream `index` of `seed` (a 128-bit Philox key)."""
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must lie in 0..2^64-1, got {seed}")
    if index < 0:
        raise ValueError(f"stream index must be >= 0, got {index}")
    return np.random.Generator(np.random.Philox(key=seed + (index << 64)))


def tree_sum(parts: Sequence):
    """Pairwise sum in index order. The grouping depends only on len(parts)."""
    if not parts:
        raise ValueError("nothing to sum")
    items = list(parts)
    while len(items) > 1:
        merged = [_add(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def _add(a, b):
    if isinstance(a, dict):
        return {k: a[k] + b[k] for k in a}
    return a + b


# ── Orbit sources ────────────────────────────────────────────────────────


@dataclass
class OrbitBlock:
    """Completed trajectories of one batch on the times 0..steps.

    kappa[:, t] is the step leaving time t and values[tag][:, t] the base
    observable at time t.
    """

    kappa: np.ndarray
    values: dict = field(default_factory=dict)
    flights: np.ndarray | None = None
    dropped: int = 0
    capped: int = 0

    @property
    def size(self) -> int:
        return self.kappa.shape[0]

    def displacement(self, n: int) -> np.ndarray:
        """S_n for every trajectory, int64."""
        return self.kappa[:, :n].sum(axis=1)


class OrbitSource(ABC):
    """Something that draws stationary orbits with their κ and base observables."""

    name = "source"
    dim = 2
    even = True
    finite_horizon = True

    @property
    @abstractmethod
    def hash(self) -> str: ...

    @abstractmethod
    def mean(self, tag) -> float:
        """Exact invariant mean of a base observable."""

    @abstractmethod
    def simulate(
        self, rng: np.random.Generator, count: int, steps: int, tags: Sequence
    ) -> OrbitBlock: ...


class BilliardSource(OrbitSource):
    def __init__(self, table: bl.BilliardTable):
        self.table = table
        self.name = f"billiard:{table.hash()[:12]}"
        self.dim = 2
        self.even = True
        self.finite_horizon = table.finite_horizon

    @property
    def hash(self) -> str:
        return self.table.hash()

    def mean(self, tag) -> float:
        return bl.base_mean(self.table, tag)

    def simulate(self, rng, count, steps, tags):
        start = bl.sample_invariant(self.table, rng, count)
        # one extra step so kappa-valued observables exist at time `steps`
        tr = bl.trace_batch(self.table, start, steps + 1)
        ok = tr.status == bl.OK
        capped = int((tr.status == bl.CAPPED).sum())
        dropped = int(count - ok.sum())
        kappa = tr.kappa[ok]
        obstacle = tr.obstacle[ok, : steps + 1]
        phi = tr.phi[ok, : steps + 1]
        values = {
            tag: bl.evaluate_base(self.table, tag, obstacle, phi, kappa) for tag in tags
        }
        return OrbitBlock(kappa, values, tr.flight[ok], dropped, capped)


class MarkovSource(OrbitSource):
    """Synthetic orbits of a finite-state model, with κ_t drawn jointly with X_{t+1}."""

    def __init__(self, model: zd.MarkovModel):
        self.model = model
        self.name = f"markov:{model.name}"
        self.dim = model.dim
        self.even = model.even
        n = model.n_states
        joint = np.transpose(model.kernel_stack, (1, 0, 2)).reshape(n, -1)
        self._cdf = np.cumsum(joint, axis=1)
        self._cdf[:, -1] = 1.0

    @property
    def hash(self) -> str:
        h = hashlib.sha256(self.model.kernel_stack.tobytes())
        h.update(self.model.steps.tobytes())
        return h.hexdigest()

    def mean(self, tag) -> float:
        return float(self.model.stationary @ markov_base(self.model, tag))

    def simulate(self, rng, count, steps, tags):
        model = self.model
        n = model.n_states
        states = np.empty((count, steps + 1), dtype=np.int64)
        kappa = np.empty((count, steps + 1, model.dim), dtype=np.int64)
        cur = rng.choice(n, size=count, p=model.stationary)
        for t in range(steps + 1):
            states[:, t] = cur
            u = rng.random(count)
            pick = (self._cdf[cur] <= u[:, None]).sum(axis=1)
            pick = np.minimum(pick, self._cdf.shape[1] - 1)
            kappa[:, t] = model.steps[pick // n]
            cur = pick % n
        values = {tag: markov_base(model, tag)[states] for tag in tags}
        return OrbitBlock(kappa, values)


def make_source(target) -> OrbitSource:
    if isinstance(target, OrbitSource):
        return target
    if isinstance(target, bl.BilliardTable):
        return BilliardSource(target)
    if isinstance(target, zd.MarkovModel):
        return MarkovSource(target)
    raise TypeError(f"cannot simulate orbits of {type(target).__name__}")


# ── Batch means ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Estimate:
    """Batch-means estimate: mean, standard error and number of batches."""

    mean: np.ndarray
    stderr: np.ndarray
    batches: int

    def z(self, value) -> np.ndarray:
        """|mean - value| in standard errors (inf where the error is 0 and they differ)."""
        diff = np.abs(self.mean - np.asarray(value))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(self.stderr > 0, diff / self.stderr, np.where(diff > 0, np.inf, 0.0))
        return out

    def item(self) -> float:
        return float(np.asarray(self.mean).reshape(-1)[0])


def batch_estimate(parts: Sequence) -> dict[str, Estimate]:
    """Combine per-batch dictionaries of means."""
    b = len(parts)
    total = tree_sum(parts)
    mean = {k: np.asarray(v) / b for k, v in total.items()}
    sq = tree_sum([{k: (np.asarray(p[k]) - mean[k]) ** 2 for k in mean} for p in parts])
    return {k: Estimate(mean[k], np.sqrt(sq[k] / (b - 1) / b), b) for k in mean}


def _run_batch(source: OrbitSource, seed, steps, tags, statistic, count, index):
    block = source.simulate(stream(seed, index), count, steps, tags)
    value = statistic(block) if block.size else None
    return value, block.dropped, block.capped


@dataclass
class EstimatorRun:
    """Everything a sampler has estimated, with its provenance."""

    source_hash: str
    seed: int
    n_traj: int
    batches: int
    horizon: str
    statistics: dict[tuple[str, int | None], Estimate] = field(default_factory=dict)
    steps: int = 0
    drawn: int = 0
    dropped: int = 0
    capped: int = 0

    @property
    def cap_hit_rate(self) -> float:
        return self.capped / self.steps if self.steps else 0.0

    @property
    def dropped_fraction(self) -> float:
        """Share of drawn trajectories discarded at a tangency or the flight cap."""
        return self.dropped / self.drawn if self.drawn else 0.0

    def add(self, name: str, estimate: Estimate, n: int | None = None) -> None:
        self.statistics[(name, n)] = estimate

    def report_rows(self) -> list[dict]:
        rows = []
        for (name, n), est in self.statistics.items():
            mean = np.asarray(est.mean)
            err = np.asarray(est.stderr)
            if mean.ndim == 0:
                rows.append(self._row(name, n, float(mean), float(err), est.batches))
                continue
            for idx in np.ndindex(*mean.shape):
                label = ",".join(str(i + 1) for i in idx)
                rows.append(
                    self._row(f"{name}[{label}]", n, float(mean[idx]), float(err[idx]),
                              est.batches)
                )
        return rows

    def _row(self, name, n, value, stderr, batches) -> dict:
        return {
            "statistic": name,
            "n": n,
            "value": value,
            "stderr": stderr,
            "batches": batches,
            "seed": self.seed,
        }


class Sampler:
    """Runs batched statistics on one orbit source.

    Every run uses the same streams 0..batches-1, so statistics of one
    sampler are evaluated on common orbits.
    """

    def __init__(
        self,
        target,
        seed: int = 0,
        trajectories: int = DEFAULT_TRAJECTORIES,
        batches: int = DEFAULT_BATCHES,
        workers: int = 1,
        step_limit: int | None = None,
    ):
        if batches < MIN_BATCHES:
            raise ValueError(f"need at least {MIN_BATCHES} batches, got {batches}")
        if trajectories < batches:
            raise ValueError(f"{trajectories} trajectories cannot fill {batches} batches")
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.source = make_source(target)
        self.seed = int(seed)
        self.trajectories = int(trajectories)
        self.batches = int(batches)
        self.workers = int(workers)
        self.step_limit = step_limit
        horizon = "finite" if self.source.finite_horizon else "infinite"
        self.record = EstimatorRun(
            self.source.hash, self.seed, self.batch_size * self.batches, self.batches, horizon
        )

    @property
    def batch_size(self) -> int:
        return self.trajectories // self.batches

    def run(self, statistic, steps: int, tags: Sequence = ()) -> dict[str, Estimate]:
        """Evaluate statistic(block) on every batch and combine the batch means."""
        cost = self.batch_size * self.batches * (steps + 1)
        if self.step_limit is not None and self.record.steps + cost > self.step_limit:
            raise BudgetExhaustedError(
                f"{cost} more collision steps would exceed the budget of {self.step_limit} "
                f"({self.record.steps} used)"
            )
        task = partial(
            _run_batch, self.source, self.seed, steps, tuple(tags), statistic, self.batch_size
        )
        if self.workers > 1:
            with Pool(self.workers) as pool:
                results = pool.map(task, range(self.batches))
        else:
            results = [task(b) for b in range(self.batches)]

        dropped = sum(r[1] for r in results)
        capped = sum(r[2] for r in results)
        self.record.steps += cost
        self.record.drawn += self.batch_size * self.batches
        self.record.dropped += dropped
        self.record.capped += capped
        empty = [b for b, r in enumerate(results) if r[0] is None]
        if empty:
            raise BudgetExhaustedError(f"batches {empty} lost every trajectory")
        if dropped:
            logger.warning(
                "dropped %d of %d trajectories (tangent collisions or flight cap)",
                dropped, self.batch_size * self.batches,
            )
        if capped and capped / cost > CAP_HIT_LIMIT:
            logger.warning("flight cap hit on %.3g of steps", capped / cost)
        logger.debug("%d batches of %d trajectories, %d steps", self.batches,
                     self.batch_size, steps)
        return batch_estimate([r[0] for r in results])


# ── Per-batch statistics ─────────────────────────────────────────────────


def _lag_stat(block: OrbitBlock, m_max: int, tag, mean: float, orders: int) -> dict:
    """Correlations around the centre time M of orbits on 0..2M."""
    c = m_max
    k = block.kappa.astype(np.float64)
    b = block.size
    out = {"kk": np.einsum("bi,bmj->mij", k[:, c], k) / b}
    if tag is None:
        return out
    o = block.values[tag][:, c] - mean
    out["ok"] = np.einsum("b,bmi->mi", o, k) / b
    if orders < 2:
        return out
    idx = np.arange(m_max + 1)
    plus = k[:, c + idx]
    minus = k[:, c - idx].copy()
    minus[:, 0] = 0.0
    out["pairs+"] = np.einsum("b,bji,bkl->jkil", o, plus, plus) / b
    out["pairs-"] = np.einsum("b,bji,bkl->jkil", o, minus, minus) / b
    if orders < 3:
        return out
    out["triples+"] = np.einsum("b,bpi,bqj,brk->pqrijk", o, plus, plus, plus) / b
    out["triples-"] = np.einsum("b,bpi,bqj,brk->pqrijk", o, minus, minus, minus) / b
    return out


def _tensor_powers(weight: np.ndarray, s: np.ndarray, p_max: int) -> dict:
    b = len(weight)
    out = {}
    power = weight.astype(np.float64)
    for p in range(p_max + 1):
        out[f"p{p}"] = power.sum(axis=0) / b
        power = power[..., None] * s.reshape((b,) + (1,) * p + (s.shape[1],))
    return out


def _moment_stat(block: OrbitBlock, n: int, p_max: int, tag, side: str) -> dict:
    s = block.displacement(n).astype(np.float64)
    if tag is None:
        weight = np.ones(block.size)
    else:
        weight = block.values[tag][:, 0 if side == "+" else n]
    return _tensor_powers(weight, s, p_max)


def _cross(block: OrbitBlock, n: int, shifts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    s = block.displacement(n)
    hit = (s[:, None, :] == shifts[None, :, :]).all(axis=2)
    return hit.astype(np.float64) @ weights


def _cn_stat(block, ns, f_tag, g_tag, shifts, weights) -> dict:
    f0 = block.values[f_tag][:, 0]
    out = {}
    for n in ns:
        g0 = block.values[g_tag][:, n]
        out[f"n{n}"] = np.array(np.mean(f0 * _cross(block, n, shifts, weights) * g0))
    return out


def _hist_stat(block: OrbitBlock, n: int, window: int) -> dict:
    s = block.displacement(n)
    d = s.shape[1]
    side = 2 * window + 1
    inside = (np.abs(s) <= window).all(axis=1)
    flat = np.ravel_multi_index(tuple((s[inside] + window).T), (side,) * d)
    counts = np.bincount(flat, minlength=side**d).reshape((side,) * d)
    return {
        "hist": counts / block.size,
        "outside": np.array(1.0 - inside.mean()),
    }


def _cov_stat(block: OrbitBlock, ladder: Sequence[int]) -> dict:
    out = {}
    for n in ladder:
        s = block.displacement(n).astype(np.float64)
        out[f"n{n}"] = s.T @ s / block.size
    return out


def _flight_stat(block: OrbitBlock, thresholds: np.ndarray) -> dict:
    flights = block.flights.reshape(-1)
    return {"survival": (flights[:, None] > thresholds[None, :]).mean(axis=0)}


# ── Estimators ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class LagEstimates:
    """E[κ⊗κ∘T̄^m] and E[õ κ∘T̄^j], |m|, |j| <= M, lag m at index M+m."""

    kk: Estimate
    ok: Estimate | None
    pairs: dict[str, Estimate] = field(default_factory=dict)
    triples: dict[str, Estimate] = field(default_factory=dict)


def estimate_correlation_lags(
    sampler: Sampler, tag=None, m_max: int = 12, orders: int = 1
) -> LagEstimates:
    """Lag correlations read off orbits of length 2M centred at the sampled point.

    Negative lags are read backwards along the same orbit. orders=2 adds
    the pair arrays and orders=3 the triples, in the layouts of
    CorrelationProvider.
    """
    if m_max < 1:
        raise ValueError(f"need M >= 1, got {m_max}")
    tags = () if tag is None else (tag,)
    mean = 0.0 if tag is None else sampler.source.mean(tag)
    stat = partial(_lag_stat, m_max=m_max, tag=tag, mean=mean, orders=orders)
    est = sampler.run(stat, 2 * m_max, tags)
    sampler.record.add("kk", est["kk"], m_max)
    pairs = {s: est[f"pairs{s}"] for s in "+-" if f"pairs{s}" in est}
    triples = {s: est[f"triples{s}"] for s in "+-" if f"triples{s}" in est}
    return LagEstimates(est["kk"], est.get("ok"), pairs, triples)


def estimate_moments(sampler: Sampler, n: int, p_max: int = 4, tag=None, side="+"):
    """E[S_n^{⊗p}] (tag None) or E[o S_n^{⊗p}] / E[S_n^{⊗p} o∘T̄^n] for p <= p_max."""
    tags = () if tag is None else (tag,)
    stat = partial(_moment_stat, n=n, p_max=p_max, tag=tag, side=side)
    est = sampler.run(stat, n, tags)
    return [est[f"p{p}"] for p in range(p_max + 1)]


def estimate_Cn(
    sampler: Sampler, f: CellObservable, g: CellObservable, ns: int | Sequence[int]
) -> dict[int, Estimate]:
    """Ĉ_n = batch mean of f₀(x) H(S_n(x)) g₀(T̄^n x), H the cross-correlation of the weights."""
    ladder = [ns] if isinstance(ns, int) else list(ns)
    if f.dim != sampler.source.dim or g.dim != sampler.source.dim:
        raise ValueError("observable and source dimensions differ")
    cross = f.cross_weights(g)
    if cross:
        shifts = np.array(list(cross), dtype=np.int64)
        weights = np.array(list(cross.values()))
    else:
        shifts = np.zeros((0, f.dim), dtype=np.int64)
        weights = np.zeros(0)
    tags = tuple(dict.fromkeys([f.base, g.base]))
    stat = partial(_cn_stat, ns=ladder, f_tag=f.base, g_tag=g.base, shifts=shifts,
                   weights=weights)
    est = sampler.run(stat, max(ladder), tags)
    out = {n: est[f"n{n}"] for n in ladder}
    for n, e in out.items():
        sampler.record.add("C_n", e, n)
    return out


@dataclass(frozen=True)
class LLTHistogram:
    n: int
    window: int
    prob: Estimate
    outside: Estimate

    def at(self, ell) -> tuple[float, float]:
        idx = tuple(int(x) + self.window for x in ell)
        if any(not 0 <= i <= 2 * self.window for i in idx):
            return 0.0, 0.0
        return float(self.prob.mean[idx]), float(self.prob.stderr[idx])

    def symmetry_z(self) -> float:
        """Largest |P̂(ℓ) - P̂(-ℓ)| in units of its standard error."""
        p = self.prob.mean
        flipped = p[(slice(None, None, -1),) * p.ndim]
        err = np.hypot(self.prob.stderr, self.prob.stderr[(slice(None, None, -1),) * p.ndim])
        diff = np.abs(p - flipped)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(err > 0, diff / err, np.where(diff > 0, np.inf, 0.0))
        return float(z.max())


def llt_histogram(sampler: Sampler, n: int, window: int | None = None) -> LLTHistogram:
    """Empirical P(S_n = ℓ) on the box |ℓ_i| <= window, plus the mass outside it."""
    if window is None:
        window = max(4, int(math.ceil(6 * math.sqrt(n))))
    est = sampler.run(partial(_hist_stat, n=n, window=window), n)
    centre = (window,) * sampler.source.dim
    sampler.record.add(
        "llt_p0", Estimate(est["hist"].mean[centre], est["hist"].stderr[centre],
                           est["hist"].batches), n
    )
    return LLTHistogram(n, window, est["hist"], est["outside"])


@dataclass(frozen=True)
class ScalingResult:
    """Cov(S_n)/(n log n) along a ladder, and (n log n)Ĉ_n when observables are given."""

    ladder: tuple[int, ...]
    covariance: dict[int, Estimate]
    correlation: dict[int, Estimate] = field(default_factory=dict)


def infinite_horizon_scaling(
    sampler: Sampler,
    ladder: Sequence[int],
    f: CellObservable | None = None,
    g: CellObservable | None = None,
) -> ScalingResult:
    if sampler.source.finite_horizon:
        raise GeometryError("n log n scaling needs an infinite-horizon table")
    ladder = tuple(int(n) for n in ladder)
    est = sampler.run(partial(_cov_stat, ladder=ladder), max(ladder))
    cov = {}
    for n in ladder:
        scale = n * math.log(n)
        e = est[f"n{n}"]
        cov[n] = Estimate(e.mean / scale, e.stderr / scale, e.batches)
        sampler.record.add("cov_nlogn", cov[n], n)
    corr = {}
    if f is not None and g is not None:
        for n, e in estimate_Cn(sampler, f, g, ladder).items():
            scale = n * math.log(n)
            corr[n] = Estimate(e.mean * scale, e.stderr * scale, e.batches)
            sampler.record.add("C_n_nlogn", corr[n], n)
    return ScalingResult(ladder, cov, corr)


@dataclass(frozen=True)
class TailFit:
    """Log-log fit of P(flight > x); density_slope = survival slope - 1."""

    thresholds: np.ndarray
    survival: Estimate
    slope: float
    slope_stderr: float

    @property
    def density_slope(self) -> float:
        return self.slope - 1.0


def flight_tail(
    sampler: Sampler, steps: int = 64, thresholds: Sequence[float] | None = None
) -> TailFit:
    """Free-flight length tail from every step of every sampled orbit."""
    if not isinstance(sampler.source, BilliardSource):
        raise TypeError("free flights exist only for billiard sources")
    x = np.asarray(thresholds if thresholds is not None else np.geomspace(4.0, 64.0, 9))
    est = sampler.run(partial(_flight_stat, thresholds=x), steps)["survival"]
    keep = est.mean > 0
    if keep.sum() < 3:
        raise BudgetExhaustedError("too few long flights to fit the tail")
    fit = scipy.stats.linregress(np.log(x[keep]), np.log(est.mean[keep]))
    sampler.record.add("flight_tail_slope", Estimate(np.array(fit.slope),
                                                     np.array(fit.stderr), est.batches))
    return TailFit(x, est, float(fit.slope), float(fit.stderr))


# ── Provider ─────────────────────────────────────────────────────────────


class MonteCarloProvider(CorrelationProvider):
    """CorrelationProvider answering from a Sampler, with a result cache.

    Cache keys are (source hash, seed, query); a repeated query returns the
    cached arrays unchanged.
    """

    def __init__(
        self, sampler: Sampler, ladder=DEFAULT_LADDER, ratio_n: int = DEFAULT_RATIO_N
    ):
        self.sampler = sampler
        src = sampler.source
        self.name = f"montecarlo:{src.name}"
        self.dim = src.dim
        self.even = src.even
        self.rtol = MC_RTOL
        self.ladder = tuple(int(n) for n in ladder)
        self.ratio_n = int(ratio_n)
        self._cache: dict[tuple, object] = {}
        self._lock = threading.Lock()
        self._floor = 0.0

    @property
    def noise_floor(self) -> float:
        return self._floor

    def _cached(self, key: tuple, compute):
        key = (self.sampler.source.hash, self.sampler.seed) + key
        with self._lock:
            if key in self._cache:
                logger.debug("cache hit %s", key[2:])
                return self._cache[key]
        value = compute()
        with self._lock:
            return self._cache.setdefault(key, value)

    def mean(self, obs) -> float:
        return self.sampler.source.mean(obs)

    def kappa_estimate(self, m_max: int) -> Estimate:
        est = self._cached(
            ("kk", m_max), lambda: estimate_correlation_lags(self.sampler, None, m_max).kk
        )
        self._floor = NOISE_SIGMAS * float(est.stderr.max())
        return est

    def kappa_autocorrelation(self, m_max):
        return self.kappa_estimate(m_max).mean

    def _lags(self, obs, m_max) -> LagEstimates:
        return self._cached(
            ("lags", obs, m_max),
            lambda: estimate_correlation_lags(self.sampler, obs, m_max, orders=3),
        )

    def obs_kappa_correlation(self, obs, m_max):
        return self._lags(obs, m_max).ok.mean

    def obs_kappa_pairs(self, obs, m_max, side):
        return self._lags(obs, m_max).pairs[side].mean

    def obs_kappa_triples(self, obs, m_max, side):
        return self._lags(obs, m_max).triples[side].mean

    def _moments(self, n, tag, side) -> list[Estimate]:
        return self._cached(
            ("S", n, tag, side), lambda: estimate_moments(self.sampler, n, 4, tag, side)
        )

    def displacement_moments(self, n, p_max):
        return [SymTensor(e.mean, dim=self.dim) for e in self._moments(n, None, "+")[: p_max + 1]]

    def obs_displacement_moments(self, obs, n, p_max, side):
        return [SymTensor(e.mean, dim=self.dim) for e in self._moments(n, obs, side)[: p_max + 1]]

    def correlation(self, f: CellObservable, g: CellObservable, n: int) -> Estimate:
        key = ("C", f.base, tuple(sorted(f.weights.items())), g.base,
               tuple(sorted(g.weights.items())), n)
        return self._cached(key, lambda: estimate_Cn(self.sampler, f, g, n)[n])


def provider_from_montecarlo(
    target,
    budget: Mapping | None = None,
    seed: int = 0,
    workers: int = 1,
    ladder=DEFAULT_LADDER,
    ratio_n: int = DEFAULT_RATIO_N,
) -> MonteCarloProvider:
    """Wrap a table (or Markov model) and a budget into a CorrelationProvider.

    budget keys: trajectories, batches, max_steps (optional total collision steps).
    """
    budget = dict(budget or {})
    unknown = set(budget) - {"trajectories", "batches", "max_steps"}
    if unknown:
        raise ConfigError(f"unknown budget keys: {', '.join(sorted(unknown))}")
    sampler = Sampler(
        target,
        seed=seed,
        trajectories=int(budget.get("trajectories", DEFAULT_TRAJECTORIES)),
        batches=int(budget.get("batches", DEFAULT_BATCHES)),
        workers=workers,
        step_limit=budget.get("max_steps"),
    )
    return MonteCarloProvider(sampler, ladder, ratio_n)
