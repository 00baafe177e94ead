"""zdmix coefficients - expansion coefficients of mixing rates.

Every quantity here is assembled from a CorrelationProvider. ExactProvider
answers from the finite-state chain algebra of zdmix.zd_spectral; the Monte
Carlo provider in zdmix.montecarlo answers from simulated billiard orbits.

Conventions: κ_j is the step between collisions j and j+1, S_n = Σ_{j<n} κ_j,
and a tilde marks a centered observable ũ = u - E[u]. A series F is a list
of symmetric tensors with F[k] the k-th differential at 0.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.stats

from zdmix import zd_spectral as zd
from zdmix.core import ConfigError, ConvergenceError, ModelError
from zdmix.tensor import (
    MAX_RANK,
    GaussianModel,
    NPolynomial,
    SymTensor,
    full_contract,
    gaussian_derivatives,
    gaussian_derivatives_at_zero,
    pairing_power,
    series_exp,
    series_exp_polynomial,
    series_log,
    series_product,
    series_reciprocal,
    sym_product,
    symmetrize,
    tensor_product,
)

logger = logging.getLogger(__name__)

DEFAULT_LAGS = 12
MIN_FIT_LAGS = 16
MAX_LAGS = 128
DEFAULT_LADDER = (64, 128, 256, 512)
DEFAULT_RATIO_N = 256
MAX_ORDER = 3
TOY_RTOL = 1e-8
MC_RTOL = 1e-3
FLOOR_RTOL = 1e-12
PROBE_SEED = 20240611
PROBE_RTOL = 1e-9


# ── Cell observables ─────────────────────────────────────────────────────


def _parse_cell(key) -> tuple[int, ...]:
    if isinstance(key, str):
        parts = key.strip().strip("()[]").split(",")
    elif isinstance(key, Sequence):
        parts = list(key)
    else:
        parts = [key]
    try:
        return tuple(int(str(p).strip()) for p in parts)
    except ValueError as e:
        raise ConfigError(f"cell '{key}' is not a list of integers") from e


@dataclass(frozen=True)
class CellObservable:
    """f(x, ℓ) = f₀(x)·h_ℓ with h finitely supported on Z^d.

    `base` is a tag understood by the provider (billiard tags such as
    'cos_phi', Markov tags such as 'state:0') or, for Markov models, an
    explicit vector of state values.
    """

    base: str | tuple[float, ...]
    weights: Mapping[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        weights = {_parse_cell(k): float(w) for k, w in self.weights.items()}
        if not weights:
            raise ValueError("a cell observable needs at least one weighted cell")
        if len({len(k) for k in weights}) != 1:
            raise ValueError("all cells of an observable must have the same dimension")
        object.__setattr__(self, "weights", weights)
        if not isinstance(self.base, str):
            object.__setattr__(self, "base", tuple(float(x) for x in self.base))

    @classmethod
    def indicator(cls, cell: Sequence[int], base: str = "one") -> "CellObservable":
        return cls(base, {tuple(cell): 1.0})

    @classmethod
    def from_config(cls, section: Mapping) -> "CellObservable":
        if not isinstance(section, Mapping) or "weights" not in section:
            raise ConfigError("an observable needs 'base' and 'weights'")
        weights = section["weights"]
        if isinstance(weights, Sequence) and not isinstance(weights, str):
            try:
                weights = {tuple(e["cell"]): e["weight"] for e in weights}
            except (KeyError, TypeError) as e:
                raise ConfigError("weight entries need 'cell' and 'weight'") from e
        if not isinstance(weights, Mapping):
            raise ConfigError("observable weights must be a mapping cell -> weight")
        try:
            return cls(section.get("base", "one"), weights)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def dim(self) -> int:
        return len(next(iter(self.weights)))

    def _cells(self) -> tuple[np.ndarray, np.ndarray]:
        cells = np.array(list(self.weights), dtype=float).reshape(-1, self.dim)
        return cells, np.array(list(self.weights.values()))

    @property
    def total(self) -> float:
        """Σ_ℓ h_ℓ."""
        return float(sum(self.weights.values()))

    @property
    def first_moment(self) -> SymTensor:
        """Σ_ℓ h_ℓ ℓ."""
        cells, w = self._cells()
        return SymTensor(w @ cells)

    @property
    def second_moment(self) -> SymTensor:
        """Σ_ℓ h_ℓ ℓ⊗ℓ."""
        cells, w = self._cells()
        return SymTensor(np.einsum("k,ki,kj->ij", w, cells, cells))

    def cross_weights(self, other: "CellObservable") -> dict[tuple[int, ...], float]:
        """H(s) = Σ_ℓ h_ℓ q_{ℓ+s}, so that C_n = E[f₀ H(S_n) g₀∘T̄^n]."""
        if other.dim != self.dim:
            raise ValueError(f"observables live on Z^{self.dim} and Z^{other.dim}")
        out: dict[tuple[int, ...], float] = {}
        for ell, h in self.weights.items():
            for ell2, q in other.weights.items():
                s = tuple(b - a for a, b in zip(ell, ell2, strict=True))
                out[s] = out.get(s, 0.0) + h * q
        return {s: w for s, w in out.items() if w != 0.0}


def lattice_moments(f: CellObservable, g: CellObservable, k_max: int) -> list[SymTensor]:
    """W_k = Σ_{ℓ,ℓ'} h_ℓ q_ℓ' (ℓ' - ℓ)^{⊗k} for k = 0..k_max."""
    cross = f.cross_weights(g)
    d = f.dim
    shifts = np.array(list(cross), dtype=float).reshape(-1, d)
    w = np.array(list(cross.values()), dtype=float)
    out = []
    power = w
    for k in range(k_max + 1):
        out.append(SymTensor(power.sum(axis=0), dim=d))
        power = power[..., None] * shifts.reshape((-1,) + (1,) * k + (d,))
    return out


# ── Providers ────────────────────────────────────────────────────────────


class CorrelationProvider(ABC):
    """Source of the base correlations every coefficient is built from.

    Correlation arrays use the layouts of zdmix.zd_spectral: lag m of a
    (2M+1)-long series sits at index M+m, and side '-' pair/triple arrays
    index lag -i at position i with row 0 empty.
    """

    name = "provider"
    dim = 2
    even = True
    noise_floor = 0.0
    rtol = TOY_RTOL
    ladder: tuple[int, ...] = DEFAULT_LADDER
    ratio_n = DEFAULT_RATIO_N

    @property
    def contact_order(self) -> int:
        return 4 if self.even else 3

    @abstractmethod
    def mean(self, obs) -> float:
        """E[f₀]."""

    @abstractmethod
    def kappa_autocorrelation(self, m_max: int) -> np.ndarray:
        """E[κ ⊗ κ∘T̄^m] for |m| <= M, shape (2M+1, d, d)."""

    @abstractmethod
    def obs_kappa_correlation(self, obs, m_max: int) -> np.ndarray:
        """E[õ κ∘T̄^j] for |j| <= M, shape (2M+1, d)."""

    @abstractmethod
    def obs_kappa_pairs(self, obs, m_max: int, side: str) -> np.ndarray:
        """E[õ κ∘T̄^{±j} ⊗ κ∘T̄^{±k}], shape (M+1, M+1, d, d)."""

    @abstractmethod
    def obs_kappa_triples(self, obs, m_max: int, side: str) -> np.ndarray:
        """E[õ κ∘T̄^{±a} ⊗ κ∘T̄^{±b} ⊗ κ∘T̄^{±c}], shape (M+1,)*3 + (d,)*3."""

    @abstractmethod
    def displacement_moments(self, n: int, p_max: int) -> list[SymTensor]:
        """E[S_n^{⊗p}] for p = 0..p_max."""

    @abstractmethod
    def obs_displacement_moments(self, obs, n: int, p_max: int, side: str) -> list[SymTensor]:
        """E[o S_n^{⊗p}] (side '+') or E[S_n^{⊗p} o∘T̄^n] (side '-')."""

    def lambda_derivatives(self, k_max: int) -> list[SymTensor] | None:
        """λ_0^{(k)} when the provider knows the leading eigenvalue, else None."""
        return None


def markov_base(model: zd.MarkovModel, base) -> np.ndarray:
    """State function for a Markov base tag ('one', 'state:<i>', 'centered:<tag>')."""
    if isinstance(base, str):
        if base.startswith("centered:"):
            return zd.centered(model, markov_base(model, base[len("centered:"):]))
        if base == "one":
            return np.ones(model.n_states)
        if base.startswith("state:"):
            try:
                i = int(base[len("state:"):])
            except ValueError as e:
                raise ConfigError(f"bad state index in '{base}'") from e
            if not 0 <= i < model.n_states:
                raise ConfigError(f"state {i} out of range for {model.n_states} states")
            out = np.zeros(model.n_states)
            out[i] = 1.0
            return out
        raise ConfigError(f"unknown base observable '{base}' for a Markov model")
    arr = np.asarray(base, dtype=float)
    if arr.shape != (model.n_states,):
        raise ModelError(f"state function must have shape ({model.n_states},), got {arr.shape}")
    return arr


class ExactProvider(CorrelationProvider):
    """Provider backed by exact chain algebra on a MarkovModel."""

    def __init__(self, model: zd.MarkovModel, ladder=DEFAULT_LADDER, ratio_n=DEFAULT_RATIO_N):
        self.model = model
        self.name = f"exact:{model.name}"
        self.dim = model.dim
        self.even = model.even
        self.ladder = tuple(int(n) for n in ladder)
        self.ratio_n = int(ratio_n)
        self._cache: dict[tuple, object] = {}

    def _cached(self, key: tuple, compute):
        if key not in self._cache:
            self._cache[key] = compute()
        return self._cache[key]

    @staticmethod
    def _key(obs):
        return obs if isinstance(obs, str) else tuple(np.asarray(obs, dtype=float).tolist())

    def resolve(self, obs) -> np.ndarray:
        return markov_base(self.model, obs)

    def mean(self, obs) -> float:
        return float(self.model.stationary @ self.resolve(obs))

    def kappa_autocorrelation(self, m_max):
        return self._cached(
            ("kk", m_max), lambda: zd.kappa_autocorrelation(self.model, m_max)
        )

    def obs_kappa_correlation(self, obs, m_max):
        return self._cached(
            ("ok", self._key(obs), m_max),
            lambda: zd.obs_kappa_correlation(self.model, self.resolve(obs), m_max),
        )

    def obs_kappa_pairs(self, obs, m_max, side):
        return self._cached(
            ("okk", self._key(obs), m_max, side),
            lambda: zd.obs_kappa_pairs(self.model, self.resolve(obs), m_max, side),
        )

    def obs_kappa_triples(self, obs, m_max, side):
        return self._cached(
            ("okkk", self._key(obs), m_max, side),
            lambda: zd.obs_kappa_triples(self.model, self.resolve(obs), m_max, side),
        )

    def displacement_moments(self, n, p_max):
        return self._cached(
            ("S", n, p_max), lambda: zd.exact_moments(self.model, 1.0, 1.0, n, p_max)
        )

    def obs_displacement_moments(self, obs, n, p_max, side):
        u = self.resolve(obs)
        if side == "+":
            compute = lambda: zd.exact_moments(self.model, u, 1.0, n, p_max)  # noqa: E731
        else:
            compute = lambda: zd.exact_moments(self.model, 1.0, u, n, p_max)  # noqa: E731
        return self._cached(("oS", self._key(obs), n, p_max, side), compute)

    def lambda_derivatives(self, k_max):
        return self._cached(("lam", k_max), lambda: zd.lambda_derivatives(self.model, k_max))

    def correlation(self, f: CellObservable, g: CellObservable, n: int) -> float:
        """Exact C_n(f, g) = Σ_s H(s) E[f₀ 1{S_n = s} g₀∘T̄^n]."""
        law = zd.exact_cell_law(self.model, self.resolve(f.base), self.resolve(g.base), n)
        return float(sum(w * law.at(s) for s, w in f.cross_weights(g).items()))


# ── Decay fit and truncation ─────────────────────────────────────────────


@dataclass(frozen=True)
class DecayFit:
    """|E[κ ⊗ κ∘T̄^m]| ≈ C₀ θ₀^m; θ₀ = 0 when no lag rises above the noise floor."""

    c0: float
    theta: float
    r2: float
    residual: float
    lags: tuple[int, ...]

    def tail_bound(self, m: int) -> float:
        """Bound C₀θ₀^M/(1-θ₀) on the terms past lag M."""
        if self.theta == 0.0:
            return 0.0
        return self.c0 * self.theta**m / (1.0 - self.theta)

    def weighted_tail_bound(self, m: int) -> float:
        """Bound on Σ_{j>M} j C₀θ₀^j, for the |m|-weighted series."""
        if self.theta == 0.0:
            return 0.0
        t = self.theta
        return self.c0 * t ** (m + 1) * (m + 1 - m * t) / (1.0 - t) ** 2

    def choose_lags(self, tol: float, m_min: int = DEFAULT_LAGS) -> int:
        """Smallest M >= m_min whose weighted tail bound is below tol."""
        for m in range(m_min, MAX_LAGS + 1):
            if self.weighted_tail_bound(m) < tol:
                return m
        raise ConvergenceError(
            f"tail bound stays above {tol:.3g} up to {MAX_LAGS} lags (θ₀ = {self.theta:.4f})"
        )


def fit_decay(provider: CorrelationProvider, m_max: int = MIN_FIT_LAGS) -> DecayFit:
    """Log-linear fit of the largest entry of |E[κ⊗κ∘T̄^m]| over lags 1..M."""
    if m_max < MIN_FIT_LAGS:
        raise ValueError(f"decay fit needs at least {MIN_FIT_LAGS} lags, got {m_max}")
    corr = provider.kappa_autocorrelation(m_max)
    scale = float(np.abs(corr[m_max]).max())
    mags = np.abs(corr[m_max + 1:]).reshape(m_max, -1).max(axis=1)
    floor = max(provider.noise_floor, FLOOR_RTOL * scale)
    lags = np.arange(1, m_max + 1)
    keep = mags > floor
    if not keep.any():
        logger.debug("no κ correlation above the noise floor %.3g; θ₀ = 0", floor)
        return DecayFit(c0=scale, theta=0.0, r2=1.0, residual=0.0, lags=())
    x = lags[keep].astype(float)
    y = np.log(mags[keep])
    if x.size == 1:
        x = np.concatenate([[0.0], x])
        y = np.concatenate([[math.log(scale)], y])
    fit = scipy.stats.linregress(x, y)
    theta = math.exp(fit.slope)
    if theta >= 1.0:
        raise ConvergenceError(f"κ correlations do not decay (fitted θ₀ = {theta:.4f})")
    resid = y - (fit.intercept + fit.slope * x)
    out = DecayFit(
        c0=math.exp(fit.intercept),
        theta=theta,
        r2=float(fit.rvalue**2),
        residual=float(np.sqrt(np.mean(resid**2))),
        lags=tuple(int(v) for v in x if v > 0),
    )
    logger.debug("decay fit: C₀=%.4g θ₀=%.4f R²=%.4f", out.c0, out.theta, out.r2)
    return out


def _fit_for(provider: CorrelationProvider, m_max: int, fit: DecayFit | None) -> DecayFit:
    return fit if fit is not None else fit_decay(provider, max(m_max, MIN_FIT_LAGS))


def sigma2_with_bound(
    provider: CorrelationProvider, m_max: int = DEFAULT_LAGS, fit: DecayFit | None = None
) -> tuple[SymTensor, float]:
    """Σ² = Σ_{|m|<=M} E[κ ⊗ κ∘T̄^m] and the bound on the dropped lags."""
    corr = provider.kappa_autocorrelation(m_max)
    fit = _fit_for(provider, m_max, fit)
    bound = 2.0 * fit.tail_bound(m_max)
    return symmetrize(SymTensor(corr.sum(axis=0))), bound


def sigma2(
    provider: CorrelationProvider,
    m_max: int = DEFAULT_LAGS,
    tol: float | None = None,
    fit: DecayFit | None = None,
) -> SymTensor:
    s2, bound = sigma2_with_bound(provider, m_max, fit)
    if tol is not None and bound > tol:
        raise ConvergenceError(f"Σ² tail bound {bound:.3g} exceeds {tol:.3g} at M = {m_max}")
    logger.debug("Σ² at M=%d, tail bound %.3g", m_max, bound)
    return s2


# ── B-series ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BSeries:
    """Truncated correlation series of κ against the observables u (+) and v (-)."""

    lags: int
    mean_u: float
    mean_v: float
    sigma2: SymTensor
    b0: SymTensor
    b0_plus: SymTensor
    b0_minus: SymTensor
    b1_plus: SymTensor
    b1_minus: SymTensor
    b2_plus: SymTensor
    b2_minus: SymTensor
    b02_plus: SymTensor
    b02_minus: SymTensor
    b3_plus: SymTensor
    b3_minus: SymTensor
    # Joint cumulant sums; they differ from b3 by the two non-minimal pairings.
    c3_plus: SymTensor
    c3_minus: SymTensor
    tail_bound: float


def _sym(arr: np.ndarray) -> SymTensor:
    return symmetrize(SymTensor(arr))


def _sum_square(corr: np.ndarray, m_max: int, length: int) -> np.ndarray:
    """E[(κ_0 + ... + κ_{L-1})^{⊗2}] = Σ_{|m|<L} (L - |m|) E[κ⊗κ∘T̄^m]."""
    lags = np.arange(-(length - 1), length)
    return np.tensordot(length - np.abs(lags), corr[m_max + lags], axes=1)


def _pairing_counts(m_max: int, lo: int) -> np.ndarray:
    """counts[a, g]: index triples in [lo, M]^3 with smallest a and largest - middle = g."""
    grid = np.indices((m_max + 1 - lo,) * 3).reshape(3, -1) + lo
    s = np.sort(grid, axis=0)
    counts = np.zeros((m_max + 1, m_max + 1))
    np.add.at(counts, (s[0], s[2] - s[1]), 1.0)
    return counts


def _third_order(
    triples: np.ndarray, near: np.ndarray, corr: np.ndarray, b1: SymTensor,
    m_max: int, lo: int,
) -> tuple[SymTensor, SymTensor]:
    """(B₃, C₃) for one side.

    B₃ removes from each triple the pairing of the lag nearest to 0 with the
    two others; C₃ removes all three pairings (the joint cumulant).
    """
    total = triples.sum(axis=(0, 1, 2))
    counts = _pairing_counts(m_max, lo)
    gaps = corr[m_max + np.arange(m_max + 1)]
    pair_term = np.einsum("ag,ai,gjk->ijk", counts, near, gaps)
    b3 = _sym(total - pair_term)
    s2 = SymTensor(_sum_square(corr, m_max, m_max + 1 - lo))
    c3 = _sym(total) - sym_product(b1, s2) * 3.0
    return b3, c3


def b_series(
    provider: CorrelationProvider,
    u,
    v,
    m_max: int = DEFAULT_LAGS,
    fit: DecayFit | None = None,
    tol: float | None = None,
) -> BSeries:
    """All B-series for the pair (u, v), truncated at lag M per index."""
    fit = _fit_for(provider, m_max, fit)
    bound = fit.weighted_tail_bound(m_max)
    if tol is not None and bound > tol:
        raise ConvergenceError(f"B-series tail bound {bound:.3g} exceeds {tol:.3g} at M = {m_max}")
    M = m_max
    idx = np.arange(M + 1)
    corr = provider.kappa_autocorrelation(M)
    lags = np.arange(-M, M + 1)
    s2 = _sym(corr.sum(axis=0))
    b0 = _sym(np.tensordot(np.abs(lags), corr, axes=1))

    cu = provider.obs_kappa_correlation(u, M)
    plus = cu[M:]  # lag j at row j
    b1p = SymTensor(plus.sum(axis=0))
    b0p = SymTensor(idx @ plus)
    cv = provider.obs_kappa_correlation(v, M)
    minus = cv[M - idx]  # lag -i at row i; row 0 is lag 0 and stays out of the sums
    b1m = SymTensor(minus[1:].sum(axis=0))
    b0m = SymTensor(idx[1:] @ minus[1:])

    widest = np.maximum.outer(idx, idx)
    pu = provider.obs_kappa_pairs(u, M, "+")
    pv = provider.obs_kappa_pairs(v, M, "-")
    b2p = _sym(pu.sum(axis=(0, 1)))
    b2m = _sym(pv.sum(axis=(0, 1)))
    b02p = _sym(np.tensordot(widest, pu, axes=2))
    b02m = _sym(np.tensordot(widest, pv, axes=2))

    b3p, c3p = _third_order(provider.obs_kappa_triples(u, M, "+"), plus, corr, b1p, M, 0)
    b3m, c3m = _third_order(provider.obs_kappa_triples(v, M, "-"), minus, corr, b1m, M, 1)

    logger.debug("B-series at M=%d, tail bound %.3g", M, bound)
    return BSeries(
        lags=M,
        mean_u=provider.mean(u),
        mean_v=provider.mean(v),
        sigma2=s2,
        b0=b0,
        b0_plus=b0p,
        b0_minus=b0m,
        b1_plus=b1p,
        b1_minus=b1m,
        b2_plus=b2p,
        b2_minus=b2m,
        b02_plus=b02p,
        b02_minus=b02m,
        b3_plus=b3p,
        b3_minus=b3m,
        c3_plus=c3p,
        c3_minus=c3m,
        tail_bound=bound,
    )


# ── A_m(u, v) ────────────────────────────────────────────────────────────


def _char_series(moments: Sequence[SymTensor]) -> list[SymTensor]:
    return [t * (1j**k) for k, t in enumerate(moments)]


def ratio_factor(provider: CorrelationProvider, obs, side: str, n: int | None = None):
    """Series of E[ũ e^{it·S_n}] / E[e^{it·S_n}] at one n (u on the given side).

    Converges exponentially in n to the left (side '+') or right factor
    minus its constant E[u].
    """
    n = provider.ratio_n if n is None else n
    mu = provider.mean(obs)
    mom = provider.displacement_moments(n, 4)
    mom_u = provider.obs_displacement_moments(obs, n, 4, side)
    num = _char_series([a - m * mu for a, m in zip(mom_u, mom, strict=True)])
    return series_product(num, series_reciprocal(_char_series(mom), 4), 4)


def side_factor(provider: CorrelationProvider, obs, b: BSeries, side: str, n=None):
    """Left (side '+') or right factor through order 4.

    Orders 1-3 come from the B-series; order 4 from the moment ratio.
    """
    d = provider.dim
    if side == "+":
        mu, b1, b2, c3 = b.mean_u, b.b1_plus, b.b2_plus, b.c3_plus
    else:
        mu, b1, b2, c3 = b.mean_v, b.b1_minus, b.b2_minus, b.c3_minus
    fourth = ratio_factor(provider, obs, side, n)[4]
    return [SymTensor.scalar(complex(mu), dim=d), b1 * 1j, b2 * (-1.0 + 0j), c3 * -1j, fourth]


@dataclass(frozen=True)
class CentralFactor:
    """G(t) = lim E[e^{it·S_n}]/λ_t^n through order 4, plus the per-step cumulant rates."""

    series: list[SymTensor]
    log_rates: list[SymTensor]


def central_factor(provider: CorrelationProvider, b0: SymTensor, pair=None) -> CentralFactor:
    """log E[e^{it·S_n}] = n log λ_t + log G(t) up to exponentially small terms.

    The two largest ladder values fix slope and intercept of each order;
    order 2 of log G is B₀.
    """
    n1, n2 = pair if pair is not None else provider.ladder[-2:]
    d = provider.dim
    l1 = series_log(_char_series(provider.displacement_moments(n1, 4)), 4)
    l2 = series_log(_char_series(provider.displacement_moments(n2, 4)), 4)
    rates = [(b - a) / (n2 - n1) for a, b in zip(l1, l2, strict=True)]
    intercepts = [b - r * n2 for b, r in zip(l2, rates, strict=True)]
    log_g = [
        SymTensor.scalar(0j, dim=d),
        SymTensor.zeros(1, d, complex),
        b0 * (1.0 + 0j),
        intercepts[3],
        intercepts[4],
    ]
    return CentralFactor(series_exp(log_g, 4), rates)


def assemble_A(
    provider: CorrelationProvider,
    u,
    v,
    m_max: int = DEFAULT_LAGS,
    b: BSeries | None = None,
    central: CentralFactor | None = None,
) -> list[SymTensor]:
    """A_0..A_4 as the derivatives of L_u(t) R_v(t) G(t) at 0."""
    b = b if b is not None else b_series(provider, u, v, m_max)
    central = central if central is not None else central_factor(provider, b.b0)
    left = side_factor(provider, u, b, "+")
    right = side_factor(provider, v, b, "-")
    return series_product(series_product(left, right, 4), central.series, 4)


def displayed_A1(b: BSeries) -> SymTensor:
    return (b.b1_plus * b.mean_v + b.b1_minus * b.mean_u) * 1j


def displayed_A2(b: BSeries) -> SymTensor:
    return (
        sym_product(b.b1_plus, b.b1_minus) * -2.0
        - b.b2_plus * b.mean_v
        - b.b2_minus * b.mean_u
        + b.b0 * (b.mean_u * b.mean_v)
    )


def displayed_A3(b: BSeries) -> SymTensor:
    """Closed B-series expression for the third-order coefficient (reported only)."""
    a1 = displayed_A1(b)
    return (
        sym_product(a1, b.b0) * 3.0
        + sym_product(b.sigma2, b.b0_minus * b.mean_u + b.b0_plus * b.mean_v) * 3j
        - b.b3_plus * (1j * b.mean_v)
        - b.b3_minus * (1j * b.mean_u)
        - sym_product(b.b2_minus, b.b1_plus) * 3j
        - sym_product(b.b2_plus, b.b1_minus) * 3j
    )


def displayed_A4(b: BSeries, a4_unit: SymTensor) -> SymTensor:
    """Closed B-series expression for the fourth-order coefficient (reported only).

    a4_unit is A_4(1, 1), the fourth derivative of the central factor.
    """
    s2 = b.sigma2
    mixed = (
        sym_product(b.b1_plus, b.b0_minus)
        + sym_product(b.b1_minus, b.b0_plus)
        - sym_product(b.b1_plus, b.b1_minus)
    )
    return (
        sym_product(b.b0, displayed_A2(b)) * 6.0
        - sym_product(s2, b.b02_minus * b.mean_u + b.b02_plus * b.mean_v) * 6.0
        + (a4_unit - sym_product(b.b0, b.b0) * 6.0) * (b.mean_u * b.mean_v)
        - sym_product(s2, mixed) * 12.0
        + sym_product(b.b1_plus, b.b3_minus) * 4.0
        + sym_product(b.b2_plus, b.b2_minus) * 6.0
        + sym_product(b.b1_minus, b.b3_plus) * 4.0
    )


# ── Fourth-order eigenvalue term ─────────────────────────────────────────


@dataclass(frozen=True)
class Lambda4Estimate:
    """λ₀⁽⁴⁾ and Λ₄ = λ₀⁽⁴⁾ - pairing(Σ², 2), with the extrapolation trail."""

    lambda4: SymTensor
    cumulant4: SymTensor
    extrapolants: list[SymTensor]
    ladder: tuple[int, ...]
    spread: float


def _norm(t: SymTensor) -> float:
    return float(np.abs(t.entries).max()) if t.entries.size else 0.0


def lambda4(
    provider: CorrelationProvider,
    s2: SymTensor,
    b0: SymTensor,
    ladder: Sequence[int] | None = None,
    rtol: float | None = None,
) -> Lambda4Estimate:
    """Richardson limit of (E[S_n^{⊗4}] - n² pairing(Σ², 2))/n in 1/n."""
    ladder = tuple(ladder if ladder is not None else provider.ladder)
    rtol = provider.rtol if rtol is None else rtol
    if len(ladder) < 2 or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"ladder must hold at least two increasing values, got {ladder}")
    pair = pairing_power(s2, 2)
    ratios = [
        (provider.displacement_moments(n, 4)[4].real - pair * float(n) ** 2) / n for n in ladder
    ]
    extrap = [
        (r2 * n2 - r1 * n1) / (n2 - n1)
        for (n1, r1), (n2, r2) in zip(
            zip(ladder, ratios), zip(ladder[1:], ratios[1:])
        )
    ]
    limit = extrap[-1]
    spread = 0.0
    if len(extrap) >= 2:
        scale = max(_norm(limit), _norm(pair))
        spread = _norm(extrap[-1] - extrap[-2]) / scale
        if spread > rtol:
            raise ConvergenceError(
                f"fourth-moment extrapolation not converged on {ladder}: "
                f"relative spread {spread:.3g} > {rtol:.3g}"
            )
    lam4 = limit + pair + sym_product(s2, b0) * 6.0
    logger.debug("λ₀⁽⁴⁾ extrapolated on %s, spread %.3g", ladder, spread)
    return Lambda4Estimate(symmetrize(lam4), symmetrize(limit + sym_product(s2, b0) * 6.0),
                           extrap, ladder, spread)


# ── Cell-observable quantities ───────────────────────────────────────────


@dataclass(frozen=True)
class BFrak:
    """The two-sided 𝔅 quantities of cell observables f (future side) and g (past side).

    The *_moment fields are the moment-limit forms ∫f(I_m^{⊗2} - E[S_m^{⊗2}]),
    which differ from b2_* by 𝔅₀ times the integral.
    """

    integral_f: float
    integral_g: float
    b0: SymTensor
    b1_plus: SymTensor
    b1_minus: SymTensor
    b2_plus: SymTensor
    b2_minus: SymTensor
    b2_plus_moment: SymTensor
    b2_minus_moment: SymTensor
    b0_moment: SymTensor
    residual: float

    @property
    def a2_tilde(self) -> SymTensor:
        return (
            self.b2_minus * -self.integral_f
            - self.b2_plus * self.integral_g
            - self.b0 * (self.integral_f * self.integral_g)
            + sym_product(self.b1_plus, self.b1_minus) * 2.0
        )

    @property
    def a2_tilde_moment(self) -> SymTensor:
        """Same quantity from the moment-limit forms."""
        return (
            self.b2_minus_moment * -self.integral_f
            - self.b2_plus_moment * self.integral_g
            + self.b0 * (self.integral_f * self.integral_g)
            + sym_product(self.b1_plus, self.b1_minus) * 2.0
        )


def bfrak(
    provider: CorrelationProvider,
    f: CellObservable,
    g: CellObservable,
    b: BSeries,
    n: int | None = None,
    tol: float | None = None,
) -> BFrak:
    """𝔅 quantities through the cell factorization ∫f κ∘T^m = (Σh)·E[f₀ κ∘T̄^m]."""
    n = provider.ratio_n if n is None else n
    ef, eg = b.mean_u, b.mean_v
    hf, h1, h2 = f.total, f.first_moment, f.second_moment
    qg, q1, q2 = g.total, g.first_moment, g.second_moment
    int_f, int_g = hf * ef, qg * eg

    b1p = b.b1_plus * hf + h1 * ef
    b1m = b.b1_minus * -qg + q1 * eg
    b2p = b.b2_plus * hf + h2 * ef + sym_product(h1, b.b1_plus) * 2.0 - b.b0 * int_f
    b2m = b.b2_minus * qg + q2 * eg - sym_product(q1, b.b1_minus) * 2.0 - b.b0 * int_g

    s2n = provider.displacement_moments(n, 2)[2].real
    fs = [t.real for t in provider.obs_displacement_moments(f.base, n, 2, "+")]
    gs = [t.real for t in provider.obs_displacement_moments(g.base, n, 2, "-")]
    b2p_mom = h2 * ef + sym_product(h1, fs[1]) * 2.0 + (fs[2] - s2n * ef) * hf
    b2m_mom = q2 * eg - sym_product(q1, gs[1]) * 2.0 + (gs[2] - s2n * eg) * qg
    b0_mom = b.sigma2 * float(n) - s2n

    residual = max(
        _norm(b2p - (b2p_mom - b.b0 * int_f)),
        _norm(b2m - (b2m_mom - b.b0 * int_g)),
        _norm(b.b0 - b0_mom),
    )
    if tol is None:
        tol = 10.0 * (provider.rtol * max(1.0, _norm(b.sigma2)) + b.tail_bound)
    if residual > tol:
        logger.warning(
            "𝔅₂ and its moment form differ by %.3g (tolerance %.3g) at n=%d", residual, tol, n
        )
    return BFrak(int_f, int_g, b.b0, b1p, b1m, b2p, b2m, b2p_mom, b2m_mom, b0_mom, residual)


# ── Expansion engine ─────────────────────────────────────────────────────


def _binom_general(a: float, i: int) -> float:
    out = 1.0
    for t in range(i):
        out *= (a - t) / (t + 1)
    return out


class MixingExpansion:
    """C_n ≈ Σ_e c_e n^{-e} with exponents e in steps of 1/2.

    Terms with e <= complete_through are exact consequences of the inputs;
    nothing is reported past it.
    """

    def __init__(self, coefficients: Mapping, complete_through: Fraction, dim: int):
        self.dim = dim
        self.complete_through = Fraction(complete_through)
        self.coefficients = {
            Fraction(e): float(c)
            for e, c in sorted(coefficients.items())
            if Fraction(e) <= self.complete_through
        }

    @property
    def leading_exponent(self) -> Fraction:
        return Fraction(self.dim, 2)

    def coefficient(self, exponent) -> float:
        return self.coefficients.get(Fraction(exponent), 0.0)

    def c(self, m) -> float:
        """Coefficient of n^{-(d/2 + m)}."""
        return self.coefficient(self.leading_exponent + Fraction(m))

    def predict(self, n: float, through=None) -> float:
        top = self.complete_through if through is None else Fraction(through)
        return sum(c * float(n) ** -float(e) for e, c in self.coefficients.items() if e <= top)

    def shift(self, weights: Mapping[int, float]) -> "MixingExpansion":
        """Expansion of Σ_j w_j C_{n+j}."""
        order = 0
        while order < 8 and abs(sum(w * j**order for j, w in weights.items())) == 0.0:
            order += 1
        top = self.complete_through + order
        out: dict[Fraction, float] = {}
        for e, c in self.coefficients.items():
            i = 0
            while e + i <= top:
                factor = sum(w * j**i for j, w in weights.items()) * _binom_general(-float(e), i)
                if factor:
                    out[e + i] = out.get(e + i, 0.0) + c * factor
                i += 1
        return MixingExpansion(out, top, self.dim)

    def coboundary(self) -> "MixingExpansion":
        """C_n(f - f∘T, g) = C_n(f, g) - C_{n-1}(f, g)."""
        return self.shift({0: 1.0, -1: -1.0})

    def double_coboundary(self) -> "MixingExpansion":
        """C_n(2f - f∘T - f∘T⁻¹, g) = 2C_n - C_{n-1} - C_{n+1}."""
        return self.shift({0: 2.0, -1: -1.0, 1: -1.0})

    def __add__(self, other: "MixingExpansion") -> "MixingExpansion":
        keys = set(self.coefficients) | set(other.coefficients)
        return MixingExpansion(
            {e: self.coefficient(e) + other.coefficient(e) for e in keys},
            min(self.complete_through, other.complete_through),
            self.dim,
        )

    def __mul__(self, c: float) -> "MixingExpansion":
        return MixingExpansion(
            {e: v * c for e, v in self.coefficients.items()}, self.complete_through, self.dim
        )

    __rmul__ = __mul__

    def __repr__(self) -> str:
        terms = ", ".join(f"n^-{e}: {c:.6g}" for e, c in self.coefficients.items())
        return f"MixingExpansion({terms}; complete through n^-{self.complete_through})"


def _random_symmetric(rng: np.random.Generator, rank: int, dim: int) -> SymTensor:
    return symmetrize(SymTensor(rng.standard_normal((dim,) * rank) + 0j, dim=dim))


def _fill_psi(psi: Sequence[SymTensor | None], dim: int, rng=None) -> list[SymTensor]:
    out = []
    for j, p in enumerate(psi):
        if p is not None:
            out.append(p)
        elif rng is None:
            out.append(SymTensor.zeros(j, dim, complex))
        else:
            out.append(_random_symmetric(rng, j, dim))
    return out


def expand_correlation(
    a_series: Sequence[SymTensor],
    psi: Sequence[SymTensor | None],
    w: Sequence[SymTensor],
    gaussian: GaussianModel,
    contact_order: int,
    e_max: Fraction,
) -> MixingExpansion:
    """Collect Σ_{m,r,k} i^{m+r}/(m!r!k!) n^{-d/2-(m+r+k)/2} Φ^{(m+r+k)}(0)*(A_m⊗D_r(n)⊗W_k).

    D_r are the derivatives of (λ/a)^n, polynomials in n built from ψ = log λ - log a.
    Unknown ψ orders (None) are probed with random tensors: an exponent whose
    coefficient moves under the probe is incomplete. Terms beyond the rank
    cap lower the completeness only when their prefactor A_m ⊗ W_k is nonzero.
    """
    dim = gaussian.dim
    half = Fraction(dim, 2)
    if e_max > half + 2:
        raise ValueError("expansions are assembled through n^-(d/2+2) at most")
    psi = list(psi) + [None] * (MAX_RANK + 1 - len(psi))
    known = series_exp_polynomial(_fill_psi(psi, dim), MAX_RANK)
    probe = series_exp_polynomial(
        _fill_psi(psi, dim, np.random.default_rng(PROBE_SEED)), MAX_RANK
    )
    phi0 = [gaussian_derivatives_at_zero(gaussian, j) for j in range(MAX_RANK + 1)]
    coeffs: dict[Fraction, complex] = {}
    incomplete: set[Fraction] = set()

    for m, a in enumerate(a_series):
        for r in range(MAX_RANK + 1 - m):
            for k in range(MAX_RANK + 1 - m - r):
                if (m + r + k) % 2:
                    continue
                factor = (1j ** (m + r)) / (
                    math.factorial(m) * math.factorial(r) * math.factorial(k)
                )
                for p in set(known[r].coeffs) | set(probe[r].coeffs):
                    e = half + Fraction(m + r + k, 2) - p
                    if e > e_max:
                        continue
                    vals = []
                    for poly in (known[r], probe[r]):
                        d_rp = poly.coeffs.get(p)
                        if d_rp is None:
                            vals.append(0j)
                            continue
                        prod = tensor_product(tensor_product(a, d_rp), w[k])
                        vals.append(factor * full_contract(phi0[m + r + k], prod))
                    coeffs[e] = coeffs.get(e, 0j) + vals[0]
                    if abs(vals[1] - vals[0]) > PROBE_RTOL * max(1.0, abs(vals[0])):
                        incomplete.add(e)

    # Terms past the rank cap: total rank >= 10 with up to floor(r/P) powers of n.
    for total in range(MAX_RANK + 2, 17, 2):
        for m, a in enumerate(a_series):
            for k in range(total - m + 1):
                r = total - m - k
                e = half + Fraction(total, 2) - r // contact_order
                if e > e_max or _norm(a) == 0.0:
                    continue
                if k <= MAX_RANK and _norm(w[k]) == 0.0:
                    continue
                incomplete.add(e)

    through = half - Fraction(1, 2)
    e = half
    while e <= e_max and not any(x <= e for x in incomplete):
        through = e
        e += Fraction(1, 2)
    for e_val, c in coeffs.items():
        if e_val <= through and abs(c.imag) > PROBE_RTOL * max(1.0, abs(c.real)):
            logger.warning("coefficient of n^-%s has imaginary part %.3g", e_val, c.imag)
    return MixingExpansion({e: c.real for e, c in coeffs.items()}, through, dim)


class LocalExpansion:
    """E[u 1{S_n=ℓ} v∘T̄^n] ≈ Σ i^{m+r}/(m!r!) n^{-d/2-(m+r)/2} Φ^{(m+r)}(ℓ/√n)*(A_m⊗D_r(n)).

    Keeps the terms of relative order up to n^{-(order-1)}.
    """

    def __init__(
        self,
        a_series: Sequence[SymTensor],
        polys: Sequence[NPolynomial],
        gaussian: GaussianModel,
        order: int,
    ):
        self.a_series = list(a_series)
        self.polys = list(polys)
        self.gaussian = gaussian
        self.order = order

    def __call__(self, n: int, ell) -> float:
        d = self.gaussian.dim
        x = np.atleast_1d(np.asarray(ell, dtype=float)) / math.sqrt(n)
        derivs: dict[int, SymTensor] = {}
        total = 0j
        for m, a in enumerate(self.a_series):
            for r, poly in enumerate(self.polys):
                if m + r > MAX_RANK:
                    break
                for p, d_rp in poly.coeffs.items():
                    rel = Fraction(m + r, 2) - p
                    if rel > self.order - 1:
                        continue
                    if m + r not in derivs:
                        derivs[m + r] = gaussian_derivatives(self.gaussian, x, m + r)
                    scale = (1j ** (m + r)) / (math.factorial(m) * math.factorial(r))
                    scale *= float(n) ** (p - (d + m + r) / 2)
                    total += scale * full_contract(
                        derivs[m + r], tensor_product(a, d_rp)
                    )
            if m >= 2 * self.order - 2:
                break
        return float(total.real)


# ── Assembly ─────────────────────────────────────────────────────────────


def psi_series(
    provider: CorrelationProvider, central: CentralFactor, fourth: Lambda4Estimate
) -> list[SymTensor | None]:
    """ψ = log λ - log a through order 8, None where the provider cannot tell."""
    d = provider.dim
    lam = provider.lambda_derivatives(MAX_RANK)
    if lam is not None:
        psi: list[SymTensor | None] = list(series_log(lam, MAX_RANK))
    else:
        psi = [None] * (MAX_RANK + 1)
        psi[3] = central.log_rates[3]
        psi[4] = fourth.cumulant4 * (1.0 + 0j)
    for k in range(MAX_RANK + 1):
        if k <= 2 or (provider.even and k % 2):
            psi[k] = SymTensor.zeros(k, d, complex)
    return psi


def _known_polynomials(psi: Sequence[SymTensor | None]) -> list[NPolynomial]:
    r = 0
    while r + 1 < len(psi) and psi[r + 1] is not None:
        r += 1
    return series_exp_polynomial(psi, min(r, MAX_RANK))


@dataclass
class CoefficientSet:
    """Everything assembled for one pair (f, g), with provenance.

    A_m are complex; A_m(u, v) = i^m × (real tensor) for real u, v, and the
    report lists that real tensor.
    """

    provider: str
    lags: int
    ladder: tuple[int, ...]
    order: int
    fit: DecayFit
    gaussian: GaussianModel
    bseries: BSeries
    a_series: list[SymTensor]
    central: CentralFactor
    fourth: Lambda4Estimate
    bfrak: BFrak
    lattice: list[SymTensor]
    expansion: MixingExpansion
    local: LocalExpansion
    closed_forms: dict[str, float | None] = field(default_factory=dict)
    tail_bounds: dict[str, float] = field(default_factory=dict)

    @property
    def sigma2(self) -> SymTensor:
        return self.bseries.sigma2

    @property
    def peak(self) -> float:
        return self.gaussian.peak

    def c(self, m) -> float:
        return self.expansion.c(m)

    def predict(self, n: float) -> float:
        return self.expansion.predict(n)

    def llt_predict(self, n: int, ell) -> float:
        """Predicted E[f₀ 1{S_n = ℓ} g₀∘T̄^n]."""
        return self.local(n, ell)

    @property
    def displayed_a3(self) -> SymTensor:
        return displayed_A3(self.bseries)

    @property
    def displayed_a4(self) -> SymTensor:
        return displayed_A4(self.bseries, self.central.series[4])

    def provenance(self) -> dict[str, object]:
        return {
            "provider": self.provider,
            "lags": self.lags,
            "ladder": ",".join(str(n) for n in self.ladder),
            "order": self.order,
            "theta0": self.fit.theta,
            "complete_through": str(self.expansion.complete_through),
        }

    def report_rows(self) -> list[dict]:
        rows: list[dict] = []
        bound = self.tail_bounds

        def tensor_rows(name: str, t: SymTensor, err=None):
            for idx in _sorted_indices(t.rank, t.dim):
                label = ",".join(str(i + 1) for i in idx)
                rows.append({"statistic": f"{name}[{label}]", "value": float(np.real(
                    t.entries[idx])), "stderr": err})

        tensor_rows("sigma2", self.sigma2, bound.get("sigma2"))
        tensor_rows("b0", self.bseries.b0, bound.get("bseries"))
        tensor_rows("lambda4", self.fourth.lambda4)
        tensor_rows("cumulant4", self.fourth.cumulant4)
        for m, a in enumerate(self.a_series):
            tensor_rows(f"A{m}", a * ((-1j) ** m), bound.get("bseries"))
        for e, c in self.expansion.coefficients.items():
            rows.append({"statistic": f"c[n^-{e}]", "value": c})
        for name, value in self.closed_forms.items():
            if value is not None:
                rows.append({"statistic": f"closed/{name}", "value": value})
        rows.append({"statistic": "residual/b2", "value": self.bfrak.residual})
        return rows

    def save(self, run_dir):
        from zdmix.core import save_meta, save_report

        save_meta({k: str(v) for k, v in self.provenance().items()}, run_dir)
        return save_report(self.report_rows(), run_dir)


def _sorted_indices(rank: int, dim: int):
    for idx in np.ndindex(*((dim,) * rank)):
        if list(idx) == sorted(idx):
            yield idx


def second_order_closed_form(gaussian: GaussianModel, bf: BFrak, cumulant4: SymTensor) -> float:
    """Φ(0)[½Σ⁻²*𝔄̃₂ + ∫f∫g pairing(Σ⁻²,2)*Λ₄/24]."""
    inv = gaussian.inv_sigma2
    val = 0.5 * full_contract(inv, bf.a2_tilde) + (
        bf.integral_f * bf.integral_g / 24.0
    ) * full_contract(pairing_power(inv, 2), cumulant4)
    return float(np.real(gaussian.peak * val))


def zero_integral_leading(gaussian: GaussianModel, bf: BFrak) -> float:
    """Φ(0)Σ⁻²*(𝔅₁⁺(f)⊗𝔅₁⁻(g)), the n^-(d/2+1) term when ∫f = ∫g = 0."""
    return float(np.real(
        gaussian.peak * full_contract(gaussian.inv_sigma2, tensor_product(bf.b1_plus, bf.b1_minus))
    ))


def coboundary_second_order(gaussian: GaussianModel, bf: BFrak) -> float:
    """c₁(f - f∘T, g) from 𝔅₁⁺(f - f∘T) = 0 and 𝔅₂⁺(f - f∘T) = Σ²∫f."""
    a2 = gaussian.sigma2 * (-bf.integral_f * bf.integral_g)
    return float(gaussian.peak * 0.5 * full_contract(gaussian.inv_sigma2, a2))


def third_order_closed_form(
    gaussian: GaussianModel, a: Sequence[SymTensor], w: Sequence[SymTensor]
) -> float:
    """Φ(0) pairing(Σ⁻²,2)*Σ h q [A₄/24 + A₀L⁴/24 + iA₁L³/6 - A₂L²/4 - iA₃L/6].

    Valid when ∫f = ∫g = 0 and 𝔄̃₂ = 0; L = ℓ' - ℓ.
    """
    body = (
        a[4] * (w[0].item() / 24.0)
        + w[4] * (a[0].item() / 24.0)
        + tensor_product(a[1], w[3]) * (1j / 6.0)
        - tensor_product(a[2], w[2]) * 0.25
        - tensor_product(a[3], w[1]) * (1j / 6.0)
    )
    return float(np.real(gaussian.peak * full_contract(pairing_power(gaussian.inv_sigma2, 2),
                                                       body)))


def product_third_order(
    gaussian: GaussianModel, f: CellObservable, g: CellObservable, b: BSeries
) -> float:
    """-Φ(0) pairing(Σ⁻²,2)*(Σhℓ ⊗ B₁⁺(f₀) ⊗ Σqℓ ⊗ B₁⁻(g₀)).

    Valid when E[f₀] = E[g₀] = 0 and Σh = Σq = 0.
    """
    prod = tensor_product(
        tensor_product(f.first_moment, b.b1_plus), tensor_product(g.first_moment, b.b1_minus)
    )
    return float(-gaussian.peak * full_contract(pairing_power(gaussian.inv_sigma2, 2), prod))


def assemble_expansion(
    provider: CorrelationProvider,
    f: CellObservable,
    g: CellObservable,
    order: int = MAX_ORDER,
    lags: int | None = None,
    fit: DecayFit | None = None,
) -> CoefficientSet:
    """Coefficients c₀..c_{order-1} of C_n(f, g) and the local predictor."""
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be between 1 and {MAX_ORDER}, got {order}")
    if f.dim != provider.dim or g.dim != provider.dim:
        raise ValueError(
            f"observables on Z^{f.dim}, Z^{g.dim} do not match the provider's Z^{provider.dim}"
        )
    fit = fit if fit is not None else fit_decay(provider, max(lags or 0, MIN_FIT_LAGS))
    if lags is None:
        scale = float(np.abs(provider.kappa_autocorrelation(MIN_FIT_LAGS)[MIN_FIT_LAGS]).max())
        lags = fit.choose_lags(provider.rtol * scale)
        logger.info("truncating correlation series at M = %d", lags)

    b = b_series(provider, f.base, g.base, lags, fit)
    gaussian = GaussianModel.from_covariance(b.sigma2)
    central = central_factor(provider, b.b0)
    a_series = assemble_A(provider, f.base, g.base, lags, b, central)
    fourth = lambda4(provider, b.sigma2, b.b0)
    psi = psi_series(provider, central, fourth)
    w = lattice_moments(f, g, MAX_RANK)
    e_max = Fraction(provider.dim, 2) + order - 1
    expansion = expand_correlation(a_series, psi, w, gaussian, provider.contact_order, e_max)
    local = LocalExpansion(a_series, _known_polynomials(psi), gaussian, order)
    bf = bfrak(provider, f, g, b)

    closed: dict[str, float | None] = {"leading": gaussian.peak * bf.integral_f * bf.integral_g}
    if provider.even:
        closed["second_order"] = second_order_closed_form(gaussian, bf, fourth.cumulant4)
        closed["zero_integral_leading"] = zero_integral_leading(gaussian, bf)
        closed["coboundary_second_order"] = coboundary_second_order(gaussian, bf)
        closed["third_order"] = third_order_closed_form(gaussian, a_series, w)
        closed["product_third_order"] = product_third_order(gaussian, f, g, b)
    tails = {"sigma2": 2.0 * fit.tail_bound(lags), "bseries": b.tail_bound}
    logger.info("expansion of C_n for %s complete through n^-%s",
                provider.name, expansion.complete_through)
    return CoefficientSet(
        provider=provider.name,
        lags=lags,
        ladder=tuple(provider.ladder),
        order=order,
        fit=fit,
        gaussian=gaussian,
        bseries=b,
        a_series=a_series,
        central=central,
        fourth=fourth,
        bfrak=bf,
        lattice=w,
        expansion=expansion,
        local=local,
        closed_forms=closed,
        tail_bounds=tails,
    )
