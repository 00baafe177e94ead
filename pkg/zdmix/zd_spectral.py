"""zdmix zd_spectral - exact finite-state Z^d-extensions.

A model is a finite Markov chain (X_k) with step kernels K_κ: K_κ[a, b] is
the probability of moving a -> b while the lattice coordinate moves by κ.
The twisted operator is P_t = Σ_κ K_κ e^{it·κ}, so that

    E[u(X_0) e^{it·S_n} v(X_n)] = π diag(u) P_t^n v.

Everything here is exact up to rounding: eigen-decompositions, perturbation
recursions, dynamic programs, FFT inversions and chain products.
"""

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np
import scipy.linalg

from zdmix.core import ConfigError, ModelError, SpectralGapError, WindowOverflowError
from zdmix.tensor import (
    MAX_RANK,
    NPolynomial,
    SymTensor,
    series_exp_polynomial,
    series_log,
    series_power,
    series_product,
    series_reciprocal,
    symmetrize,
    symmetrize_trailing,
)

logger = logging.getLogger(__name__)

MAX_STATES = 64
MAX_ORACLE_N = 4096
STOCHASTIC_TOL = 1e-12
GAP_TOL = 1e-8
DP_COST_LIMIT = 2e8
WINDOW_CAP = 2**26
EVEN_TOL = 1e-12


# ── Model ────────────────────────────────────────────────────────────────


class MarkovModel:
    """Finite-state Z^d-extension given by step kernels."""

    def __init__(
        self,
        kernels: Mapping[tuple[int, ...], np.ndarray],
        name: str = "custom",
        even: bool | None = None,
    ):
        if not kernels:
            raise ModelError("model needs at least one step kernel")
        steps = [tuple(int(c) for c in k) for k in kernels]
        dims = {len(s) for s in steps}
        if len(dims) != 1 or dims.pop() not in (1, 2):
            raise ModelError("steps must all be vectors of length 1 or 2")
        mats = [np.asarray(kernels[k], dtype=float) for k in kernels]
        n_states = mats[0].shape[0]
        if n_states > MAX_STATES:
            raise ModelError(f"{n_states} states exceed the limit of {MAX_STATES}")
        if any(m.shape != (n_states, n_states) for m in mats):
            raise ModelError("every kernel must be a square matrix of the same size")
        if any((m < 0).any() for m in mats):
            raise ModelError("kernel entries must be non-negative")

        self.name = name
        self.steps = np.array(steps, dtype=np.int64)
        self.kernel_stack = np.stack(mats)
        self.dim = self.steps.shape[1]
        self.n_states = n_states
        self.transition = self.kernel_stack.sum(axis=0)
        self._validate_stochastic()
        self.stationary = _stationary(self.transition)
        self._validate_centering()
        self._validate_aperiodic_extension()
        self.even = self._detect_even() if even is None else even

    @classmethod
    def from_source_steps(
        cls,
        transition,
        step_laws: Sequence[Mapping[tuple[int, ...], float]],
        name: str = "custom",
        even: bool | None = None,
    ) -> "MarkovModel":
        """Steps drawn from a law depending only on the current state."""
        p = np.asarray(transition, dtype=float)
        if len(step_laws) != p.shape[0]:
            raise ModelError("need one step law per state")
        kernels: dict[tuple[int, ...], np.ndarray] = {}
        for s, law in enumerate(step_laws):
            for step, w in law.items():
                key = tuple(int(c) for c in step)
                kernels.setdefault(key, np.zeros_like(p))
                kernels[key][s] += w * p[s]
        return cls(kernels, name=name, even=even)

    @property
    def contact_order(self) -> int:
        """Order P of contact between λ and a: 4 for even models, else 3."""
        return 4 if self.even else 3

    def step_moment_kernel(self, k: int) -> np.ndarray:
        """D_k = Σ_κ K_κ ⊗ κ^{⊗k}, shape (N, N) + (d,)*k."""
        out = self.kernel_stack
        for _ in range(k):
            out = out[..., None] * self.steps.reshape(
                (len(self.steps),) + (1,) * (out.ndim - 1) + (self.dim,)
            ).astype(float)
        return out.sum(axis=0)

    def reach(self) -> int:
        """Largest coordinate of any single step."""
        return int(np.abs(self.steps).max())

    def _validate_stochastic(self) -> None:
        rows = self.transition.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > STOCHASTIC_TOL:
            raise ModelError(f"transition rows must sum to 1, got {rows}")
        # Wielandt: a primitive N×N matrix has P^((N-1)^2 + 1) > 0
        adj = (self.transition > 0).astype(float)
        power = np.eye(self.n_states)
        e = (self.n_states - 1) ** 2 + 1
        base = adj
        while e:
            if e & 1:
                power = np.minimum(power @ base, 1.0)
            base = np.minimum(base @ base, 1.0)
            e >>= 1
        if not (power > 0).all():
            raise ModelError("chain must be irreducible and aperiodic")

    def _validate_centering(self) -> None:
        mean = self.stationary @ self.step_moment_kernel(1).sum(axis=1)
        if np.max(np.abs(mean)) > STOCHASTIC_TOL:
            raise ModelError(f"stationary step mean must vanish, got {mean}")

    def _validate_aperiodic_extension(self) -> None:
        # ρ(P_t) < 1 off t = 0 is equivalent to the achievable displacements
        # generating all of Z^d; it is checked on a torus grid.
        axis = np.linspace(-np.pi, np.pi, 13)[:-1]
        grid = np.stack(np.meshgrid(*([axis] * self.dim), indexing="ij"), -1)
        grid = grid.reshape(-1, self.dim)
        grid = grid[np.any(grid != 0, axis=1)]
        phases = np.exp(1j * grid @ self.steps.T)
        stack = np.einsum("gk,kab->gab", phases, self.kernel_stack)
        radius = np.abs(np.linalg.eigvals(stack)).max(axis=1)
        worst = int(np.argmax(radius))
        if radius[worst] > 1 - 1e-9:
            raise ModelError(
                f"extension is periodic: |λ| = 1 at t = {grid[worst].tolist()}; "
                "add a lazy step or mixed steps"
            )

    def _detect_even(self) -> bool:
        lam = lambda_derivatives(self, 5)
        return all(float(np.max(np.abs(lam[k].entries))) < EVEN_TOL for k in (3, 5))

    def __repr__(self) -> str:
        return (
            f"MarkovModel(name={self.name!r}, states={self.n_states}, dim={self.dim}, "
            f"steps={len(self.steps)})"
        )


def _stationary(p: np.ndarray) -> np.ndarray:
    n = p.shape[0]
    a = np.vstack([(np.eye(n) - p).T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.max(np.abs(pi @ p - pi)) > 1e-10:
        raise ModelError("could not solve for the stationary law")
    return pi


# ── Presets ──────────────────────────────────────────────────────────────


def _w5() -> MarkovModel:
    law = {(0, 0): 0.2, (1, 0): 0.2, (-1, 0): 0.2, (0, 1): 0.2, (0, -1): 0.2}
    return MarkovModel.from_source_steps([[1.0]], [law], name="w5", even=True)


def _two_state() -> MarkovModel:
    right = {(1, 0): 0.35, (-1, 0): 0.15, (0, 1): 0.15, (0, -1): 0.15, (0, 0): 0.2}
    left = {(-1, 0): 0.35, (1, 0): 0.15, (0, 1): 0.15, (0, -1): 0.15, (0, 0): 0.2}
    p = [[0.75, 0.25], [0.25, 0.75]]
    return MarkovModel.from_source_steps(p, [right, left], name="two-state", even=True)


def _lazy_walk() -> MarkovModel:
    p = [[0.9, 0.1], [0.1, 0.9]]
    laws = [{(1,): 0.5, (0,): 0.5}, {(-1,): 0.5, (0,): 0.5}]
    return MarkovModel.from_source_steps(p, laws, name="lazy-walk", even=True)


def _iid_line() -> MarkovModel:
    law = {(-1,): 1 / 3, (0,): 1 / 3, (1,): 1 / 3}
    return MarkovModel.from_source_steps([[1.0]], [law], name="iid-line", even=True)


def _asymmetric() -> MarkovModel:
    law = {(-1,): 0.5, (0,): 0.25, (2,): 0.25}
    return MarkovModel.from_source_steps([[1.0]], [law], name="asymmetric", even=False)


PRESETS = {
    "w5": _w5,
    "two-state": _two_state,
    "lazy-walk": _lazy_walk,
    "iid-line": _iid_line,
    "asymmetric": _asymmetric,
}


def preset_model(name: str) -> MarkovModel:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset '{name}' (choose from {sorted(PRESETS)})")
    return PRESETS[name]()


def model_from_config(section: Mapping | None) -> MarkovModel:
    """Build a model from a `model:` config section.

    Accepted forms: `{preset: name}`; `{transition: rows, steps: [[{step,
    weight}, ...] per state]}`; `{kernels: [{step, matrix}, ...]}`.
    """
    section = section or {"preset": "w5"}
    try:
        if "preset" in section:
            return preset_model(section["preset"])
        if "kernels" in section:
            kernels = {
                tuple(k["step"]): np.asarray(k["matrix"], float) for k in section["kernels"]
            }
            return MarkovModel(kernels, name=section.get("name", "custom"))
        if "transition" in section and "steps" in section:
            laws = [
                {tuple(e["step"]): float(e["weight"]) for e in row} for row in section["steps"]
            ]
            return MarkovModel.from_source_steps(
                section["transition"], laws, name=section.get("name", "custom")
            )
    except ModelError as e:
        raise ConfigError(f"model: {e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"model: malformed section ({e})") from e
    raise ConfigError("model: need 'preset', 'kernels' or 'transition' + 'steps'")


# ── Twisted operator and leading eigen-triple ────────────────────────────


def perturbed_operator(model: MarkovModel, t) -> np.ndarray:
    """P_t = Σ_κ K_κ e^{it·κ}."""
    tv = np.atleast_1d(np.asarray(t, dtype=float))
    phases = np.exp(1j * (model.steps @ tv))
    return np.tensordot(phases, model.kernel_stack, axes=1)


def leading_triple(model: MarkovModel, t, gap_tol: float = GAP_TOL):
    """(λ_t, Π_t, R_t) with P_t = λ_t Π_t + R_t."""
    p = perturbed_operator(model, t)
    eig, left, right = scipy.linalg.eig(p, left=True, right=True)
    order = np.argsort(-np.abs(eig))
    lam = eig[order[0]]
    if len(eig) > 1 and np.abs(eig[order[1]]) >= np.abs(lam) * (1 - gap_tol):
        raise SpectralGapError(
            f"no spectral gap at t = {np.atleast_1d(t).tolist()}: "
            f"|λ1| = {abs(lam):.6g}, |λ2| = {abs(eig[order[1]]):.6g}"
        )
    r = right[:, order[0]]
    lv = left[:, order[0]].conj()
    proj = np.outer(r, lv) / (lv @ r)
    return complex(lam), proj, p - lam * proj


class SpectralData:
    """Spectral picture of a model at one parameter t."""

    def __init__(self, model: MarkovModel, t, k_max: int = 6, j_max: int = 8):
        self.t = np.atleast_1d(np.asarray(t, dtype=float))
        self.operator = perturbed_operator(model, self.t)
        self.eigenvalue, self.projector, self.remainder = leading_triple(model, self.t)
        self.lambda_derivatives = lambda_derivatives(model, k_max)
        self.lambda_over_a = lambda_over_a_derivatives(model, j_max)

    @property
    def sigma2(self) -> SymTensor:
        return -self.lambda_derivatives[2].real


# ── Perturbation recursion ───────────────────────────────────────────────


def _fundamental(model: MarkovModel) -> np.ndarray:
    n = model.n_states
    p = model.transition
    gap = 1.0
    if n > 1:
        eig = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
        gap = 1.0 - eig[1]
    if gap < GAP_TOL:
        raise SpectralGapError("no spectral gap at t = 0")
    return np.linalg.inv(np.eye(n) - p + np.outer(np.ones(n), model.stationary))


def perturbation_series(model: MarkovModel, order: int):
    """Derivatives at 0 of λ_t, r_t (π r_t = 1) and l_t (l_t 1 = 1).

    Returns (lam, right, left): lam[k] complex arrays of shape (d,)*k,
    right[k] and left[k] of shape (N,) + (d,)*k.
    """
    if order > MAX_RANK:
        raise ValueError(f"order {order} exceeds {MAX_RANK}")
    z = _fundamental(model)
    pq = [model.step_moment_kernel(q) * (1j**q) for q in range(order + 1)]
    pi = model.stationary.astype(complex)
    n = model.n_states
    lam = [np.asarray(1.0 + 0j)]
    right = [np.ones(n, dtype=complex)]
    left = [pi]
    for k in range(1, order + 1):
        acc_r = np.zeros((n,) + (model.dim,) * k, dtype=complex)
        acc_l = np.zeros_like(acc_r)
        for q in range(1, k + 1):
            c = math.comb(k, q)
            acc_r += c * np.tensordot(pq[q], right[k - q], axes=([1], [0]))
            lp = np.tensordot(left[k - q], pq[q], axes=([0], [0]))
            # lp axes: (old left tensor..., N, step tensor...)
            acc_l += c * np.moveaxis(lp, k - q, 0)
        acc_r = symmetrize_trailing(acc_r, k)
        acc_l = symmetrize_trailing(acc_l, k)
        lam_k = np.tensordot(pi, acc_r, axes=([0], [0]))
        lam.append(lam_k)
        for q in range(1, k + 1):
            c = math.comb(k, q)
            acc_r -= c * symmetrize_trailing(np.multiply.outer(right[k - q], lam[q]), k)
            acc_l -= c * symmetrize_trailing(np.multiply.outer(left[k - q], lam[q]), k)
        right.append(np.tensordot(z, acc_r, axes=([1], [0])))
        left.append(np.moveaxis(np.tensordot(acc_l, z, axes=([0], [0])), -1, 0))
    return lam, right, left


def lambda_derivatives(model: MarkovModel, k_max: int) -> list[SymTensor]:
    """λ_0^{(k)} for k = 0..k_max as (complex) symmetric tensors."""
    lam, _, _ = perturbation_series(model, k_max)
    out = [symmetrize(SymTensor(a, dim=model.dim)) for a in lam]
    logger.debug("λ derivatives of %s computed to order %d", model.name, k_max)
    return out


def sigma2_exact(model: MarkovModel) -> SymTensor:
    return -lambda_derivatives(model, 2)[2].real


def log_lambda_over_a(model: MarkovModel, order: int) -> list[SymTensor]:
    """ψ = log λ - log a with a_t = exp(-Σ²*t⊗t / 2); ψ_0 = ψ_1 = ψ_2 = 0."""
    psi = series_log(lambda_derivatives(model, order), order)
    dim = model.dim
    for k in range(order + 1):
        if k <= 2 or (model.even and k % 2):
            psi[k] = SymTensor.zeros(k, dim, complex)
    return psi


def lambda_over_a_derivatives(model: MarkovModel, j_max: int, n: float | None = None):
    """(λ^n / a^n)_0^{(j)} for j = 0..j_max.

    Returned as NPolynomial in n, or evaluated at n when n is given.
    """
    polys = series_exp_polynomial(log_lambda_over_a(model, j_max), j_max)
    if n is None:
        return polys
    return [p(n) for p in polys]


# ── Exact moments and A_{m,n} ────────────────────────────────────────────


def _mseries_mul(a: list[np.ndarray], b: list[np.ndarray], order: int) -> list[np.ndarray]:
    out = []
    for k in range(order + 1):
        acc = None
        for j in range(k + 1):
            prod = np.tensordot(a[j], b[k - j], axes=([1], [0]))
            prod = np.moveaxis(prod, 1 + j, 1) * math.comb(k, j)
            acc = prod if acc is None else acc + prod
        out.append(symmetrize_trailing(acc, k))
    return out


def transfer_power_series(model: MarkovModel, n: int, order: int) -> list[np.ndarray]:
    """Derivatives at s = 0 of (Σ_κ K_κ e^{s·κ})^n, by binary powering."""
    base = [model.step_moment_kernel(q) for q in range(order + 1)]
    result = [np.eye(model.n_states)] + [
        np.zeros((model.n_states,) * 2 + (model.dim,) * q) for q in range(1, order + 1)
    ]
    e = int(n)
    while e:
        if e & 1:
            result = _mseries_mul(result, base, order)
        e >>= 1
        if e:
            base = _mseries_mul(base, base, order)
    return result


def exact_moments(model: MarkovModel, u, v, n: int, p_max: int) -> list[SymTensor]:
    """E[u S_n^{⊗p} v∘T̄^n] for p = 0..p_max."""
    u = _state_fn(model, u)
    v = _state_fn(model, v)
    series = transfer_power_series(model, n, p_max)
    row = model.stationary * u
    return [
        SymTensor(np.tensordot(np.tensordot(row, m, axes=([0], [0])), v, axes=([0], [0])),
                  dim=model.dim)
        for m in series
    ]


def exact_Am(model: MarkovModel, u, v, m: int, n: int) -> SymTensor:
    """A_{m,n}(u, v): m-th derivative at 0 of E[u e^{it·S_n} v∘T̄^n] / λ_t^n."""
    return exact_Am_series(model, u, v, m, n)[m]


def exact_Am_series(model: MarkovModel, u, v, m_max: int, n: int) -> list[SymTensor]:
    moments = exact_moments(model, u, v, n, m_max)
    char = [t * (1j**k) for k, t in enumerate(moments)]
    lam_pow = series_power(lambda_derivatives(model, m_max), -float(n), m_max)
    return series_product(char, lam_pow, m_max)


def limit_Am_series(model: MarkovModel, u, v, m_max: int) -> list[SymTensor]:
    """A_m(u, v) = lim_n A_{m,n}(u, v) from the eigenvector derivatives.

    E[u e^{it·S_n} v∘T̄^n] = λ_t^n (π diag(u) r_t)(l_t v)/(l_t r_t) + O(|R_t|^n),
    so A_m is the m-th derivative of that prefactor.
    """
    u = _state_fn(model, u)
    v = _state_fn(model, v)
    _, right, left = perturbation_series(model, m_max)
    d = model.dim
    row = model.stationary * u
    alpha = [SymTensor(np.tensordot(row, r, axes=([0], [0])), dim=d) for r in right]
    lv = [SymTensor(np.tensordot(v, lk, axes=([0], [0])), dim=d) for lk in left]
    lr = []
    for k in range(m_max + 1):
        acc = np.zeros((d,) * k, dtype=complex)
        for j in range(k + 1):
            acc = acc + math.comb(k, j) * np.tensordot(left[j], right[k - j], axes=([0], [0]))
        lr.append(symmetrize(SymTensor(acc, dim=d)))
    beta = series_product(lv, series_reciprocal(lr, m_max), m_max)
    return series_product(alpha, beta, m_max)


def _state_fn(model: MarkovModel, f) -> np.ndarray:
    if np.isscalar(f):
        return np.full(model.n_states, float(f))
    arr = np.asarray(f, dtype=float)
    if arr.shape != (model.n_states,):
        raise ModelError(f"state function must have shape ({model.n_states},), got {arr.shape}")
    return arr


# ── Exact local limit oracle ─────────────────────────────────────────────


class CellLaw:
    """E[u 1_{S_n=ℓ} v∘T̄^n] on the window |ℓ|_∞ <= W."""

    def __init__(self, grid: np.ndarray, window: int, n: int, method: str):
        self.grid = grid
        self.window = window
        self.n = n
        self.method = method

    def at(self, ell) -> float:
        idx = np.atleast_1d(np.asarray(ell, dtype=np.int64))
        if np.any(np.abs(idx) > self.window):
            return 0.0
        return float(self.grid[tuple(idx + self.window)])

    def total(self) -> float:
        return float(self.grid.sum())

    def moment(self, p: int) -> SymTensor:
        """Σ_ℓ law(ℓ) ℓ^{⊗p}."""
        d = self.grid.ndim
        axis = np.arange(-self.window, self.window + 1, dtype=float)
        coords = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
        weights = self.grid.reshape(-1)
        out = weights
        for _ in range(p):
            out = out[..., None] * coords.reshape(coords.shape[:1] + (1,) * (out.ndim - 1) + (d,))
        return SymTensor(out.sum(axis=0), dim=d)


def exact_cell_law(model: MarkovModel, u, v, n: int, method: str = "auto") -> CellLaw:
    """Exact law of S_n weighted by u(X_0) v(X_n) on its reachable window."""
    if n > MAX_ORACLE_N:
        raise WindowOverflowError(f"n = {n} exceeds the oracle limit {MAX_ORACLE_N}")
    u = _state_fn(model, u)
    v = _state_fn(model, v)
    w = n * model.reach()
    size = (2 * w + 1) ** model.dim
    if size * model.n_states**2 > WINDOW_CAP:
        raise WindowOverflowError(
            f"window of {size} cells × {model.n_states}² states exceeds {WINDOW_CAP}"
        )
    if method == "auto":
        cost = n * len(model.steps) * model.n_states**2 * size
        method = "dp" if cost <= DP_COST_LIMIT else "fft"
    if method == "dp":
        grid = _cell_law_dp(model, u, v, n, w)
    elif method == "fft":
        grid = _cell_law_fft(model, u, v, n, w)
    else:
        raise ValueError(f"unknown method '{method}'")
    logger.debug("cell law %s n=%d window=%d via %s", model.name, n, w, method)
    return CellLaw(grid, w, n, method)


def _cell_law_dp(model: MarkovModel, u, v, n: int, w: int) -> np.ndarray:
    d = model.dim
    shape = (model.n_states,) + (2 * w + 1,) * d
    dist = np.zeros(shape)
    dist[(slice(None),) + (w,) * d] = model.stationary * u
    axes = tuple(range(1, d + 1))
    for _ in range(n):
        nxt = np.zeros(shape)
        for step, kern in zip(model.steps, model.kernel_stack, strict=True):
            moved = np.tensordot(kern.T, dist, axes=([1], [0]))
            nxt += np.roll(moved, shift=tuple(step), axis=axes)
        dist = nxt
    return np.tensordot(v, dist, axes=([0], [0]))


def _cell_law_fft(model: MarkovModel, u, v, n: int, w: int) -> np.ndarray:
    d = model.dim
    size = 2 * w + 1
    freq = 2 * np.pi * np.arange(size) / size
    shape = (size,) * d
    stack = np.zeros(shape + (model.n_states,) * 2, dtype=complex)
    for step, kern in zip(model.steps, model.kernel_stack, strict=True):
        phase = np.ones(shape, dtype=complex)
        for axis, c in enumerate(step):
            phase = phase * np.exp(1j * c * freq).reshape((-1,) + (1,) * (d - 1 - axis))
        stack += phase[..., None, None] * kern
    row = model.stationary * u
    if model.n_states == 1:
        values = row[0] * v[0] * stack[..., 0, 0] ** n
    else:
        values = np.einsum("a,...ab,b->...", row, np.linalg.matrix_power(stack, n), v)
    spectrum = np.fft.fftn(values) / size**d
    return np.fft.fftshift(spectrum).real


def exact_cell_joint(model: MarkovModel, u, v, n: int, ell) -> float:
    """E[u 1_{S_n=ℓ} v∘T̄^n]."""
    if np.max(np.abs(np.atleast_1d(ell))) > n * model.reach():
        return 0.0
    return exact_cell_law(model, u, v, n).at(ell)


def write_oracle_csv(laws: Sequence[CellLaw], path: str | Path) -> Path:
    """Dump oracle values as rows (n, ℓ_1[, ℓ_2], value), skipping zeros."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        d = laws[0].grid.ndim if laws else 2
        writer.writerow(["n"] + [f"l{i + 1}" for i in range(d)] + ["value"])
        for law in laws:
            for idx in zip(*np.nonzero(law.grid), strict=True):
                ell = [int(i) - law.window for i in idx]
                writer.writerow([law.n, *ell, repr(float(law.grid[idx]))])
    return path


# ── Chain correlations ───────────────────────────────────────────────────


class _Chain:
    """Expectations of products of state functions and steps along the chain."""

    def __init__(self, model: MarkovModel, max_gap: int):
        self.model = model
        self.kernels = [model.step_moment_kernel(k) for k in range(4)]
        self.powers = [np.eye(model.n_states)]
        for _ in range(max_gap):
            self.powers.append(self.powers[-1] @ model.transition)

    def expect(self, obs: Mapping[int, np.ndarray], step_times: Sequence[int]) -> np.ndarray:
        """E[Π_τ obs[τ](X_τ) ⊗_i κ_{step_times[i]}], axes in step_times order."""
        times = sorted(set(obs) | set(step_times) | {s + 1 for s in step_times})
        order = np.argsort(step_times, kind="stable")
        counts: dict[int, int] = {}
        for s in step_times:
            counts[s] = counts.get(s, 0) + 1
        vec = self.model.stationary.copy()
        t = times[0]
        end = times[-1]
        while True:
            if t in obs:
                vec = vec * obs[t].reshape((-1,) + (1,) * (vec.ndim - 1))
            if t == end:
                break
            k = counts.get(t, 0)
            if k:
                moved = np.tensordot(vec, self.kernels[k], axes=([0], [0]))
                vec = np.moveaxis(moved, vec.ndim - 1, 0)
                t += 1
            else:
                nxt = min(x for x in times if x > t)
                vec = np.tensordot(self.powers[nxt - t], vec, axes=([0], [0]))
                t = nxt
        out = vec.sum(axis=0)
        return np.transpose(out, np.argsort(order)) if out.ndim else out


def centered(model: MarkovModel, u) -> np.ndarray:
    u = _state_fn(model, u)
    return u - model.stationary @ u


def kappa_autocorrelation(model: MarkovModel, m_max: int) -> np.ndarray:
    """E[κ ⊗ κ∘T̄^m] for m = -M..M, shape (2M+1, d, d)."""
    chain = _Chain(model, m_max)
    out = np.zeros((2 * m_max + 1, model.dim, model.dim))
    for m in range(m_max + 1):
        out[m_max + m] = chain.expect({}, [0, m])
        out[m_max - m] = out[m_max + m].T
    return out


def obs_kappa_correlation(model: MarkovModel, u, m_max: int) -> np.ndarray:
    """E[ũ κ∘T̄^j] for j = -M..M, shape (2M+1, d)."""
    chain = _Chain(model, m_max)
    ut = centered(model, u)
    return np.stack([chain.expect({0: ut}, [j]) for j in range(-m_max, m_max + 1)])


def _side_lag(i: int, side: str) -> int:
    return i if side == "+" else -i


def obs_kappa_pairs(model: MarkovModel, u, m_max: int, side: str = "+") -> np.ndarray:
    """E[ũ κ∘T̄^{±j} ⊗ κ∘T̄^{±k}], shape (M+1, M+1, d, d).

    Side '+' covers lags j, k >= 0; side '-' covers lags -j, -k with
    j, k >= 1 (row and column 0 are zero).
    """
    chain = _Chain(model, m_max)
    ut = centered(model, u)
    lo = 0 if side == "+" else 1
    out = np.zeros((m_max + 1, m_max + 1, model.dim, model.dim))
    for j in range(lo, m_max + 1):
        for k in range(j, m_max + 1):
            val = chain.expect({0: ut}, [_side_lag(j, side), _side_lag(k, side)])
            out[j, k] = val
            out[k, j] = val.T
    return out


def obs_kappa_triples(model: MarkovModel, u, m_max: int, side: str = "+") -> np.ndarray:
    """E[ũ κ∘T̄^{±a} ⊗ κ∘T̄^{±b} ⊗ κ∘T̄^{±c}], shape (M+1,)*3 + (d,)*3."""
    chain = _Chain(model, m_max)
    ut = centered(model, u)
    lo = 0 if side == "+" else 1
    d = model.dim
    out = np.zeros((m_max + 1,) * 3 + (d,) * 3)
    for a in range(lo, m_max + 1):
        for b in range(a, m_max + 1):
            for c in range(b, m_max + 1):
                lags = (a, b, c)
                val = chain.expect({0: ut}, [_side_lag(x, side) for x in lags])
                for perm in _PERMS3:
                    out[tuple(lags[p] for p in perm)] = np.transpose(val, perm)
    return out


_PERMS3 = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
