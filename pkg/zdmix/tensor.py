"""zdmix tensor - symmetric multilinear forms on R^d and Gaussian density derivatives.

A rank-m form is stored densely as an array of shape (d,)*m (d = 2 by
default, d = 1 for scalar-lattice models). The basic operations are
the tensor product A⊗B and the contraction A*B over the trailing indices
of A. Derivative series (lists whose k-th entry is the k-th differential
at 0) carry the perturbation expansions used in zd_spectral and
coefficients.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cache

import numpy as np

from zdmix.core import RankError, SymmetryError

logger = logging.getLogger(__name__)

MAX_RANK = 8
SYMMETRY_RTOL = 1e-9


class SymTensor:
    """Dense rank-m multilinear form on R^d (real or complex entries)."""

    __slots__ = ("entries", "_dim")

    def __init__(self, entries, dim: int | None = None):
        arr = np.asarray(entries)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(float)
        if arr.ndim == 0 and dim is None:
            dim = 2
        if arr.ndim > MAX_RANK:
            raise RankError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if arr.ndim and len(set(arr.shape)) != 1:
            raise RankError(f"entries must have shape (d,)*rank, got {arr.shape}")
        if arr.ndim and dim is not None and arr.shape[0] != dim:
            raise RankError(f"dimension {arr.shape[0]} does not match dim={dim}")
        self.entries = arr
        # rank 0 has no axes to carry the ambient dimension
        self._dim = arr.shape[0] if arr.ndim else dim

    @property
    def rank(self) -> int:
        return self.entries.ndim

    @property
    def dim(self) -> int:
        return self._dim

    @classmethod
    def zeros(cls, rank: int, dim: int = 2, dtype=float) -> "SymTensor":
        if rank > MAX_RANK:
            raise RankError(f"rank {rank} exceeds {MAX_RANK}")
        return cls(np.zeros((dim,) * rank, dtype=dtype), dim=dim)

    @classmethod
    def scalar(cls, value, dim: int = 2) -> "SymTensor":
        return cls(np.asarray(value), dim=dim)

    @classmethod
    def identity(cls, dim: int = 2) -> "SymTensor":
        return cls(np.eye(dim), dim=dim)

    def entry(self, *index: int):
        """Entry at a 1-based index tuple, e.g. A.entry(1, 1, 2, 2)."""
        if len(index) != self.rank:
            raise RankError(f"index of length {len(index)} for rank {self.rank}")
        return self.entries[tuple(i - 1 for i in index)]

    def is_symmetric(self, rtol: float = SYMMETRY_RTOL) -> bool:
        if self.rank < 2:
            return True
        scale = max(float(np.max(np.abs(self.entries))), 1.0)
        return bool(np.max(np.abs(symmetrize(self).entries - self.entries)) <= rtol * scale)

    def allclose(self, other: "SymTensor", atol: float = 1e-12, rtol: float = 0.0) -> bool:
        return self.rank == other.rank and bool(
            np.allclose(self.entries, other.entries, atol=atol, rtol=rtol)
        )

    @property
    def real(self) -> "SymTensor":
        return SymTensor(np.real(self.entries), dim=self.dim)

    @property
    def imag(self) -> "SymTensor":
        return SymTensor(np.imag(self.entries), dim=self.dim)

    def item(self):
        if self.rank:
            raise RankError("item() needs a rank-0 tensor")
        return self.entries.item()

    def __add__(self, other: "SymTensor") -> "SymTensor":
        _check_same_rank(self, other)
        return SymTensor(self.entries + other.entries, dim=self.dim)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        _check_same_rank(self, other)
        return SymTensor(self.entries - other.entries, dim=self.dim)

    def __neg__(self) -> "SymTensor":
        return SymTensor(-self.entries, dim=self.dim)

    def __mul__(self, c) -> "SymTensor":
        if isinstance(c, SymTensor):
            return NotImplemented
        return SymTensor(self.entries * c, dim=self.dim)

    __rmul__ = __mul__

    def __truediv__(self, c) -> "SymTensor":
        return SymTensor(self.entries / c, dim=self.dim)

    def __repr__(self) -> str:
        return f"SymTensor(rank={self.rank}, dim={self.dim}, entries={self.entries!r})"


def _check_same_rank(a: SymTensor, b: SymTensor) -> None:
    if a.rank != b.rank or a.dim != b.dim:
        raise RankError(f"rank/dim mismatch: ({a.rank}, {a.dim}) vs ({b.rank}, {b.dim})")


def as_tensor(value, dim: int = 2) -> SymTensor:
    """Coerce scalars, sequences and arrays to SymTensor."""
    if isinstance(value, SymTensor):
        return value
    arr = np.asarray(value)
    return SymTensor(arr, dim=arr.shape[0] if arr.ndim else dim)


# ── Core algebra ─────────────────────────────────────────────────────────


def tensor_product(a: SymTensor, b: SymTensor) -> SymTensor:
    """A⊗B with C[i1..i(m+k)] = A[i1..im] * B[i(m+1)..i(m+k)]."""
    if a.rank + b.rank > MAX_RANK:
        raise RankError(f"product rank {a.rank + b.rank} exceeds {MAX_RANK}")
    if a.rank and b.rank and a.dim != b.dim:
        raise RankError(f"dimension mismatch {a.dim} vs {b.dim}")
    dim = a.dim if a.rank else b.dim
    return SymTensor(np.multiply.outer(a.entries, b.entries), dim=dim)


def contract(a: SymTensor, b: SymTensor, check_symmetry: bool = True) -> SymTensor:
    """A*B: sum over the trailing rank(B) indices of A against B."""
    if b.rank > a.rank:
        raise RankError(f"cannot contract rank {a.rank} with rank {b.rank}")
    if check_symmetry and not (a.is_symmetric() and b.is_symmetric()):
        raise SymmetryError("contraction is defined for symmetric forms only")
    if b.rank == 0:
        return SymTensor(a.entries * b.entries, dim=a.dim)
    out = np.tensordot(a.entries, b.entries, axes=b.rank)
    return SymTensor(out, dim=a.dim)


@cache
def _orbit_index(rank: int, dim: int) -> tuple[np.ndarray, int]:
    """Label each index tuple by its multiset; returns (labels, n_labels)."""
    grids = np.indices((dim,) * rank).reshape(rank, -1)
    counts = np.stack([(grids == s).sum(axis=0) for s in range(dim)])
    key = np.zeros(grids.shape[1], dtype=np.int64)
    for s in range(dim):
        key = key * (rank + 1) + counts[s]
    _, labels = np.unique(key, return_inverse=True)
    return labels, int(labels.max()) + 1


def symmetrize(a: SymTensor) -> SymTensor:
    """Average of A over all permutations of its indices.

    Every permutation of an index tuple has the same multiset, so the
    average equals the mean over all tuples sharing that multiset.
    """
    if a.rank < 2:
        return a
    labels, n = _orbit_index(a.rank, a.dim)
    flat = a.entries.reshape(-1)
    sizes = np.bincount(labels, minlength=n)
    if np.iscomplexobj(flat):
        means = (
            np.bincount(labels, weights=flat.real, minlength=n)
            + 1j * np.bincount(labels, weights=flat.imag, minlength=n)
        ) / sizes
    else:
        means = np.bincount(labels, weights=flat, minlength=n) / sizes
    return SymTensor(means[labels].reshape(a.entries.shape), dim=a.dim)


def sym_product(*factors: SymTensor) -> SymTensor:
    """Symmetrized tensor product of any number of factors."""
    out = factors[0]
    for f in factors[1:]:
        out = tensor_product(out, f)
    return symmetrize(out)


def pairing_power(s: SymTensor, k: int) -> SymTensor:
    """Sum over all pairings of 2k indices of S⊗...⊗S (k factors).

    There are (2k)!/(2^k k!) pairings, so this is that count times the
    symmetrized k-th tensor power. Φ^(2k)(0) = (-1)^k Φ(0) pairing_power(Σ^-2, k).
    """
    if s.rank != 2:
        raise RankError("pairing_power needs a rank-2 tensor")
    if k == 0:
        return SymTensor.scalar(1.0, dim=s.dim)
    n_pairings = math.factorial(2 * k) // (2**k * math.factorial(k))
    return sym_product(*([s] * k)) * n_pairings


def full_contract(a: SymTensor, b: SymTensor) -> complex | float:
    """Scalar A*B for equal ranks, symmetrizing the second operand.

    Convenient when b is a raw product like X⊗Y that is only symmetric
    after averaging; a must already be symmetric.
    """
    if a.rank != b.rank:
        raise RankError(f"full contraction needs equal ranks, got {a.rank} and {b.rank}")
    return contract(a, symmetrize(b)).item()


# ── Gaussian density ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class GaussianModel:
    """Centered Gaussian on R^d with covariance Σ²."""

    sigma2: SymTensor
    inv_sigma2: SymTensor
    det_sigma2: float

    @classmethod
    def from_covariance(cls, sigma2) -> "GaussianModel":
        s = as_tensor(sigma2)
        if s.rank != 2:
            raise RankError("covariance must be rank 2")
        m = np.real_if_close(s.entries).astype(float)
        if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise SymmetryError("covariance must be symmetric")
        m = 0.5 * (m + m.T)
        eig = np.linalg.eigvalsh(m)
        if eig.min() <= 0:
            raise ValueError(f"covariance is not positive definite (eigenvalues {eig})")
        inv = np.linalg.inv(m)
        inv = 0.5 * (inv + inv.T)
        return cls(SymTensor(m), SymTensor(inv), float(np.linalg.det(m)))

    @property
    def dim(self) -> int:
        return self.sigma2.dim

    @property
    def peak(self) -> float:
        """Φ(0) = 1 / ((2π)^(d/2) sqrt(det Σ²))."""
        return 1.0 / ((2 * math.pi) ** (self.dim / 2) * math.sqrt(self.det_sigma2))


def gaussian_density(g: GaussianModel, x) -> float:
    """Φ(x) = exp(-Σ^-2*x⊗x / 2) / ((2π)^(d/2) sqrt(det Σ²))."""
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    q = float(xv @ g.inv_sigma2.entries @ xv)
    return g.peak * math.exp(-0.5 * q)


def hermite_factors(g: GaussianModel, x, m: int) -> list[SymTensor]:
    """Q_0..Q_m with Φ^(k)(x) = Φ(x) Q_k.

    Q_{k+1} = Q_k ⊗ (-y) - Σ_j (Σ^-2 inserted at slot j) ⊗ Q_{k-1}, with
    y = Σ^-2 x; this is the exact derivative of the polynomial prefactor.
    """
    if m > MAX_RANK:
        raise RankError(f"derivative order {m} exceeds {MAX_RANK}")
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    s = g.inv_sigma2.entries
    y = s @ xv
    d = g.dim
    q: list[np.ndarray] = [np.asarray(1.0)]
    if m >= 1:
        q.append(-y)
    for k in range(1, m):
        nxt = np.multiply.outer(q[k], -y)
        prev_s = np.multiply.outer(q[k - 1], s)
        # prev_s axes: (k-1 old indices, slot index, new index); move slot to j
        for j in range(k):
            nxt = nxt - np.moveaxis(prev_s, k - 1, j)
        q.append(nxt)
    return [SymTensor(arr, dim=d) for arr in q]


def gaussian_derivatives(g: GaussianModel, x, m: int) -> SymTensor:
    """m-th differential of Φ at x as a rank-m SymTensor."""
    return hermite_factors(g, x, m)[m] * gaussian_density(g, x)


def gaussian_derivatives_at_zero(g: GaussianModel, m: int) -> SymTensor:
    """Φ^(m)(0): zero for odd m, (-1)^(m/2) Φ(0) pairing_power(Σ^-2, m/2) for even m."""
    if m > MAX_RANK:
        raise RankError(f"derivative order {m} exceeds {MAX_RANK}")
    if m % 2:
        return SymTensor.zeros(m, g.dim)
    return pairing_power(g.inv_sigma2, m // 2) * ((-1) ** (m // 2) * g.peak)


def taylor_eval(coeffs: Sequence[SymTensor], x) -> complex | float:
    """Σ_k coeffs[k] * x^⊗k; coeffs[k] must have rank k."""
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    total = 0.0
    power = np.asarray(1.0)
    for k, c in enumerate(coeffs):
        if c.rank != k:
            raise RankError(f"coefficient {k} has rank {c.rank}")
        total = total + np.sum(c.entries * power)
        power = np.multiply.outer(power, xv)
    return total.item() if isinstance(total, np.ndarray) else total


# ── Derivative series ────────────────────────────────────────────────────
#
# A series F is a list with F[k] the k-th differential at 0 (rank k).
# Products follow Leibniz with symmetrization, which is exact because a
# symmetric form is determined by its values on the diagonal t^⊗k.


def _dtype_of(*series: Sequence[SymTensor]):
    return complex if any(np.iscomplexobj(t.entries) for s in series for t in s) else float


def series_product(f: Sequence[SymTensor], g: Sequence[SymTensor], order: int | None = None):
    """Derivative series of the product F·G."""
    order = min(len(f), len(g)) - 1 if order is None else order
    dim = f[0].dim
    out = []
    for k in range(order + 1):
        acc = SymTensor.zeros(k, dim, _dtype_of(f, g))
        for j in range(k + 1):
            acc = acc + tensor_product(f[j], g[k - j]) * math.comb(k, j)
        out.append(symmetrize(acc))
    return out


def series_reciprocal(f: Sequence[SymTensor], order: int | None = None):
    """Derivative series of 1/F (needs F(0) != 0)."""
    order = len(f) - 1 if order is None else order
    f0 = f[0].item()
    if f0 == 0:
        raise ZeroDivisionError("series with zero constant term has no reciprocal")
    dim = f[0].dim
    h = [SymTensor.scalar(1.0 / f0, dim=dim)]
    for k in range(1, order + 1):
        acc = SymTensor.zeros(k, dim, _dtype_of(f))
        for j in range(1, k + 1):
            acc = acc + tensor_product(f[j], h[k - j]) * math.comb(k, j)
        h.append(symmetrize(acc) * (-1.0 / f0))
    return h


def series_exp(g: Sequence[SymTensor], order: int | None = None):
    """Derivative series of exp(G), via E' = G'E."""
    order = len(g) - 1 if order is None else order
    dim = g[0].dim
    e = [SymTensor.scalar(np.exp(g[0].item()), dim=dim)]
    for k in range(order):
        acc = SymTensor.zeros(k + 1, dim, _dtype_of(g, e))
        for j in range(k + 1):
            acc = acc + tensor_product(g[j + 1], e[k - j]) * math.comb(k, j)
        e.append(symmetrize(acc))
    return e


def series_log(f: Sequence[SymTensor], order: int | None = None):
    """Derivative series of log F (principal branch at F(0))."""
    order = len(f) - 1 if order is None else order
    f0 = f[0].item()
    dim = f[0].dim
    psi = [SymTensor.scalar(np.log(f0), dim=dim)]
    for k in range(order):
        acc = f[k + 1]
        for j in range(k):
            acc = acc - symmetrize(tensor_product(psi[j + 1], f[k - j])) * math.comb(k, j)
        psi.append(acc / f0)
    return psi


def series_power(f: Sequence[SymTensor], exponent: float, order: int | None = None):
    """Derivative series of F**exponent = exp(exponent · log F)."""
    logf = series_log(f, order)
    return series_exp([t * exponent for t in logf], order)


def symmetrize_trailing(arr: np.ndarray, rank: int) -> np.ndarray:
    """Symmetrize the last `rank` axes of arr, leaving leading axes alone."""
    if rank < 2:
        return arr
    dim = arr.shape[-1]
    lead = arr.shape[: arr.ndim - rank]
    labels, n = _orbit_index(rank, dim)
    flat = arr.reshape(lead + (-1,))
    onehot = np.zeros((labels.size, n))
    onehot[np.arange(labels.size), labels] = 1.0
    means = (flat @ onehot) / onehot.sum(axis=0)
    return means[..., labels].reshape(arr.shape)


# ── Polynomials in n ─────────────────────────────────────────────────────


class NPolynomial:
    """Tensor-valued polynomial Σ_k coeffs[k] n^k of fixed rank."""

    def __init__(self, coeffs: dict[int, SymTensor], rank: int, dim: int = 2):
        self.coeffs = {k: c for k, c in coeffs.items() if np.any(c.entries != 0)}
        self.rank = rank
        self.dim = dim

    @property
    def degree(self) -> int:
        return max(self.coeffs, default=-1)

    def __call__(self, n: float) -> SymTensor:
        out = SymTensor.zeros(self.rank, self.dim, complex)
        for k, c in self.coeffs.items():
            out = out + c * float(n) ** k
        return out

    def __repr__(self) -> str:
        return f"NPolynomial(rank={self.rank}, degree={self.degree})"


def series_exp_polynomial(psi: Sequence[SymTensor | None], order: int) -> list[NPolynomial]:
    """Derivatives of exp(n ψ) at 0 as polynomials in n, assuming ψ(0) = 0.

    D_0 = 1 and D_{r+1} = Σ_k C(r, k) Sym(n ψ_{k+1} ⊗ D_{r-k}). Missing
    orders (None) raise, so callers decide how far ψ is known.
    """
    dim = next(p.dim for p in psi if p is not None)
    out = [NPolynomial({0: SymTensor.scalar(1.0 + 0j, dim=dim)}, 0, dim)]
    for r in range(order):
        acc: dict[int, SymTensor] = {}
        for k in range(r + 1):
            p = psi[k + 1] if k + 1 < len(psi) else None
            if p is None:
                raise RankError(f"ψ of order {k + 1} is not available")
            if not np.any(p.entries):
                continue
            for deg, c in out[r - k].coeffs.items():
                term = tensor_product(p, c) * math.comb(r, k)
                acc[deg + 1] = acc[deg + 1] + term if deg + 1 in acc else term
        out.append(
            NPolynomial({deg: symmetrize(t) for deg, t in acc.items()}, r + 1, dim)
        )
    return out
