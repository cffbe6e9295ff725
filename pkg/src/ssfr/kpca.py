"""Kernel PCA over yield-tenor time series and Karhunen-Loeve factor scores.

The samples are the ``M`` rows of the yield panel (one time series per
tenor), so the kernel matrix is ``M x M``.  Eigenvectors of the kernel give
orthogonal score columns, which are turned into basis functions that are
orthonormal under trapezoidal quadrature on the tenor grid.  Projecting a
yield curve on that basis gives the factor scores used by the regression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from .data import Tenor, YieldPanel, format_month, tenor_years

KernelKind = Literal["rbf", "linear"]


class KpcaError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice; ``bandwidth=None`` means the median heuristic."""

    kind: KernelKind = "rbf"
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("rbf", "linear"):
            raise KpcaError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise KpcaError("bandwidth must be positive")

    def resolved(self, rows: np.ndarray) -> "KernelSpec":
        if self.kind == "rbf" and self.bandwidth is None:
            return KernelSpec("rbf", median_bandwidth(rows))
        return self


def kernel_value(x, y, spec: KernelSpec) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise KpcaError(f"length mismatch: {x.shape} vs {y.shape}")
    if spec.kind == "linear":
        return float(x @ y)
    if spec.bandwidth is None:
        raise KpcaError("rbf kernel needs a resolved bandwidth")
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * spec.bandwidth**2)))


def kernel_matrix(x: np.ndarray, y: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Kernel between every row of ``x`` and every row of ``y``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise KpcaError(f"length mismatch: {x.shape[1]} vs {y.shape[1]}")
    if spec.kind == "linear":
        return x @ y.T
    if spec.bandwidth is None:
        raise KpcaError("rbf kernel needs a resolved bandwidth")
    sq = cdist(x, y, "sqeuclidean")
    return np.exp(-sq / (2.0 * spec.bandwidth**2))


def median_bandwidth(rows) -> float:
    """Lower median of the pairwise Euclidean distances between rows."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] < 2:
        raise KpcaError("median bandwidth needs at least two rows")
    d = np.sort(pdist(rows))
    med = float(d[(d.size - 1) // 2])
    if not med > 0:
        if np.all(d == 0):
            raise KpcaError("degenerate bandwidth: all rows identical")
        # more than half of the pairs coincide; fall back to the smallest positive distance
        med = float(d[d > 0][0])
    return med


def trapezoid_weights(grid) -> np.ndarray:
    """Trapezoidal-rule weights on a strictly increasing, possibly uneven grid."""
    x = np.asarray(grid, dtype=float)
    if x.size < 2:
        raise KpcaError("quadrature needs at least two grid points")
    if np.any(np.diff(x) <= 0):
        raise KpcaError("quadrature grid must be strictly increasing")
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += h / 2.0
    w[1:] += h / 2.0
    return w


def _quadrature_orthonormalize(A: np.ndarray, quad: np.ndarray) -> np.ndarray:
    """Gram-Schmidt of the score columns under the quadrature inner product.

    The first column stays proportional to the leading score column; signs
    are then fixed so the largest-magnitude entry of each column is positive.
    """
    gram = A.T @ (quad[:, None] * A)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise KpcaError("score columns are linearly dependent on the quadrature grid") from None
    basis = linalg.solve_triangular(chol, A.T, lower=True).T
    pivot = np.argmax(np.abs(basis), axis=0)
    return basis * np.sign(basis[pivot, np.arange(basis.shape[1])])


def _center_kernel(K: np.ndarray) -> np.ndarray:
    col = K.mean(axis=0)
    return K - col[None, :] - col[:, None] + K.mean()


@dataclass(frozen=True)
class KpcaModel:
    spec: KernelSpec
    tenors: tuple[Tenor, ...]
    train_rows: np.ndarray
    K: np.ndarray
    eigenvalues: np.ndarray
    R: np.ndarray
    A: np.ndarray
    W: np.ndarray
    basis: np.ndarray
    quadrature: np.ndarray
    all_eigenvalues: np.ndarray
    center: bool = False

    @property
    def Q(self) -> int:
        return self.eigenvalues.size

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.spec.kind,
            "bandwidth": self.spec.bandwidth,
            "center": self.center,
            "tenors": [t.months for t in self.tenors],
            "train_rows": self.train_rows.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "all_eigenvalues": self.all_eigenvalues.tolist(),
            "scores": self.A.tolist(),
            "weights": self.W.tolist(),
            "basis": self.basis.tolist(),
            "quadrature": self.quadrature.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KpcaModel":
        spec = KernelSpec(d["kind"], d["bandwidth"])
        rows = np.asarray(d["train_rows"], dtype=float)
        K = kernel_matrix(rows, rows, spec)
        if d.get("center", False):
            K = _center_kernel(K)
        lam = np.asarray(d["eigenvalues"], dtype=float)
        A = np.asarray(d["scores"], dtype=float)
        return cls(
            spec=spec,
            tenors=tuple(Tenor(m) for m in d["tenors"]),
            train_rows=rows,
            K=K,
            eigenvalues=lam,
            R=A / np.sqrt(lam),
            A=A,
            W=np.asarray(d["weights"], dtype=float),
            basis=np.asarray(d["basis"], dtype=float),
            quadrature=np.asarray(d["quadrature"], dtype=float),
            all_eigenvalues=np.asarray(d["all_eigenvalues"], dtype=float),
            center=bool(d.get("center", False)),
        )


def fit_kpca(
    yields: YieldPanel,
    spec: KernelSpec = KernelSpec(),
    Q: int = 2,
    eigen_tolerance: float = 1e-10,
    center: bool = False,
) -> KpcaModel:
    """Eigendecompose the kernel matrix of the yield rows and keep ``Q`` factors.

    Eigenvector signs are fixed so that the largest-magnitude entry of each
    column is positive.  Raises :class:`KpcaError` when fewer than ``Q``
    eigenvalues exceed ``eigen_tolerance * max_eigenvalue``.
    """
    if Q < 1 or Q > yields.n_tenors:
        raise KpcaError(f"Q must be in [1, {yields.n_tenors}], got {Q}")
    if not eigen_tolerance > 0:
        raise KpcaError("eigen_tolerance must be positive")
    rows = np.array(yields.yields, dtype=float)
    spec = spec.resolved(rows)
    K = kernel_matrix(rows, rows, spec)
    if not np.all(np.isfinite(K)):
        raise KpcaError("non-finite kernel entries")
    if center:
        K = _center_kernel(K)
    K = 0.5 * (K + K.T)

    lam_all, vecs = np.linalg.eigh(K)
    order = np.argsort(lam_all)[::-1]
    lam_all, vecs = lam_all[order], vecs[:, order]
    lam_max = lam_all[0]
    n_ok = int(np.sum(lam_all > eigen_tolerance * lam_max)) if lam_max > 0 else 0
    if n_ok < Q:
        raise KpcaError(f"only {n_ok} eigenvalue(s) above tolerance, cannot extract Q={Q} factors")

    lam = lam_all[:Q].copy()
    R = vecs[:, :Q].copy()
    pivot = np.argmax(np.abs(R), axis=0)
    R *= np.sign(R[pivot, np.arange(Q)])
    A = R * np.sqrt(lam)
    W = A / lam

    quad = trapezoid_weights(tenor_years(yields.tenors))
    basis = _quadrature_orthonormalize(A, quad)

    return KpcaModel(
        spec=spec,
        tenors=tuple(yields.tenors),
        train_rows=rows,
        K=K,
        eigenvalues=lam,
        R=R,
        A=A,
        W=W,
        basis=basis,
        quadrature=quad,
        all_eigenvalues=lam_all,
        center=center,
    )


def project_new_tenor(model: KpcaModel, z_star) -> np.ndarray:
    """Out-of-sample scores of a new tenor time series via the kernel trick."""
    z_star = np.asarray(z_star, dtype=float)
    if z_star.shape != (model.train_rows.shape[1],):
        raise KpcaError(f"length mismatch: expected {model.train_rows.shape[1]}, got {z_star.shape}")
    k = kernel_matrix(z_star[None, :], model.train_rows, model.spec)[0]
    if model.center:
        k_train = kernel_matrix(model.train_rows, model.train_rows, model.spec)
        col = k_train.mean(axis=0)
        k = k - k.mean() - col + k_train.mean()
    return k @ model.W


def basis_values(model: KpcaModel) -> np.ndarray:
    return model.basis.copy()


@dataclass(frozen=True)
class FactorScores:
    dates: np.ndarray
    U: np.ndarray

    def __post_init__(self) -> None:
        U = np.array(self.U, dtype=float, ndmin=2)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "dates", np.asarray(self.dates, dtype="datetime64[M]"))
        if U.shape[1] < 1:
            raise KpcaError("factor scores need Q >= 1")
        if U.shape[0] != len(self.dates):
            raise KpcaError("factor score rows do not match dates")

    @property
    def Q(self) -> int:
        return self.U.shape[1]

    def to_rows(self) -> list[list[str]]:
        header = ["date", *(f"u{j + 1}" for j in range(self.Q))]
        return [header] + [[format_month(d), *(f"{v:.17g}" for v in row)] for d, row in zip(self.dates, self.U)]


def factor_scores(model: KpcaModel, yields: YieldPanel) -> FactorScores:
    """Quadrature projection of every yield curve onto the basis functions."""
    if tuple(yields.tenors) != tuple(model.tenors):
        raise KpcaError("yield tenor grid does not match the fitted model")
    U = yields.yields.T @ (model.quadrature[:, None] * model.basis)
    return FactorScores(yields.dates, U)
