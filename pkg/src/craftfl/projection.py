"""Projection kernel for conflict-resolved aggregation.

Everything here operates on flat float64 vectors. The central object is the
underdetermined linear system ``U g = rho`` where the rows of ``U`` are the
normalized update directions of the ``m`` active clients (``m << d``) and
``rho`` holds their positive alignment targets. A solution ``g`` has positive
inner product with every row, i.e. it is conflict-free.

Two selections of ``g`` are provided:

* ``config_direction`` returns the minimum-norm feasible solution
  (projection of the origin onto the affine constraint set), and
* ``craft_correct`` returns the feasible solution closest to an arbitrary
  reference direction, obtained by applying the minimum-norm correction
  ``U+ (rho - U ref)`` to the reference.

Since ``d`` is much larger than ``m``, the pseudoinverse is realized through
the m-by-m Gram system ``(U U^T) y = b`` rather than a dense SVD of ``U``,
keeping the cost at O(d m^2) and the workspace at O(m^2). Rank-deficient
systems are solved in the least-squares sense and the residual is reported
instead of raising, so callers can log the constraint violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalError

# Stabilizer added to the norm in the normalization operator v / (||v|| + eps).
DEFAULT_EPS = 1e-8
# Relative eigenvalue cutoff for the Gram pseudoinverse.
DEFAULT_RANK_TOL = 1e-10


@dataclass(frozen=True)
class ProjectionResult:
    """Outcome of one constrained projection.

    Attributes:
        direction: the solution ``g`` (dimension d), equal to
            ``reference + correction``.
        correction: minimum-norm correction, an element of the row space
            of the alignment matrix.
        residual: ``U g - rho``; numerically zero when the Gram system has
            full rank, otherwise the least-squares constraint violation.
        gram_rank: number of Gram eigenvalues retained by the solve.
    """

    direction: np.ndarray
    correction: np.ndarray
    residual: np.ndarray
    gram_rank: int


def _as_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite components")
    return v


def _as_matrix(U, name: str) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 1 or U.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-d matrix, got shape {U.shape}")
    if not np.all(np.isfinite(U)):
        raise InvalidInputError(f"{name} contains non-finite components")
    return U


def normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Stabilized normalization ``v / (||v|| + eps)``.

    The zero vector is a fixed point; any other vector is shrunk to a norm
    strictly below one for finite ``eps > 0``.
    """
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps!r}")
    v = _as_vector(v, "v")
    return v / (np.linalg.norm(v) + eps)


def gram_solve(U, b, rank_tol: float = DEFAULT_RANK_TOL) -> tuple[np.ndarray, int]:
    """Minimum-norm least-squares solve of the Gram system ``(U U^T) y = b``.

    The symmetric eigendecomposition of ``G = U U^T`` is truncated at
    ``rank_tol`` times the largest eigenvalue; eigencomponents below the
    cutoff are dropped, which yields ``y = G+ b``.

    Returns:
        ``(y, rank)`` where ``rank`` counts the retained eigenvalues.
    """
    if not rank_tol > 0:
        raise InvalidInputError(f"rank_tol must be positive, got {rank_tol!r}")
    U = _as_matrix(U, "U")
    b = _as_vector(b, "b")
    if b.shape[0] != U.shape[0]:
        raise InvalidInputError(
            f"b has {b.shape[0]} entries but U has {U.shape[0]} rows"
        )
    gram = U @ U.T
    try:
        eigvals, eigvecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Gram eigendecomposition failed: {exc}") from exc
    # G is positive semidefinite; tiny negative eigenvalues are roundoff.
    cutoff = rank_tol * max(float(eigvals[-1]), 0.0)
    keep = eigvals > cutoff
    rank = int(np.count_nonzero(keep))
    if rank == 0:
        return np.zeros_like(b), 0
    basis = eigvecs[:, keep]
    y = basis @ ((basis.T @ b) / eigvals[keep])
    return y, rank


def craft_correct(U, targets, reference, rank_tol: float = DEFAULT_RANK_TOL) -> ProjectionResult:
    """Project a reference direction onto the alignment constraint set.

    Solves ``min ||g - reference||`` subject to ``U g = targets`` via the
    closed form ``g = reference + U^T (U U^T)+ (targets - U reference)``.
    A reference that already satisfies the constraints is returned
    unchanged. For rank-deficient ``U`` the constraints are enforced in the
    least-squares sense and the achieved residual is reported.
    """
    U = _as_matrix(U, "U")
    targets = _as_vector(targets, "targets")
    reference = _as_vector(reference, "reference")
    m, d = U.shape
    if targets.shape[0] != m:
        raise InvalidInputError(f"targets has {targets.shape[0]} entries but U has {m} rows")
    if reference.shape[0] != d:
        raise InvalidInputError(
            f"reference has dimension {reference.shape[0]} but U has {d} columns"
        )
    rhs = targets - U @ reference
    y, rank = gram_solve(U, rhs, rank_tol)
    correction = U.T @ y
    direction = reference + correction
    residual = U @ direction - targets
    return ProjectionResult(direction=direction, correction=correction,
                            residual=residual, gram_rank=rank)


def config_direction(U, targets, rank_tol: float = DEFAULT_RANK_TOL) -> ProjectionResult:
    """Minimum-norm feasible direction: ``craft_correct`` with a zero reference."""
    U = _as_matrix(U, "U")
    return craft_correct(U, targets, np.zeros(U.shape[1]), rank_tol)
