"""Preconditioned conjugate gradients on grid-shaped arrays.

The periodic operator annihilates constants, so the solver takes an optional
projection callback that is applied to the initial guess, the right-hand side
and every update — with mean-removal this keeps the iterates in the orthogonal
complement of the kernel, where the operator is positive definite.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergenceError


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    converged: bool
    history: np.ndarray


def remove_mean(u):
    return u - u.mean()


def pcg(matvec, b, precond=None, project=None, tol=1e-10, max_iter=20000,
        x0=None):
    """Solve matvec(x) = b to relative residual `tol` (absolute if b = 0).

    Returns (x, SolveInfo). Raises NonConvergenceError (with the residual
    history attached) if max_iter is hit first.
    """
    if precond is None:
        precond = lambda r: r
    if project is None:
        project = lambda u: u

    b = project(np.asarray(b, dtype=float))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        # The projected problem is positive definite, so b = 0 has exactly
        # one solution and no iteration is needed.
        return np.zeros_like(b), SolveInfo(0, 0.0, True, np.zeros(0))

    x = np.zeros_like(b) if x0 is None else project(np.array(x0, dtype=float))
    r = b - matvec(x) if np.any(x) else b.copy()
    r = project(r)
    z = project(precond(r))
    p = z.copy()
    rz = float(np.vdot(r, z))
    history = [float(np.linalg.norm(r)) / bnorm]
    if history[-1] <= tol:
        return x, SolveInfo(0, history[-1], True, np.asarray(history))

    for k in range(1, max_iter + 1):
        Ap = project(matvec(p))
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0.0:
            raise NonConvergenceError(
                f"operator lost positivity at iteration {k} (p.Ap = {pAp})",
                residual=history[-1], history=np.asarray(history))
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        res = float(np.linalg.norm(r)) / bnorm
        history.append(res)
        if res <= tol:
            return project(x), SolveInfo(k, res, True, np.asarray(history))
        z = project(precond(r))
        rz_new = float(np.vdot(r, z))
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p

    raise NonConvergenceError(
        f"conjugate gradients: no convergence in {max_iter} iterations "
        f"(residual {history[-1]:.3e}, tol {tol:.3e})",
        residual=history[-1], history=np.asarray(history))


def dense_operator(form):
    """Materialize the periodic operator as a dense matrix (small-grid oracle)."""
    n = form.cells_per_side ** form.d
    shape = form.grid_shape
    A = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        A[:, j] = form.apply(e.reshape(shape)).ravel()
    return A
