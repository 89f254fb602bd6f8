"""Matrix-free preconditioned conjugate gradient for the shooting system.

Three operator modes are supported, differing in where the Tikhonov
shift gamma enters relative to the preconditioner M:

  none:  S w = b                      (gamma ignored)
  pre:   M (gamma I + S) w = M b
  post:  (gamma I + M S) w = M b

The post system is the left-preconditioned form of the SPD system
(S + gamma M^{-1}) w = b with preconditioner M, so standard PCG applies
to all three modes; the preconditioned operator of the post mode has
spectrum mu(M S) + gamma exactly.  M must expose ``apply`` and, for the
post mode, ``apply_inv``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import BreakdownError


@dataclass
class SolveConfig:
    tol: float = 1e-5
    max_iter: int = 500
    gamma: float = 0.0
    mode: str = "post"  # none | pre | post
    preconditioner: object = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.mode not in ("none", "pre", "post"):
            raise ValueError(f"unknown regularization mode {self.mode!r}")


@dataclass
class SolveReport:
    iterations: int = 0
    converged: bool = False
    # relative 2-norms per iteration, first entry 1.0
    residuals: list = field(default_factory=list)         # governing system
    true_residuals: list = field(default_factory=list)    # unpreconditioned
    ledger_delta: tuple = (0, 0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "relative_residual"])
            for m, r in enumerate(self.residuals):
                writer.writerow([m, f"{r:.17g}"])


def _build_operator(apply_s, config):
    gamma = config.gamma
    pc = config.preconditioner
    if config.mode == "none" or gamma == 0.0:
        return apply_s
    if config.mode == "pre":
        return lambda w: gamma * w + apply_s(w)
    # post: S + gamma * M^{-1}
    if pc is None:
        return lambda w: gamma * w + apply_s(w)
    return lambda w: gamma * pc.apply_inv(w) + apply_s(w)


def cg_solve(apply_s, rhs, config, ledger=None):
    """PCG on the mode-built operator; returns (solution, SolveReport).

    ``apply_s`` maps a segment stack to a segment stack and must be the
    raw (unregularized, unpreconditioned) SPD action.  Convergence is
    measured on the preconditioned residual when a preconditioner is
    active, on the true residual otherwise; both histories are kept.
    Non-convergence at max_iter is reported, not raised.
    """
    operator = _build_operator(apply_s, config)
    pc = config.preconditioner
    apply_m = pc.apply if pc is not None else (lambda z: z)

    before = ledger.snapshot() if ledger is not None else (0, 0)

    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = apply_m(r)
    p = z.copy()
    rz = float((r * z).sum())
    r0 = float(np.linalg.norm(r))
    z0 = float(np.linalg.norm(z))
    if r0 == 0.0:
        report = SolveReport(iterations=0, converged=True,
                             residuals=[0.0], true_residuals=[0.0])
        return x, report

    true_hist = [1.0]
    pc_hist = [1.0]
    governing = pc_hist if pc is not None else true_hist
    converged = False
    m = 0
    for m in range(1, config.max_iter + 1):
        q = operator(p)
        pq = float((p * q).sum())
        if not np.isfinite(pq) or pq <= 0.0:
            raise BreakdownError(m, f"CG breakdown: <p, Sp> = {pq} at iteration {m}")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = apply_m(r)
        rz_new = float((r * z).sum())
        true_hist.append(float(np.linalg.norm(r)) / r0)
        pc_hist.append(float(np.linalg.norm(z)) / z0 if z0 > 0 else 0.0)
        if not np.isfinite(true_hist[-1]):
            raise BreakdownError(m, f"non-finite residual at iteration {m}")
        if governing[-1] <= config.tol:
            converged = True
            break
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new

    report = SolveReport(
        iterations=m,
        converged=converged,
        residuals=governing,
        true_residuals=true_hist,
        ledger_delta=ledger.delta(before) if ledger is not None else (0, 0),
    )
    return x, report


def error_bound(kappa, m):
    """Classical CG error bound 2 ((sqrt(k)-1)/(sqrt(k)+1))^m.

    Independent of problem size; an upper bound on the energy-norm
    error ratio after m iterations.
    """
    if kappa < 1.0:
        raise ValueError("condition number must be >= 1")
    if m < 0:
        raise ValueError("iteration count must be >= 0")
    root = np.sqrt(kappa)
    ratio = (root - 1.0) / (root + 1.0)
    return 2.0 * ratio**m
