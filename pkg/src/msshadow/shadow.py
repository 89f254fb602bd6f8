"""Multiple-shooting shadowing operators.

A trajectory over [0, T] is split into K segments.  Checkpoint stacks
hold K+1 rows (tangent values v_0..v_K at segment starts); segment
stacks hold K rows (constraint multipliers or right-hand-side blocks,
one per segment end).  All stacks are plain ndarrays of shape
(K+1, N) or (K, N).

The continuity constraint of the shooting system reads, row by row,

    (A v)_i = -Phi_i v_i + v_{i+1},        i = 0..K-1

where Phi_i projects the discrete tangent propagated across segment i
onto the complement of the flow direction at the segment end.  The
normal equations use S = A A^T, which is symmetric positive definite
and is only ever applied matrix-free.

Segment indices are 0-based throughout: segment i spans
[t_i, t_{i+1}] and its propagator/adjoint pair is charged to the cost
ledger one unit per application.
"""

import threading

import numpy as np

from . import timestep
from .errors import DegenerateProjectorError, DimensionMismatch


class CostLedger:
    """Counts segment-propagator products, the method's cost currency.

    ``forward`` counts tangent-side products (including forced
    right-hand-side sweeps), ``adjoint`` counts transpose products.
    Increments are lock-protected so concurrent segment workers can
    share one ledger.
    """

    def __init__(self):
        self.forward = 0
        self.adjoint = 0
        self._lock = threading.Lock()

    def charge_forward(self, n=1):
        with self._lock:
            self.forward += n

    def charge_adjoint(self, n=1):
        with self._lock:
            self.adjoint += n

    @property
    def total(self):
        return self.forward + self.adjoint

    def snapshot(self):
        return (self.forward, self.adjoint)

    def delta(self, since):
        return (self.forward - since[0], self.adjoint - since[1])

    def __repr__(self):
        return f"CostLedger(forward={self.forward}, adjoint={self.adjoint})"


def project_off_flow(f_t, x):
    """Remove from x its component along the flow vector f_t.

    Works on matching (..., N) batches.  Idempotent and symmetric;
    undefined (raises) when the flow vanishes, i.e. at a fixed point.
    """
    if f_t.shape != x.shape:
        raise DimensionMismatch("projector operands must have equal shapes")
    ff = (f_t * f_t).sum(axis=-1)
    if np.any(ff == 0.0):
        raise DegenerateProjectorError(
            "zero flow vector: trajectory sits at a fixed point"
        )
    fx = (f_t * x).sum(axis=-1)
    return x - f_t * (fx / ff)[..., None]


def _endpoint_f(traj, segments):
    """Flow vectors at the *ends* of the given segments, shape (m, N)."""
    idx = (np.asarray(segments, dtype=int) + 1) * traj.stride
    return traj.fvals[idx]


def _propagate_rows(traj, ledger, segments, z):
    """Projected tangent propagation of each row across its segment."""
    out = timestep.tangent_sweep_many(traj, segments, z, forcing=False)
    ledger.charge_forward(len(segments))
    return project_off_flow(_endpoint_f(traj, segments), out)


def _propagate_rows_adjoint(traj, ledger, segments, z):
    """Transpose of _propagate_rows: project at the segment end, then
    sweep the adjoint back to the segment start."""
    zp = project_off_flow(_endpoint_f(traj, segments), z)
    out = timestep.adjoint_sweep_many(traj, segments, zp)
    ledger.charge_adjoint(len(segments))
    return out


def propagate_segment(traj, ledger, segment, z):
    """Apply the projected propagator of one segment to z."""
    z = np.asarray(z, dtype=float)
    return _propagate_rows(traj, ledger, [segment], z[None, :])[0]


def propagate_segment_adjoint(traj, ledger, segment, z):
    """Apply the transpose of the projected propagator of one segment."""
    z = np.asarray(z, dtype=float)
    return _propagate_rows_adjoint(traj, ledger, [segment], z[None, :])[0]


def _check_stack(traj, stack, rows):
    if stack.shape != (rows, traj.system.dim):
        raise DimensionMismatch(
            f"expected stack of shape ({rows}, {traj.system.dim}), "
            f"got {stack.shape}"
        )


def constraint_apply(traj, ledger, v):
    """Continuity-constraint operator on a checkpoint stack.

    v: (K+1, N) -> (K, N);  row i = -Phi_i v_i + v_{i+1}.
    """
    k = traj.n_segments
    _check_stack(traj, v, k + 1)
    prop = _propagate_rows(traj, ledger, np.arange(k), v[:k])
    return v[1:] - prop


def constraint_transpose_apply(traj, ledger, w):
    """Transpose of constraint_apply: (K, N) -> (K+1, N)."""
    k = traj.n_segments
    _check_stack(traj, w, k)
    back = _propagate_rows_adjoint(traj, ledger, np.arange(k), w)
    out = np.empty((k + 1, traj.system.dim))
    out[0] = -back[0]
    out[1:k] = w[: k - 1] - back[1:]
    out[k] = w[k - 1]
    return out


def schur_apply(traj, ledger, w):
    """S w = A (A^T w); costs one propagator product of each kind per
    segment."""
    return constraint_apply(traj, ledger, constraint_transpose_apply(traj, ledger, w))


def assemble_rhs(traj, ledger):
    """Right-hand-side blocks: per segment, the forced tangent solution
    from a zero initial condition, projected at the segment end."""
    k = traj.n_segments
    segments = np.arange(k)
    zero = np.zeros((k, traj.system.dim))
    forced = timestep.tangent_sweep_many(traj, segments, zero, forcing=True)
    ledger.charge_forward(k)
    return project_off_flow(_endpoint_f(traj, segments), forced)


def recover_checkpoints(traj, ledger, w):
    """Checkpoint solution from the constraint multipliers: v = A^T w."""
    return constraint_transpose_apply(traj, ledger, w)


def time_average(traj, objective):
    """Trapezoidal time average of the objective over the stored window."""
    vals = objective.value(traj.states)
    return np.trapezoid(vals, dx=traj.h) / traj.span


def evaluate_sensitivity(traj, objective, v):
    """Sensitivity of the time-averaged objective to the parameter.

    Re-runs the forced tangent within each segment starting from the
    solved checkpoint value, accumulating the trapezoidal time integral
    of <dJ/du, v'> plus the checkpoint correction
    <f, v'> / |f|^2 * (Jbar - J) at each segment end.
    """
    k = traj.n_segments
    _check_stack(traj, v, k + 1)
    sys = traj.system
    h = traj.h
    offs = np.arange(k) * traj.stride

    j_vals = objective.value(traj.states)
    j_bar = np.trapezoid(j_vals, dx=h) / traj.span

    s2, s3, s4 = traj.stages()
    vv = v[:k].copy()
    acc = 0.5 * h * (objective.gradient(traj.states[offs]) * vv).sum(axis=-1)
    for j in range(traj.stride):
        idx = offs + j
        vv = timestep.tangent_step_at(
            sys, h, traj.states[idx], s2[idx], s3[idx], s4[idx], vv, forcing=True
        )
        wq = h if j < traj.stride - 1 else 0.5 * h
        g = objective.gradient(traj.states[idx + 1])
        acc += wq * (g * vv).sum(axis=-1)

    f_end = traj.fvals[offs + traj.stride]
    j_end = j_vals[offs + traj.stride]
    corr = (f_end * vv).sum(axis=-1) / (f_end * f_end).sum(axis=-1) * (j_bar - j_end)

    return (acc.sum() + corr.sum()) / traj.span + objective.param_deriv
