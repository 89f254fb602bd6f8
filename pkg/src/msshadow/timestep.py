"""Fixed-step RK4 integration with discrete tangent and adjoint sweeps.

The nonlinear solution is advanced with classical RK4 and stored at
every step.  Tangent and adjoint propagation then differentiate the
*discrete* scheme: Jacobian actions are evaluated at the RK4 stage
states reconstructed from the stored solution, and the adjoint applies
the exact transpose of each one-step tangent map in reverse order.
This makes <tangent(v), w> == <v, adjoint(w)> hold to round-off, which
is what keeps the shooting normal equations numerically symmetric.

Sweeps are vectorised over segments: a batch of tangent vectors is
advanced in lockstep, row i following segment ``segments[i]`` of the
stored trajectory.  This is the serial-machine equivalent of the
per-segment parallelism of the method.
"""

import struct

import numpy as np

from .errors import DimensionMismatch, DivergenceError, ShadowingError

_MAGIC = b"MSSTRAJ1"


def _n_steps(t_start, t_end, h):
    span = t_end - t_start
    if span <= 0 or h <= 0:
        raise ValueError("need a positive span and step size")
    n = int(round(span / h))
    if abs(n * h - span) > 1e-9 * max(abs(span), 1.0):
        raise ValueError(f"span {span} is not an integer multiple of h={h}")
    return n


def _check_stable(system, h):
    if h > system.max_stable_step * (1.0 + 1e-12):
        raise ValueError(
            f"step {h} exceeds the explicit stability limit "
            f"{system.max_stable_step:.4g} for this system"
        )


def advance(system, u0, t_start, t_end, h, check_every=64):
    """Integrate without storing the path; returns the final state.

    Used for spin-up, where only the end state matters.
    """
    _check_stable(system, h)
    n = _n_steps(t_start, t_end, h)
    u = np.asarray(u0, dtype=float).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n):
            k1 = system.rhs(u)
            k2 = system.rhs(u + 0.5 * h * k1)
            k3 = system.rhs(u + 0.5 * h * k2)
            k4 = system.rhs(u + h * k3)
            u += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if j % check_every == 0 and not np.isfinite(u).all():
                raise DivergenceError(j + 1)
    if not np.isfinite(u).all():
        raise DivergenceError(n)
    return u


class Trajectory:
    """Stored nonlinear solution on a uniform step grid.

    states[j] is the state after j steps; fvals[j] caches rhs(states[j]).
    ``stride`` is the number of steps per shooting segment and must
    divide the step count exactly.
    """

    def __init__(self, system, t_start, h, states, fvals, stride):
        n_steps = states.shape[0] - 1
        if stride < 1 or n_steps % stride != 0:
            raise ValueError(
                f"segment stride {stride} does not divide {n_steps} steps"
            )
        if states.shape != fvals.shape or states.shape[1] != system.dim:
            raise DimensionMismatch("trajectory storage shape mismatch")
        self.system = system
        self.t_start = float(t_start)
        self.h = float(h)
        self.states = states
        self.fvals = fvals
        self.stride = int(stride)
        self._stages = None

    def stages(self):
        """RK4 stage states of every step, computed once and cached.

        Returns (s2, s3, s4) arrays of shape (n_steps, N); tangent and
        adjoint sweeps evaluate Jacobians there so that they
        differentiate exactly the discrete scheme that produced the
        stored states.
        """
        if self._stages is None:
            u = self.states[:-1]
            s2 = u + (0.5 * self.h) * self.fvals[:-1]
            s3 = u + (0.5 * self.h) * self.system.rhs(s2)
            s4 = u + self.h * self.system.rhs(s3)
            self._stages = (s2, s3, s4)
        return self._stages

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def t_end(self):
        return self.t_start + self.n_steps * self.h

    @property
    def span(self):
        return self.n_steps * self.h

    @property
    def n_segments(self):
        return self.n_steps // self.stride

    @property
    def segment_span(self):
        return self.stride * self.h

    def checkpoint_index(self, i):
        if not 0 <= i <= self.n_segments:
            raise IndexError(f"checkpoint {i} out of range")
        return i * self.stride

    def checkpoint_state(self, i):
        return self.states[self.checkpoint_index(i)]

    def checkpoint_f(self, i):
        return self.fvals[self.checkpoint_index(i)]

    def dump(self, path):
        """Write a little-endian binary snapshot.

        Layout: 8-byte magic "MSSTRAJ1"; then <q n_dim> <q n_steps>
        <q stride> <d h> <d s> <d t_start>; then the (n_steps+1) x n_dim
        state array, row-major float64.  Cached rhs values are not
        stored; they are recomputed on load.
        """
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(
                struct.pack(
                    "<qqqddd",
                    self.system.dim,
                    self.n_steps,
                    self.stride,
                    self.h,
                    self.system.param,
                    self.t_start,
                )
            )
            fh.write(self.states.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, system):
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise ShadowingError(f"{path} is not a trajectory dump")
            dim, n_steps, stride, h, s, t_start = struct.unpack(
                "<qqqddd", fh.read(3 * 8 + 3 * 8)
            )
            if dim != system.dim:
                raise DimensionMismatch(
                    f"dump has dimension {dim}, system has {system.dim}"
                )
            if abs(s - system.param) > 1e-12 * max(1.0, abs(s)):
                raise ShadowingError(
                    f"dump was made at parameter {s}, system has {system.param}"
                )
            data = np.frombuffer(fh.read(), dtype="<f8")
        states = data.reshape(n_steps + 1, dim).astype(float)
        return cls(system, t_start, h, states, system.rhs(states), stride)


def integrate(system, u0, t_start, t_end, h, stride=1):
    """Classical RK4 with full storage of states and rhs values."""
    _check_stable(system, h)
    n = _n_steps(t_start, t_end, h)
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (system.dim,):
        raise DimensionMismatch(f"initial state must have shape ({system.dim},)")
    states = np.empty((n + 1, system.dim))
    fvals = np.empty_like(states)
    states[0] = u0
    u = u0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n):
            k1 = system.rhs(u)
            fvals[j] = k1
            k2 = system.rhs(u + 0.5 * h * k1)
            k3 = system.rhs(u + 0.5 * h * k2)
            k4 = system.rhs(u + h * k3)
            u += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.isfinite(u).all():
                raise DivergenceError(j + 1)
            states[j + 1] = u
        fvals[n] = system.rhs(u)
    return Trajectory(system, t_start, h, states, fvals, stride)


def tangent_step_at(system, h, u, s2, s3, s4, v, forcing=False):
    """One RK4-step discrete tangent map applied to v (batched).

    Jacobians act at the step's stage states; with ``forcing`` the
    parameter derivative of the scheme is added, i.e. the step solves
    the inhomogeneous tangent equation dv/dt = (df/du) v + df/ds.
    """
    if forcing:
        l1 = system.jacobian_apply(u, v) + system.param_deriv(u)
        l2 = system.jacobian_apply(s2, v + (0.5 * h) * l1) + system.param_deriv(s2)
        l3 = system.jacobian_apply(s3, v + (0.5 * h) * l2) + system.param_deriv(s3)
        l4 = system.jacobian_apply(s4, v + h * l3) + system.param_deriv(s4)
    else:
        l1 = system.jacobian_apply(u, v)
        l2 = system.jacobian_apply(s2, v + (0.5 * h) * l1)
        l3 = system.jacobian_apply(s3, v + (0.5 * h) * l2)
        l4 = system.jacobian_apply(s4, v + h * l3)
    return v + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)


def adjoint_step_at(system, h, u, s2, s3, s4, w):
    """Exact transpose of the homogeneous one-step tangent map (batched)."""
    l4 = (h / 6.0) * w
    t4 = system.jacobian_transpose_apply(s4, l4)
    l3 = (h / 3.0) * w + h * t4
    t3 = system.jacobian_transpose_apply(s3, l3)
    l2 = (h / 3.0) * w + (0.5 * h) * t3
    t2 = system.jacobian_transpose_apply(s2, l2)
    l1 = (h / 6.0) * w + (0.5 * h) * t2
    t1 = system.jacobian_transpose_apply(u, l1)
    return w + t1 + t2 + t3 + t4


def _reconstruct_stages(system, u, f_u, h):
    s2 = u + (0.5 * h) * f_u
    s3 = u + (0.5 * h) * system.rhs(s2)
    s4 = u + h * system.rhs(s3)
    return s2, s3, s4


def tangent_step(system, u, f_u, h, v, forcing=False):
    """Stage-reconstructing convenience wrapper around tangent_step_at."""
    s2, s3, s4 = _reconstruct_stages(system, u, f_u, h)
    return tangent_step_at(system, h, u, s2, s3, s4, v, forcing=forcing)


def adjoint_step(system, u, f_u, h, w):
    """Stage-reconstructing convenience wrapper around adjoint_step_at."""
    s2, s3, s4 = _reconstruct_stages(system, u, f_u, h)
    return adjoint_step_at(system, h, u, s2, s3, s4, w)


def _check_segments(traj, segments):
    segments = np.atleast_1d(np.asarray(segments, dtype=int))
    if segments.size and (segments.min() < 0 or segments.max() >= traj.n_segments):
        raise IndexError(
            f"segment index out of range [0, {traj.n_segments - 1}]"
        )
    return segments


def tangent_sweep_many(traj, segments, v, forcing=False):
    """Propagate rows of v across their segments with the discrete tangent.

    v has shape (m, N); row i is advanced from the start to the end of
    segment segments[i].  Returns v at the segment ends (before any
    projection).
    """
    segments = _check_segments(traj, segments)
    if v.shape != (segments.size, traj.system.dim):
        raise DimensionMismatch("tangent batch shape mismatch")
    offs = segments * traj.stride
    s2, s3, s4 = traj.stages()
    sys = traj.system
    h = traj.h
    out = v.copy()
    for j in range(traj.stride):
        idx = offs + j
        out = tangent_step_at(
            sys, h, traj.states[idx], s2[idx], s3[idx], s4[idx], out,
            forcing=forcing,
        )
    return out


def adjoint_sweep_many(traj, segments, w):
    """Transpose counterpart of tangent_sweep_many (homogeneous only).

    Row i carries a terminal value at the end of segment segments[i]
    backwards to the segment start.
    """
    segments = _check_segments(traj, segments)
    if w.shape != (segments.size, traj.system.dim):
        raise DimensionMismatch("adjoint batch shape mismatch")
    offs = segments * traj.stride
    s2, s3, s4 = traj.stages()
    sys = traj.system
    h = traj.h
    out = w.copy()
    for j in range(traj.stride - 1, -1, -1):
        idx = offs + j
        out = adjoint_step_at(
            sys, h, traj.states[idx], s2[idx], s3[idx], s4[idx], out
        )
    return out


def tangent_sweep(traj, segment, v_init, forcing=False):
    """Single-segment tangent sweep; returns v at the segment end."""
    v = np.asarray(v_init, dtype=float)
    return tangent_sweep_many(traj, [segment], v[None, :], forcing=forcing)[0]


def adjoint_sweep(traj, segment, w_term):
    """Single-segment adjoint sweep; returns w at the segment start."""
    w = np.asarray(w_term, dtype=float)
    return adjoint_sweep_many(traj, [segment], w[None, :])[0]
