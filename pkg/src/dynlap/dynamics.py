"""Dynamics evaluators: maps, Jacobians and their parameter derivatives.

Two perturbation families are provided: closed-form maps with a scalar
parameter (the standard map) and ODE flow maps where the flow time is
the parameter (the transitory double gyre).  All evaluators are pure,
accept single points ``(2,)`` or batches ``(n, 2)``, and return
unfolded image coordinates: torus maps live on the universal cover and
consumers apply the periodic identification where they need it.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp


class IntegrationError(RuntimeError):
    """Adaptive ODE integration failed."""


def _as_points(x) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected points of shape (2,) or (n, 2), got {pts.shape}")
    return pts, single


def _maybe_squeeze(arr: np.ndarray, single: bool) -> np.ndarray:
    return arr[0] if single else arr


@dataclass(frozen=True)
class DynamicsModel:
    """Bundle of evaluators for a map T, its Jacobian DT, and their
    derivatives with respect to the perturbation parameter at this
    parameter value (map_dot = dT/d_eps, jacobian_dot = d(DT)/d_eps).

    ``periods`` marks torus dynamics.  ``full_eval``, when set, computes
    (T, DT, dT, dDT) for a batch in one pass; flow-map models use it so
    one ODE integration serves all four evaluators.  ``map_and_dot``
    similarly pairs T with dT for methods that need no Jacobians.
    """

    name: str
    map: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    map_dot: Callable[[np.ndarray], np.ndarray]
    jacobian_dot: Callable[[np.ndarray], np.ndarray]
    periods: tuple[float, float] | None = None
    full_eval: Callable | None = None
    map_and_dot: Callable | None = None

    def evaluate(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(T(x), DT(x), dT(x), dDT(x)) for a batch, one pass if possible."""
        pts, single = _as_points(points)
        if self.full_eval is not None:
            tx, dt, td, dtd = self.full_eval(pts)
        else:
            tx, dt = self.map(pts), self.jacobian(pts)
            td, dtd = self.map_dot(pts), self.jacobian_dot(pts)
        return tuple(_maybe_squeeze(a, single) for a in (tx, dt, td, dtd))

    def evaluate_map_and_dot(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(T(x), dT(x)) without Jacobians; cheap path for the TO method."""
        pts, single = _as_points(points)
        if self.map_and_dot is not None:
            tx, td = self.map_and_dot(pts)
        else:
            tx, td = self.map(pts), self.map_dot(pts)
        return _maybe_squeeze(tx, single), _maybe_squeeze(td, single)


@dataclass(frozen=True)
class ModelFamily:
    """A curve eps -> T_eps of dynamics; ``at(0.0)`` is the base model."""

    name: str
    at: Callable[[float], DynamicsModel]

    @property
    def base(self) -> DynamicsModel:
        return self.at(0.0)


# -- closed-form maps --------------------------------------------------


def standard_map(a: float) -> DynamicsModel:
    """Chirikov standard map on the flat 2-torus of period 2*pi.

    T(x, y) = (x + y + a sin x, y + a sin x); the parameter derivative
    is taken with respect to the nonlinearity coefficient, so
    dT = (sin x, sin x) and dDT = [[cos x, 0], [cos x, 0]].
    Images are returned unfolded (the map commutes with the period
    lattice, which keeps mapped curves continuous in the plane).
    """

    def tmap(pts):
        pts, single = _as_points(pts)
        sx = np.sin(pts[:, 0])
        out = np.column_stack([pts[:, 0] + pts[:, 1] + a * sx, pts[:, 1] + a * sx])
        return _maybe_squeeze(out, single)

    def jac(pts):
        pts, single = _as_points(pts)
        c = a * np.cos(pts[:, 0])
        out = np.empty((pts.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 + c
        out[:, 0, 1] = 1.0
        out[:, 1, 0] = c
        out[:, 1, 1] = 1.0
        return _maybe_squeeze(out, single)

    def tdot(pts):
        pts, single = _as_points(pts)
        sx = np.sin(pts[:, 0])
        return _maybe_squeeze(np.column_stack([sx, sx]), single)

    def jacdot(pts):
        pts, single = _as_points(pts)
        cx = np.cos(pts[:, 0])
        out = np.zeros((pts.shape[0], 2, 2))
        out[:, 0, 0] = cx
        out[:, 1, 0] = cx
        return _maybe_squeeze(out, single)

    return DynamicsModel(
        name=f"standard_map(a={a})",
        map=tmap,
        jacobian=jac,
        map_dot=tdot,
        jacobian_dot=jacdot,
        periods=(2 * np.pi, 2 * np.pi),
    )


def identity_model(periods: tuple[float, float] | None = None) -> DynamicsModel:
    """Trivial dynamics T = id with zero parameter derivative."""

    def tmap(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(pts.copy(), single)

    def jac(pts):
        pts, single = _as_points(pts)
        out = np.broadcast_to(np.eye(2), (pts.shape[0], 2, 2)).copy()
        return _maybe_squeeze(out, single)

    def zero_vec(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(np.zeros_like(pts), single)

    def zero_mat(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(np.zeros((pts.shape[0], 2, 2)), single)

    return DynamicsModel(
        name="identity",
        map=tmap,
        jacobian=jac,
        map_dot=zero_vec,
        jacobian_dot=zero_mat,
        periods=periods,
    )


# -- ODE flow maps -----------------------------------------------------


@dataclass(frozen=True)
class FlowSpec:
    """Nonautonomous planar velocity field with integration window.

    ``velocity(points, t)`` maps (n, 2) -> (n, 2); ``velocity_jacobian``
    gives the spatial derivative (n, 2, 2).  Integration runs from t0
    to t1 with the given adaptive-RK tolerances.
    """

    velocity: Callable[[np.ndarray, float], np.ndarray]
    velocity_jacobian: Callable[[np.ndarray, float], np.ndarray]
    t0: float
    t1: float
    atol: float = 1e-9
    rtol: float = 1e-9


def _integrate(spec: FlowSpec, state0: np.ndarray, rhs) -> np.ndarray:
    if spec.t1 == spec.t0:
        return state0
    sol = solve_ivp(
        rhs,
        (spec.t0, spec.t1),
        state0.ravel(),
        method="RK45",
        rtol=spec.rtol,
        atol=spec.atol,
        dense_output=False,
    )
    if not sol.success:
        y = sol.y[:, -1].reshape(state0.shape)
        bad = np.where(~np.isfinite(y).all(axis=tuple(range(1, y.ndim))))[0]
        where = f" near point index {bad[0]}" if bad.size else ""
        raise IntegrationError(f"flow integration failed: {sol.message}{where}")
    return sol.y[:, -1].reshape(state0.shape)


def flow_map(spec: FlowSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Flow map and its spatial Jacobian at ``x``.

    Integrates the trajectory jointly with the matrix variational
    equation dY/dt = Dv(x(t), t) Y, Y(t0) = I.  Batches integrate as a
    single system, so the adaptive step is shared across points.
    """
    pts, single = _as_points(x)
    n = pts.shape[0]
    state0 = np.zeros((n, 6))
    state0[:, :2] = pts
    state0[:, 2] = 1.0
    state0[:, 5] = 1.0

    def rhs(t, y):
        s = y.reshape(n, 6)
        pos = s[:, :2]
        yy = s[:, 2:].reshape(n, 2, 2)
        dv = spec.velocity_jacobian(pos, t)
        out = np.empty_like(s)
        out[:, :2] = spec.velocity(pos, t)
        out[:, 2:] = np.einsum("nij,njk->nik", dv, yy).reshape(n, 4)
        return out.ravel()

    final = _integrate(spec, state0, rhs)
    tx = final[:, :2]
    jac = final[:, 2:].reshape(n, 2, 2)
    return _maybe_squeeze(tx, single), _maybe_squeeze(jac, single)


def flow_endpoints(spec: FlowSpec, x) -> np.ndarray:
    """Flow map alone (no variational equation); used by the TO method."""
    pts, single = _as_points(x)
    n = pts.shape[0]

    def rhs(t, y):
        return spec.velocity(y.reshape(n, 2), t).ravel()

    return _maybe_squeeze(_integrate(spec, pts.copy(), rhs), single)


def flow_time_model(spec: FlowSpec, frame: str = "lagrangian") -> DynamicsModel:
    """Dynamics model whose perturbation parameter is the flow time.

    T(x) is the flow from t0 to t1 and dT is the time derivative of the
    endpoint: with ``frame="lagrangian"`` (default) dT(x) = v(T(x), t1),
    the velocity of the trajectory through x at arrival.  The
    alternative ``frame="eulerian"`` evaluates v(x, t1) at the query
    point itself, for callers that pass image-frame points.  dDT uses
    the chain rule with the analytic velocity Jacobian:
    dDT(x) = Dv(T(x), t1) DT(x).
    """
    if frame not in ("lagrangian", "eulerian"):
        raise ValueError(f"unknown frame {frame!r}")

    def full(pts):
        tx, jac = flow_map(spec, pts)
        base = tx if frame == "lagrangian" else pts
        td = spec.velocity(base, spec.t1)
        dtd = np.einsum("nij,njk->nik", spec.velocity_jacobian(tx, spec.t1), jac)
        return tx, jac, td, dtd

    def pair(pts):
        tx = flow_endpoints(spec, pts)
        base = tx if frame == "lagrangian" else pts
        return tx, spec.velocity(base, spec.t1)

    def tmap(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(flow_endpoints(spec, pts), single)

    def jac(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(flow_map(spec, pts)[1], single)

    def tdot(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(pair(pts)[1], single)

    def jacdot(pts):
        pts, single = _as_points(pts)
        return _maybe_squeeze(full(pts)[3], single)

    return DynamicsModel(
        name=f"flow(t0={spec.t0}, t1={spec.t1})",
        map=tmap,
        jacobian=jac,
        map_dot=tdot,
        jacobian_dot=jacdot,
        full_eval=full,
        map_and_dot=pair,
    )


def double_gyre_spec(t0: float = 0.0, t1: float = 1.0, atol: float = 1e-9, rtol: float = 1e-9) -> FlowSpec:
    """Transitory double gyre on the unit square.

    Stream function psi = (1 - s(t)) sin(2 pi x) sin(pi y)
    + s(t) sin(pi x) sin(2 pi y) with the cubic transition
    s(t) = t^2 (3 - 2t) on [0, 1] (0 before, 1 after).  The velocity is
    the Hamiltonian field x' = -d(psi)/dy, y' = d(psi)/dx, which keeps
    the flow tangent to the boundary and volume-preserving.
    """

    def blend(t: float) -> float:
        if t < 0.0:
            return 0.0
        if t > 1.0:
            return 1.0
        return t * t * (3.0 - 2.0 * t)

    pi = np.pi

    def velocity(pts, t):
        pts, single = _as_points(pts)
        s = blend(t)
        x, y = pts[:, 0], pts[:, 1]
        # psi_y for each gyre
        py_p = pi * np.sin(2 * pi * x) * np.cos(pi * y)
        py_f = 2 * pi * np.sin(pi * x) * np.cos(2 * pi * y)
        px_p = 2 * pi * np.cos(2 * pi * x) * np.sin(pi * y)
        px_f = pi * np.cos(pi * x) * np.sin(2 * pi * y)
        u = -((1 - s) * py_p + s * py_f)
        v = (1 - s) * px_p + s * px_f
        return _maybe_squeeze(np.column_stack([u, v]), single)

    def velocity_jacobian(pts, t):
        pts, single = _as_points(pts)
        s = blend(t)
        x, y = pts[:, 0], pts[:, 1]
        pxx = -(1 - s) * 4 * pi**2 * np.sin(2 * pi * x) * np.sin(pi * y) - s * pi**2 * np.sin(pi * x) * np.sin(2 * pi * y)
        pyy = -(1 - s) * pi**2 * np.sin(2 * pi * x) * np.sin(pi * y) - s * 4 * pi**2 * np.sin(pi * x) * np.sin(2 * pi * y)
        pxy = (1 - s) * 2 * pi**2 * np.cos(2 * pi * x) * np.cos(pi * y) + s * 2 * pi**2 * np.cos(pi * x) * np.cos(2 * pi * y)
        out = np.empty((pts.shape[0], 2, 2))
        out[:, 0, 0] = -pxy
        out[:, 0, 1] = -pyy
        out[:, 1, 0] = pxx
        out[:, 1, 1] = pxy
        return _maybe_squeeze(out, single)

    return FlowSpec(
        velocity=velocity,
        velocity_jacobian=velocity_jacobian,
        t0=t0,
        t1=t1,
        atol=atol,
        rtol=rtol,
    )


# -- model registry ----------------------------------------------------


def standard_map_family(a: float = 0.98) -> ModelFamily:
    return ModelFamily(name="standard_map", at=lambda eps: standard_map(a + eps))


def double_gyre_family(
    t0: float = 0.0,
    t1: float = 0.6,
    atol: float = 1e-9,
    rtol: float = 1e-9,
    frame: str = "lagrangian",
) -> ModelFamily:
    def at(eps: float) -> DynamicsModel:
        spec = double_gyre_spec(t0=t0, t1=t1 + eps, atol=atol, rtol=rtol)
        return flow_time_model(spec, frame=frame)

    return ModelFamily(name="double_gyre", at=at)


def identity_family(periods: tuple[float, float] | None = None) -> ModelFamily:
    return ModelFamily(name="identity", at=lambda eps: identity_model(periods))


MODEL_REGISTRY: dict[str, Callable[..., ModelFamily]] = {
    "standard_map": standard_map_family,
    "double_gyre": double_gyre_family,
    "identity": identity_family,
}


def make_family(name: str, **params) -> ModelFamily:
    """Look up a built-in model family by name with keyword parameters."""
    try:
        builder = MODEL_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_REGISTRY))
        raise KeyError(f"unknown model {name!r}; known models: {known}") from None
    return builder(**params)
