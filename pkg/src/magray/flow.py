"""Magnetic geodesic flow: a batched adaptive Dormand-Prince integrator with exit
detection, the magnetic exponential map, Jacobi fields and a conjugate point scan."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import RK45

from .geometry import Disk, EuclideanMetric, MagneticSystem, _inv2, christoffel_from

# Dormand-Prince 5(4) tableau with its quartic continuous extension
_A = RK45.A
_B = RK45.B
_C = RK45.C
_E = RK45.E
_P = RK45.P
_NSTAGE = 6

RTOL = 1e-10
ATOL = 1e-10
H0 = 1e-4
T_MAX = 50.0


class EscapeError(RuntimeError):
    pass


class StiffnessError(RuntimeError):
    pass


# status codes of the batch engine
RUNNING, EXITED, REACHED, ESCAPED, STALLED = 0, 1, 2, 3, 4


# --------------------------------------------------------------------------
# right-hand sides


def acceleration(system: MagneticSystem, x, v):
    """x'' = -Gamma(v, v) + Y v"""
    if isinstance(system.metric, EuclideanMetric):
        return np.einsum("...ij,...j->...i", system.lorentz_matrix(x), v)
    # one metric evaluation shared by the Lorentz and Christoffel terms
    g, dg = system.metric.g_dg(x)
    ginv = _inv2(g)[0]
    Yv = np.einsum("...kj,...ij,...i->...k", ginv, system.omega(x), v)
    return Yv - np.einsum("...ijk,...j,...k->...i", christoffel_from(ginv, dg), v, v)


def geodesic_rhs(system: MagneticSystem, integrands=()):
    """Right side for states (x, v, q_1..q_m) with q_j' = integrands[j](x, v)."""

    def f(y):
        x, v = y[:, :2], y[:, 2:4]
        parts = [v, acceleration(system, x, v)]
        parts += [np.asarray(fn(x, v), float).reshape(-1, 1) for fn in integrands]
        return np.concatenate(parts, axis=1)

    return f


# --------------------------------------------------------------------------
# batch engine


def _rk_step(f, y, h, k0):
    """One DP5 step of size h (per row). Returns y_new, error estimate, stage matrix."""
    K = np.empty((_NSTAGE + 1,) + y.shape)
    K[0] = k0
    hh = h[:, None]
    for s in range(1, _NSTAGE):
        dy = np.tensordot(_A[s, :s], K[:s], axes=(0, 0)) * hh
        K[s] = f(y + dy)
    y_new = y + hh * np.tensordot(_B, K[:_NSTAGE], axes=(0, 0))
    K[-1] = f(y_new)
    err = hh * np.tensordot(_E, K, axes=(0, 0))
    return y_new, err, K


def dense_eval(y_old, h, K, theta):
    """Continuous extension at fraction theta in [0, 1] of a recorded step."""
    Q = np.tensordot(K, _P, axes=(0, 0))  # (D, 4)
    p = np.cumprod(np.full(4, theta))
    return y_old + h * Q @ p


@dataclass
class BatchResult:
    t: np.ndarray  # elapsed time magnitude at the end state
    y: np.ndarray  # end states
    status: np.ndarray
    n_steps: np.ndarray
    outputs: np.ndarray | None = None  # (B, M, D) states at requested times, NaN if not reached
    records: list | None = None  # per ray list of (t_old, h, y_old, K)

    @property
    def exited(self):
        return self.status == EXITED


def run_batch(
    f,
    y0,
    *,
    event=None,
    t_max=T_MAX,
    t_out=None,
    rtol=RTOL,
    atol=ATOL,
    h0=H0,
    sign=1.0,
    record=False,
    max_steps=200000,
    escape=None,
):
    """Integrate dy/dt = f(y) for a batch of initial states.

    ``event(y)`` is a scalar per row; the integration of a row stops at its first
    crossing from nonnegative to negative values, polished by regula falsi with fresh
    steps. ``t_out`` (B, M) holds nondecreasing output times hit exactly by clamping
    steps. ``sign=-1`` integrates backward in time; all times are magnitudes.
    ``escape(y)`` flags rows that left the computational region.
    """
    y = np.array(y0, float, copy=True)
    B, D = y.shape
    fs = (lambda z: -f(z)) if sign < 0 else f
    t = np.zeros(B)
    tm = np.broadcast_to(np.asarray(t_max, float), (B,)).copy()
    h = np.full(B, float(h0))
    status = np.zeros(B, int)
    n_steps = np.zeros(B, int)
    k = fs(y)
    outputs = None
    if t_out is not None:
        t_out = np.asarray(t_out, float)
        M = t_out.shape[1]
        outputs = np.full((B, M, D), np.nan)
        oi = np.zeros(B, int)
        # outputs at time zero
        while True:
            idx = np.nonzero((oi < M) & (t_out[np.arange(B), np.minimum(oi, M - 1)] <= 0.0))[0]
            if idx.size == 0:
                break
            outputs[idx, oi[idx]] = y[idx]
            oi[idx] += 1
    records = [[] for _ in range(B)] if record else None
    ev = event(y) if event is not None else None

    active = np.ones(B, bool)
    it = 0
    while True:
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        it += 1
        if it > max_steps:
            status[idx] = STALLED
            break
        target = tm[idx].copy()
        if outputs is not None:
            pending = oi[idx] < M
            nxt = np.where(pending, t_out[idx, np.minimum(oi[idx], M - 1)], np.inf)
            target = np.minimum(target, nxt)
        hi = np.minimum(h[idx], target - t[idx])
        clamped = hi >= target - t[idx]
        yi = y[idx]
        y_new, err, K = _rk_step(fs, yi, hi, k[idx])
        scale = atol + rtol * np.maximum(np.abs(yi), np.abs(y_new))
        en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        ok = en <= 1.0
        fac = np.where(en == 0, 5.0, np.clip(0.9 * np.where(en > 0, en, 1.0) ** -0.2, 0.2, 5.0))
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        if np.any(hi[~ok] < 1e-14):
            raise StiffnessError("step size underflow")

        acc = idx[ok]
        if acc.size:
            ya, Ka, ha = y_new[ok], K[:, ok], hi[ok]
            t_new = np.where(clamped[ok], target[ok], t[acc] + ha)
            exit_mask = np.zeros(acc.size, bool)
            if event is not None:
                ev_new = event(ya)
                exit_mask = (ev_new < 0) & (ev[acc] >= -1e-12)
            # rows that crossed the event inside this step
            if np.any(exit_mask):
                ex = np.nonzero(exit_mask)[0]
                rows = acc[ex]
                s_root, y_root = _polish(fs, event, y[rows], k[rows], np.maximum(ev[rows], 0.0), ha[ex], ev_new[ex])
                if record:
                    _, _, Kr = _rk_step(fs, y[rows], s_root, k[rows])
                    for jj, r in enumerate(rows):
                        records[r].append((t[r], s_root[jj], y[r].copy(), Kr[:, jj].copy()))
                t[rows] = t[rows] + s_root
                y[rows] = y_root
                status[rows] = EXITED
                active[rows] = False
                n_steps[rows] += 1
            keep = ~exit_mask
            rows = acc[keep]
            if rows.size:
                if record:
                    for j, r in zip(np.nonzero(keep)[0], rows):
                        records[r].append((t[r], ha[j], y[r].copy(), Ka[:, j].copy()))
                y[rows] = ya[keep]
                k[rows] = Ka[-1, keep]
                t[rows] = t_new[keep]
                n_steps[rows] += 1
                if event is not None:
                    ev[rows] = ev_new[keep]
                if outputs is not None:
                    hit = clamped[ok][keep] & (oi[rows] < M)
                    hit &= t_out[rows, np.minimum(oi[rows], M - 1)] <= t[rows]
                    while np.any(hit):
                        rr = rows[hit]
                        outputs[rr, oi[rr]] = y[rr]
                        oi[rr] += 1
                        hit = np.zeros(rows.size, bool)
                        still = oi[rows] < M
                        hit[still] = t_out[rows[still], oi[rows[still]]] <= t[rows[still]]
                done = t[rows] >= tm[rows]
                status[rows[done]] = REACHED
                active[rows[done]] = False
                if escape is not None:
                    esc = escape(y[rows]) & active[rows]
                    status[rows[esc]] = ESCAPED
                    active[rows[esc]] = False
        h[idx] = np.where(clamped & ok, np.maximum(h[idx], hi * fac), hi * fac)
    return BatchResult(t, y, status, n_steps, outputs, records)


def _polish(fs, event, y_old, k_old, f_a, h, f_b, tol=1e-13, maxit=60):
    """Regula falsi (Illinois) on s -> event(step(y_old, s)) over [0, h]."""
    n = y_old.shape[0]
    a = np.zeros(n)
    b = h.copy()
    fa = f_a.copy()
    fb = f_b.copy()
    s = b.copy()
    y_s = np.empty_like(y_old)
    y_s[:] = np.nan
    todo = np.ones(n, bool)
    for _ in range(maxit):
        idx = np.nonzero(todo)[0]
        if idx.size == 0:
            break
        den = fb[idx] - fa[idx]
        c = np.where(den != 0, b[idx] - fb[idx] * (b[idx] - a[idx]) / np.where(den != 0, den, 1.0), 0.5 * (a[idx] + b[idx]))
        c = np.clip(c, np.minimum(a[idx], b[idx]), np.maximum(a[idx], b[idx]))
        yc, _, _ = _rk_step(fs, y_old[idx], c, k_old[idx])
        fc = event(yc)
        s[idx] = c
        y_s[idx] = yc
        conv = (np.abs(fc) < tol) | (np.abs(b[idx] - a[idx]) < 1e-15)
        same = np.sign(fc) == np.sign(fb[idx])
        # Illinois update
        na = np.where(same, a[idx], b[idx])
        nfa = np.where(same, 0.5 * fa[idx], fb[idx])
        a[idx], fa[idx] = na, nfa
        b[idx], fb[idx] = c, fc
        todo[idx[conv]] = False
    return s, y_s


# --------------------------------------------------------------------------
# geodesic layer


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "xi", np.asarray(self.xi, float))


def _disk_event(domain: Disk):
    return lambda y: domain.rho(y[:, :2])


def _escape_fn(domain: Disk, factor=3.0):
    return lambda y: np.linalg.norm(y[:, :2], axis=1) > factor * domain.radius


def flow_batch(
    system: MagneticSystem,
    x,
    v,
    *,
    backward=False,
    until_exit=True,
    t_max=T_MAX,
    t_out=None,
    domain: Disk | None = None,
    rtol=RTOL,
    atol=ATOL,
    record=False,
    integrands=(),
):
    """Flow a batch of phase points (x, v) of shape (B, 2) each. Each entry of
    ``integrands`` is a function (x, v) -> (B,) integrated along the flow and appended
    to the state (in the time direction of travel)."""
    domain = domain or system.domain
    y0 = np.concatenate([np.atleast_2d(x), np.atleast_2d(v)], axis=1)
    if integrands:
        y0 = np.concatenate([y0, np.zeros((y0.shape[0], len(integrands)))], axis=1)
        # accumulators count along the direction of travel
        if backward:
            integrands = tuple((lambda fn: (lambda xx, vv: -fn(xx, vv)))(fn) for fn in integrands)
    return run_batch(
        geodesic_rhs(system, tuple(integrands)),
        y0,
        event=_disk_event(domain) if until_exit else None,
        t_max=t_max,
        t_out=t_out,
        rtol=rtol,
        atol=atol,
        sign=-1.0 if backward else 1.0,
        record=record,
        escape=_escape_fn(domain),
    )


def exit_times(system: MagneticSystem, x, v, *, backward=False, domain=None, rtol=RTOL, atol=ATOL):
    """Forward exit time l (or |l^-| if backward) and exit states for a batch."""
    res = flow_batch(system, x, v, backward=backward, domain=domain, rtol=rtol, atol=atol)
    return res.t, res.y[:, :2], res.y[:, 2:], res.status


def states_at(system: MagneticSystem, x, v, times, *, backward=False, rtol=RTOL, atol=ATOL):
    """States (B, M, 4) at nondecreasing times (B, M), ignoring the boundary."""
    times = np.atleast_2d(times)
    res = flow_batch(
        system, x, v, backward=backward, until_exit=False, t_max=times[:, -1], t_out=times, rtol=rtol, atol=atol
    )
    return res.outputs


@dataclass
class GeodesicSolution:
    """Magnetic geodesic on [t_minus, t_plus] with dense output."""

    system: MagneticSystem
    start: PhasePoint
    t_minus: float
    t_plus: float
    forward: list
    backward: list
    exit_state: np.ndarray
    entry_state: np.ndarray
    stats: dict = field(default_factory=dict)

    def _eval_one(self, t):
        recs, tt = (self.forward, t) if t >= 0 else (self.backward, -t)
        if t == 0 or not recs:
            return np.concatenate([self.start.x, self.start.xi])
        starts = np.array([r[0] for r in recs])
        j = int(np.clip(np.searchsorted(starts, tt, side="right") - 1, 0, len(recs) - 1))
        t0, h, y0, K = recs[j]
        if tt >= t0 + h and j == len(recs) - 1:
            end = self.exit_state if t >= 0 else self.entry_state
            if tt - (t0 + h) <= 1e-12 or np.isclose(tt, self.t_plus if t >= 0 else -self.t_minus, atol=1e-12):
                y = end.copy()
                return y if t >= 0 else y
        y = dense_eval(y0, h, K, min((tt - t0) / h, 1.0))
        return y

    def __call__(self, t):
        """States (..., 4) = (x, xi) at times t in [t_minus, t_plus]."""
        t = np.asarray(t, float)
        out = np.array([self._eval_one(float(s)) for s in t.ravel()])
        return out.reshape(t.shape + (4,))

    def position(self, t):
        return self(t)[..., :2]

    def velocity(self, t):
        return self(t)[..., 2:]

    @property
    def length(self):
        return self.t_plus - self.t_minus

    def to_csv(self, path, n=201):
        ts = np.linspace(self.t_minus, self.t_plus, n)
        Y = self(ts)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "xi1", "xi2"])
            for t, row in zip(ts, Y):
                w.writerow([f"{t:.12g}"] + [f"{c:.12g}" for c in row])


def integrate(system: MagneticSystem, start: PhasePoint, horizon=None, *, rtol=RTOL, atol=ATOL, check_speed=True):
    """Integrate a magnetic geodesic.

    With ``horizon=None`` the geodesic runs in both directions until it leaves the
    domain; with a numeric horizon T it runs forward on [0, T] regardless of the
    boundary.
    """
    x0, v0 = start.x[None], start.xi[None]
    if horizon is None:
        fw = flow_batch(system, x0, v0, rtol=rtol, atol=atol, record=True)
        bw = flow_batch(system, x0, v0, backward=True, rtol=rtol, atol=atol, record=True)
    else:
        fw = flow_batch(system, x0, v0, until_exit=False, t_max=float(horizon), rtol=rtol, atol=atol, record=True)
        bw = None
    for res in (fw, bw):
        if res is not None and res.status[0] == ESCAPED:
            raise EscapeError("trajectory left the computational region without crossing the boundary")
    fwd = fw.records[0]
    bwd = []
    t_minus = 0.0
    entry = np.concatenate([start.x, start.xi])
    if bw is not None:
        bwd = bw.records[0]
        t_minus = -bw.t[0]
        entry = bw.y[0].copy()
    sol = GeodesicSolution(system, start, t_minus, float(fw.t[0]), fwd, bwd, fw.y[0].copy(), entry)
    sol.stats = {"steps": int(fw.n_steps[0] + (bw.n_steps[0] if bw is not None else 0)), "status": int(fw.status[0])}
    if check_speed:
        ts = np.linspace(sol.t_minus, sol.t_plus, 64)
        Y = sol(ts)
        sp = system.norm(Y[:, :2], Y[:, 2:])
        sol.stats["max_speed_drift"] = float(np.max(np.abs(sp - sp[np.argmin(np.abs(ts))])))
    return sol


def exit_time(system: MagneticSystem, start: PhasePoint, direction="forward", *, rtol=RTOL, atol=ATOL, graze_tol=1e-4):
    """Exit time l (forward) or l^- <= 0 (backward), plus a grazing flag for boundary starts."""
    backward = direction == "backward"
    t, _, _, status = exit_times(system, start.x[None], start.xi[None], backward=backward, rtol=rtol, atol=atol)
    if status[0] == ESCAPED:
        raise EscapeError("trajectory left the computational region without crossing the boundary")
    grazing = False
    if abs(system.domain.rho(start.x)) < 1e-9:
        c = system.inner(start.x, start.xi, system.inward_normal(start.x))
        grazing = bool(abs(c) < graze_tol)
    val = -float(t[0]) if backward else float(t[0])
    return ExitTime(val, grazing, int(status[0]))


@dataclass(frozen=True)
class ExitTime:
    value: float
    grazing: bool
    status: int

    def __float__(self):
        return self.value


def magnetic_exp(system: MagneticSystem, x, t, v, *, rtol=RTOL, atol=ATOL):
    """pi(psi^t(x, v)) in the (t, v) parameterization; v is normalized to unit length."""
    x = np.asarray(x, float)
    v = system.normalize(x, np.asarray(v, float))
    if t == 0:
        return x.copy()
    out = states_at(system, x[None], v[None], np.array([[float(t)]]), rtol=rtol, atol=atol)
    return out[0, 0, :2]


# --------------------------------------------------------------------------
# Jacobi fields

FD_STEP_Y = 1e-5
FD_STEP_K = 1e-4


def gauss_curvature(system: MagneticSystem, x, step=FD_STEP_K):
    """Gauss curvature from centered differences of the Christoffel symbols."""
    x = np.asarray(x, float)
    G = system.christoffel(x)
    dG = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        dG.append((system.christoffel(x + e) - system.christoffel(x - e)) / (2 * step))
    dG = np.stack(dG, axis=-4)  # [k, i, j, l] = d_k Gamma^i_jl
    # R^i_{jkl} = d_k G^i_lj - d_l G^i_kj + G^i_km G^m_lj - G^i_lm G^m_kj ; need R^i_{212} with (j,k,l)=(2,1,2)
    j, kk, ll = 1, 0, 1
    R = (
        dG[..., kk, :, ll, j]
        - dG[..., ll, :, kk, j]
        + np.einsum("...im,...m->...i", G[..., :, kk, :], G[..., :, ll, j])
        - np.einsum("...im,...m->...i", G[..., :, ll, :], G[..., :, kk, j])
    )  # R^i_{212}
    g = system.g(x)
    R1212 = np.einsum("...i,...i->...", g[..., 0, :], R)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
    return R1212 / det


def nabla_lorentz(system: MagneticSystem, x, step=FD_STEP_Y):
    """(nabla_k Y)^i_j as an array [..., k, i, j] via centered differences."""
    x = np.asarray(x, float)
    dY = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        dY.append((system.lorentz_matrix(x + e) - system.lorentz_matrix(x - e)) / (2 * step))
    dY = np.stack(dY, axis=-3)
    Y = system.lorentz_matrix(x)
    G = system.christoffel(x)
    return dY + np.einsum("...ikm,...mj->...kij", G, Y) - np.einsum("...mkj,...im->...kij", G, Y)


def curvature_term(system: MagneticSystem, x, v, J, K=None):
    """R(J, v) v = K (|v|^2 J - <J, v> v) in two dimensions."""
    if K is None:
        K = gauss_curvature(system, x)
    vv = system.inner(x, v, v)
    jv = system.inner(x, J, v)
    return K[..., None] * (vv[..., None] * J - jv[..., None] * v)


def jacobi_rhs(system: MagneticSystem):
    """State (x, v, J, P) with P = D_t J. Right side of the magnetic Jacobi system."""

    def f(y):
        x, v, J, P = y[:, 0:2], y[:, 2:4], y[:, 4:6], y[:, 6:8]
        G = system.christoffel(x)
        Y = system.lorentz_matrix(x)
        dv = np.einsum("...ij,...j->...i", Y, v) - np.einsum("...ijk,...j,...k->...i", G, v, v)
        nY = nabla_lorentz(system, x)
        DP = -curvature_term(system, x, v, J) + np.einsum("...ij,...j->...i", Y, P)
        DP = DP + np.einsum("...k,...kij,...j->...i", J, nY, v)
        dJ = P - np.einsum("...ijk,...j,...k->...i", G, v, J)
        dP = DP - np.einsum("...ijk,...j,...k->...i", G, v, P)
        return np.concatenate([v, dv, dJ, dP], axis=1)

    return f


@dataclass
class JacobiSolution:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    J: np.ndarray
    DJ: np.ndarray  # covariant derivative along the host
    J0: np.ndarray
    DJ0: np.ndarray

    def residual(self, system: MagneticSystem):
        """Finite-difference re-substitution residual of the Jacobi equation at interior samples
        (requires a uniform time grid)."""
        dt = self.t[1] - self.t[0]
        J = self.J
        Jd = (J[2:] - J[:-2]) / (2 * dt)
        Jdd = (J[2:] - 2 * J[1:-1] + J[:-2]) / dt**2
        x, v = self.x[1:-1], self.v[1:-1]
        G = system.christoffel(x)
        Y = system.lorentz_matrix(x)
        a = np.einsum("...ij,...j->...i", Y, v) - np.einsum("...ijk,...j,...k->...i", G, v, v)  # v'
        Jc = J[1:-1]
        # D_t J and D_t^2 J in coordinates
        DJ = Jd + np.einsum("...ijk,...j,...k->...i", G, v, Jc)
        dG = np.einsum("...kijl,...k->...ijl", _dchristoffel(system, x), v)
        DDJ = (
            Jdd
            + np.einsum("...ijk,...j,...k->...i", dG, v, Jc)
            + np.einsum("...ijk,...j,...k->...i", G, a, Jc)
            + np.einsum("...ijk,...j,...k->...i", G, v, Jd)
            + np.einsum("...ijk,...j,...k->...i", G, v, DJ)
        )
        nY = nabla_lorentz(system, x)
        res = DDJ + curvature_term(system, x, v, Jc) - np.einsum("...ij,...j->...i", Y, DJ)
        res = res - np.einsum("...k,...kij,...j->...i", Jc, nY, v)
        return float(np.max(np.abs(res)))


def _dchristoffel(system, x, step=FD_STEP_K):
    out = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        out.append((system.christoffel(x + e) - system.christoffel(x - e)) / (2 * step))
    return np.stack(out, axis=-4)


def jacobi_batch(system: MagneticSystem, x, v, J0, DJ0, times, rtol=1e-9, atol=1e-11):
    """Jacobi fields for a batch of hosts sampled at times (B, M) >= 0."""
    y0 = np.concatenate([x, v, J0, DJ0], axis=1)
    times = np.atleast_2d(times)
    res = run_batch(jacobi_rhs(system), y0, t_max=times[:, -1], t_out=times, rtol=rtol, atol=atol)
    return res.outputs


def jacobi(system: MagneticSystem, host: GeodesicSolution, J0, DJ0, n=201, rtol=1e-9, atol=1e-11):
    """Jacobi field along the forward part [0, host.t_plus] of the host geodesic, with
    J(0) = J0 and D_t J(0) = DJ0."""
    J0 = np.asarray(J0, float)
    DJ0 = np.asarray(DJ0, float)
    t = np.linspace(0.0, host.t_plus, n)
    out = jacobi_batch(system, host.start.x[None], host.start.xi[None], J0[None], DJ0[None], t[None], rtol, atol)[0]
    return JacobiSolution(t, out[:, :2], out[:, 2:4], out[:, 4:6], out[:, 6:8], J0, DJ0)


@dataclass
class ConjugateReport:
    first_time: np.ndarray  # NaN where no degeneracy was found
    chord_time: np.ndarray
    min_det: np.ndarray

    @property
    def any_conjugate(self):
        return bool(np.any(np.isfinite(self.first_time)))


def conjugate_point_scan(system: MagneticSystem, x, v, n_t=400, threshold=1e-8, t_min=1e-3):
    """For each host (x, v), evolve J with J(0) = 0, D_t J(0) = v_perp and report the first
    time at which det[gamma_dot, J] degenerates (sign change or below threshold)."""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    ell, _, _, _ = exit_times(system, x, v)
    B = x.shape[0]
    times = ell[:, None] * np.linspace(0, 1, n_t)[None, :]
    out = jacobi_batch(system, x, v, np.zeros_like(x), system.perp(x, v), times)
    xs, vs, Js = out[..., :2], out[..., 2:4], out[..., 4:6]
    det = (vs[..., 0] * Js[..., 1] - vs[..., 1] * Js[..., 0]) * system.sqrt_det(xs)
    first = np.full(B, np.nan)
    mins = np.full(B, np.inf)
    for b in range(B):
        ok = times[b] > t_min
        d = det[b]
        mins[b] = d[ok].min() if ok.any() else np.inf
        bad = np.nonzero(ok & (d <= threshold))[0]
        if bad.size:
            j = bad[0]
            if j > 0 and d[j - 1] > threshold:
                # linear interpolation of the crossing
                first[b] = times[b, j - 1] + (times[b, j] - times[b, j - 1]) * (d[j - 1] - threshold) / (d[j - 1] - d[j])
            else:
                first[b] = times[b, j]
    return ConjugateReport(first, ell, mins)


def flow_convexity_margin(system: MagneticSystem, x, xi, dt=1e-3):
    """-d^2/dt^2 rho(gamma(t)) at t = 0 from a symmetric second difference of the flow."""
    x = np.atleast_2d(x)
    xi = np.atleast_2d(xi)
    fw = states_at(system, x, xi, np.full((x.shape[0], 1), dt), rtol=1e-13, atol=1e-14)[:, 0, :2]
    bw = states_at(system, x, xi, np.full((x.shape[0], 1), dt), backward=True, rtol=1e-13, atol=1e-14)[:, 0, :2]
    rd = system.domain
    # rho is not smooth at the origin, but near the boundary it is; use the smooth extension 1 - |x|
    return -(rd.rho(fw) - 2 * rd.rho(x) + rd.rho(bw)) / dt**2
