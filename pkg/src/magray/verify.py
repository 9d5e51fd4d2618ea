"""Identity checks run by the ``verify`` command. Each check returns a CheckResult with the
measured value, its threshold and a pass flag; resolutions are moderate so a full run on
one system takes a few minutes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import fields as F
from .analysis import index_positivity_trial, k_bound, k_mu, symbol_sweep
from .boundary import action_batch, gauge_transform, interior_action, reversibility_residual, simplicity_report
from .geometry import MagneticSystem
from .surface2d import (
    FiberGrid,
    FlowConstantData,
    commutation_residual,
    fundamental_residual,
    main_identity_residual,
    sample_fiber_function,
)
from .transform import Fan, adjoint, disk_quadrature, pair_pairing, random_bump_pair, ray_transform, santalo_check

DEFAULT_TOLERANCES = {
    "santalo": 1e-3,
    "gauge": 1e-5,
    "gauge_witness": 1e-3,
    "reversible": 1e-6,
    "irreversible": 0.05,
    "duality": 1e-3,
    "commutation": 1e-2,
    "index_failures": 0,
    "curvature": 4.0,
    "symbols_diag": (-1.3, -0.7),
    "symbols_off": -1.7,
    "fundamental": 1e-3,
    "main": 5e-2,
}

CHECKS = ("santalo", "gauge", "reversibility", "duality", "commutation", "index", "curvature", "symbols", "fundamental", "main")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: object
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["value"] = float(self.value)
        return d


def _is_closed_field(system: MagneticSystem, n=64):
    """True when d alpha vanishes on a sample grid (reversible systems)."""
    g = np.linspace(-0.9, 0.9, 9)
    X = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    X = X[np.linalg.norm(X, axis=1) < 0.95]
    return bool(np.max(np.abs(system.lam(X))) < 1e-12)


def check_santalo(system, tol, rng):
    lhs, rhs = santalo_check(system, lambda x, v: np.ones(x.shape[:-1]), Fan.build(system, 96, 64))
    rel = abs(lhs - rhs) / abs(lhs)
    return CheckResult("santalo", rel <= tol["santalo"], rel, tol["santalo"])


def check_gauge(system, tol, rng):
    f = F.RadialDiffeo(0.2)
    phi = F.gaussian_bump((0.2, -0.1), 0.3, 0.5)
    other = gauge_transform(system, f, phi)
    px = rng.uniform(0, 2 * np.pi, 20)
    py = px + rng.uniform(0.5, 2 * np.pi - 0.5, 20)
    a0 = action_batch(system, px, py)[0]
    a1 = action_batch(other, px, py)[0]
    gap = float(np.max(np.abs(a0 - a1)))
    x, y = np.array([0.2, -0.1]), np.array([-0.4, 0.3])  # x at the gauge bump centre
    witness = abs(interior_action(system, x, y) - interior_action(other, x, y))
    ok = gap <= tol["gauge"] and witness > tol["gauge_witness"]
    return CheckResult("gauge", ok, gap, tol["gauge"], {"interior_witness": witness})


def check_reversibility(system, tol, rng):
    phi = rng.uniform(0, 2 * np.pi, 64)
    th = rng.uniform(-1.3, 1.3, 64)
    r = reversibility_residual(system, phi, th)
    if _is_closed_field(system):
        return CheckResult("reversibility", r <= tol["reversible"], r, tol["reversible"], {"expected": "reversible"})
    return CheckResult("reversibility", r >= tol["irreversible"], r, tol["irreversible"], {"expected": "irreversible"})


def check_duality(system, tol, rng, n_pairs=5):
    fan = Fan.build(system, 96, 64)
    quad = disk_quadrature(system, 24, 48)
    psi = lambda ph, th: np.cos(ph) * np.cos(th) ** 3 + 0.5 * np.sin(2 * ph) * np.sin(th)
    psi_vals = psi(fan.phi, fan.theta)
    adj = adjoint(system, psi, quad.points, n_fiber=128)
    worst = 0.0
    for _ in range(n_pairs):
        f = random_bump_pair(rng)
        lhs = float(np.sum(fan.weights * ray_transform(system, f, fan).values * psi_vals))
        rhs = pair_pairing(system, f, adj, quad)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    return CheckResult("duality", worst <= tol["duality"], worst, tol["duality"])


def _commutation_families():
    f1 = lambda x, t: np.exp(-np.sum((x - np.array([0.1, 0.05])) ** 2, -1) / 0.08)
    f2 = lambda x, t: np.exp(-np.sum(x**2, -1) / 0.08) * (np.cos(t) * (1 + x[..., 0]) + np.sin(t) * x[..., 1] ** 2)
    return f1, f2


def check_commutation(system, tol, rng, h=0.025):
    worst, ratios = 0.0, []
    for fn in _commutation_families():
        r = [commutation_residual(system, sample_fiber_function(system, FiberGrid(s, 0.8, 16), fn), radius=0.75) for s in (h, h / 2)]
        worst = max(worst, r[1])
        ratios.append(r[0] / r[1])
    ok = worst <= tol["commutation"] and min(ratios) >= 3
    return CheckResult("commutation", ok, worst, tol["commutation"], {"refinement_ratios": ratios})


def check_index(system, tol, rng, n_trials=200):
    tr = index_positivity_trial(system, n_trials, seed=int(rng.integers(2**31)))
    return CheckResult("index", tr.failures <= tol["index_failures"], tr.failures, tol["index_failures"], {"min_value": tr.min_value})


def check_curvature(system, tol, rng):
    rep = k_bound(system)
    return CheckResult("curvature", rep.passed, rep.k, tol["curvature"], rep.to_dict())


def check_symbols(system, tol, rng):
    sw = symbol_sweep(system)
    ok = sw.passed(tuple(tol["symbols_diag"]), tol["symbols_off"])
    worst_off = max(sw.slopes["N12"], sw.slopes["N21"])
    return CheckResult("symbols", ok, worst_off, tol["symbols_off"], {"slopes": sw.slopes, "identically_zero": sw.identically_zero})


def check_fundamental(system, tol, rng, n_funcs=3):
    fan = Fan.build(system, 48, 24)
    worst = 0.0
    for _ in range(n_funcs):
        a, b, c = rng.normal(size=3)
        u = lambda x, t, a=a, b=b, c=c: np.sin(a * x[..., 0] + t) * np.cos(b * x[..., 1]) + c * x[..., 0] * np.cos(2 * t)
        worst = max(worst, fundamental_residual(system, u, fan)[0])
    return CheckResult("fundamental", worst <= tol["fundamental"], worst, tol["fundamental"])


def check_main(system, tol, rng):
    w = FlowConstantData.random(system, rng)
    reps = [main_identity_residual(system, w, level=L) for L in (0, 1)]
    r = [rep.residual for rep in reps]
    ok = r[1] <= tol["main"] and r[1] < r[0]
    return CheckResult("main", ok, r[1], tol["main"], {"residuals": r, "constant_fit": reps[1].constant_fit})


_FUNCS = {
    "santalo": check_santalo,
    "gauge": check_gauge,
    "reversibility": check_reversibility,
    "duality": check_duality,
    "commutation": check_commutation,
    "index": check_index,
    "curvature": check_curvature,
    "symbols": check_symbols,
    "fundamental": check_fundamental,
    "main": check_main,
}


def simplicity_gate(system: MagneticSystem):
    rep = simplicity_report(system)
    return CheckResult("simplicity", rep.simple, rep.min_margin, 0.0, {"convex": rep.convex, "conjugate_free": rep.conjugate_free, **rep.details})


def run_checks(system: MagneticSystem, names=CHECKS, tolerances=None, seed=0, log=None):
    """Simplicity gate, then the requested checks. Returns the list of results; when the
    gate fails the downstream checks are skipped."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    rng = np.random.default_rng(seed)
    gate = simplicity_gate(system)
    results = [gate]
    if log:
        log(gate)
    if not gate.passed:
        return results
    for name in names:
        res = _FUNCS[name](system, tol, rng)
        results.append(res)
        if log:
            log(res)
    return results


def k_mu_closed_form_gap(lam, n=32, seed=0):
    """max |k_mu - 6 lambda^2| on random unit vectors of the constant-field disk."""
    from .geometry import constant_field_system

    rng = np.random.default_rng(seed)
    s = constant_field_system(lam)
    r = np.sqrt(rng.uniform(0, 0.81, n))
    a = rng.uniform(0, 2 * np.pi, n)
    x = np.stack([r * np.cos(a), r * np.sin(a)], -1)
    xi = s.unit_vector(x, rng.uniform(0, 2 * np.pi, n))
    return float(np.max(np.abs(k_mu(s, x, xi) - 6 * lam**2)))
