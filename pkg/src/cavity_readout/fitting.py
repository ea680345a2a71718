"""Least-squares recovery of coupling, bare-cyclicity and relaxation parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import spin_model as sm

SCHEMA_VERSION = 1


class FitError(RuntimeError):
    pass


@dataclass
class DataSeries:
    """Measured series. `x` is (N,) or (N, 2) for (phi, theta) pairs in degrees."""

    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | None = None
    kind: str = "generic"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.y.shape:
                raise ValueError("sigma and y lengths differ")
            if np.any(self.sigma <= 0):
                raise ValueError("sigma must be positive")
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if np.any(~(self.y > 0)):
            raise ValueError("y values must be positive")

    def __len__(self):
        return len(self.y)


@dataclass
class FitReport:
    params: dict[str, float]
    uncertainties: dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    warnings: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def reliable(self) -> bool:
        return self.converged and not any(w.startswith("unreliable") for w in self.warnings)

    def interval(self, name: str, n_sigma: float = 1.0) -> tuple[float, float]:
        v, s = self.params[name], self.uncertainties[name]
        return v - n_sigma * s, v + n_sigma * s

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "params": {k: _json_float(v) for k, v in self.params.items()},
            "uncertainties": {k: _json_float(v) for k, v in self.uncertainties.items()},
            "residual_norm": _json_float(self.residual_norm),
            "converged": self.converged,
            "reliable": self.reliable,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }
        return out


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _jacobian(fun, p, f0):
    jac = np.empty((len(f0), len(p)))
    for i in range(len(p)):
        h = 1e-6 * max(abs(p[i]), 1e-3)
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        jac[:, i] = (fun(up) - fun(dn)) / (2 * h)
    return jac


def _checked(fun, names):
    def wrapped(p):
        r = np.asarray(fun(p), dtype=float)
        if not np.all(np.isfinite(r)):
            ctx = ", ".join(f"{n}={v:.6g}" for n, v in zip(names, p))
            raise FitError(f"model returned non-finite values at {ctx}")
        return r
    return wrapped


def _levenberg_marquardt(res, p, max_iter, rtol=1e-10, xtol=1e-12):
    r = res(p)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = _jacobian(res, p, r)
        jtj = jac.T @ jac
        grad = jac.T @ r
        if not np.any(grad):
            converged = True
            break
        improved = False
        while lam < 1e16:
            damp = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-30))
            try:
                step = -np.linalg.solve(damp, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(damp, grad, rcond=None)[0]
            trial = p + step
            try:
                r_new = res(trial)
            except FitError:
                lam *= 10
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                small_step = np.linalg.norm(step) <= xtol * (np.linalg.norm(p) + xtol)
                small_change = (cost - cost_new) <= rtol * cost
                p, r, cost = trial, r_new, cost_new
                lam = max(lam / 10, 1e-12)
                improved = True
                if small_step or small_change:
                    converged = True
                break
            lam *= 10
        if not improved:
            # no descent direction left at working precision
            converged = True
        if converged:
            break
    return p, r, it, converged


def solve(
    model_fn: Callable[[np.ndarray], np.ndarray],
    target: np.ndarray,
    p0: Sequence[float],
    names: Sequence[str],
    scale: np.ndarray | None = None,
    absolute_sigma: bool = False,
    max_iter: int = 200,
    simplex: bool = True,
    bootstrap: int = 0,
    seed: int = 0,
) -> FitReport:
    """Minimise sum(((target - model_fn(p)) / scale)**2).

    Nelder-Mead first (skipped with `simplex=False`), then a Levenberg-Marquardt
    polish with a central-difference Jacobian. Convergence: relative cost change
    below 1e-10 or step below 1e-12. Uncertainties come from the Jacobian
    covariance, or from `bootstrap` residual resamplings when that is non-zero.
    """
    p0 = np.asarray(p0, dtype=float)
    if not np.all(np.isfinite(p0)):
        raise FitError(f"non-finite initial parameters {p0}")
    target = np.asarray(target, dtype=float)
    scale = np.ones_like(target) if scale is None else np.asarray(scale, dtype=float)
    model = _checked(model_fn, names)
    res = lambda p: (target - model(p)) / scale  # noqa: E731

    p, nm_iter = p0, 0
    res(p0)
    if simplex:
        def cost(q):
            try:
                r = res(q)
            except FitError:
                return np.inf
            return float(r @ r)
        nm = optimize.minimize(
            cost, p0, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 200 * len(p0)},
        )
        nm_iter = int(nm.nit)
        if np.isfinite(nm.fun) and nm.fun <= cost(p0):
            p = nm.x
    p, r, lm_iter, converged = _levenberg_marquardt(res, p, max_iter)

    jac = _jacobian(res, p, r)
    n, k = len(r), len(p)
    rss = float(r @ r)
    dof = max(n - k, 1)
    notes = []
    try:
        cov = np.linalg.pinv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((k, k), np.nan)
    if not absolute_sigma:
        cov = cov * rss / dof
    errs = np.sqrt(np.clip(np.diag(cov), 0, None))

    if bootstrap:
        rng = np.random.default_rng(seed)
        fitted = model(p)
        resid = (target - fitted) / scale
        samples = []
        for _ in range(bootstrap):
            fake = fitted + rng.choice(resid, size=n, replace=True) * scale
            fake_res = lambda q, fake=fake: (fake - model(q)) / scale  # noqa: E731
            q, _, _, _ = _levenberg_marquardt(fake_res, p.copy(), max_iter)
            samples.append(q)
        errs = np.std(np.array(samples), axis=0, ddof=1)

    if not converged:
        notes.append(f"unreliable: no convergence after {max_iter} iterations")
    return FitReport(
        params=dict(zip(names, map(float, p))),
        uncertainties=dict(zip(names, map(float, errs))),
        residual_norm=math.sqrt(rss),
        converged=converged,
        iterations=nm_iter + lm_iter,
        warnings=notes,
        extra={"covariance": cov},
    )


def least_squares(
    model: Callable[[np.ndarray, np.ndarray], np.ndarray],
    params0: Sequence[float],
    data: DataSeries,
    names: Sequence[str] | None = None,
    log_residuals: bool = False,
    **kwargs,
) -> FitReport:
    """Fit `model(x, params)` to a DataSeries (weighted by sigma when present)."""
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params0))]
    if log_residuals:
        target = np.log(data.y)
        model_fn = lambda p: np.log(model(data.x, p))  # noqa: E731
        scale = None if data.sigma is None else data.sigma / data.y
    else:
        target = data.y
        model_fn = lambda p: model(data.x, p)  # noqa: E731
        scale = data.sigma
    kwargs.setdefault("absolute_sigma", data.sigma is not None)
    return solve(model_fn, target, params0, names, scale=scale, **kwargs)


# --- angular coupling model -------------------------------------------------

def _orientation_bases(g_ground, g_excited, reference, phi, theta):
    directions = sm._direction(phi, theta)
    ref = reference.unit_vector
    tg = sm._basis(g_ground.matrix @ ref).conj().T @ sm._basis(directions @ g_ground.matrix.T)
    te = sm._basis(g_excited.matrix @ ref).conj().T @ sm._basis(directions @ g_excited.matrix.T)
    return np.conj(np.swapaxes(tg, -1, -2)), te


def angle_model(g_ground, g_excited, phi, theta, reference=None, purcell=None, c0=None):
    """Return f(perp_abs, par_phase, perp_phase) -> cyclicity at each (phi, theta)."""
    reference = reference or sm.FieldOrientation(100.0, 90.0)
    tg_h, te = _orientation_bases(g_ground, g_excited, reference, phi, theta)

    def cyclicity(perp_abs, par_phase, perp_phase):
        a = np.exp(1j * par_phase)
        b = abs(perp_abs) * np.exp(1j * perp_phase)
        block = np.array([[a, b], [-np.conj(b), np.conj(a)]])
        m = tg_h @ block @ te
        par2, perp2 = np.abs(m[..., 0, 0]) ** 2, np.abs(m[..., 0, 1]) ** 2
        if purcell is None:
            return np.minimum(1.0 + par2 / np.maximum(perp2, 1e-300), sm.CYCLICITY_CAP)
        total = par2 + perp2
        return sm._corrected(purcell * par2 / total, purcell * perp2 / total, c0 if c0 is not None else 1e12)

    return cyclicity


def fit_angle_model(
    data: DataSeries,
    g_ground: sm.GTensor,
    g_excited: sm.GTensor,
    purcell: float | None = None,
    c0: float | None = None,
    reference: sm.FieldOrientation | None = None,
    free_scale: bool = False,
    grid: int = 16,
    **kwargs,
) -> FitReport:
    """Fit the reference coupling (|g_par| fixed to 1) to cyclicity-vs-orientation data.

    Residuals are taken in log space. With `free_scale` an additive log-amplitude
    is fitted as well, which absorbs any overall scaling of the data.
    """
    x = np.atleast_2d(data.x)
    if x.shape[-1] != 2:
        raise ValueError("angle data needs (phi, theta) pairs")
    if len(data) < 4:
        raise ValueError("need at least 4 orientations")
    dirs = sm._direction(x[:, 0], x[:, 1])
    if np.allclose(dirs, dirs[0], atol=1e-12):
        raise ValueError("degenerate design: all orientations identical")
    # phi span on the circle
    phis = np.sort(x[:, 0] % 360.0)
    gaps = np.diff(np.concatenate([phis, phis[:1] + 360.0]))
    phi_span = 360.0 - gaps.max()
    thetas = x[:, 1]
    if phi_span < 30.0 and np.ptp(thetas) < 30.0:
        raise ValueError("degenerate design: orientations span less than 30 degrees")

    reference = reference or sm.FieldOrientation(100.0, 90.0)
    model = angle_model(g_ground, g_excited, x[:, 0], x[:, 1], reference, purcell, c0)
    target = np.log(data.y)
    scale = None if data.sigma is None else data.sigma / data.y

    def model_fn(p):
        out = np.log(model(p[0], p[1], p[2]))
        return out + p[3] if free_scale else out

    perp0 = 1.0 / math.sqrt(data.y.max())
    phases = np.linspace(0.0, 2 * np.pi, grid, endpoint=False)
    best, best_cost = None, np.inf
    for pa in phases:
        for pb in phases:
            pred = np.log(model(perp0, pa, pb))
            shift = float(np.mean(target - pred)) if free_scale else 0.0
            c = float(np.sum((target - pred - shift) ** 2))
            if c < best_cost:
                best, best_cost = [perp0, pa, pb] + ([shift] if free_scale else []), c

    names = ["perp_abs", "par_phase", "perp_phase"] + (["log_scale"] if free_scale else [])
    kwargs.setdefault("absolute_sigma", data.sigma is not None)
    report = solve(model_fn, target, best, names, scale=scale, **kwargs)
    report.params["perp_abs"] = abs(report.params["perp_abs"])
    for key in ("par_phase", "perp_phase"):
        report.params[key] = (report.params[key] + np.pi) % (2 * np.pi) - np.pi
    report.extra["coupling"] = sm.CouplingMatrix.from_polar(
        1.0, report.params["par_phase"], report.params["perp_abs"], report.params["perp_phase"], reference
    )
    return report


# --- bare cyclicity from detuning / field series -----------------------------

def fit_c0(
    data: DataSeries,
    params: sm.IonCavityParams,
    m: sm.CouplingMatrix,
    g_ground: sm.GTensor,
    g_excited: sm.GTensor,
    orientation: sm.FieldOrientation,
    axis: str = "detuning",
    fit_purcell: bool = False,
    average: str = "cyclicity",
    **kwargs,
) -> FitReport:
    """Fit c0 (and optionally P_max) to cyclicity versus cavity detuning (Hz) or
    field magnitude (G), in log space."""
    if axis not in ("detuning", "field"):
        raise ValueError(f"unknown axis {axis!r}")
    if len(data) < 3:
        raise ValueError("need at least 3 points")
    x = np.asarray(data.x, dtype=float)
    notes = []
    if axis == "detuning" and np.max(np.abs(x)) / params.kappa < 1:
        notes.append("insufficient detuning lever arm: max |detuning| < kappa")

    def predict(c0, p_max):
        if axis == "detuning":
            return sm.cyclicity_vs_detuning(
                params, m, g_ground, g_excited, orientation, x, average, c0=c0, purcell_max=p_max
            )
        return np.array([
            sm.cyclicity_vs_detuning(
                params, m, g_ground, g_excited, orientation.with_magnitude(b), None, average,
                c0=c0, purcell_max=p_max,
            )
            for b in x
        ])

    def model_fn(p):
        c0 = p[0]
        p_max = p[1] if fit_purcell else params.purcell_max
        with np.errstate(all="ignore"):
            return np.log(predict(c0, p_max))

    target = np.log(data.y)
    scale = None if data.sigma is None else data.sigma / data.y
    candidates = np.geomspace(1.05, 200.0, 40)
    costs = []
    for c in candidates:
        with np.errstate(all="ignore"):
            pred = model_fn([c, params.purcell_max])
        costs.append(np.sum((target - pred) ** 2) if np.all(np.isfinite(pred)) else np.inf)
    p0 = [candidates[int(np.argmin(costs))]] + ([params.purcell_max] if fit_purcell else [])
    names = ["c0"] + (["purcell_max"] if fit_purcell else [])
    kwargs.setdefault("absolute_sigma", data.sigma is not None)
    report = solve(model_fn, target, p0, names, scale=scale, **kwargs)
    if report.params["c0"] < 1:
        notes.append("unreliable: fitted c0 below 1")
    report.warnings.extend(notes)
    return report


# --- spin relaxation --------------------------------------------------------

def spin_relaxation_time(t_rep, t1_dark, cyclicity, p_ex):
    """Total relaxation time 1/(1/T1_dark + p_ex/(t_rep C))."""
    t_rep = np.asarray(t_rep, dtype=float)
    rate = p_ex / (t_rep * cyclicity) + (0.0 if math.isinf(t1_dark) else 1.0 / t1_dark)
    out = 1.0 / rate
    return float(out) if np.ndim(out) == 0 else out


def relaxation_design(data: DataSeries):
    """Weighted design matrix and rate vector for the affine rate model.

    Returns (X, y, w) with X = [1, 1/t_rep], y = 1/T_SR and weights
    w = 1/sigma_rate (ones when no sigma is given).
    """
    t_rep, t_sr = np.asarray(data.x, float), data.y
    X = np.column_stack([np.ones_like(t_rep), 1.0 / t_rep])
    rate = 1.0 / t_sr
    w = np.ones_like(rate) if data.sigma is None else t_sr**2 / data.sigma
    return X, rate, w


def fit_spin_relaxation(data: DataSeries, p_ex: float) -> FitReport:
    """Closed-form weighted regression of 1/T_SR on 1/t_rep.

    Intercept is 1/T1_dark and slope p_ex/C.
    """
    if len(data) < 3:
        raise ValueError("need at least 3 repetition times")
    X, y, w = relaxation_design(data)
    Xw, yw = X * w[:, None], y * w
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    cov = np.linalg.inv(Xw.T @ Xw)
    if data.sigma is None:
        cov = cov * float(resid @ resid) / max(len(y) - 2, 1)
    a, b = coef
    sa, sb = np.sqrt(np.diag(cov))
    notes = []
    if a <= 0:
        notes.append("unreliable: dark relaxation unresolved (non-positive intercept)")
        t1, st1 = math.inf, math.inf
    else:
        t1, st1 = 1.0 / a, sa / a**2
    if b <= 0:
        notes.append("unreliable: non-positive pumping slope")
        c, sc = math.inf, math.inf
    else:
        c, sc = p_ex / b, p_ex * sb / b**2
    return FitReport(
        params={"t1_dark": t1, "cyclicity": c, "intercept": float(a), "slope": float(b)},
        uncertainties={"t1_dark": st1, "cyclicity": sc, "intercept": float(sa), "slope": float(sb)},
        residual_norm=float(np.linalg.norm(resid)),
        converged=True,
        iterations=1,
        warnings=notes,
        extra={"covariance": cov, "weighted_design": Xw, "weighted_residuals": resid},
    )


def read_series_csv(path) -> DataSeries:
    """CSV with a header naming the abscissa kind.

    Recognised headers: `phi,theta,cyclicity`, `detuning,cyclicity`,
    `field,cyclicity`, `t_rep,t_sr`; an optional trailing `sigma` column.
    """
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in r] for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows)
    has_sigma = header[-1] == "sigma"
    cols = header[:-1] if has_sigma else header
    sigma = arr[:, -1] if has_sigma else None
    if cols == ["phi", "theta", "cyclicity"]:
        return DataSeries(arr[:, :2], arr[:, 2], sigma, "angle")
    if cols in (["detuning", "cyclicity"], ["field", "cyclicity"], ["t_rep", "t_sr"]):
        return DataSeries(arr[:, 0], arr[:, 1], sigma, cols[0])
    raise ValueError(f"{path}: unrecognised header {header}")
