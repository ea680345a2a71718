"""Kramers-doublet Zeeman structure and cavity-enhanced cyclicity.

Units used throughout: angles in degrees, fields in Gauss, frequencies in Hz.
Spinors are written in the effective spin-1/2 basis of the doublet, and the
ordering of every 2x2 block is (down, up) to match the coupling matrix

    m = [[ g_par,        g_perp      ],
         [-conj(g_perp), conj(g_par) ]]

whose rows are ground states and columns excited states.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize
from scipy.spatial.transform import Rotation

BOHR_MAGNETON_HZ_PER_GAUSS = 1.3996245e6
# Saturating stand-in for an infinite cyclicity (g_perp == 0).
CYCLICITY_CAP = 1e12


class DegenerateDoubletError(ValueError):
    """Raised when the Zeeman eigenbasis is undefined (zero effective field)."""


@dataclass(frozen=True)
class GTensor:
    """Symmetric Zeeman tensor built from principal values and ZYZ Euler angles (radians).

    Principal values may carry a sign. Only |g B| enters the splittings, but the
    sign of det(g) decides which excited state lies higher and therefore which
    optical lines conserve the spin.
    """

    principal_values: tuple[float, float, float]
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pv = tuple(float(v) for v in self.principal_values)
        eu = tuple(float(v) for v in self.euler)
        if len(pv) != 3 or len(eu) != 3:
            raise ValueError("need three principal values and three Euler angles")
        if min(abs(v) for v in pv) == 0:
            raise ValueError(f"principal values must be non-zero, got {pv}")
        rot = Rotation.from_euler("zyz", eu).as_matrix()
        mat = rot @ np.diag(pv) @ rot.T
        mat = 0.5 * (mat + mat.T)
        mat.setflags(write=False)
        object.__setattr__(self, "principal_values", pv)
        object.__setattr__(self, "euler", eu)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def isotropic(cls, g: float) -> "GTensor":
        return cls((g, g, g))

    def rotated(self, angle: float, axis: int = 2) -> "GTensor":
        """Same principal values, principal frame rotated by `angle` (radians) about
        one of its own principal axes."""
        local = Rotation.from_rotvec(angle * np.eye(3)[axis])
        rot = Rotation.from_euler("zyz", self.euler) * local
        return GTensor(self.principal_values, tuple(rot.as_euler("zyz")))


@dataclass(frozen=True)
class FieldOrientation:
    """Magnetic field direction (phi, theta in degrees) and magnitude in Gauss."""

    phi: float
    theta: float
    magnitude: float = 1.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("field magnitude must be non-negative")
        phi, theta = float(self.phi), float(self.theta) % 360.0
        if theta > 180.0:
            theta = 360.0 - theta
            phi += 180.0
        object.__setattr__(self, "phi", phi % 360.0)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "magnitude", float(self.magnitude))

    @property
    def unit_vector(self) -> np.ndarray:
        return _direction(self.phi, self.theta)

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * self.unit_vector

    def with_magnitude(self, magnitude: float) -> "FieldOrientation":
        return FieldOrientation(self.phi, self.theta, magnitude)


@dataclass(frozen=True)
class Spinor:
    up: complex
    down: complex

    def __post_init__(self):
        norm = abs(self.up) ** 2 + abs(self.down) ** 2
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"spinor is not normalised (|psi|^2 = {norm})")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.up, self.down], dtype=complex)


@dataclass(frozen=True)
class CouplingMatrix:
    """Cavity coupling block at a reference field orientation (angles only matter)."""

    g_par: complex
    g_perp: complex
    reference: FieldOrientation = FieldOrientation(100.0, 90.0)

    def __post_init__(self):
        if abs(self.g_par) ** 2 + abs(self.g_perp) ** 2 <= 0:
            raise ValueError("coupling matrix is identically zero")

    @classmethod
    def from_polar(cls, par_abs, par_phase, perp_abs, perp_phase, reference=None):
        ref = reference if reference is not None else FieldOrientation(100.0, 90.0)
        return cls(par_abs * np.exp(1j * par_phase), perp_abs * np.exp(1j * perp_phase), ref)

    @property
    def block(self) -> np.ndarray:
        a, b = complex(self.g_par), complex(self.g_perp)
        return np.array([[a, b], [-b.conjugate(), a.conjugate()]])


@dataclass(frozen=True)
class IonCavityParams:
    purcell_max: float
    kappa: float
    cavity_detuning: float = 0.0
    c0: float = 2.0
    eta: float = 0.028
    eta_cav: float = 0.063
    snr: float = 14.0
    gamma0: float = 1 / 11.4e-3

    def __post_init__(self):
        for name in ("purcell_max", "kappa", "eta", "eta_cav", "snr", "gamma0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eta > 1 or self.eta_cav > 1:
            raise ValueError("efficiencies must not exceed 1")
        if self.c0 < 1:
            raise ValueError("bare cyclicity c0 must be >= 1")


class TransitionFrequencies(NamedTuple):
    a: float
    b: float
    c: float
    d: float


class SearchResult(NamedTuple):
    orientation: FieldOrientation
    g_perp_min: float
    cyclicity: float


def _direction(phi, theta):
    phi, theta = np.radians(phi), np.radians(theta)
    return np.stack(
        np.broadcast_arrays(np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)),
        axis=-1,
    )


def _basis(h: np.ndarray) -> np.ndarray:
    """Eigenbasis of h.sigma as (..., 2, 2) with columns (down, up).

    The up state has a real non-negative first amplitude; down is its
    time-reversal partner, (-conj(u2), conj(u1)), which fixes its phase and keeps
    the Kramers form of the coupling block under basis changes.
    """
    h = np.asarray(h, dtype=float)
    norm = np.linalg.norm(h, axis=-1)
    if np.any(norm == 0):
        raise DegenerateDoubletError("degenerate doublet: zero effective field")
    n = h / norm[..., None]
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    transverse = nx**2 + ny**2
    # 1 + nz without cancellation when nz is close to -1
    one_plus = np.where(nz >= 0, 1.0 + nz, transverse / np.maximum(1.0 - nz, 1e-300))
    south = one_plus <= 1e-300
    safe = np.where(south, 1.0, one_plus)
    u1 = np.where(south, 0.0, np.sqrt(safe / 2.0)).astype(complex)
    u2 = np.where(south, 1.0 + 0j, (nx + 1j * ny) / np.sqrt(2.0 * safe))
    out = np.empty(h.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = -np.conj(u2)
    out[..., 1, 0] = np.conj(u1)
    out[..., 0, 1] = u1
    out[..., 1, 1] = u2
    return out


def zeeman_eigensystem(g: GTensor, field: FieldOrientation) -> tuple[float, Spinor, Spinor]:
    """Splitting (Hz) and (up, down) eigenstates of mu_B B.g.S with S = sigma/2."""
    if field.magnitude <= 0:
        raise DegenerateDoubletError("degenerate doublet: zero field")
    h = g.matrix @ field.vector
    splitting = BOHR_MAGNETON_HZ_PER_GAUSS * float(np.linalg.norm(h))
    basis = _basis(h)
    down = Spinor(*basis[:, 0])
    up = Spinor(*basis[:, 1])
    return splitting, up, down


def zeeman_splitting(g: GTensor, field: FieldOrientation) -> float:
    return BOHR_MAGNETON_HZ_PER_GAUSS * float(np.linalg.norm(g.matrix @ field.vector))


def transition_frequencies(
    g_ground: GTensor, g_excited: GTensor, field: FieldOrientation, f0: float = 0.0
) -> TransitionFrequencies:
    """Optical lines A (up-up), B (down-down), C (down_g-up_e), D (up_g-down_e)."""
    dg = zeeman_splitting(g_ground, field)
    de = zeeman_splitting(g_excited, field)
    return TransitionFrequencies(
        f0 + 0.5 * (de - dg),
        f0 - 0.5 * (de - dg),
        f0 + 0.5 * (de + dg),
        f0 - 0.5 * (de + dg),
    )


def basis_change(g: GTensor, source: FieldOrientation, target: FieldOrientation) -> np.ndarray:
    """Matrix whose columns are the target (down, up) states in the source basis."""
    if source.magnitude <= 0 or target.magnitude <= 0:
        raise DegenerateDoubletError("degenerate doublet: zero field")
    b_src = _basis(g.matrix @ source.unit_vector)
    b_tgt = _basis(g.matrix @ target.unit_vector)
    return b_src.conj().T @ b_tgt


def overlap_coefficients(
    g: GTensor, source: FieldOrientation, target: FieldOrientation
) -> tuple[complex, complex]:
    """(alpha, beta) with |up(target)> = alpha |up(source)> + beta |down(source)>."""
    t = basis_change(g, source, target)
    return complex(t[1, 1]), complex(t[0, 1])


def _transformed_blocks(m: CouplingMatrix, g_ground: GTensor, g_excited: GTensor, directions):
    ref = m.reference.unit_vector
    tg = _basis(g_ground.matrix @ ref).conj().T @ _basis(directions @ g_ground.matrix.T)
    te = _basis(g_excited.matrix @ ref).conj().T @ _basis(directions @ g_excited.matrix.T)
    return np.conj(np.swapaxes(tg, -1, -2)) @ m.block @ te


def coupling_at(
    m: CouplingMatrix, g_ground: GTensor, g_excited: GTensor, orientation: FieldOrientation
) -> tuple[complex, complex]:
    """(g_par, g_perp) in the eigenbases belonging to `orientation`."""
    if orientation.magnitude <= 0:
        raise DegenerateDoubletError("degenerate doublet: zero field")
    block = _transformed_blocks(m, g_ground, g_excited, orientation.unit_vector)
    return complex(block[0, 0]), complex(block[0, 1])


def coupling_block_at(m, g_ground, g_excited, orientation) -> np.ndarray:
    return _transformed_blocks(m, g_ground, g_excited, orientation.unit_vector)


def couplings_on_grid(m, g_ground, g_excited, phi, theta):
    """Vectorised coupling_at over broadcastable angle arrays; returns (g_par, g_perp)."""
    block = _transformed_blocks(m, g_ground, g_excited, _direction(phi, theta))
    return block[..., 0, 0], block[..., 0, 1]


def ideal_cyclicity(g_par, g_perp):
    """C = 1 + |g_par|^2/|g_perp|^2, saturating at CYCLICITY_CAP."""
    par2 = np.abs(g_par) ** 2
    perp2 = np.abs(g_perp) ** 2
    if np.any((par2 == 0) & (perp2 == 0)):
        raise ValueError("g_par and g_perp are both zero")
    with np.errstate(divide="ignore"):
        c = 1.0 + np.where(perp2 > 0, par2 / np.where(perp2 > 0, perp2, 1.0), np.inf)
    c = np.minimum(c, CYCLICITY_CAP)
    return float(c) if np.ndim(c) == 0 else c


def corrected_cyclicity(p_par, p_perp, c0):
    """Cyclicity including free-space decay; equals c0 with the cavity off."""
    if np.any(np.asarray(c0) < 1):
        raise ValueError("c0 must be >= 1")
    if np.any(np.asarray(p_par) < 0) or np.any(np.asarray(p_perp) < 0):
        raise ValueError("Purcell factors must be non-negative")
    return _corrected(p_par, p_perp, c0)


def _corrected(p_par, p_perp, c0):
    # 1 + (1 - 1/c0 + p_par)/(1/c0 + p_perp), rearranged so that p = 0 gives c0 exactly
    c0 = np.asarray(c0, dtype=float)
    c = c0 * (1.0 + p_par + p_perp) / (1.0 + c0 * p_perp)
    return float(c) if np.ndim(c) == 0 else c


def detuned_purcell(p_max, delta, kappa):
    if np.any(np.asarray(kappa) <= 0):
        raise ValueError("kappa must be positive")
    p = p_max / (1.0 + (2.0 * np.asarray(delta, dtype=float) / kappa) ** 2)
    return float(p) if np.ndim(p) == 0 else p


def cyclicity_vs_detuning(
    params: IonCavityParams,
    m: CouplingMatrix,
    g_ground: GTensor,
    g_excited: GTensor,
    orientation: FieldOrientation,
    cavity_detuning=None,
    average: str = "cyclicity",
    c0: float | None = None,
    purcell_max: float | None = None,
):
    """Cyclicity with Lorentzian-weighted Purcell factors, averaged over the two
    excited states.

    `average="cyclicity"` takes the arithmetic mean of the per-state cyclicities;
    `average="rates"` averages the spin-conserving and spin-flipping rates first.
    The coupling shares come from the couplings at `orientation`; at zero field
    the reference-orientation couplings are used.
    """
    if average not in ("cyclicity", "rates"):
        raise ValueError(f"unknown averaging mode {average!r}")
    c0 = params.c0 if c0 is None else c0
    p_max = params.purcell_max if purcell_max is None else purcell_max
    delta_cav = np.asarray(params.cavity_detuning if cavity_detuning is None else cavity_detuning, float)

    if orientation.magnitude > 0:
        g_par, g_perp = coupling_at(m, g_ground, g_excited, orientation)
    else:
        g_par, g_perp = m.g_par, m.g_perp
    total = abs(g_par) ** 2 + abs(g_perp) ** 2
    share_par, share_perp = abs(g_par) ** 2 / total, abs(g_perp) ** 2 / total

    lines = transition_frequencies(g_ground, g_excited, orientation)
    per_state = []
    # excited up decays via A (conserving) and C (flipping); excited down via B and D
    for conserving, flipping in ((lines.a, lines.c), (lines.b, lines.d)):
        p_par = share_par * detuned_purcell(p_max, conserving - delta_cav, params.kappa)
        p_perp = share_perp * detuned_purcell(p_max, flipping - delta_cav, params.kappa)
        per_state.append((p_par, p_perp))

    inv = 1.0 / c0
    if average == "cyclicity":
        c = 0.5 * sum(_corrected(pp, pq, c0) for pp, pq in per_state)
    else:
        num = 0.5 * sum(1.0 - inv + pp for pp, _ in per_state)
        den = 0.5 * sum(inv + pq for _, pq in per_state)
        c = 1.0 + num / den
    return float(c) if np.ndim(c) == 0 else c


def max_cyclicity_search(
    m: CouplingMatrix,
    g_ground: GTensor,
    g_excited: GTensor,
    grid_step: float = 2.0,
    n_starts: int = 4,
    purcell: float | None = None,
    c0: float | None = None,
) -> SearchResult:
    """Field orientation minimising |g_perp|.

    Coarse angle grid, then Nelder-Mead refinement from the best few grid points,
    then a Gauss-Newton polish on (Re, Im) of g_perp so that exact zeros are hit to
    machine precision. With `purcell` and `c0` given the returned cyclicity is
    the free-space corrected one, otherwise the ideal one.
    """
    phis = np.arange(0.0, 360.0, grid_step)
    thetas = np.linspace(0.0, 180.0, int(round(180.0 / grid_step)) + 1)
    pp, tt = np.meshgrid(phis, thetas, indexing="ij")
    _, perp = couplings_on_grid(m, g_ground, g_excited, pp, tt)
    mag = np.abs(perp).ravel()
    order = np.argsort(mag)

    def perp_sq(x):
        _, gp = couplings_on_grid(m, g_ground, g_excited, x[0], x[1])
        return float(abs(gp) ** 2)

    def perp_parts(x):
        _, gp = couplings_on_grid(m, g_ground, g_excited, x[0], x[1])
        return [gp.real, gp.imag]

    best_x, best_val = None, np.inf
    seen = []
    for idx in order:
        x0 = np.array([pp.ravel()[idx], tt.ravel()[idx]])
        if any(np.hypot(*(x0 - s)) < 3 * grid_step for s in seen):
            continue
        seen.append(x0)
        res = optimize.minimize(
            perp_sq, x0, method="Nelder-Mead",
            options={"xatol": 1e-4, "fatol": 1e-30, "maxiter": 4000},
        )
        polish = optimize.least_squares(perp_parts, res.x, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        for cand in (res.x, polish.x):
            val = perp_sq(cand)
            if val < best_val:
                best_x, best_val = cand, val
        if len(seen) >= n_starts:
            break

    orientation = FieldOrientation(best_x[0], best_x[1])
    g_par, g_perp = coupling_at(m, g_ground, g_excited, orientation)
    if purcell is not None and c0 is not None:
        total = abs(g_par) ** 2 + abs(g_perp) ** 2
        c = _corrected(purcell * abs(g_par) ** 2 / total, purcell * abs(g_perp) ** 2 / total, c0)
    else:
        c = ideal_cyclicity(g_par, g_perp)
    return SearchResult(orientation, abs(g_perp), c)
