"""Analysis of photon records: g2, n0 and cyclicity, posterior smoothing and
single-shot readout."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fitting import FitError, solve
from .photon_sim import DOWN, UP, PhotonRecord

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class G2Curve:
    """Normalised autocorrelation at integer pulse offsets 0..max_offset.

    Normalisation uses the means of the two overlapping slices at each offset.
    Like any finite-sample ratio estimator it carries an O(1/N) bias.
    """

    offsets: np.ndarray
    values: np.ndarray
    n_pairs: np.ndarray

    @property
    def even(self) -> tuple[np.ndarray, np.ndarray]:
        mask = (self.offsets % 2 == 0) & (self.offsets > 0)
        return self.offsets[mask], self.values[mask]

    @property
    def odd(self) -> tuple[np.ndarray, np.ndarray]:
        mask = self.offsets % 2 == 1
        return self.offsets[mask], self.values[mask]


@dataclass(frozen=True)
class N0Fit:
    n0: float
    amplitude: float
    uncertainty: float
    mode: str
    n_points: int


@dataclass(frozen=True)
class HmmParams:
    flip_prob_per_pulse: float
    bright_mean: float
    dark_mean: float
    prior_up: float = 0.5

    def __post_init__(self):
        for name in ("flip_prob_per_pulse", "prior_up"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dark_mean < 0 or self.bright_mean < self.dark_mean:
            raise ValueError("need bright_mean >= dark_mean >= 0")

    @classmethod
    def from_sim(cls, cfg) -> "HmmParams":
        """Parameters matched to a SimConfig (pumping flips averaged over channels)."""
        flip = cfg.pump_flip_prob / 2 + cfg.relax_flip_prob
        signal = cfg.p_ex * cfg.eta
        return cls(min(flip, 0.5), signal + cfg.dark_counts_per_window, cfg.dark_counts_per_window)


@dataclass(frozen=True)
class ReadoutResult:
    state: int
    confidence: float
    duration_pulses: int
    start_pulse: int
    terminated_by: str


@dataclass(frozen=True)
class WindowReadout:
    differences: np.ndarray
    states: np.ndarray
    histogram: tuple[np.ndarray, np.ndarray]
    threshold: float
    fidelity: float | None


@dataclass(frozen=True)
class ReadoutMetrics:
    photons_needed: int
    f_avg: float
    t_meas_pulses: float
    t_target_pulses: float
    threshold_fidelity: float
    target_reachable: bool


# --- autocorrelation --------------------------------------------------------

def _lagged_products(x: np.ndarray, max_offset: int) -> np.ndarray:
    """sum_k x_k x_{k+n} for n = 0..max_offset, exact for integer input."""
    n = len(x)
    if max_offset <= 256:
        return np.array([np.dot(x[: n - k], x[k:]) for k in range(max_offset + 1)], dtype=float)
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, size)
    corr = np.fft.irfft(spec * np.conj(spec), size)[: max_offset + 1]
    return np.rint(corr) if np.issubdtype(x.dtype, np.integer) else corr


def g2_discrete(record: PhotonRecord, max_offset: int) -> G2Curve:
    counts = record.counts
    n = len(counts)
    if n == 0 or not counts.any():
        raise ValueError("empty record: no counts to correlate")
    if not 0 <= max_offset < n / 2:
        raise ValueError("max_offset must be below half the record length")
    offsets = np.arange(max_offset + 1)
    products = _lagged_products(counts.astype(np.int64), max_offset)
    csum = np.concatenate([[0], np.cumsum(counts)])
    pairs = n - offsets
    head = csum[n - offsets] / pairs
    tail = (csum[n] - csum[offsets]) / pairs
    with np.errstate(invalid="ignore", divide="ignore"):
        values = (products / pairs) / (head * tail)
    values = np.where(np.isfinite(values), values, 0.0)
    return G2Curve(offsets, values, pairs)


# --- n0 extraction ----------------------------------------------------------

def _leading_run(y: np.ndarray, sigma: float, width: int = 5) -> int:
    kernel = np.ones(width)
    # divide by the number of samples actually inside the window at the edges
    smooth = np.convolve(y, kernel, mode="same") / np.convolve(np.ones_like(y), kernel, mode="same")
    below = np.flatnonzero(np.abs(smooth) <= 2 * sigma)
    return int(below[0]) if len(below) else len(y)


def _decay_series(curve: G2Curve, mode: str):
    if mode == "even":
        x, g = curve.even
        return x, g - 1.0
    if mode == "odd":
        x, g = curve.odd
        return x, 1.0 - g
    if mode == "difference":
        x_e, g_e = curve.even
        vals = dict(zip(curve.odd[0].tolist(), curve.odd[1].tolist()))
        keep = [i for i, k in enumerate(x_e.tolist()) if k - 1 in vals and k + 1 in vals]
        x = x_e[keep]
        odd_mid = np.array([0.5 * (vals[k - 1] + vals[k + 1]) for k in x.tolist()])
        return x, g_e[keep] - odd_mid
    raise ValueError(f"unknown mode {mode!r}")


def fit_n0(curve: G2Curve, mode: str = "difference", min_points: int = 5) -> N0Fit:
    """Fit A exp(-n/n0) to the bunching signal of one parity or of their difference.

    In difference mode the odd trace is interpolated to even offsets by the
    neighbour mean, which rescales its amplitude by cosh(1/n0) but keeps the
    exponent. Only the leading run of offsets whose (5-point smoothed) signal
    exceeds twice the point-to-point noise is used, unweighted.
    """
    x, y = _decay_series(curve, mode)
    if len(x) < min_points:
        raise FitError("too few offsets for an n0 fit")
    sigma = 1.4826 * np.median(np.abs(np.diff(y) - np.median(np.diff(y)))) / math.sqrt(2)
    sigma = max(sigma, 1e-12 * max(np.abs(y).max(), 1e-300))
    stop = _leading_run(y, sigma)
    if stop < min_points:
        raise FitError(f"no decaying signal: only {stop} offsets above noise")
    x, y = x[:stop].astype(float), y[:stop]

    pos = y > 0
    if pos.sum() >= 2:
        slope, icpt = np.polyfit(x[pos], np.log(y[pos]), 1)
    else:
        slope, icpt = -1.0 / max(x[-1], 1.0), 0.0
    n0_init = -1.0 / slope if slope < 0 else float(x[-1])
    p0 = [math.exp(icpt), n0_init]
    report = solve(
        lambda p: p[0] * np.exp(-x / p[1]), y, p0, ["amplitude", "n0"], simplex=False
    )
    amp, n0 = report.params["amplitude"], report.params["n0"]
    if not (n0 > 0 and amp > 0 and math.isfinite(n0)) or not report.converged:
        raise FitError(f"n0 fit failed (amplitude={amp:.4g}, n0={n0:.4g})")
    return N0Fit(n0, amp, report.uncertainties["n0"], mode, len(x))


def cyclicity_from_n0(n0: float, p_ex: float) -> float:
    """C = p_ex / (1 - exp(-1/n0))."""
    if n0 <= 0:
        raise ValueError("n0 must be positive")
    return p_ex / -math.expm1(-1.0 / n0)


def estimate_cyclicity(record: PhotonRecord, p_ex: float, mode: str = "difference", max_offset=None):
    """g2 -> n0 -> C with an automatically extended offset range.

    Starts at 200 offsets and grows until the fitted decay length is well
    inside the computed range.
    """
    n = len(record)
    limit = n // 2 - 1
    max_offset = min(200 if max_offset is None else max_offset, limit)
    while True:
        curve = g2_discrete(record, max_offset)
        fit = fit_n0(curve, mode)
        if 8 * fit.n0 < max_offset or max_offset >= limit:
            break
        max_offset = min(max(4 * max_offset, int(10 * fit.n0)), limit)
    return cyclicity_from_n0(fit.n0, p_ex), fit, curve


# --- hidden-Markov smoothing ------------------------------------------------

def _emission(record: PhotonRecord, params: HmmParams) -> np.ndarray:
    """(N, 2) likelihoods for columns (down, up)."""
    k = record.counts.astype(float)
    a_driven = record.channel == 0

    def pois(lam):
        if lam == 0:
            return (k == 0).astype(float)
        return np.exp(k * math.log(lam) - lam - gammaln(k + 1))

    bright, dark = pois(params.bright_mean), pois(params.dark_mean)
    up = np.where(a_driven, bright, dark)
    down = np.where(a_driven, dark, bright)
    return np.column_stack([down, up])


def bayes_smoother(record: PhotonRecord, params: HmmParams) -> np.ndarray:
    """Posterior P(up) at every pulse given the whole record (forward-backward)."""
    n = len(record)
    if params.bright_mean == params.dark_mean:
        warnings.warn("bright and dark means are equal; returning the prior", RuntimeWarning)
        return np.full(n, params.prior_up)
    e = _emission(record, params)
    q = params.flip_prob_per_pulse
    s = 1.0 - q
    e_d, e_u = e[:, 0].tolist(), e[:, 1].tolist()

    fwd_d, fwd_u = [0.0] * n, [0.0] * n
    a_d, a_u = (1.0 - params.prior_up) * e_d[0], params.prior_up * e_u[0]
    for k in range(n):
        if k:
            a_d, a_u = (s * a_d + q * a_u) * e_d[k], (q * a_d + s * a_u) * e_u[k]
        z = a_d + a_u
        if z == 0:
            raise ValueError(f"record impossible under the model at pulse {k}")
        a_d, a_u = a_d / z, a_u / z
        fwd_d[k], fwd_u[k] = a_d, a_u

    post = [0.0] * n
    b_d = b_u = 1.0
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            nd, nu = e_d[k + 1] * b_d, e_u[k + 1] * b_u
            b_d, b_u = s * nd + q * nu, q * nd + s * nu
            z = b_d + b_u
            b_d, b_u = b_d / z, b_u / z
        pu, pd = fwd_u[k] * b_u, fwd_d[k] * b_d
        post[k] = pu / (pu + pd)
    return np.array(post)


# --- single-shot readout ----------------------------------------------------

def adaptive_ml_readout(
    record: PhotonRecord,
    params: HmmParams,
    f_target: float,
    max_pulses: int,
) -> list[ReadoutResult]:
    """Consecutive measurements, each estimating the spin at its start pulse.

    From the start pulse s the joint probability of (x_s, x_t, counts s..t) is
    propagated forward in t; the measurement ends when the marginal posterior
    of x_s reaches f_target or after max_pulses pulses. The next measurement
    starts on the following pulse. A trailing segment that reaches the end of
    the record without terminating is dropped.
    """
    if not 0.5 < f_target < 1:
        raise ValueError("f_target must lie in (0.5, 1)")
    if max_pulses < 1:
        raise ValueError("max_pulses must be >= 1")
    e = _emission(record, params)
    e_d, e_u = e[:, 0].tolist(), e[:, 1].tolist()
    q = params.flip_prob_per_pulse
    s = 1.0 - q
    prior_u = params.prior_up
    n = len(record)
    out = []
    start = 0
    while start < n:
        # j[i][j] = P(x_s = i, x_t = j, counts), i, j in (down, up)
        dd, du, ud, uu = (1 - prior_u) * e_d[start], 0.0, 0.0, prior_u * e_u[start]
        t = start
        while True:
            z = dd + du + ud + uu
            p_up = (ud + uu) / z
            dur = t - start + 1
            conf = max(p_up, 1.0 - p_up)
            if conf >= f_target or dur >= max_pulses:
                out.append(ReadoutResult(
                    UP if p_up >= 0.5 else DOWN, conf, dur, start,
                    "threshold" if conf >= f_target else "timeout",
                ))
                break
            t += 1
            if t >= n:
                return out
            dd, du, ud, uu = dd / z, du / z, ud / z, uu / z
            ed, eu = e_d[t], e_u[t]
            dd, du = (s * dd + q * du) * ed, (q * dd + s * du) * eu
            ud, uu = (s * ud + q * uu) * ed, (q * ud + s * uu) * eu
        start = t + 1
    return out


def consecutive_agreement(results: list[ReadoutResult]) -> float:
    if len(results) < 2:
        raise ValueError("need at least two measurements")
    states = np.array([r.state for r in results])
    return float(np.mean(states[1:] == states[:-1]))


def readout_accuracy(results: list[ReadoutResult], truth: np.ndarray) -> float:
    """Fraction of measurements that match the true spin at their start pulse."""
    starts = np.array([r.start_pulse for r in results])
    states = np.array([r.state for r in results])
    return float(np.mean(truth[starts] == states))


def fixed_window_readout(
    record: PhotonRecord, window: int, ties: str = "previous", seed: int = 0
) -> WindowReadout:
    """Classify consecutive windows by the sign of N_A - N_B.

    Ties go to the previous window's outcome (the first window defaults to up),
    or to a seeded coin flip with `ties="random"`. Fidelity is scored against
    the true spin at each window's first pulse.
    """
    if window < 1:
        raise ValueError("window must be at least one pulse")
    if ties not in ("previous", "random"):
        raise ValueError(f"unknown tie rule {ties!r}")
    n_win = len(record) // window
    if n_win == 0:
        raise ValueError("record shorter than one window")
    signed = np.where(record.channel == 0, record.counts, -record.counts)[: n_win * window]
    diffs = signed.reshape(n_win, window).sum(axis=1)
    states = np.where(diffs > 0, UP, DOWN).astype(np.int8)
    tied = np.flatnonzero(diffs == 0)
    if ties == "random":
        states[tied] = np.random.default_rng(seed).integers(0, 2, len(tied))
    else:
        for i in tied:
            states[i] = states[i - 1] if i else UP
    values, counts = np.unique(diffs, return_counts=True)
    fidelity = None
    if record.truth is not None:
        fidelity = float(np.mean(record.truth[::window][:n_win] == states))
    return WindowReadout(diffs, states, (values, counts), 0.0, fidelity)


def readout_metrics(eta: float, cyclicity: float, p_ex: float, snr: float, f_target: float) -> ReadoutMetrics:
    """Closed-form photon-counting readout figures.

    m photons are needed for a background-limited fidelity SNR^m/(SNR^m + 1)
    to reach f_target. The cyclicity-limited average fidelity is 1 - 1/(eta C).
    `t_meas_pulses` is the mean number of pulses per detected bright-line photon,
    1/(p_ex eta); `t_target_pulses` is m times that.
    """
    for name, v in (("eta", eta), ("cyclicity", cyclicity), ("p_ex", p_ex), ("snr", snr)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    if not 0 < f_target < 1:
        raise ValueError("f_target must lie in (0, 1)")
    if eta * cyclicity <= 1:
        raise ValueError("cyclicity-limited regime invalid: eta*C <= 1")
    odds = math.log(f_target / (1 - f_target))
    if math.isinf(snr):
        m = 1
    elif snr <= 1:
        raise ValueError("snr must exceed 1")
    else:
        m = max(1, math.ceil(odds / math.log(snr) - 1e-12))
    f_avg = 1.0 - 1.0 / (eta * cyclicity)
    per_photon = 1.0 / (p_ex * eta)
    f_thresh = 1.0 if math.isinf(snr) else snr**m / (snr**m + 1)
    reachable = f_target <= 1.0 - m / (eta * cyclicity)
    return ReadoutMetrics(m, f_avg, per_photon, m * per_photon, f_thresh, reachable)


# --- result files -----------------------------------------------------------

def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


def write_json(payload: dict, path) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table_csv(header, rows, path) -> None:
    """CSV with a leading `# schema_version=N` comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def g2_rows(curve: G2Curve):
    return zip(curve.offsets.tolist(), curve.values.tolist(), curve.n_pairs.tolist())


def n0_payload(fit: N0Fit, cyclicity: float, p_ex: float) -> dict:
    return {
        "mode": fit.mode,
        "n0": _finite(fit.n0),
        "n0_uncertainty": _finite(fit.uncertainty),
        "amplitude": _finite(fit.amplitude),
        "n_points": fit.n_points,
        "p_ex": p_ex,
        "cyclicity": _finite(cyclicity),
        "cyclicity_uncertainty": _finite(cyclicity * fit.uncertainty / fit.n0),
    }
