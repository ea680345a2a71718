"""Monte-Carlo photon records for alternating A/B pulsed excitation.

Even pulses drive line A (bright when the ground spin is up), odd pulses drive
line B (bright when it is down). Each pulse carries one integrated
fluorescence window.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

UP, DOWN = 1, 0


@dataclass(frozen=True)
class SimConfig:
    n_pulses: int
    t_rep: float = 60e-6
    p_ex: float = 0.5
    cyclicity: float = 1500.0
    eta: float = 0.028
    t1_dark: float = math.inf
    dark_counts_per_window: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_pulses <= 0 or self.n_pulses % 2:
            raise ValueError("n_pulses must be a positive even number")
        if not 0 <= self.p_ex <= 1:
            raise ValueError("p_ex must lie in [0, 1]")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.cyclicity < 1:
            raise ValueError("cyclicity must be >= 1")
        if self.t1_dark <= 0 or self.t_rep <= 0:
            raise ValueError("t1_dark and t_rep must be positive")
        if self.dark_counts_per_window < 0:
            raise ValueError("dark counts must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def relax_flip_prob(self) -> float:
        """Intrinsic flip probability per pulse, per direction."""
        return 0.5 * -math.expm1(-self.t_rep / self.t1_dark)

    @property
    def pump_flip_prob(self) -> float:
        """Optical-pumping flip probability on a pulse that drives the bright line."""
        return self.p_ex / self.cyclicity

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["t1_dark"]):
            d["t1_dark"] = None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown keys in sim config: {sorted(unknown)}")
        data = dict(data)
        if data.get("t1_dark", 1.0) is None:
            data["t1_dark"] = math.inf
        return cls(**data)


@dataclass(frozen=True)
class PhotonRecord:
    """Per-pulse counts, interleaved A, B, A, B, ...

    `truth` holds the simulated ground spin (1 = up, 0 = down) during each pulse,
    or None for imported data.
    """

    counts: np.ndarray
    truth: np.ndarray | None = None
    config: SimConfig | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=np.int8)
            if truth.shape != counts.shape:
                raise ValueError("truth and counts lengths differ")
            object.__setattr__(self, "truth", truth)

    def __len__(self):
        return len(self.counts)

    @property
    def counts_a(self) -> np.ndarray:
        return self.counts[0::2]

    @property
    def counts_b(self) -> np.ndarray:
        return self.counts[1::2]

    @property
    def channel(self) -> np.ndarray:
        """0 for A-driven pulses, 1 for B-driven pulses."""
        return np.arange(len(self.counts)) % 2


@dataclass(frozen=True)
class RabiConfig:
    pulse_durations: tuple[float, ...]
    rabi_frequency: float
    t2_star: float = math.inf
    readout_fidelity: float = 1.0
    shots_per_point: int = 1000
    seed: int = 0

    def __post_init__(self):
        durations = tuple(float(t) for t in self.pulse_durations)
        if any(t < 0 for t in durations):
            raise ValueError("pulse durations must be non-negative")
        if not 0.5 <= self.readout_fidelity <= 1:
            raise ValueError("readout fidelity must lie in [0.5, 1]")
        if self.shots_per_point <= 0:
            raise ValueError("need at least one shot per point")
        object.__setattr__(self, "pulse_durations", durations)


@dataclass(frozen=True)
class RabiResult:
    durations: np.ndarray
    p_up: np.ndarray
    stderr: np.ndarray
    p_up_true: np.ndarray = field(repr=False)


def simulate_record(cfg: SimConfig) -> PhotonRecord:
    """Generate a photon record; bit-identical for identical configs.

    The hidden spin is a Markov chain. On each pulse the driven line is bright
    if it matches the spin; a bright pulse excites with probability p_ex, every
    excitation emits one photon (detected with probability eta) and pumps the
    spin over with probability 1/C. Intrinsic relaxation then flips the spin
    with probability (1 - exp(-t_rep/T1))/2. Independent Poisson dark counts
    are added to every window.
    """
    n = cfg.n_pulses
    rng = np.random.default_rng(cfg.seed)
    state = UP if rng.random() < 0.5 else DOWN
    excite_u = rng.random(n)
    pump_u = rng.random(n)
    relax_u = rng.random(n)
    detect_u = rng.random(n)
    dark = rng.poisson(cfg.dark_counts_per_window, n) if cfg.dark_counts_per_window > 0 else np.zeros(n, np.int64)

    excites = excite_u < cfg.p_ex
    pumps = excites & (pump_u < 1.0 / cfg.cyclicity)
    parity = np.arange(n) % 2
    # pump-flip candidates for each spin state: the pulses on which that state is bright
    pump_at = {UP: np.flatnonzero(pumps & (parity == 0)), DOWN: np.flatnonzero(pumps & (parity == 1))}
    relax_at = np.flatnonzero(relax_u < cfg.relax_flip_prob)

    truth = np.empty(n, dtype=np.int8)
    k = 0
    while k < n:
        cand = pump_at[state]
        i = np.searchsorted(cand, k)
        k_pump = cand[i] if i < len(cand) else n
        j = np.searchsorted(relax_at, k)
        k_relax = relax_at[j] if j < len(relax_at) else n
        k_event = min(k_pump, k_relax)
        truth[k:k_event + 1] = state
        if k_event >= n:
            break
        if k_pump == k_event:
            state ^= 1
        if k_relax == k_event:
            state ^= 1
        k = k_event + 1

    bright = (truth == UP) == (parity == 0)
    detected = bright & excites & (detect_u < cfg.eta)
    counts = detected.astype(np.int64) + dark
    return PhotonRecord(counts, truth, cfg)


def effective_snr(cfg: SimConfig) -> float:
    """Expected bright-window signal over background per collection window."""
    if cfg.dark_counts_per_window == 0:
        return math.inf
    return cfg.p_ex * cfg.eta / cfg.dark_counts_per_window


def dark_counts_for_snr(p_ex: float, eta: float, snr: float) -> float:
    """Inverse of effective_snr: dark counts per window giving the requested SNR."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    return 0.0 if math.isinf(snr) else p_ex * eta / snr


def expected_dwell(cfg: SimConfig) -> float:
    """Mean run length of the hidden spin in pulses."""
    return 1.0 / (cfg.p_ex / (2.0 * cfg.cyclicity) + cfg.relax_flip_prob)


def rabi_probability(t, rabi_frequency, t2_star):
    t = np.asarray(t, dtype=float)
    envelope = np.exp(-((t / t2_star) ** 2)) if math.isfinite(t2_star) else 1.0
    return 0.5 - 0.5 * np.cos(2 * np.pi * rabi_frequency * t) * envelope


def simulate_rabi(cfg: RabiConfig) -> RabiResult:
    """Rabi flopping seen through an imperfect initial and final readout.

    Each shot starts in the down state; the initial and the final readout are
    each wrong with probability 1 - F, and the reported flip probability is the
    fraction of shots whose two readouts disagree.
    """
    rng = np.random.default_rng(cfg.seed)
    durations = np.asarray(cfg.pulse_durations)
    p_true = rabi_probability(durations, cfg.rabi_frequency, cfg.t2_star)
    err = 1.0 - cfg.readout_fidelity
    shots = cfg.shots_per_point
    flipped = rng.random((len(durations), shots)) < p_true[:, None]
    err_initial = rng.random((len(durations), shots)) < err
    err_final = rng.random((len(durations), shots)) < err
    disagree = flipped ^ err_initial ^ err_final
    p = disagree.mean(axis=1)
    return RabiResult(durations, p, np.sqrt(p * (1 - p) / shots), p_true)


CSV_HEADER = ("pulse_index", "channel", "counts", "truth")


def write_record_csv(record: PhotonRecord, path) -> None:
    chan = np.where(record.channel == 0, "A", "B")
    truth = record.truth if record.truth is not None else None
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        if truth is None:
            fh.writelines(f"{i},{c},{n},\n" for i, (c, n) in enumerate(zip(chan, record.counts.tolist())))
        else:
            fh.writelines(
                f"{i},{c},{n},{t}\n"
                for i, (c, n, t) in enumerate(zip(chan, record.counts.tolist(), truth.tolist()))
            )


def read_record_csv(path, config: SimConfig | None = None) -> PhotonRecord:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != CSV_HEADER[:3]:
            raise ValueError(f"{path}: not a photon record CSV (header {header})")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty record")
    idx = np.array([int(r[0]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError(f"{path}: pulse indices must be 0..N-1 in order")
    expected = np.where(idx % 2 == 0, "A", "B")
    if any(r[1] != e for r, e in zip(rows, expected)):
        raise ValueError(f"{path}: channels must alternate A, B starting with A")
    counts = np.array([int(r[2]) for r in rows])
    truth_col = [r[3] if len(r) > 3 else "" for r in rows]
    truth = None if any(t == "" for t in truth_col) else np.array([int(t) for t in truth_col])
    return PhotonRecord(counts, truth, config)


def record_to_json(record: PhotonRecord) -> str:
    payload = {
        "schema_version": 1,
        "config": record.config.to_dict() if record.config else None,
        "counts": record.counts.tolist(),
        "truth": record.truth.tolist() if record.truth is not None else None,
    }
    return json.dumps(payload, separators=(",", ":"))


def record_from_json(text: str) -> PhotonRecord:
    payload = json.loads(text)
    cfg = SimConfig.from_dict(payload["config"]) if payload.get("config") else None
    return PhotonRecord(payload["counts"], payload.get("truth"), cfg)


def save_record(record: PhotonRecord, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(record_to_json(record))
    else:
        write_record_csv(record, path)


def load_record(path, config: SimConfig | None = None) -> PhotonRecord:
    path = Path(path)
    if path.suffix == ".json":
        return record_from_json(path.read_text())
    return read_record_csv(path, config)


def records_equal(a: PhotonRecord, b: PhotonRecord) -> bool:
    same_truth = (a.truth is None and b.truth is None) or (
        a.truth is not None and b.truth is not None and np.array_equal(a.truth, b.truth)
    )
    return np.array_equal(a.counts, b.counts) and same_truth

