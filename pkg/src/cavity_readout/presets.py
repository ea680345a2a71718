"""Device presets and JSON (de)serialisation of the spin-model inputs.

Files always use degrees for field angles, Gauss for fields, Hz for
frequencies and seconds for times. Tensor Euler angles are stored in degrees
and coupling phases carry an explicit `_rad` suffix.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .spin_model import CouplingMatrix, FieldOrientation, GTensor, IonCavityParams

SPEED_OF_LIGHT = 299_792_458.0
WAVELENGTH = 1536.48e-9
OPTICAL_FREQUENCY = SPEED_OF_LIGHT / WAVELENGTH
FREE_SPACE_LIFETIME = 11.4e-3
T_REP = 60e-6

GROUND_PRINCIPAL = (14.65, 1.80, 0.56)
EXCITED_PRINCIPAL = (12.97, 0.85, 0.25)
# Ground-frame Euler angles (zyz, radians) chosen so that at (100 deg, 90 deg)
# the spin-flipping lines split by 13.1 MHz/G and the spin-conserving lines by
# 2.5 MHz/G. The excited frame is the ground frame turned 15 deg about its third
# principal axis, with the excited tensor sign-reversed (det < 0); a same-sign
# pair always admits an orientation with g_perp = 0.
GROUND_EULER = (0.0, 1.97546, -1.686179)

DEFAULT_REFERENCE = FieldOrientation(100.0, 90.0)


def default_tensors() -> tuple[GTensor, GTensor]:
    ground = GTensor(GROUND_PRINCIPAL, GROUND_EULER)
    excited_frame = GTensor(EXCITED_PRINCIPAL, GROUND_EULER).rotated(math.radians(15.0))
    excited = GTensor(tuple(-v for v in EXCITED_PRINCIPAL), excited_frame.euler)
    return ground, excited


def fitted_coupling() -> CouplingMatrix:
    """Coupling block fitted to the ion-1 angle scan, referenced to (100, 90) deg."""
    return CouplingMatrix.from_polar(1.0, -1.15, 0.024, -1.476, DEFAULT_REFERENCE)


@dataclass(frozen=True)
class IonPreset:
    name: str
    params: IonCavityParams
    c_max: float
    q_factor: float
    ml_fidelity: float | None
    t1_dark: float
    p_ex: float = 0.5
    t_rep: float = T_REP


def _ion(name, purcell, c_max, q, eta_cav, eta, ml, snr, t1_dark):
    params = IonCavityParams(
        purcell_max=purcell,
        kappa=OPTICAL_FREQUENCY / q,
        cavity_detuning=0.0,
        c0=2.0,
        eta=eta,
        eta_cav=eta_cav,
        snr=snr,
        gamma0=1.0 / FREE_SPACE_LIFETIME,
    )
    return IonPreset(name, params, c_max, q, ml, t1_dark)


ION_PRESETS: dict[str, IonPreset] = {
    p.name: p
    for p in (
        _ion("ion1", 703, 1500, 6.6e4, 0.063, 0.028, 0.946, 14.0, 12.2 / 4),
        _ion("ion1_fig2", 463, 1260, 4.3e4, 0.045, 0.020, None, 10.0, 12.2 / 4),
        _ion("ion2", 189, 390, 7.3e4, 0.088, 0.037, 0.83, 20.0, 12.2),
        _ion("ion3", 536, 620, 4.8e4, 0.159, 0.038, 0.968, 20.0, 12.2),
    )
}


def get_preset(name: str) -> IonPreset:
    try:
        return ION_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown ion preset {name!r}; choose from {sorted(ION_PRESETS)}") from None


@dataclass(frozen=True)
class EfficiencyStack:
    """Collection-efficiency budget for a projected device.

    Defaults: Q_int = 1e6 critically coupled (waveguide Q equal to intrinsic Q),
    fibre-waveguide coupling 0.5 (middle of the 40-60 % range), detector
    efficiency 0.67. The pulse period scales with the Purcell-shortened
    lifetime, i.e. inversely with the loaded Q relative to the ion-1 device.
    """

    q_int: float = 1e6
    q_wg: float | None = None
    fiber_coupling: float = 0.5
    detector: float = 0.67
    other: float = 1.0
    reference_q: float = 6.6e4
    reference_t_rep: float = T_REP

    @property
    def eta_cav(self) -> float:
        q_wg = self.q_int if self.q_wg is None else self.q_wg
        return self.q_int / (self.q_int + q_wg)

    @property
    def loaded_q(self) -> float:
        q_wg = self.q_int if self.q_wg is None else self.q_wg
        return 1.0 / (1.0 / self.q_int + 1.0 / q_wg)

    @property
    def eta(self) -> float:
        return self.eta_cav * self.fiber_coupling * self.detector * self.other

    @property
    def t_rep(self) -> float:
        return self.reference_t_rep * self.reference_q / self.loaded_q


IMPROVED_DEVICE = {"stack": EfficiencyStack(), "cyclicity": 1500.0, "p_ex": 1.0, "snr": 20.0}


def _check_keys(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def tensor_to_dict(g: GTensor) -> dict:
    return {"principal_values": list(g.principal_values), "euler_deg": [math.degrees(a) for a in g.euler]}


def tensor_from_dict(data: dict) -> GTensor:
    unknown = set(data) - {"principal_values", "euler_deg"}
    if unknown:
        raise ValueError(f"unknown keys in tensor: {sorted(unknown)}")
    euler = tuple(math.radians(a) for a in data.get("euler_deg", (0.0, 0.0, 0.0)))
    return GTensor(tuple(data["principal_values"]), euler)


def coupling_to_dict(m: CouplingMatrix) -> dict:
    return {
        "g_par": {"abs": abs(m.g_par), "phase_rad": math.atan2(m.g_par.imag, m.g_par.real)},
        "g_perp": {"abs": abs(m.g_perp), "phase_rad": math.atan2(m.g_perp.imag, m.g_perp.real)},
        "reference": {"phi": m.reference.phi, "theta": m.reference.theta},
    }


def coupling_from_dict(data: dict) -> CouplingMatrix:
    unknown = set(data) - {"g_par", "g_perp", "reference"}
    if unknown:
        raise ValueError(f"unknown keys in coupling: {sorted(unknown)}")
    ref = data.get("reference", {"phi": 100.0, "theta": 90.0})
    par, perp = data["g_par"], data["g_perp"]
    return CouplingMatrix.from_polar(
        par["abs"], par.get("phase_rad", 0.0), perp["abs"], perp.get("phase_rad", 0.0),
        FieldOrientation(ref["phi"], ref["theta"]),
    )


def params_to_dict(p: IonCavityParams) -> dict:
    return asdict(p)


def params_from_dict(data: dict) -> IonCavityParams:
    _check_keys(IonCavityParams, data, "ion parameters")
    return IonCavityParams(**data)


def load_model_config(path) -> dict:
    """Read a JSON file with any of `ground`, `excited`, `coupling`, `ion`/`preset`."""
    data = json.loads(Path(path).read_text())
    unknown = set(data) - {"ground", "excited", "coupling", "ion", "preset"}
    if unknown:
        raise ValueError(f"unknown keys in model config: {sorted(unknown)}")
    ground, excited = default_tensors()
    out = {
        "ground": tensor_from_dict(data["ground"]) if "ground" in data else ground,
        "excited": tensor_from_dict(data["excited"]) if "excited" in data else excited,
        "coupling": coupling_from_dict(data["coupling"]) if "coupling" in data else fitted_coupling(),
    }
    if "ion" in data:
        out["ion"] = params_from_dict(data["ion"])
    elif "preset" in data:
        out["ion"] = get_preset(data["preset"]).params
    return out


def sim_config_for(preset: IonPreset | str, n_pulses: int, seed: int = 0, **overrides):
    """SimConfig matching a preset, with dark counts set from its SNR."""
    from .photon_sim import SimConfig, dark_counts_for_snr

    if isinstance(preset, str):
        preset = get_preset(preset)
    values = dict(
        n_pulses=n_pulses,
        t_rep=preset.t_rep,
        p_ex=preset.p_ex,
        cyclicity=preset.c_max,
        eta=preset.params.eta,
        t1_dark=preset.t1_dark,
        dark_counts_per_window=dark_counts_for_snr(preset.p_ex, preset.params.eta, preset.params.snr),
        seed=seed,
    )
    values.update(overrides)
    return SimConfig(**values)
