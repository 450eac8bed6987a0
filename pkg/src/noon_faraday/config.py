"""Run configuration: one TOML file, overridable from the command line.

Units in the file are the lab ones (mT, degrees C, MHz, seconds); the
``to_*`` helpers convert to SI for the library.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np
import tomli
import tomli_w

from .atomic import CellConfig, noon_frequency
from .metrology import EfficiencyModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CellSection:
    length_m: float = 0.075
    temperature_C: float = 70.0
    abundance_85: float = 0.995
    abundance_87: float = 0.005
    field_drop: float = 0.15
    slices: int = 51


@dataclass(frozen=True)
class ProbeSection:
    # offset from the 87Rb F=2 -> F'=1 D1 line
    offset_MHz: float = 0.0


@dataclass(frozen=True)
class GridSection:
    bmin_mT: float = 0.0
    bmax_mT: float = 50.0
    points: int = 101


@dataclass(frozen=True)
class StateSection:
    phi: float = 0.22
    fidelity: float = 0.90
    singlet: float = 0.0
    optimize_rotation: bool = True
    # single-photon reference for singles fringes: linear polarization angle
    single_angle: float = 0.0
    state_file: str = ""


@dataclass(frozen=True)
class EfficiencySection:
    eta_det: float = 0.95
    eta_path: float = 0.984


@dataclass(frozen=True)
class MetrologySection:
    step_T: float = 1e-5
    include_noclick: bool = False
    lossless: bool = False
    sql_starts: int = 16
    advantage_B_mT: float = 37.0
    pure_rb85: bool = False


@dataclass(frozen=True)
class TomographySection:
    R0: float = 1000.0
    t_int_s: float = 300.0
    points: int = 20
    bmin_mT: float = 0.0
    bmax_mT: float = 60.0
    starts: int = 8
    band_B_mT: float = 37.0
    delta: float = 1.0
    noiseless: bool = False
    singlet: float = 0.02


@dataclass(frozen=True)
class SpectraSection:
    temperatures_C: List[float] = field(default_factory=lambda: [22.0, 53.0, 83.0])
    fields_mT: List[float] = field(default_factory=lambda: [0.0, 12.0, 24.0, 37.0, 49.0, 58.0])
    detuning_min_MHz: float = -2000.0
    detuning_max_MHz: float = 9000.0
    detuning_points: int = 2201


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1
    out: str = "out"


SECTIONS = {
    "cell": CellSection,
    "probe": ProbeSection,
    "grid": GridSection,
    "state": StateSection,
    "efficiency": EfficiencySection,
    "metrology": MetrologySection,
    "tomography": TomographySection,
    "spectra": SpectraSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class RunConfig:
    cell: CellSection = field(default_factory=CellSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    grid: GridSection = field(default_factory=GridSection)
    state: StateSection = field(default_factory=StateSection)
    efficiency: EfficiencySection = field(default_factory=EfficiencySection)
    metrology: MetrologySection = field(default_factory=MetrologySection)
    tomography: TomographySection = field(default_factory=TomographySection)
    spectra: SpectraSection = field(default_factory=SpectraSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            sec = data.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(klass, sec, name)
        return cls(**kwargs)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, section: str, **changes) -> "RunConfig":
        sec = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sec})

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        c = self.cell
        if not c.length_m > 0:
            raise ConfigError("cell.length_m must be positive")
        if not 0.0 <= c.temperature_C <= 150.0:
            raise ConfigError("cell.temperature_C must lie in [0, 150]")
        if c.abundance_85 < 0 or c.abundance_87 < 0 or abs(c.abundance_85 + c.abundance_87 - 1.0) > 1e-9:
            raise ConfigError("abundances must be non-negative and sum to 1")
        if not 0.0 <= c.field_drop < 1.0:
            raise ConfigError("cell.field_drop must lie in [0, 1)")
        if c.slices < 3 or c.slices % 2 == 0:
            raise ConfigError("cell.slices must be odd and >= 3")
        for name, g in (("grid", self.grid), ("tomography", self.tomography)):
            if g.points < 2 or not g.bmax_mT > g.bmin_mT or g.bmin_mT < 0:
                raise ConfigError(f"{name}: need points >= 2 and 0 <= bmin_mT < bmax_mT")
        s = self.state
        if not 1.0 / 3.0 <= s.fidelity <= 1.0:
            raise ConfigError("state.fidelity must lie in [1/3, 1]")
        if not 0.0 <= s.singlet < 1.0:
            raise ConfigError("state.singlet must lie in [0, 1)")
        for v in (self.efficiency.eta_det, self.efficiency.eta_path):
            if not 0.0 < v <= 1.0:
                raise ConfigError("efficiencies must lie in (0, 1]")
        m = self.metrology
        if not m.step_T > 0 or m.sql_starts < 1 or m.advantage_B_mT < 0:
            raise ConfigError("metrology: step_T > 0, sql_starts >= 1, advantage_B_mT >= 0")
        t = self.tomography
        if not (t.R0 > 0 and t.t_int_s > 0 and t.starts >= 1 and t.delta >= 0):
            raise ConfigError("tomography: R0, t_int_s > 0, starts >= 1, delta >= 0")
        sp = self.spectra
        if not sp.temperatures_C or not sp.fields_mT:
            raise ConfigError("spectra lists must be non-empty")
        if any(not 0.0 <= T <= 150.0 for T in sp.temperatures_C) or any(b < 0 for b in sp.fields_mT):
            raise ConfigError("spectra temperatures must lie in [0, 150] C and fields be >= 0")
        if sp.detuning_points < 2 or not sp.detuning_max_MHz > sp.detuning_min_MHz:
            raise ConfigError("spectra detuning range is empty")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")

    # -- SI views --------------------------------------------------------

    def cell_config(self, temperature_C: Optional[float] = None) -> CellConfig:
        c = self.cell
        base = CellConfig(
            length=c.length_m,
            temperature=c.temperature_C if temperature_C is None else temperature_C,
            field_drop=c.field_drop,
            slices=c.slices,
        )
        cfg = base.with_abundances({85: c.abundance_85, 87: c.abundance_87})
        return cfg.pure_rb85() if self.metrology.pure_rb85 else cfg

    def frequency(self) -> float:
        return noon_frequency() + self.probe.offset_MHz * 1e6

    def B_grid(self) -> np.ndarray:
        g = self.grid
        return np.linspace(g.bmin_mT, g.bmax_mT, g.points) * 1e-3

    def tomo_grid(self) -> np.ndarray:
        t = self.tomography
        return np.linspace(t.bmin_mT, t.bmax_mT, t.points) * 1e-3

    def efficiency_model(self) -> EfficiencyModel:
        return EfficiencyModel(self.efficiency.eta_det, self.efficiency.eta_path)


def _build(klass, values: dict, section: str):
    names = {f.name: f for f in fields(klass)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    default = klass()
    out = {}
    for key, val in values.items():
        ref = getattr(default, key)
        out[key] = _coerce(val, ref, f"{section}.{key}")
    return klass(**out)


def _coerce(val, ref, where):
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{where} must be true or false")
        return val
    if isinstance(ref, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where} must be an integer")
        return val
    if isinstance(ref, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(val)
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"{where} must be a string")
        return val
    if isinstance(ref, list):
        if not isinstance(val, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in val]
    raise ConfigError(f"unsupported value at {where}")
