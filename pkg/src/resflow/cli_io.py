"""Scenario configuration, dataset bundles, training-set export, and the
command-line surface.

Configs are YAML in field units (permeability in mD, pressure in bar, rates
in m^3/day, times in days, 1-based well indices) so published parameter
tables transcribe verbatim; everything is converted to SI at the domain
boundary. Unknown keys are rejected with their full path.

A dataset bundle is a directory holding ``manifest.json`` plus one raw
little-endian float32 array file per field (C-contiguous, k-fastest spatial
order). The manifest records shapes, units, byte counts, SHA-256 checksums,
seeds, and the full config, making every bundle reproducible from it alone.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import metrics as metrics_mod
from . import pso as pso_mod
from . import residual_loss as rl
from . import uq as uq_mod
from .core_model import UNITS, FormationProps, Grid3D
from .randfield import (CovarianceSpec, KleSample, build_basis, draw_samples,
                        sample_field)
from .simulator import Scenario, Solution, SolverError, SolverOptions, run
from .wells import ConstantBHP, ConstantRate, WellSpec

__all__ = [
    "ConfigError", "ScenarioConfig", "load_config", "loads_config",
    "dumps_config", "Bundle", "write_bundle", "read_bundle",
    "export_solution", "export_training_set", "export_parity_cases", "main",
]

BUNDLE_FORMAT = "resflow-bundle"
BUNDLE_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check_keys(d: dict, allowed, path: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")


def _section(d: dict, key: str, path: str, required: bool) -> dict | None:
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required section")
        return None
    v = d[key]
    if not isinstance(v, dict):
        raise ConfigError(f"{path}.{key}", "must be a mapping")
    return v


_REQUIRED = object()


def _value(d: dict, key: str, path: str, kind, default=_REQUIRED):
    if key not in d:
        if default is _REQUIRED:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    v = d[key]
    p = f"{path}.{key}"
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(p, f"expected a number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(p, f"expected an integer, got {v!r}")
        return v
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(p, f"expected a string, got {v!r}")
        return v
    if kind is list:
        if not isinstance(v, list):
            raise ConfigError(p, f"expected a list, got {v!r}")
        return v
    raise AssertionError(kind)


@dataclass(frozen=True)
class GridConfig:
    nx: int
    ny: int
    nz: int
    lx_m: float
    ly_m: float
    lz_m: float
    z_top_m: float = 0.0

    @classmethod
    def parse(cls, d: dict, path: str) -> "GridConfig":
        _check_keys(d, ("nx", "ny", "nz", "lx_m", "ly_m", "lz_m", "z_top_m"),
                    path)
        return cls(nx=_value(d, "nx", path, int),
                   ny=_value(d, "ny", path, int),
                   nz=_value(d, "nz", path, int),
                   lx_m=_value(d, "lx_m", path, float),
                   ly_m=_value(d, "ly_m", path, float),
                   lz_m=_value(d, "lz_m", path, float),
                   z_top_m=_value(d, "z_top_m", path, float, 0.0))


@dataclass(frozen=True)
class PropsConfig:
    porosity: float
    oil_density_kg_m3: float
    viscosity_mpas: float
    compressibility_per_bar: float
    formation_factor: float

    @classmethod
    def parse(cls, d: dict, path: str) -> "PropsConfig":
        _check_keys(d, ("porosity", "oil_density_kg_m3", "viscosity_mpas",
                        "compressibility_per_bar", "formation_factor"), path)
        return cls(
            porosity=_value(d, "porosity", path, float),
            oil_density_kg_m3=_value(d, "oil_density_kg_m3", path, float),
            viscosity_mpas=_value(d, "viscosity_mpas", path, float),
            compressibility_per_bar=_value(d, "compressibility_per_bar",
                                           path, float),
            formation_factor=_value(d, "formation_factor", path, float))


@dataclass(frozen=True)
class CovarianceConfig:
    mean_lnk: float
    variance: float
    eta_x_m: float
    eta_y_m: float
    eta_z_m: float

    @classmethod
    def parse(cls, d: dict, path: str) -> "CovarianceConfig":
        _check_keys(d, ("mean_lnk", "variance", "eta_x_m", "eta_y_m",
                        "eta_z_m"), path)
        return cls(mean_lnk=_value(d, "mean_lnk", path, float),
                   variance=_value(d, "variance", path, float),
                   eta_x_m=_value(d, "eta_x_m", path, float),
                   eta_y_m=_value(d, "eta_y_m", path, float),
                   eta_z_m=_value(d, "eta_z_m", path, float))


@dataclass(frozen=True)
class KleConfig:
    n_modes: int
    seed: int = 0

    @classmethod
    def parse(cls, d: dict, path: str) -> "KleConfig":
        _check_keys(d, ("n_modes", "seed"), path)
        return cls(n_modes=_value(d, "n_modes", path, int),
                   seed=_value(d, "seed", path, int, 0))


@dataclass(frozen=True)
class WellConfig:
    """One well in config coordinates: 1-based i/j/k indices, field units."""

    name: str
    i: int
    j: int
    k_top: int
    k_bot: int
    control_type: str            # "rate" | "bhp"
    control_value: float         # m^3/day (production positive) or bar
    radius_m: float = 0.1

    @classmethod
    def parse(cls, d: dict, path: str) -> "WellConfig":
        _check_keys(d, ("name", "i", "j", "k_top", "k_bot", "control",
                        "radius_m"), path)
        control = _section(d, "control", path, required=True)
        _check_keys(control, ("type", "value_m3_per_day", "value_bar"),
                    f"{path}.control")
        ctype = _value(control, "type", f"{path}.control", str)
        if ctype == "rate":
            value = _value(control, "value_m3_per_day", f"{path}.control",
                           float)
            if "value_bar" in control:
                raise ConfigError(f"{path}.control.value_bar",
                                  "not valid for rate control")
        elif ctype == "bhp":
            value = _value(control, "value_bar", f"{path}.control", float)
            if "value_m3_per_day" in control:
                raise ConfigError(f"{path}.control.value_m3_per_day",
                                  "not valid for bhp control")
        else:
            raise ConfigError(f"{path}.control.type",
                              f"must be 'rate' or 'bhp', got {ctype!r}")
        return cls(name=_value(d, "name", path, str),
                   i=_value(d, "i", path, int),
                   j=_value(d, "j", path, int),
                   k_top=_value(d, "k_top", path, int),
                   k_bot=_value(d, "k_bot", path, int),
                   control_type=ctype, control_value=value,
                   radius_m=_value(d, "radius_m", path, float, 0.1))

    def to_dict(self) -> dict:
        control = {"type": self.control_type}
        if self.control_type == "rate":
            control["value_m3_per_day"] = self.control_value
        else:
            control["value_bar"] = self.control_value
        return {"name": self.name, "i": self.i, "j": self.j,
                "k_top": self.k_top, "k_bot": self.k_bot,
                "control": control, "radius_m": self.radius_m}


@dataclass(frozen=True)
class TimeConfig:
    dt_days: float
    n_steps: int

    @classmethod
    def parse(cls, d: dict, path: str) -> "TimeConfig":
        _check_keys(d, ("dt_days", "n_steps"), path)
        return cls(dt_days=_value(d, "dt_days", path, float),
                   n_steps=_value(d, "n_steps", path, int))


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1.0e-10
    max_iter: int = 1000
    preconditioner: str = "amg"

    @classmethod
    def parse(cls, d: dict, path: str) -> "SolverConfig":
        _check_keys(d, ("tol", "max_iter", "preconditioner"), path)
        return cls(tol=_value(d, "tol", path, float, 1.0e-10),
                   max_iter=_value(d, "max_iter", path, int, 1000),
                   preconditioner=_value(d, "preconditioner", path, str,
                                         "amg"))


@dataclass(frozen=True)
class LossConfig:
    data: float = 1.0
    pde: float = 1.0
    bc: float = 1.0
    normalize: str = "mean"

    @classmethod
    def parse(cls, d: dict, path: str) -> "LossConfig":
        _check_keys(d, ("data", "pde", "bc", "normalize"), path)
        return cls(data=_value(d, "data", path, float, 1.0),
                   pde=_value(d, "pde", path, float, 1.0),
                   bc=_value(d, "bc", path, float, 1.0),
                   normalize=_value(d, "normalize", path, str, "mean"))


@dataclass(frozen=True)
class PsoConfig:
    omega: float = 0.9
    c1: float = 2.0
    c2: float = 2.0
    maxgen: int = 50
    sizepop: int = 20
    vmax: float = 1.0
    vmin: float = -1.0
    xmax: float = 4.0
    xmin: float = -4.0
    seed: int = 0

    @classmethod
    def parse(cls, d: dict, path: str) -> "PsoConfig":
        _check_keys(d, ("omega", "c1", "c2", "maxgen", "sizepop", "vmax",
                        "vmin", "xmax", "xmin", "seed"), path)
        return cls(omega=_value(d, "omega", path, float, 0.9),
                   c1=_value(d, "c1", path, float, 2.0),
                   c2=_value(d, "c2", path, float, 2.0),
                   maxgen=_value(d, "maxgen", path, int, 50),
                   sizepop=_value(d, "sizepop", path, int, 20),
                   vmax=_value(d, "vmax", path, float, 1.0),
                   vmin=_value(d, "vmin", path, float, -1.0),
                   xmax=_value(d, "xmax", path, float, 4.0),
                   xmin=_value(d, "xmin", path, float, -4.0),
                   seed=_value(d, "seed", path, int, 0))


@dataclass(frozen=True)
class InversionConfig:
    n_obs_steps: int
    truth_seed: int = 7
    noise_frac: float = 0.0
    mode: str = "known-stats"    # or "unknown-stats"
    lambda_rate: float = 1.0
    lambda_perm: float = 1000.0
    lambda_bhp: float = 10.0
    variance_bounds: tuple[float, float] = (0.0, 1.0)
    eta_bounds_m: tuple[float, float] = (130.0, 190.0)

    @classmethod
    def parse(cls, d: dict, path: str) -> "InversionConfig":
        _check_keys(d, ("n_obs_steps", "truth_seed", "noise_frac", "mode",
                        "lambda_rate", "lambda_perm", "lambda_bhp",
                        "variance_bounds", "eta_bounds_m"), path)
        mode = _value(d, "mode", path, str, "known-stats")
        if mode not in ("known-stats", "unknown-stats"):
            raise ConfigError(f"{path}.mode",
                              "must be 'known-stats' or 'unknown-stats'")

        def bounds(key, default):
            raw = _value(d, key, path, list, list(default))
            if len(raw) != 2 or not all(
                    isinstance(x, (int, float)) and not isinstance(x, bool)
                    for x in raw):
                raise ConfigError(f"{path}.{key}",
                                  "expected [low, high] numbers")
            return (float(raw[0]), float(raw[1]))

        return cls(
            n_obs_steps=_value(d, "n_obs_steps", path, int),
            truth_seed=_value(d, "truth_seed", path, int, 7),
            noise_frac=_value(d, "noise_frac", path, float, 0.0),
            mode=mode,
            lambda_rate=_value(d, "lambda_rate", path, float, 1.0),
            lambda_perm=_value(d, "lambda_perm", path, float, 1000.0),
            lambda_bhp=_value(d, "lambda_bhp", path, float, 10.0),
            variance_bounds=bounds("variance_bounds", (0.0, 1.0)),
            eta_bounds_m=bounds("eta_bounds_m", (130.0, 190.0)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variance_bounds"] = list(self.variance_bounds)
        d["eta_bounds_m"] = list(self.eta_bounds_m)
        return d


@dataclass(frozen=True)
class DatasetConfig:
    n_lnk_train: int = 5
    nt_train: int = 0            # 0 -> all scenario steps
    n_lnk_virtual: int = 0
    n_well_train: int = 0        # > 0 switches on varying-well mode
    n_well_virtual: int = 0
    seed_train: int = 1
    seed_virtual: int = 2
    seed_wells: int = 3

    @classmethod
    def parse(cls, d: dict, path: str) -> "DatasetConfig":
        _check_keys(d, ("n_lnk_train", "nt_train", "n_lnk_virtual",
                        "n_well_train", "n_well_virtual", "seed_train",
                        "seed_virtual", "seed_wells"), path)
        return cls(n_lnk_train=_value(d, "n_lnk_train", path, int, 5),
                   nt_train=_value(d, "nt_train", path, int, 0),
                   n_lnk_virtual=_value(d, "n_lnk_virtual", path, int, 0),
                   n_well_train=_value(d, "n_well_train", path, int, 0),
                   n_well_virtual=_value(d, "n_well_virtual", path, int, 0),
                   seed_train=_value(d, "seed_train", path, int, 1),
                   seed_virtual=_value(d, "seed_virtual", path, int, 2),
                   seed_wells=_value(d, "seed_wells", path, int, 3))


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated top-level configuration document."""

    grid: GridConfig
    props: PropsConfig
    p_ref_top_bar: float
    time: TimeConfig
    wells: tuple[WellConfig, ...] = ()
    covariance: CovarianceConfig | None = None
    kle: KleConfig | None = None
    solver: SolverConfig = SolverConfig()
    loss: LossConfig = LossConfig()
    pso: PsoConfig = PsoConfig()
    inversion: InversionConfig | None = None
    dataset: DatasetConfig = DatasetConfig()

    # -- parsing / serialization -------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "document must be a mapping")
        _check_keys(doc, ("grid", "props", "init", "time", "wells",
                          "covariance", "kle", "solver", "loss", "pso",
                          "inversion", "dataset"), "<root>")
        init = _section(doc, "init", "<root>", required=True)
        _check_keys(init, ("p_ref_top_bar",), "init")
        wells_raw = doc.get("wells", [])
        if not isinstance(wells_raw, list):
            raise ConfigError("wells", "must be a list")
        wells = tuple(
            WellConfig.parse(
                w if isinstance(w, dict)
                else (_ for _ in ()).throw(
                    ConfigError(f"wells[{n}]", "must be a mapping")),
                f"wells[{n}]")
            for n, w in enumerate(wells_raw))
        cov_raw = _section(doc, "covariance", "<root>", required=False)
        kle_raw = _section(doc, "kle", "<root>", required=False)
        inv_raw = _section(doc, "inversion", "<root>", required=False)
        return cls(
            grid=GridConfig.parse(_section(doc, "grid", "<root>", True),
                                  "grid"),
            props=PropsConfig.parse(_section(doc, "props", "<root>", True),
                                    "props"),
            p_ref_top_bar=_value(init, "p_ref_top_bar", "init", float),
            time=TimeConfig.parse(_section(doc, "time", "<root>", True),
                                  "time"),
            wells=wells,
            covariance=(CovarianceConfig.parse(cov_raw, "covariance")
                        if cov_raw is not None else None),
            kle=KleConfig.parse(kle_raw, "kle") if kle_raw is not None else None,
            solver=SolverConfig.parse(
                _section(doc, "solver", "<root>", False) or {}, "solver"),
            loss=LossConfig.parse(
                _section(doc, "loss", "<root>", False) or {}, "loss"),
            pso=PsoConfig.parse(
                _section(doc, "pso", "<root>", False) or {}, "pso"),
            inversion=(InversionConfig.parse(inv_raw, "inversion")
                       if inv_raw is not None else None),
            dataset=DatasetConfig.parse(
                _section(doc, "dataset", "<root>", False) or {}, "dataset"))

    def to_dict(self) -> dict:
        doc = {
            "grid": asdict(self.grid),
            "props": asdict(self.props),
            "init": {"p_ref_top_bar": self.p_ref_top_bar},
            "time": asdict(self.time),
            "wells": [w.to_dict() for w in self.wells],
            "solver": asdict(self.solver),
            "loss": asdict(self.loss),
            "pso": asdict(self.pso),
            "dataset": asdict(self.dataset),
        }
        if self.covariance is not None:
            doc["covariance"] = asdict(self.covariance)
        if self.kle is not None:
            doc["kle"] = asdict(self.kle)
        if self.inversion is not None:
            doc["inversion"] = self.inversion.to_dict()
        return doc

    # -- builders to domain objects ----------------------------------------

    def build_grid(self) -> Grid3D:
        g = self.grid
        return Grid3D(nx=g.nx, ny=g.ny, nz=g.nz, lx=g.lx_m, ly=g.ly_m,
                      lz=g.lz_m, z_top=g.z_top_m)

    def build_props(self) -> FormationProps:
        p = self.props
        return FormationProps(
            porosity=p.porosity, oil_density=p.oil_density_kg_m3,
            viscosity=UNITS.viscosity_to_si(p.viscosity_mpas),
            compressibility=UNITS.compressibility_to_si(
                p.compressibility_per_bar),
            formation_factor=p.formation_factor)

    def build_cov(self) -> CovarianceSpec:
        if self.covariance is None:
            raise ConfigError("covariance", "section required for this command")
        c = self.covariance
        return CovarianceSpec(mean_lnk=c.mean_lnk, variance=c.variance,
                              eta_x=c.eta_x_m, eta_y=c.eta_y_m,
                              eta_z=c.eta_z_m)

    def build_kle(self) -> KleConfig:
        if self.kle is None:
            raise ConfigError("kle", "section required for this command")
        return self.kle

    def build_wells(self) -> tuple[WellSpec, ...]:
        grid = self.build_grid()
        out = []
        for n, w in enumerate(self.wells):
            path = f"wells[{n}]"
            for key, val, hi in (("i", w.i, grid.nx), ("j", w.j, grid.ny),
                                 ("k_top", w.k_top, grid.nz),
                                 ("k_bot", w.k_bot, grid.nz)):
                if not 1 <= val <= hi:
                    raise ConfigError(f"{path}.{key}",
                                      f"must lie in [1, {hi}], got {val}")
            if w.control_type == "rate":
                control = ConstantRate(q_sc=UNITS.rate_to_si(w.control_value))
            else:
                control = ConstantBHP(bhp=UNITS.pressure_to_si(w.control_value))
            try:
                spec = WellSpec(i=w.i - 1, j=w.j - 1, k_top=w.k_top - 1,
                                k_bot=w.k_bot - 1, control=control,
                                r_w=w.radius_m, name=w.name)
            except ValueError as exc:
                raise ConfigError(path, str(exc)) from exc
            out.append(spec)
        return tuple(out)

    def build_scenario(self, perm_m2: np.ndarray) -> Scenario:
        return Scenario(grid=self.build_grid(), props=self.build_props(),
                        perm=perm_m2, wells=self.build_wells(),
                        p_ref_top=UNITS.pressure_to_si(self.p_ref_top_bar),
                        dt=UNITS.time_to_si(self.time.dt_days),
                        n_steps=self.time.n_steps)

    def build_solver_options(self) -> SolverOptions:
        s = self.solver
        try:
            return SolverOptions(tol=s.tol, max_iter=s.max_iter,
                                 preconditioner=s.preconditioner)
        except ValueError as exc:
            raise ConfigError("solver", str(exc)) from exc

    def build_loss_weights(self) -> rl.LossWeights:
        try:
            return rl.LossWeights(data=self.loss.data, pde=self.loss.pde,
                                  bc=self.loss.bc)
        except ValueError as exc:
            raise ConfigError("loss", str(exc)) from exc

    def build_pso_params(self) -> pso_mod.PsoParams:
        p = self.pso
        try:
            return pso_mod.PsoParams(
                omega=p.omega, c1=p.c1, c2=p.c2, maxgen=p.maxgen,
                sizepop=p.sizepop, vmax=p.vmax, vmin=p.vmin, xmax=p.xmax,
                xmin=p.xmin, seed=p.seed)
        except ValueError as exc:
            raise ConfigError("pso", str(exc)) from exc

    def sample_lnk_fields(self, seed: int, n: int) -> np.ndarray:
        """n ln-permeability realizations (ln-mD) from the configured modes."""
        basis = build_basis(self.build_grid(), self.build_cov(),
                            self.build_kle().n_modes)
        cov = self.build_cov()
        samples = draw_samples(seed, n, basis.n_modes)
        return np.stack([sample_field(basis, s, cov).values for s in samples])


def loads_config(text: str) -> ScenarioConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
    return ScenarioConfig.from_dict(doc)


def load_config(path) -> ScenarioConfig:
    return loads_config(Path(path).read_text())


def dumps_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# dataset bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bundle:
    path: Path
    manifest: dict
    arrays: dict[str, np.ndarray]   # float32 as stored

    def array(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise KeyError(f"bundle has no field {name!r}; "
                           f"available: {sorted(self.arrays)}")
        return self.arrays[name]


def write_bundle(path, arrays: dict[str, np.ndarray], *, grid: Grid3D | None,
                 units: dict[str, str] | None = None,
                 seeds: dict | None = None, provenance: dict | None = None,
                 reports: list[dict] | None = None) -> Path:
    """Write arrays as little-endian float32 raw files plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    units = units or {}
    fields = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        fname = f"{name}.f32"
        raw = data.tobytes()
        (path / fname).write_bytes(raw)
        fields.append({
            "name": name,
            "file": fname,
            "shape": list(data.shape),
            "units": units.get(name, ""),
            "bytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "created": datetime.now(timezone.utc).isoformat(),
        "dtype": "<f4",
        "storage_order": "k-fastest",
        "grid": ({"nx": grid.nx, "ny": grid.ny, "nz": grid.nz,
                  "lx_m": grid.lx, "ly_m": grid.ly, "lz_m": grid.lz,
                  "z_top_m": grid.z_top} if grid is not None else None),
        "seeds": seeds or {},
        "provenance": provenance or {},
        "fields": fields,
    }
    if reports is not None:
        manifest["reports"] = reports
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_bundle(path, verify: bool = True) -> Bundle:
    """Read a bundle directory; verifies byte counts and checksums."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{path}: not a {BUNDLE_FORMAT} directory")
    arrays = {}
    for entry in manifest["fields"]:
        raw = (path / entry["file"]).read_bytes()
        if len(raw) != entry["bytes"]:
            raise ValueError(
                f"{path}/{entry['file']}: expected {entry['bytes']} bytes, "
                f"found {len(raw)}")
        if verify:
            digest = hashlib.sha256(raw).hexdigest()
            if digest != entry["sha256"]:
                raise ValueError(f"{path}/{entry['file']}: checksum mismatch")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f4").reshape(entry["shape"])
    return Bundle(path=path, manifest=manifest, arrays=arrays)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _write_well_csv(path: Path, solution: Solution) -> None:
    sc = solution.scenario
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["well_id", "step", "time_days", "rate_m3_per_day",
                         "bhp_bar"])
        for ws in solution.well_solutions:
            for n in range(sc.n_steps):
                writer.writerow([
                    ws.well.name,
                    n + 1,
                    repr(float(UNITS.time_from_si(sc.times[n + 1]))),
                    repr(float(UNITS.rate_from_si(ws.rates[n]))),
                    repr(float(UNITS.pressure_from_si(ws.bhp[n]))),
                ])


def export_solution(out_dir, solution: Solution, cfg: ScenarioConfig,
                    lnk: np.ndarray | None = None,
                    seeds: dict | None = None) -> Path:
    """Forward-run export: potential/pressure snapshots (+ the ln-perm field
    when given) and a per-well CSV."""
    sc = solution.scenario
    arrays = {
        "potential": solution.potentials,
        "pressure": solution.pressures,
        "time_days": UNITS.time_from_si(sc.times),
    }
    units = {"potential": "Pa", "pressure": "Pa", "time_days": "day"}
    if lnk is not None:
        arrays["lnk"] = lnk
        units["lnk"] = "ln_mD"
    out = write_bundle(out_dir, arrays, grid=sc.grid, units=units,
                       seeds=seeds or {},
                       provenance={"command": "simulate",
                                   "config": cfg.to_dict()})
    _write_well_csv(out / "wells.csv", solution)
    return out


def export_training_set(cfg: ScenarioConfig, out_dir, *,
                        n_lnk_train: int | None = None,
                        nt_train: int | None = None,
                        n_lnk_virtual: int | None = None,
                        n_well_train: int | None = None,
                        n_well_virtual: int | None = None,
                        workers: int = 1) -> Path:
    """Export a labelled + virtual training set.

    The labelled set holds ln-perm fields, normalized/physical time channels,
    and simulated potential snapshots (``nt_train`` steps of the configured
    scenario). The virtual set holds ln-perm fields only — inputs for
    physics-residual evaluation with no attached solutions. When
    ``n_well_train``/``n_well_virtual`` is positive, wells vary per sample:
    single-producer configurations are drawn at random interior positions and
    a binary well-image channel is exported for each.
    """
    ds = cfg.dataset
    n_lnk_train = ds.n_lnk_train if n_lnk_train is None else n_lnk_train
    nt_train = (ds.nt_train if nt_train is None else nt_train) or cfg.time.n_steps
    n_lnk_virtual = ds.n_lnk_virtual if n_lnk_virtual is None else n_lnk_virtual
    n_well_train = ds.n_well_train if n_well_train is None else n_well_train
    n_well_virtual = ds.n_well_virtual if n_well_virtual is None else n_well_virtual
    if n_lnk_train < 1:
        raise ConfigError("dataset.n_lnk_train", "must be at least 1")
    if not 1 <= nt_train <= cfg.time.n_steps:
        raise ConfigError("dataset.nt_train",
                          f"must lie in [1, {cfg.time.n_steps}]")

    grid = cfg.build_grid()
    options = cfg.build_solver_options()
    scenario_base = cfg.build_scenario(
        np.full(grid.shape, UNITS.perm_to_si(1.0)))
    varying_wells = n_well_train > 0 or n_well_virtual > 0

    lnk_train = cfg.sample_lnk_fields(ds.seed_train, n_lnk_train)

    from .wells import well_image

    def well_sets(count, rng):
        """Random single-producer configurations at interior positions."""
        sets = []
        for _ in range(count):
            i = int(rng.integers(1, grid.nx - 1))
            j = int(rng.integers(1, grid.ny - 1))
            template = scenario_base.wells[0]
            sets.append((replace(template, i=i, j=j),))
        return sets

    if varying_wells:
        if not scenario_base.wells:
            raise ConfigError("wells", "varying-well export needs a template "
                                       "well to copy control settings from")
        rng = np.random.default_rng(ds.seed_wells)
        train_wells = well_sets(max(n_well_train, 1), rng)
        virtual_wells = well_sets(max(n_well_virtual, 1), rng)
    else:
        train_wells = [scenario_base.wells]
        virtual_wells = [scenario_base.wells]

    t_all = scenario_base.times[:nt_train + 1]
    horizon = scenario_base.times[-1]

    def solve_one(args):
        lnk_values, wells = args
        scen = replace(scenario_base, perm=UNITS.perm_to_si(np.exp(lnk_values)),
                       wells=wells)
        return run(scen, options).potentials[:nt_train + 1]

    jobs = [(lnk_train[s], train_wells[s % len(train_wells)])
            for s in range(n_lnk_train)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            potentials = list(pool.map(solve_one, jobs))
    else:
        potentials = [solve_one(j) for j in jobs]

    arrays = {
        "lnk_train": lnk_train,
        "potential_train": np.stack(potentials),
        "time_days": UNITS.time_from_si(t_all),
        "t_norm": t_all / horizon,
    }
    units = {"lnk_train": "ln_mD", "potential_train": "Pa",
             "time_days": "day", "t_norm": "1"}
    if n_lnk_virtual > 0:
        arrays["lnk_virtual"] = cfg.sample_lnk_fields(ds.seed_virtual,
                                                      n_lnk_virtual)
        units["lnk_virtual"] = "ln_mD"
    if varying_wells:
        arrays["well_image_train"] = np.stack(
            [well_image(grid, train_wells[s % len(train_wells)]).values
             for s in range(n_lnk_train)])
        units["well_image_train"] = "1"
        if n_lnk_virtual > 0:
            arrays["well_image_virtual"] = np.stack(
                [well_image(grid, virtual_wells[s % len(virtual_wells)]).values
                 for s in range(n_lnk_virtual)])
            units["well_image_virtual"] = "1"
    else:
        arrays["well_image"] = well_image(grid, scenario_base.wells).values
        units["well_image"] = "1"

    return write_bundle(
        out_dir, arrays, grid=grid, units=units,
        seeds={"train": ds.seed_train, "virtual": ds.seed_virtual,
               "wells": ds.seed_wells},
        provenance={"command": "export-dataset", "config": cfg.to_dict(),
                    "n_lnk_train": n_lnk_train, "nt_train": nt_train,
                    "n_lnk_virtual": n_lnk_virtual,
                    "n_well_train": n_well_train,
                    "n_well_virtual": n_well_virtual})


def export_parity_cases(cfg: ScenarioConfig, out_dir, n_cases: int = 10,
                        seed: int = 2024) -> Path:
    """Export loss-parity fixtures: perturbed potential sequences (stored
    float32) together with the loss components the residual evaluator
    computes from exactly those float32 values. External reimplementations
    of the loss arithmetic validate against these numbers.
    """
    if n_cases < 1:
        raise ConfigError("dataset", "n_cases must be at least 1")
    grid = cfg.build_grid()
    props = cfg.build_props()
    weights = cfg.build_loss_weights()
    options = cfg.build_solver_options()
    lnk_fields = cfg.sample_lnk_fields(seed, n_cases)
    rng = np.random.default_rng(seed + 1)

    arrays: dict[str, np.ndarray] = {}
    units: dict[str, str] = {}
    reports: list[dict] = []
    for c in range(n_cases):
        lnk32 = lnk_fields[c].astype(np.float32)
        scen = cfg.build_scenario(UNITS.perm_to_si(np.exp(
            lnk32.astype(np.float64))))
        sol = run(scen, options)
        phi = sol.potentials
        # seeded perturbation so the residual is non-trivial
        scale = 0.01 * float(np.abs(phi).max())
        phi_pred = phi + scale * rng.standard_normal(phi.shape)
        phi_pred[0] = phi[0]   # keep the initial snapshot exact
        phi32 = phi_pred.astype(np.float32)
        ref32 = phi.astype(np.float32)

        report = rl.evaluate_sequences(
            grid, props, scen.perm, scen.wells, scen.dt,
            phi32.astype(np.float64), scen.p_ref_top, weights,
            data_pred=phi32.astype(np.float64),
            data_ref=ref32.astype(np.float64),
            normalize=cfg.loss.normalize)

        arrays[f"lnk_{c}"] = lnk32
        arrays[f"phi_pred_{c}"] = phi32
        arrays[f"phi_ref_{c}"] = ref32
        units[f"lnk_{c}"] = "ln_mD"
        units[f"phi_pred_{c}"] = "Pa"
        units[f"phi_ref_{c}"] = "Pa"
        reports.append({
            "case": c,
            "loss_data": report.loss_data,
            "loss_pde": report.loss_pde,
            "loss_bc": report.loss_bc,
            "loss_total": report.loss_total,
            "weights": {"data": weights.data, "pde": weights.pde,
                        "bc": weights.bc},
            "normalize": report.normalize,
            "phi_scale": report.phi_scale,
            "time_scale": report.time_scale,
            "residual_scale": report.residual_scale,
        })

    return write_bundle(out_dir, arrays, grid=grid, units=units,
                        seeds={"parity": seed},
                        provenance={"command": "residual-check --parity",
                                    "config": cfg.to_dict()},
                        reports=reports)


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def _parse_bundle_field(spec: str) -> tuple[str, str]:
    if ":" not in spec:
        raise ValueError(
            f"expected DIR:FIELD (e.g. out/run1:pressure), got {spec!r}")
    path, _, name = spec.rpartition(":")
    return path, name


def _load_perm(cfg: ScenarioConfig, perm_source: str | None,
               seed: int | None) -> tuple[np.ndarray, np.ndarray, dict]:
    """(perm_m2, lnk, seeds) for a forward run: from a bundle field when
    given, otherwise sampled from the configured covariance."""
    if perm_source is not None:
        path, name = _parse_bundle_field(perm_source)
        arr = read_bundle(path).array(name).astype(np.float64)
        grid = cfg.build_grid()
        if arr.ndim == 4:
            arr = arr[0]
        if arr.shape != grid.shape:
            raise ValueError(f"field {name!r} has shape {arr.shape}, "
                             f"expected {grid.shape}")
        return UNITS.perm_to_si(np.exp(arr)), arr, {"perm_source": perm_source}
    kle_seed = cfg.build_kle().seed if seed is None else seed
    lnk = cfg.sample_lnk_fields(kle_seed, 1)[0]
    return UNITS.perm_to_si(np.exp(lnk)), lnk, {"kle": kle_seed}


def _cmd_genfield(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.build_kle().seed if args.seed is None else args.seed
    lnk = cfg.sample_lnk_fields(seed, args.n)
    write_bundle(args.out, {"lnk": lnk}, grid=cfg.build_grid(),
                 units={"lnk": "ln_mD"}, seeds={"kle": seed},
                 provenance={"command": "genfield", "config": cfg.to_dict(),
                             "n": args.n})
    print(f"wrote {args.n} ln-permeability field(s) to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    perm, lnk, seeds = _load_perm(cfg, args.perm, args.seed)
    solution = run(cfg.build_scenario(perm), cfg.build_solver_options())
    export_solution(args.out, solution, cfg, lnk=lnk, seeds=seeds)
    err = solution.mass_balance_error()
    print(f"simulated {solution.scenario.n_steps} step(s); "
          f"max mass-balance error {err.max():.3e}; wrote {args.out}")
    return 0


def _cmd_residual_check(args) -> int:
    cfg = load_config(args.config)
    if args.parity:
        out = export_parity_cases(cfg, args.out, n_cases=args.parity,
                                  seed=args.seed if args.seed is not None
                                  else 2024)
        print(f"wrote {args.parity} parity case(s) to {out}")
        return 0
    perm, _, _ = _load_perm(cfg, args.perm, args.seed)
    options = cfg.build_solver_options()
    solution = run(cfg.build_scenario(perm), options)
    report = rl.report_for_solution(solution, cfg.build_loss_weights(),
                                    normalize=cfg.loss.normalize)
    # guaranteed bound: per-step linear tolerance propagated through the
    # residual scaling
    sc = solution.scenario
    bound = (10.0 * options.tol * solution.diagnostics.rhs_norms.max()
             / sc.grid.cell_volume * report.residual_scale)
    ok = report.max_abs_residual <= bound
    print(f"losses: data={report.loss_data:.6e} pde={report.loss_pde:.6e} "
          f"bc={report.loss_bc:.6e} total={report.loss_total:.6e}")
    print(f"max |residual| = {report.max_abs_residual:.3e} "
          f"(bound {bound:.3e}) -> {'OK' if ok else 'FAIL'}")
    return 0 if ok else 3


def _cmd_export_dataset(args) -> int:
    cfg = load_config(args.config)
    out = export_training_set(
        cfg, args.out, n_lnk_train=args.n_lnk_train, nt_train=args.nt_train,
        n_lnk_virtual=args.n_lnk_virtual, n_well_train=args.n_well_train,
        n_well_virtual=args.n_well_virtual, workers=args.workers)
    print(f"wrote training set to {out}")
    return 0


def _cmd_uq(args) -> int:
    cfg = load_config(args.config)
    grid = cfg.build_grid()
    cov = cfg.build_cov()
    basis = build_basis(grid, cov, cfg.build_kle().n_modes)
    scenario = cfg.build_scenario(np.full(grid.shape, UNITS.perm_to_si(1.0)))
    options = cfg.build_solver_options()

    def forward(perm, scen):
        return run(replace(scen, perm=perm), options)

    seed = cfg.build_kle().seed if args.seed is None else args.seed
    stats = uq_mod.run_ensemble(basis, cov, scenario, args.n, seed,
                                forward=forward, workers=args.workers)
    out = write_bundle(
        args.out,
        {"mean_pressure": stats.mean_pressure,
         "var_pressure": stats.var_pressure,
         "mean_rate": stats.mean_rate, "var_rate": stats.var_rate,
         "mean_bhp": stats.mean_bhp, "var_bhp": stats.var_bhp},
        grid=grid,
        units={"mean_pressure": "Pa", "var_pressure": "Pa^2",
               "mean_rate": "m3_per_s", "var_rate": "(m3_per_s)^2",
               "mean_bhp": "Pa", "var_bhp": "Pa^2"},
        seeds={"ensemble": seed},
        provenance={"command": "uq", "config": cfg.to_dict(), "n": args.n})
    with (out / "well_stats.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["well_id", "step", "mean_rate_m3_per_day",
                         "std_rate_m3_per_day", "mean_bhp_bar",
                         "std_bhp_bar"])
        for w, spec in enumerate(scenario.wells):
            for n in range(scenario.n_steps):
                writer.writerow([
                    spec.name, n + 1,
                    repr(float(UNITS.rate_from_si(stats.mean_rate[w, n]))),
                    repr(float(UNITS.rate_from_si(
                        np.sqrt(stats.var_rate[w, n])))),
                    repr(float(UNITS.pressure_from_si(stats.mean_bhp[w, n]))),
                    repr(float(np.sqrt(stats.var_bhp[w, n])
                               / UNITS.bar_to_pa)),
                ])
    print(f"ensemble of {stats.n} realization(s); wrote {out}")
    return 0


def _cmd_invert(args) -> int:
    cfg = load_config(args.config)
    if cfg.inversion is None:
        raise ConfigError("inversion", "section required for this command")
    inv = cfg.inversion
    grid = cfg.build_grid()
    cov = cfg.build_cov()
    n_modes = cfg.build_kle().n_modes
    basis = build_basis(grid, cov, n_modes)
    scenario = cfg.build_scenario(np.full(grid.shape, UNITS.perm_to_si(1.0)))
    options = cfg.build_solver_options()

    xi_true = draw_samples(inv.truth_seed, 1, n_modes)[0].xi
    spec = pso_mod.synthetic_observations(
        scenario, basis, cov, xi_true, inv.n_obs_steps,
        noise_frac=inv.noise_frac, seed=inv.truth_seed + 1,
        solver_options=options, lambda_rate=inv.lambda_rate,
        lambda_perm=inv.lambda_perm, lambda_bhp=inv.lambda_bhp)
    problem = pso_mod.InversionProblem(scenario=scenario, cov=cov, spec=spec,
                                       n_obs_steps=inv.n_obs_steps,
                                       solver_options=options)
    mode = args.mode or inv.mode
    if mode == "unknown-stats":
        search = pso_mod.UnknownStats(n_modes=n_modes,
                                      variance_bounds=inv.variance_bounds,
                                      eta_bounds=inv.eta_bounds_m)
    else:
        search = pso_mod.KnownStats(n_modes=n_modes)
    result = pso_mod.invert(problem, cfg.build_pso_params(), search,
                            workers=args.workers)

    out = write_bundle(
        Path(args.out), {"lnk_inverted": result.lnk_field.values,
                         "fitness_trace": result.trace,
                         "best_x": result.best_x},
        grid=grid,
        units={"lnk_inverted": "ln_mD", "fitness_trace": "1", "best_x": "1"},
        seeds={"pso": cfg.pso.seed, "truth": inv.truth_seed},
        provenance={"command": "invert", "config": cfg.to_dict(),
                    "mode": mode})
    with (out / "fitness_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "best_fitness"])
        for g, f in enumerate(result.trace):
            writer.writerow([g, repr(float(f))])
    print(f"best fitness {result.best_fitness:.6e} after "
          f"{len(result.trace) - 1} generation(s); wrote {out}")
    return 0


def _cmd_metrics(args) -> int:
    pred_path, pred_name = _parse_bundle_field(args.pred)
    ref_path, ref_name = _parse_bundle_field(args.ref)
    pred = read_bundle(pred_path).array(pred_name).astype(np.float64)
    ref = read_bundle(ref_path).array(ref_name).astype(np.float64)
    rows = []
    if args.per_field:
        for n, rep in enumerate(metrics_mod.per_field_reports(pred, ref)):
            rows.append((str(n), rep))
    rows.append(("pooled", metrics_mod.compare(pred, ref)))
    lines = [("id", "relative_l2", "r2", "n_points")]
    for name, rep in rows:
        lines.append((name, repr(rep.relative_l2), repr(rep.r2),
                      str(rep.n_points)))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
    for line in lines:
        print(",".join(line))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resflow",
        description="Forward and inverse modeling toolkit for single-phase "
                    "subsurface flow")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("genfield", _cmd_genfield,
            "sample ln-permeability fields from the configured covariance")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)

    p = add("simulate", _cmd_simulate, "run the forward model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perm", default=None,
                   help="DIR:FIELD bundle source for ln-permeability "
                        "(default: sample from config)")
    p.add_argument("--seed", type=int, default=None)

    p = add("residual-check", _cmd_residual_check,
            "evaluate the physics-residual report for a forward run")
    p.add_argument("--config", required=True)
    p.add_argument("--perm", default=None, help="DIR:FIELD bundle source")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parity", type=int, default=0, metavar="N",
                   help="export N loss-parity fixtures instead")
    p.add_argument("--out", default=None,
                   help="output directory (required with --parity)")

    p = add("export-dataset", _cmd_export_dataset,
            "export a labelled + virtual training set")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-lnk-train", type=int, default=None)
    p.add_argument("--nt-train", type=int, default=None)
    p.add_argument("--n-lnk-virtual", type=int, default=None)
    p.add_argument("--n-well-train", type=int, default=None)
    p.add_argument("--n-well-virtual", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = add("uq", _cmd_uq, "Monte Carlo ensemble statistics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)

    p = add("invert", _cmd_invert,
            "history-match coefficients by particle swarm")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("known-stats", "unknown-stats"),
                   default=None)
    p.add_argument("--workers", type=int, default=1)

    p = add("metrics", _cmd_metrics, "accuracy metrics between two bundles")
    p.add_argument("--pred", required=True, help="DIR:FIELD")
    p.add_argument("--ref", required=True, help="DIR:FIELD")
    p.add_argument("--per-field", action="store_true")
    p.add_argument("--out", default=None, help="optional CSV path")

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "parity", 0) and not args.out:
        parser.error("--parity requires --out")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
