"""Run configuration: a flat JSON document layered over a named preset."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .forward import OpticalLayout, make_double_slit, preset_layout
from .recon import SolverParams

__all__ = ["ConfigError", "RunConfig", "PRESET_NAMES", "load_config"]

PRESET_NAMES = ("paper", "fast")

_LAYOUT_KEYS = tuple(f.name for f in fields(OpticalLayout))
_SOLVER_KEYS = tuple(f.name for f in fields(SolverParams))
SWEEP_PARAMETERS = ("L1", "reference_pixel_pitch", "m")


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI command needs, flat.

    Layout keys are the :class:`~ghostcs.forward.OpticalLayout` fields;
    solver keys mirror :class:`~ghostcs.recon.SolverParams`. ``m`` records
    are simulated; GI uses all of them and CS the first ``cs_m``. The CS
    region is ``roi_size`` metres square, centred on the frame.
    """

    preset: str = "paper"
    layout: OpticalLayout = field(default_factory=lambda: preset_layout("paper"))
    object: str = "double_slit"
    slit_a: float = 30e-6
    slit_d: float = 60e-6
    slit_h: float = 120e-6
    m: int = 2000
    cs_m: int = 32
    master_seed: int = 2009
    method: str = "both"
    solver: SolverParams = field(default_factory=SolverParams)
    roi_size: float = 192e-6
    out_dir: str = "out"
    n_jobs: int = 1
    sweep_parameter: str | None = None
    sweep_values: tuple = ()
    sweep_seeds: tuple = ()

    def validate(self):
        if self.object != "double_slit":
            raise ConfigError(f"object: only 'double_slit' is supported, got {self.object!r}")
        if not 0 < self.slit_a < self.slit_d or not self.slit_h > 0:
            raise ConfigError("slit geometry needs 0 < slit_a < slit_d and slit_h > 0")
        span = self.layout.window * self.layout.object_pitch
        if self.slit_d + self.slit_a > span or self.slit_h > span:
            raise ConfigError(f"double slit does not fit the {span:g} m object window")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 1 <= self.cs_m:
            raise ConfigError("cs_m must be >= 1")
        if self.method not in ("gi", "cs", "both"):
            raise ConfigError(f"method must be gi, cs or both, got {self.method!r}")
        if not 0 < self.roi_size:
            raise ConfigError("roi_size must be positive")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must lie in [0, 2**64)")
        if self.sweep_parameter is not None and self.sweep_parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"sweep_parameter must be one of {SWEEP_PARAMETERS}, "
                              f"got {self.sweep_parameter!r}")
        return self

    def make_object(self):
        lay = self.layout
        return make_double_slit(self.slit_a, self.slit_d, self.slit_h, lay.object_pitch,
                                lay.window)

    def roi_pixels(self):
        return max(1, int(round(self.roi_size / self.layout.reference_pixel_pitch)))

    def seeds(self):
        return tuple(self.sweep_seeds) or (self.master_seed,)

    def with_value(self, parameter, value):
        """Copy with one sweep parameter changed."""
        if parameter == "m":
            return replace(self, m=int(value), cs_m=int(value))
        if parameter in ("L1", "reference_pixel_pitch"):
            if parameter == "L1" and self.layout.path_variant != "open":
                raise ConfigError("L1 only affects the open path variant")
            try:
                return replace(self, layout=replace(self.layout, **{parameter: float(value)}))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")

    def to_dict(self):
        out = {"preset": self.preset}
        out.update(self.layout.to_dict())
        out.update(dataclasses.asdict(self.solver))
        for f in fields(self):
            if f.name not in ("preset", "layout", "solver"):
                v = getattr(self, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data, preset=None):
        """Build from a flat mapping; ``preset`` overrides the document's."""
        data = dict(data)
        known = {"preset", *_LAYOUT_KEYS, *_SOLVER_KEYS,
                 *(f.name for f in fields(cls) if f.name not in ("layout", "solver"))}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        name = preset or data.pop("preset", "paper")
        data.pop("preset", None)
        if name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
        lay_kw = {k: data.pop(k) for k in _LAYOUT_KEYS if k in data}
        sol_kw = {k: data.pop(k) for k in _SOLVER_KEYS if k in data}
        for k in ("sweep_values", "sweep_seeds"):
            if k in data:
                if not isinstance(data[k], list):
                    raise ConfigError(f"{k} must be a list")
                data[k] = tuple(data[k])
        try:
            layout = preset_layout(name, **lay_kw)
            solver = SolverParams(**sol_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for k in ("m", "cs_m", "master_seed", "n_jobs"):
            if k in data and (isinstance(data[k], bool) or not isinstance(data[k], int)):
                raise ConfigError(f"{k} must be an integer, got {data[k]!r}")
        cfg = cls(preset=name, layout=layout, solver=solver, **data)
        try:
            return cfg.validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path, preset=None, seed=None, out_dir=None):
    """Read a JSON config file and apply command-line overrides."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed is not None:
        data["master_seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return RunConfig.from_dict(data, preset=preset)
