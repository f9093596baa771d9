"""Run configuration: flat INI sections, validation, defaults and the metadata echo."""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
from pathlib import Path

from .errors import ConfigError, MqsError
from .materials import ExpLaw, ExpLawParams, JilesAthertonLaw, JilesAthertonParams, LinearLaw
from .mesh import SmcGeometry
from .problem import SolverOptions, SourceWaveform, TimeGrid

MODES = ("multiscale", "reference", "static", "sweep")
LAWS = ("exp", "ja", "linear")

# section -> key -> (type, default); a default of None marks a required key.
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "geometry": {
        "L": ("float", 800e-6),
        "n_grains_side": ("int", 8),
        "e_a": ("float", 75e-6 * math.sqrt(2.0)),
        "e_i": ("float", 100e-6),
        "e_gap": ("float", 100e-6),
        "e_air": ("float", 200e-6),
        "grain_shape": ("str", "square"),
        "quarter_symmetry": ("bool", True),
    },
    "material": {
        "law": ("str", "exp"),
        "sigma": ("float", 5e6),
        "exp_alpha": ("float", 388.0),
        "exp_beta": ("float", 0.3774),
        "exp_gamma": ("float", 2.97),
        "ja_ms": ("float", 1145500.0),
        "ja_a": ("float", 59.0),
        "ja_k": ("float", 99.0),
        "ja_c": ("float", 0.55),
        "ja_alpha": ("float", 1.3e-4),
        "linear_nu": ("float", 1000.0),
    },
    "source": {
        "js0": ("float", 35e7),
        "frequency": ("float", 50.0),
    },
    "discretization": {
        "macro_divisions": ("int", 4),
        "cell_refine": ("int", 3),
        "reference_refine": ("int", 2),
        "n_ts": ("int", 40),
        "periods": ("float", 1.5),
        "tol_macro": ("float", 1e-6),
        "max_nr_macro": ("int", 25),
        "tol_cell": ("float", 1e-8),
        "max_nr_cell": ("int", 30),
        "delta_b": ("float", 1e-4),
        "tangent_mode": ("str", "consistent"),
        "macro_sigma_mode": ("str", "zero"),
        "grain_constants": ("bool", True),
        "halving": ("bool", True),
        "static_scale": ("float", 1.0),
    },
    "output": {
        "dir": ("str", None),
        "fields": ("bool", True),
        "probes": ("str", ""),
        "cell_dump": ("str", ""),
    },
    "run": {
        "mode": ("str", "multiscale"),
        "threads": ("int", 1),
    },
}

_CHOICES = {
    ("material", "law"): LAWS,
    ("run", "mode"): MODES,
    ("geometry", "grain_shape"): ("square",),
    ("discretization", "tangent_mode"): ("consistent", "frozen"),
    ("discretization", "macro_sigma_mode"): ("zero", "computed"),
}

_UNIT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\s*[^\d\s.+-].*$")

# Modelling choices that are not config keys; echoed as comments for provenance.
DERIVED_NOTES = (
    "element order: P1 triangles; quadrature: 1-point for curl terms, 3-point (degree 2) for losses",
    "grain shape: axis-aligned square of side e_a / sqrt(2)",
    "losses: W per metre of depth over the full cross-section; tau prefactor = 1",
    "cells: one per macro triangle of the composite, periodic on the unit cell",
    "cell source: e_Mz + (d_t b_M x y)_z with unit coupling factor",
    "grain currents: one constant per grain enforcing zero net current",
    "hysteresis vectorization: isotropic, magnitudes on |h_e|, directions along h_e",
    "time integration: implicit Euler from a zero state",
)


@dataclasses.dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    path: Path | None = None

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def mode(self) -> str:
        return str(self.values["run"]["mode"])

    @property
    def out_dir(self) -> Path:
        return Path(str(self.values["output"]["dir"]))

    def geometry(self) -> SmcGeometry:
        return SmcGeometry(**self.values["geometry"])

    def waveform(self, frequency: float | None = None) -> SourceWaveform:
        s = self.values["source"]
        return SourceWaveform(float(s["js0"]), float(frequency or s["frequency"]))

    def time_grid(self, frequency: float | None = None) -> TimeGrid:
        d = self.values["discretization"]
        f = float(frequency or self.values["source"]["frequency"])
        return TimeGrid.periods(f, int(d["n_ts"]), float(d["periods"]))

    def grain_law(self):
        m = self.values["material"]
        law = m["law"]
        if law == "exp":
            return ExpLaw(ExpLawParams(m["exp_alpha"], m["exp_beta"], m["exp_gamma"]))
        if law == "ja":
            return JilesAthertonLaw(JilesAthertonParams(m["ja_ms"], m["ja_a"], m["ja_k"], m["ja_c"],
                                                        m["ja_alpha"]))
        return LinearLaw(float(m["linear_nu"]))

    def solver_options(self) -> SolverOptions:
        d = self.values["discretization"]
        return SolverOptions(
            tol_macro=d["tol_macro"], max_nr_macro=d["max_nr_macro"], tol_cell=d["tol_cell"],
            max_nr_cell=d["max_nr_cell"], delta_b=d["delta_b"], tangent_mode=d["tangent_mode"],
            macro_sigma_mode=d["macro_sigma_mode"], grain_constants=d["grain_constants"],
            threads=self.values["run"]["threads"], halving=d["halving"])

    def probes(self) -> dict[str, tuple[float, float]]:
        """Named probe points from ``x y; x y`` (names ``p0``, ``p1``, ...)."""
        text = str(self.values["output"]["probes"]).strip()
        out = {}
        for k, item in enumerate(s for s in text.split(";") if s.strip()):
            x, y = (float(v) for v in item.split())
            out[f"p{k}"] = (x, y)
        return out

    def cell_dump(self) -> list[int]:
        return [int(v) for v in str(self.values["output"]["cell_dump"]).replace(",", " ").split()]

    def with_values(self, **updates: dict[str, object]) -> "RunConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for section, kv in updates.items():
            vals[section].update(kv)
        return RunConfig(vals, self.path)

    def echo(self) -> str:
        """Re-parseable text of every effective value plus the fixed modelling choices."""
        lines = ["# effective run configuration; rerun with: mqs-hmm run --config metadata.txt"]
        geom = self.geometry()
        lines.append(f"# derived: pitch = {geom.pitch!r} m")
        lines.append(f"# derived: grain side = {geom.grain_side!r} m")
        lines.append(f"# derived: fill factor = {geom.fill_factor!r}")
        lines += [f"# fixed: {n}" for n in DERIVED_NOTES]
        for section, keys in SCHEMA.items():
            lines.append("")
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def write_metadata(self, out_dir: str | Path | None = None) -> Path:
        path = Path(out_dir or self.out_dir) / "metadata.txt"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.echo(), encoding="ascii")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        return path


def _format(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(kind: str, raw: str, section: str, key: str, line: int | None):
    text = raw.strip()
    if kind == "str":
        return text
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}", line)
    try:
        if kind == "int":
            return int(text)
        value = float(text)
    except ValueError:
        if _UNIT_RE.match(text):
            raise ConfigError(f"[{section}] {key}: unit suffix in {text!r}; give a plain SI number",
                              line) from None
        raise ConfigError(f"[{section}] {key}: expected a {kind}, got {text!r}", line) from None
    if not math.isfinite(value):
        raise ConfigError(f"[{section}] {key}: value must be finite", line)
    return value


def _line_numbers(text: str) -> tuple[dict[str, int], dict[tuple[str, str], int]]:
    sections: dict[str, int] = {}
    keys: dict[tuple[str, str], int] = {}
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            sections.setdefault(current, n)
        elif current is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            keys.setdefault((current, key), n)
    return sections, keys


def parse_config_text(text: str, path: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#",),
                                       default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any section", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line) from None
    sec_lines, key_lines = _line_numbers(text)
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", sec_lines.get(section))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", key_lines.get((section, key)))
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                line = key_lines.get((section, key))
                v = _convert(kind, parser[section][key], section, key, line)
                if (section, key) in _CHOICES and v not in _CHOICES[(section, key)]:
                    raise ConfigError(f"[{section}] {key}: {v!r} is not one of {_CHOICES[(section, key)]}",
                                      line)
                values[section][key] = v
            elif default is None:
                raise ConfigError(f"missing required key {key!r} in [{section}]", sec_lines.get(section))
            else:
                values[section][key] = default
    cfg = RunConfig(values, path)
    try:
        cfg.geometry()
        cfg.waveform()
        cfg.time_grid()
        cfg.grain_law()
        cfg.probes()
    except ConfigError:
        raise
    except (ValueError, MqsError) as exc:
        raise ConfigError(str(exc)) from None
    if values["run"]["threads"] < 1:
        raise ConfigError("[run] threads must be >= 1", key_lines.get(("run", "threads")))
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    """Read and validate a run configuration; every missing optional key takes its default."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config_text(text, path)
