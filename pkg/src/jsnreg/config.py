"""Plain-text run configuration with units in the key names.

A config file is a list of ``key = value`` lines; ``#`` starts a comment.
Angles are given in degrees and converted to radians here, so nothing past
this module sees degrees. Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .loss import LossWeights
from .phantom import PhantomSpec
from .registration import OptimizerConfig
from .transform import CONVENTION, RigidParams


class ConfigError(ValueError):
    pass


def _read_pairs(text: str, source: str) -> dict[str, str]:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return dict(cp["run"])


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(",", " ").split())


# key -> (OptimizerConfig field, parser, unit conversion)
_OPT_KEYS = {
    "pyramid_levels": ("pyramid_levels", int, None),
    "max_iterations_per_level": ("max_iterations_per_level", int, None),
    "step_size": ("step_size", float, None),
    "step_decay": ("step_decay", float, None),
    "plateau_patience": ("plateau_patience", int, None),
    "convergence_tolerance": ("convergence_tolerance", float, None),
    "max_decays": ("max_decays", int, None),
    "coarse_max_decays": ("coarse_max_decays", int, None),
    "dz_min": ("dz_min", float, None),
    "dz_max": ("dz_max", float, None),
    "theta_max_deg": ("theta_max", float, math.radians),
    "x_max_px": ("x_max", float, None),
    "y_max_px": ("y_max", float, None),
    "rotation_seeds_deg": ("rotation_seeds", _floats, lambda t: tuple(math.radians(a) for a in t)),
    "smoothing_sigma_px": ("smoothing_sigma", float, None),
    "min_mask_overlap": ("min_mask_overlap", float, None),
    "bound_tolerance": ("bound_tolerance", float, None),
    "border_fill": ("border_fill", _bool, None),
}


@dataclass(frozen=True)
class RunConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    output_dir: str | None = None
    emit_spectra: bool = False
    emit_warped: bool = False
    rng_seed: int = 0
    resolution_mm_per_px: float | None = None

    def __post_init__(self):
        if self.resolution_mm_per_px is not None and not self.resolution_mm_per_px > 0:
            raise ConfigError("resolution_mm_per_px must be positive")

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "rng_seed" in kw:
            kw["optimizer"] = dataclasses.replace(self.optimizer, rng_seed=int(kw["rng_seed"]))
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        """Canonical form with units in the keys (degrees for angles)."""
        o = self.optimizer
        out = {}
        for key, (name, _, conv) in _OPT_KEYS.items():
            val = getattr(o, name)
            if key == "theta_max_deg":
                val = math.degrees(val)
            elif key == "rotation_seeds_deg":
                val = [math.degrees(a) for a in val]
            out[key] = val
        out.update(
            alpha=self.weights.alpha,
            beta=self.weights.beta,
            output_dir=self.output_dir,
            emit_spectra=self.emit_spectra,
            emit_warped=self.emit_warped,
            rng_seed=self.rng_seed,
            resolution_mm_per_px=self.resolution_mm_per_px,
        )
        return out

    def digest(self) -> str:
        """sha256 over the canonical JSON form; equal digests mean equal configurations.

        ``output_dir`` is excluded since it cannot change any number.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d["convention"] = CONVENTION
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    pairs = _read_pairs(text, source)
    opt_kw, kw = {}, {}
    alpha = beta = None
    try:
        for key, raw in pairs.items():
            if key in _OPT_KEYS:
                name, parse, conv = _OPT_KEYS[key]
                val = parse(raw)
                opt_kw[name] = conv(val) if conv else val
            elif key == "alpha":
                alpha = float(raw)
            elif key == "beta":
                beta = float(raw)
            elif key == "output_dir":
                kw["output_dir"] = raw.strip()
            elif key in ("emit_spectra", "emit_warped"):
                kw[key] = _bool(raw)
            elif key == "rng_seed":
                kw["rng_seed"] = opt_kw["rng_seed"] = int(raw)
            elif key == "resolution_mm_per_px":
                kw["resolution_mm_per_px"] = float(raw)
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
        if alpha is None and beta is None:
            weights = LossWeights()
        elif alpha is None:
            weights = LossWeights(1.0 - beta, beta)
        elif beta is None:
            weights = LossWeights(alpha, 1.0 - alpha)
        else:
            weights = LossWeights(alpha, beta)
        return RunConfig(optimizer=OptimizerConfig(**opt_kw), weights=weights, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_run_config(text, str(p))


# ----------------------------------------------------------- phantom specs

_PHANTOM_KEYS = {
    "width_px": ("width", int),
    "height_px": ("height", int),
    "bone_half_width_px": ("bone_half_width", float),
    "gap_px": ("gap", float),
    "cortical_rim_intensity": ("cortical_rim_intensity", float),
    "interior_base_intensity": ("interior_base_intensity", float),
    "texture_amplitude": ("texture_amplitude", float),
    "texture_correlation_length_px": ("texture_correlation_length", float),
    "background_intensity": ("background_intensity", float),
    "noise_sigma": ("noise_sigma", float),
    "rng_seed": ("rng_seed", int),
    "bone_length_px": ("bone_length", float),
    "corner_radius_px": ("corner_radius", float),
    "rim_width_px": ("rim_width", float),
    "texture_perturbation": ("texture_perturbation", float),
    "resolution_mm_per_px": ("resolution", float),
    "edge_sigma_px": ("edge_sigma", float),
}
_TRUTH_KEYS = ("dz", "dtheta_deg", "dx_px", "dy_px")


def parse_phantom_spec(text: str, source: str = "<phantom>") -> PhantomSpec:
    """Phantom spec from key-value text; truth transforms as ``upper_dz``, ``lower_dtheta_deg``, ..."""
    pairs = _read_pairs(text, source)
    kw = {}
    truth = {"upper": {}, "lower": {}}
    try:
        for key, raw in pairs.items():
            if key in _PHANTOM_KEYS:
                name, parse = _PHANTOM_KEYS[key]
                kw[name] = parse(raw)
                continue
            region, _, rest = key.partition("_")
            if region in truth and rest in _TRUTH_KEYS:
                truth[region][rest] = float(raw)
                continue
            raise ConfigError(f"{source}: unknown key {key!r}")
        for region, vals in truth.items():
            kw[f"truth_{region}"] = RigidParams(
                dz=vals.get("dz", 1.0),
                dtheta=math.radians(vals.get("dtheta_deg", 0.0)),
                dx=vals.get("dx_px", 0.0),
                dy=vals.get("dy_px", 0.0),
            )
        return PhantomSpec(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def format_phantom_spec(spec: PhantomSpec) -> str:
    lines = []
    for key, (name, _) in _PHANTOM_KEYS.items():
        val = getattr(spec, name)
        if val is not None:
            lines.append(f"{key} = {val!r}")
    for region in ("upper", "lower"):
        p = getattr(spec, f"truth_{region}")
        lines += [f"{region}_dz = {p.dz!r}", f"{region}_dtheta_deg = {math.degrees(p.dtheta)!r}",
                  f"{region}_dx_px = {p.dx!r}", f"{region}_dy_px = {p.dy!r}"]
    return "\n".join(lines) + "\n"


def tool_version() -> str:
    return __version__
