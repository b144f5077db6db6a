import math

import pytest

from jsnreg.config import (
    ConfigError,
    RunConfig,
    format_phantom_spec,
    load_run_config,
    parse_phantom_spec,
    parse_run_config,
)
from jsnreg.phantom import PhantomSpec
from jsnreg.transform import RigidParams


def test_defaults():
    run = parse_run_config("")
    assert run == RunConfig()
    assert run.weights.alpha == 0.5
    assert load_run_config(None) == RunConfig()


def test_units_are_converted():
    run = parse_run_config("""
        theta_max_deg = 20      # degrees at the surface
        rotation_seeds_deg = -5, 0, 5
        x_max_px = 12
        pyramid_levels = 2
    """)
    o = run.optimizer
    assert o.theta_max == pytest.approx(math.radians(20))
    assert o.rotation_seeds == pytest.approx(tuple(math.radians(a) for a in (-5, 0, 5)))
    assert o.x_max == 12.0 and o.pyramid_levels == 2
    assert o.border_fill and not parse_run_config("border_fill = no").optimizer.border_fill
    assert run.to_dict()["theta_max_deg"] == pytest.approx(20)


def test_weights_and_flags():
    run = parse_run_config("alpha = 0.7\nemit_spectra = yes\nresolution_mm_per_px = 0.2\nrng_seed = 4")
    assert (run.weights.alpha, run.weights.beta) == pytest.approx((0.7, 0.3))
    assert run.emit_spectra and not run.emit_warped
    assert run.resolution_mm_per_px == 0.2
    assert run.rng_seed == 4 and run.optimizer.rng_seed == 4
    assert parse_run_config("beta = 0.25").weights.alpha == 0.75


@pytest.mark.parametrize("text", [
    "unknown_key = 1",
    "alpha = 0.6\nbeta = 0.6",
    "theta_max_deg = 5\nrotation_seeds_deg = -10 0 10",
    "pyramid_levels = two",
    "emit_warped = maybe",
    "resolution_mm_per_px = 0",
    "this line has no separator",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "nope.cfg")


def test_digest():
    a = parse_run_config("step_size = 0.01")
    b = parse_run_config("# same values\nstep_size = 1e-2")
    assert a.digest() == b.digest()
    assert a.digest() != parse_run_config("step_size = 0.02").digest()
    # the output folder cannot change a number, so it does not change the digest
    assert a.digest() == a.with_overrides(output_dir="/tmp").digest()


def test_overrides_skip_none():
    run = RunConfig().with_overrides(rng_seed=None, resolution_mm_per_px=0.3)
    assert run.rng_seed == 0 and run.resolution_mm_per_px == 0.3
    assert RunConfig().with_overrides(rng_seed=9).optimizer.rng_seed == 9


def test_phantom_spec_round_trip():
    spec = PhantomSpec(width=96, height=112, gap=10.0, noise_sigma=0.01, rng_seed=3,
                       truth_upper=RigidParams(1.02, math.radians(4.0), 0.5, -1.0),
                       truth_lower=RigidParams(dy=0.25))
    back = parse_phantom_spec(format_phantom_spec(spec))
    assert back.width == 96 and back.gap == 10.0 and back.rng_seed == 3
    assert back.truth_upper.dtheta == pytest.approx(spec.truth_upper.dtheta, abs=1e-15)
    assert back.truth_lower == spec.truth_lower


def test_phantom_spec_errors():
    with pytest.raises(ConfigError):
        parse_phantom_spec("middle_dy_px = 1")
    with pytest.raises(ConfigError):
        parse_phantom_spec("gap_px = 0")
