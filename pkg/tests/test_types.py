import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfgtune.types import (
    Bounds,
    ConvergencePolicy,
    GuidanceScales,
    Observation,
    RunConfig,
    ValidationError,
    clamp_to_bounds,
    normalize_score,
)

B = Bounds(0.5, 2.5, 1.0, 10.0)
finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@pytest.mark.parametrize("raw, expected", [(0, 0.0), (100, 1.0), (85, 0.85)])
def test_normalize_score(raw, expected):
    assert normalize_score(raw) == expected


@pytest.mark.parametrize("raw", [-1, 101, 50.0, True, "50"])
def test_normalize_score_rejects(raw):
    with pytest.raises(ValidationError):
        normalize_score(raw)


def test_normalize_score_is_bijection_onto_hundredths():
    values = [normalize_score(k) for k in range(101)]
    assert len(set(values)) == 101
    assert values == sorted(values)
    assert all(v == k / 100 for k, v in enumerate(values))


@pytest.mark.parametrize("s, expected", [
    (GuidanceScales(0.0, 0.0), GuidanceScales(0.5, 1.0)),
    (GuidanceScales(1.2, 4.0), GuidanceScales(1.2, 4.0)),
    (GuidanceScales(3.0, 5.0), GuidanceScales(2.5, 5.0)),
])
def test_clamp_examples(s, expected):
    assert clamp_to_bounds(s, B) == expected


@given(finite, finite)
def test_clamp_idempotent_and_inside(a, b):
    once = clamp_to_bounds(GuidanceScales(a, b), B)
    assert clamp_to_bounds(once, B) == once
    assert B.contains(once)


@pytest.mark.parametrize("args", [(1, 1, 0, 2), (0, 1, 3, 2), (0, math.inf, 0, 1)])
def test_bounds_validation(args):
    with pytest.raises(ValidationError):
        Bounds(*args)


def test_bounds_parse_and_point():
    b = Bounds.parse("0.5, 2.5, 1, 10")
    assert b == Bounds()
    assert b.point(1.0, 2.0) == GuidanceScales(1.0, 2.0)
    with pytest.raises(ValidationError):
        b.point(3.0, 2.0)
    with pytest.raises(ValidationError):
        Bounds.parse("1,2,3")


def test_guidance_scales_must_be_finite():
    with pytest.raises(ValidationError):
        GuidanceScales(math.nan, 1.0)


def test_guidance_scales_order_is_lexicographic():
    assert GuidanceScales(1.0, 9.0) < GuidanceScales(1.5, 1.0) < GuidanceScales(1.5, 2.0)


def test_observation_score_tracks_raw_score():
    Observation(GuidanceScales(1, 2), 0.73, 0, raw_score=73)
    with pytest.raises(ValidationError):
        Observation(GuidanceScales(1, 2), 0.7, 0, raw_score=73)
    with pytest.raises(ValidationError):
        Observation(GuidanceScales(1, 2), 1.2, 0)


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.max_iterations == 20
    assert cfg.n_init == 5
    assert cfg.xi == 0.01
    assert cfg.convergence == ConvergencePolicy(0.90, 5, 0.01)
    assert cfg.bounds == Bounds(0.5, 2.5, 1.0, 10.0)


@pytest.mark.parametrize("kwargs", [
    {"n_init": 0},
    {"max_iterations": 0},
    {"max_iterations": 3},  # patience 5 > 3
    {"xi": -0.1},
    {"seed": -1},
    {"seed": 2**64},
])
def test_run_config_validation(kwargs):
    with pytest.raises(ValidationError):
        RunConfig(**kwargs)
