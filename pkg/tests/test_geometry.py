import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanstab.geometry import (
    ChannelConfig,
    ClassificationError,
    ConfigError,
    Segment,
    classify_boundary_face,
    control_weight,
    parse_config,
    poiseuille,
    smoothstep,
)


def test_defaults_and_derived_fields():
    cfg = ChannelConfig()
    assert cfg.gamma == cfg.beta + 1
    assert cfg.lambda0 > cfg.beta
    assert set(cfg.derived) == {"gamma", "lambda0", "t_end"}
    # d / (A1 (1 - A1)) and (d + eps) / ((A1 - eps)(1 - A1 + eps))
    assert cfg.T_A1 == pytest.approx(1 / 0.21)
    assert cfg.T1 == pytest.approx(6.875)
    assert cfg.t_end == pytest.approx(1.2 * 6.875)


def test_replace_rederives_unset_fields():
    cfg = ChannelConfig().replace(beta=5.0)
    assert cfg.gamma == 6.0
    pinned = ChannelConfig(gamma=2.0).replace(beta=5.0)
    assert pinned.gamma == 2.0


@pytest.mark.parametrize("changes", [
    {"L": 0.6}, {"L": 0.4}, {"A1": 0.5}, {"eps": 0.3}, {"nu": 0.0}, {"beta": -1.0},
    {"lambda0": 1.0}, {"nx": 4}, {"dt": 0.0}, {"d": -1.0}, {"n_margin": -1},
])
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigError):
        ChannelConfig(**changes)


def test_config_text_round_trip():
    cfg = ChannelConfig(nx=32, beta=4.25)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("speed = 3\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("nu = 0.1\nnu = 0.2\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("nx = many\n")
    cfg = parse_config("# comment\nnu = 0.1  # viscous\n\nnx = 16\n")
    assert cfg.nu == 0.1 and cfg.nx == 16


def test_poiseuille_values():
    (u, v), p = poiseuille(0.3, 0.5, 0.05)
    assert u == pytest.approx(0.25)
    assert v == 0
    assert p == pytest.approx(-2 * 0.05 * 0.3)


def test_smoothstep_limits():
    assert smoothstep(-1.0) == 0 and smoothstep(0.0) == 0
    assert smoothstep(1.0) == 1 and smoothstep(2.0) == 1
    assert smoothstep(0.5) == pytest.approx(0.5)


def test_control_weight_shape():
    cfg = ChannelConfig()
    assert control_weight(0.5, cfg) == 1.0
    assert control_weight(cfg.L, cfg) == 0.0
    assert control_weight(0.1, cfg) == 0.0
    assert control_weight(0.35, cfg) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_control_weight_bounds_and_symmetry(x2):
    cfg = ChannelConfig()
    m = control_weight(x2, cfg)
    assert 0.0 <= m <= 1.0
    assert m == pytest.approx(control_weight(1 - x2, cfg), abs=1e-12)
    if x2 <= cfg.L or x2 >= 1 - cfg.L:
        assert m == 0.0


def test_classify_segments_and_corners():
    cfg = ChannelConfig()
    face = classify_boundary_face((0.0, 0.5), cfg)
    assert face.segment is Segment.INFLOW and face.in_control_zone and face.weight_m == 1.0
    assert face.normal == (-1.0, 0.0)
    assert classify_boundary_face((0.0, 0.1), cfg).in_control_zone is False
    assert classify_boundary_face((cfg.d, 0.5), cfg).segment is Segment.OUTFLOW
    assert classify_boundary_face((0.4, 0.0), cfg).segment is Segment.BOTTOM
    assert classify_boundary_face((0.4, 1.0), cfg).segment is Segment.TOP
    assert classify_boundary_face((0.0, 0.0), cfg).segment is Segment.BOTTOM
    assert classify_boundary_face((cfg.d, 1.0), cfg).segment is Segment.TOP


def test_classify_rejects_interior_and_outside():
    cfg = ChannelConfig()
    with pytest.raises(ClassificationError):
        classify_boundary_face((0.5, 0.5), cfg)
    with pytest.raises(ClassificationError):
        classify_boundary_face((1.5, 0.5), cfg)
