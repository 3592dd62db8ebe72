import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reactgen.core import (
    FRAME_DIM,
    FRAME_NAMES,
    ConfigError,
    DimensionError,
    GenerationConfig,
    ReactionFrame,
    Session,
    WindowTensor,
    decode_frames,
    frame_index,
    frame_name,
    validate_session,
)


def make_session(n_windows=2, w=4, n_listeners=1, seed=0, H=None):
    rng = np.random.default_rng(seed)
    H_spk = n_windows * w
    face = rng.random((H_spk, FRAME_DIM)) * 0.5
    audio = rng.standard_normal((H_spk, 3))
    lis = [rng.random((H if H is not None else H_spk, FRAME_DIM)) * 0.5 for _ in range(n_listeners)]
    return Session.from_arrays("s", face, audio, lis, w=w)


def test_name_table_is_bijection():
    assert len(FRAME_NAMES) == 58
    assert len(set(FRAME_NAMES)) == 58
    for i in range(58):
        assert frame_index(frame_name(i)) == i


def test_frame_name_examples():
    assert frame_name(frame_index("browInnerUp")) == "browInnerUp"
    assert frame_name(52) == "angleX"
    assert [frame_name(i) for i in range(52, 58)] == ["angleX", "angleY", "angleZ", "transX", "transY", "transZ"]
    with pytest.raises(IndexError):
        frame_name(58)
    with pytest.raises(IndexError):
        frame_name(-1)


def test_frame_index_is_case_insensitive():
    assert frame_index("EyeLookDownRight") == frame_index("eyeLookDownRight")
    with pytest.raises(KeyError):
        frame_index("noSuchShape")


def test_reaction_frame_roundtrip():
    v = np.linspace(0, 1, 58)
    f = ReactionFrame.from_vector(v)
    assert f.expr.shape == (52,) and f.pose.shape == (6,)
    np.testing.assert_array_equal(f.to_vector(), v)
    with pytest.raises(DimensionError):
        ReactionFrame.from_vector(np.zeros(57))


def test_well_formed_session_has_no_violations():
    assert validate_session(make_session()) == []


def test_listener_length_not_multiple_of_w():
    s = make_session(n_windows=2, w=16, H=30)
    bad = validate_session(s)
    assert len(bad) == 1
    assert "H not multiple of w" in bad[0].rule


def test_expr_out_of_range_names_frame_and_coefficient():
    s = make_session()
    lis = s.listeners[0].copy()
    lis[3, 7] = 1.3
    bad = validate_session(Session(s.session_id, s.speaker, (lis,)))
    assert len(bad) == 1
    assert bad[0].index == (0, 3, 7)
    assert "1.3" in bad[0].rule


def test_window_start_index_rules():
    s = make_session(n_windows=2, w=4)
    shifted = (s.speaker[0], type(s.speaker[1])(WindowTensor(s.speaker[1].face.data, 5),
                                              WindowTensor(s.speaker[1].audio.data, 5)))
    bad = validate_session(Session("s", shifted, s.listeners))
    rules = " ".join(v.rule for v in bad)
    assert "multiple of w" in rules and "contiguous" in rules


def test_decode_clamps_ranges():
    x = np.full(58, 5.0)
    x[:3] = -2.0
    d = decode_frames(x)
    assert d[:52].min() >= 0 and d[:52].max() <= 1
    assert np.all(np.abs(d[52:55]) <= np.pi / 2 + 1e-15)
    assert np.all(np.abs(d[55:]) <= 1)


def test_generation_config_validation():
    GenerationConfig()
    with pytest.raises(ConfigError):
        GenerationConfig(T=1)
    with pytest.raises(ConfigError):
        GenerationConfig(solver="rk4")
    with pytest.raises(ConfigError):
        GenerationConfig(eta=-0.1)
    assert GenerationConfig().replace(T=10).T == 10


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31))
def test_session_tiling_invariants(n_windows, w, n_listeners, seed):
    s = make_session(n_windows, w, n_listeners, seed)
    assert validate_session(s) == []
    assert s.speaker_face.shape[0] == n_windows * w
    assert [win.start_index for win in s.speaker] == [k * w for k in range(n_windows)]
