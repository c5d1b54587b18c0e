import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from anyq.calibration import (
    ActivationStats,
    Layer,
    StatsFormatError,
    ToyModel,
    collect_stats,
    default_prompt,
    load_stats,
    save_stats,
    stats_from_bytes,
    stats_to_bytes,
)
from anyq.core import NonFiniteError, ShapeError


def test_single_layer_example():
    m = ToyModel([Layer("fc", np.eye(2, dtype=np.float32))])
    s = collect_stats(m, [[1, -1], [3, -3]])
    assert s.entries["fc"].tolist() == [2, 2]
    assert s.token_count == 2


def test_zero_inputs():
    m = ToyModel.random([4, 3, 2])
    s = collect_stats(m, np.zeros((5, 4)))
    assert all(np.all(v == 0) for v in s.entries.values())


def test_identity_pass_through():
    m = ToyModel([Layer("a", np.eye(3, dtype=np.float32)), Layer("b", np.eye(3, dtype=np.float32))])
    s = collect_stats(m, np.random.default_rng(0).standard_normal((7, 3)))
    assert np.array_equal(s.entries["a"], s.entries["b"])


def test_relu_feeds_next_layer():
    w = np.array([[1, 0], [0, 1]], np.float32)
    m = ToyModel([Layer("a", w, "relu"), Layer("b", w)])
    s = collect_stats(m, [[1, -2], [-3, 4]])
    assert s.entries["b"].tolist() == [0.5, 2.0]


def test_order_and_duplication_invariance():
    m = ToyModel.random([6, 5, 4], seed=2)
    x = np.random.default_rng(1).standard_normal((9, 6)).astype(np.float32)
    a = collect_stats(m, x)
    b = collect_stats(m, x[::-1])
    c = collect_stats(m, np.concatenate([x, x]))
    for name in a.entries:
        assert np.allclose(a.entries[name], b.entries[name], rtol=1e-6)
        assert np.allclose(a.entries[name], c.entries[name], rtol=1e-6)


def test_model_validation():
    with pytest.raises(ShapeError):
        ToyModel([Layer("a", np.ones((3, 2))), Layer("b", np.ones((2, 4)))])
    with pytest.raises(ValueError):
        Layer("a", np.ones((2, 2)), "gelu")
    with pytest.raises(ShapeError):
        collect_stats(ToyModel.random([4, 2]), np.ones((2, 5)))
    big = ToyModel([Layer("a", np.full((2, 2), 1e30, np.float32)), Layer("b", np.full((2, 2), 1e30, np.float32))])
    with pytest.raises(NonFiniteError):
        collect_stats(big, np.ones((1, 2)))


def test_from_json():
    doc = {"seed": 3, "input_dim": 5, "layers": [{"name": "up", "out_features": 8, "activation": "tanh"},
                                                   {"name": "down", "out_features": 5}]}
    m = ToyModel.from_json(doc)
    assert [l.name for l in m.layers] == ["up", "down"] and m.input_dim == 5
    assert ToyModel.from_json(doc).layers[0].weight.tobytes() == m.layers[0].weight.tobytes()
    m2 = ToyModel.from_json({"layers": [{"weight": [[1, 2], [3, 4]]}]})
    assert m2.layers[0].weight.tolist() == [[1, 2], [3, 4]]
    with pytest.raises(ShapeError):
        ToyModel.from_json({"input_dim": 3, "layers": [{"weight": [[1, 2]]}]})


def test_save_load_round_trip(tmp_path):
    s = ActivationStats({"a": [1.5, 0, 2], "b": [0.25]}, token_count=11, source="unit")
    save_stats(s, tmp_path / "s.anys")
    assert load_stats(tmp_path / "s.anys") == s


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, st.integers(0, 20), elements=st.floats(0, 1e6, width=32)), max_size=4))
def test_bytes_round_trip(entries):
    s = ActivationStats(entries, 3, "h")
    data = stats_to_bytes(s)
    assert stats_from_bytes(data) == s
    assert stats_to_bytes(stats_from_bytes(data)) == data


def test_truncated_and_corrupt():
    data = stats_to_bytes(ActivationStats({"a": [1, 2, 3]}))
    with pytest.raises(StatsFormatError) as e:
        stats_from_bytes(data[:-2])
    assert e.value.offset == len(data) - 2
    with pytest.raises(StatsFormatError, match="offset 0"):
        stats_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(StatsFormatError):
        stats_from_bytes(data[:6])
    with pytest.raises(StatsFormatError):
        stats_from_bytes(data + b"\0\0\0\0")


def test_negative_rejected_at_load():
    data = bytearray(stats_to_bytes(ActivationStats({"a": [1, 2]})))
    data[-4:] = np.float32(-1).tobytes()
    with pytest.raises(StatsFormatError) as e:
        stats_from_bytes(bytes(data))
    assert e.value.offset == len(data) - 4
    with pytest.raises(ValueError):
        ActivationStats({"a": [-1.0]})


def test_vector_for_checks_length():
    s = ActivationStats({"a": [1, 2]})
    assert s.vector_for("a", 2).tolist() == [1, 2]
    with pytest.raises(ShapeError):
        s.vector_for("a", 3)
    with pytest.raises(KeyError):
        s.vector_for("b", 2)


def test_default_prompt():
    p = default_prompt()
    assert "Once upon a time, a girl named Alice" in p
    assert "The capital of Egypt is Cairo" in p
    assert len(p.split()) == len(default_prompt().split())
