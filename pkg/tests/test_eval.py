import json

import numpy as np
import pytest

from anyq.calibration import ToyModel
from anyq.core import Granularity, ShapeError, format_config
from anyq.evaluation import SCHEMA, compare_formats, evaluate_model, output_error, synthetic_activations, weight_error
from anyq.pack import QuantizedTensor
from anyq.quantize import quantize


def _exact(values, alpha=1.0):
    """Tensor whose dequantized values are ``values`` (one row, int8 grid, fp32 scales)."""
    v = np.asarray(values, np.float32).reshape(1, -1)
    cfg = format_config("int8", None, scale_dtype="fp32", symmetric=True)
    codes = (np.rint(v / alpha) + 128).astype(np.uint8)
    return QuantizedTensor(v.shape, cfg, codes, np.array([alpha], np.float32), np.zeros(1, np.float32))


def test_weight_error_examples():
    assert weight_error([[0, 1]], _exact([0, 0])) == (0.5, 1.0)
    assert weight_error([[2, 3]], _exact([2, 3])) == (0.0, 0.0)
    mse, rel = weight_error([[0, 0]], _exact([1, 0]))
    assert mse == 0.5 and rel is None


def test_output_error_examples():
    qt = _exact([0.9], alpha=0.1)
    assert output_error([[1.0]], qt, [[2.0]]) == pytest.approx(0.04, rel=1e-5)
    assert output_error([[1.0]], qt, [[0.0]]) == 0.0
    with pytest.raises(ShapeError):
        output_error([[1.0]], qt, [[1.0, 2.0]])
    with pytest.raises(ShapeError):
        weight_error([[1.0, 2.0]], qt)


def test_output_error_basis_is_column_weighted_weight_error():
    g = np.random.default_rng(0)
    w = g.standard_normal((6, 8)).astype(np.float32)
    qt = quantize(w, format_config("int4", None))
    c = g.uniform(0.5, 2, 8).astype(np.float32)
    x = np.diag(c)
    d = (w.astype(np.float64) - qt.dequantize()) * c
    assert output_error(w, qt, x) == pytest.approx(np.sum(d ** 2) / (8 * 6), rel=1e-5)


def test_row_permutation_invariance():
    g = np.random.default_rng(1)
    w = g.standard_normal((8, 32)).astype(np.float32)
    x = g.standard_normal((5, 32)).astype(np.float32)
    cfg = format_config("int4", 16)
    qt = quantize(w, cfg)
    perm = g.permutation(8)
    qp = quantize(w[perm], cfg)
    assert weight_error(w, qt)[0] == pytest.approx(weight_error(w[perm], qp)[0], rel=1e-6)
    assert output_error(w, qt, x) == pytest.approx(output_error(w[perm], qp, x), rel=1e-5)


def test_synthetic_activations_mean_abs():
    stats = np.array([0.5, 2.0, 1.0], np.float32)
    x = synthetic_activations(stats, 3, 200_000, 0)
    assert np.allclose(np.abs(x).mean(axis=0), stats, rtol=0.02)


def test_compare_formats_report():
    w = np.random.default_rng(2).standard_normal((128, 512)).astype(np.float32)
    rep = compare_formats(w, ["int4", "fp4", "nf4", "any4"])
    assert [r.format for r in rep.rows] == ["int4", "fp4", "nf4", "any4"]
    for r in rep.rows:
        assert r.weight_mse >= 0 and r.output_mse >= 0 and r.weight_frobenius_rel >= 0
    assert rep.get("int4").bits_per_entry == 4.25
    assert rep.get("any4").bits_per_entry == 4 + 0.25 + 0.5
    csv_text = rep.to_csv()
    assert csv_text.startswith(f"# schema: {SCHEMA}\n")
    assert csv_text.splitlines()[1].startswith("module,format,weight_mse")
    doc = json.loads(rep.to_json())
    assert doc["schema"] == SCHEMA and len(doc["rows"]) == 4
    assert compare_formats(w, ["any4"]).to_csv() == compare_formats(w, ["any4"]).to_csv()


def test_any4_beats_nf4_small_matrices():
    wins = 0
    for t in range(50):
        g = np.random.default_rng(500 + t)
        w = g.standard_normal((64, 256)).astype(np.float32)
        stats = np.exp(g.standard_normal(256)).astype(np.float32)
        rep = compare_formats(w, ["nf4", "any4"], stats=stats, group_size=64, eval_seed=900 + t)
        wins += rep.get("any4").output_mse <= rep.get("nf4").output_mse
    assert wins >= 45


def test_evaluate_model():
    model = ToyModel.random([48, 32, 16], seed=1)
    g = np.random.default_rng(3)
    rep = evaluate_model(model, g.standard_normal((32, 48)), g.standard_normal((32, 48)), ["int4", "any4"],
                         group_size=16)
    assert {(r.module, r.format) for r in rep.rows} == {(m, f) for m in ("layer0", "layer1") for f in ("int4", "any4")}
    agg = rep.aggregate()
    assert [a.module for a in agg] == ["*", "*"]
    assert "*,int4" in rep.to_csv()


def test_group_size_fallback_when_k_small():
    model = ToyModel.random([8, 4], seed=0)
    rep = evaluate_model(model, np.ones((2, 8)), np.ones((2, 8)), ["int4"], group_size=128)
    assert rep.rows[0].bits_per_entry == 4 + 32 / 8


def test_granularity_in_config():
    w = np.random.default_rng(4).standard_normal((4, 8)).astype(np.float32)
    rep = compare_formats(w, [format_config("int4", granularity=Granularity.blockwise(2))])
    assert rep.rows[0].format == "int4"
