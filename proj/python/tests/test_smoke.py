import json
import math
import pathlib

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

import mptq

DOCS = pathlib.Path(__file__).resolve().parents[2] / "docs"


def validator(name):
    schemas = [json.loads(p.read_text()) for p in (DOCS / "schemas").glob("*.schema.json")]
    registry = Registry().with_resources([(s["$id"], Resource.from_contents(s)) for s in schemas])
    schema = json.loads((DOCS / "schemas" / name).read_text())
    return Draft202012Validator(schema, registry=registry)


@pytest.fixture(scope="module")
def tiny():
    model = mptq.make_toy_vit(3, patch_dim=12, embed_dim=16, depth=2, heads=2, mlp_dim=32, classes=5)
    data = mptq.make_synthetic_tokens(12, 6, 12, 4)
    return model, data


def test_uniform_quantization():
    x = np.array([0.73, -2.0, 2.0], dtype=np.float32)
    assert mptq.minmax_scale(x, 4) == pytest.approx(0.25)
    np.testing.assert_allclose(mptq.fake_quantize(x, 4, 0.25), [0.75, -2.0, 1.75])
    assert mptq.sqnr_db(x, x) == math.inf
    y = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
    assert mptq.fake_quantize(y, 6).shape == (4, 8)
    assert mptq.sqnr_db(y, mptq.fake_quantize(y, 8)) > mptq.sqnr_db(y, mptq.fake_quantize(y, 4))


def test_region_quantizer_worked_example():
    assert mptq.compute_m1(-0.1700, 12.4909, 6) == 5
    rq = mptq.RegionQuantizer(6, 0.0515, 3, 5)
    assert rq.s1 == pytest.approx(0.4120)
    assert rq.s2 == pytest.approx(1.6480)
    assert rq.encode(11.0) == ("large-pos", 7)
    assert rq.decode("large-pos", 7) == pytest.approx(7 * rq.s2)
    assert rq.pack(11.0) == 0b100111
    assert rq.unpack(0b100111) == pytest.approx(7 * rq.s2)
    with pytest.raises(mptq.FitError):
        mptq.compute_m1(0.0, 1.0, 6)
    with pytest.raises(mptq.InputError):
        mptq.RegionQuantizer(3, 0.1, 0, 1)


def test_fit_region_quantizer_beats_uniform():
    rng = np.random.default_rng(1)
    body = rng.normal(-0.4, 1.0, 4000)
    gelu = 0.5 * body * (1 + np.vectorize(math.erf)(body / math.sqrt(2)))
    tail = rng.lognormal(1.2, 0.6, 80)
    x = np.concatenate([gelu, tail]).astype(np.float32)
    rq = mptq.fit_region_quantizer(x[None, :], 4)
    err_region = np.mean((rq.fake_quantize(x) - x) ** 2)
    err_uniform = np.mean((mptq.fake_quantize(x, 4) - x) ** 2)
    assert err_region <= err_uniform


def test_greedy_allocate():
    table = [[6.0 * b for b in range(9)] for _ in range(3)]
    plan = mptq.greedy_allocate(table, [50, 50, 50], 7.0)
    assert [s["layer_id"] for s in plan["trace"]] == ["layer0", "layer1", "layer2"]
    assert all(layer["bits"] == 7 for layer in plan["layers"])
    with pytest.raises(mptq.AllocationError):
        mptq.greedy_allocate(table, [50, 50, 50], 1.0)
    validator("plan.schema.json").validate(plan)


def test_model_and_pipeline(tiny, tmp_path):
    model, data = tiny
    assert mptq.model_config(model)["depth"] == 2
    logits = model.forward(data)
    assert logits.shape == (12, 5)

    path = str(tmp_path / "model.bin")
    model.save(path)
    np.testing.assert_array_equal(mptq.load_model(path).forward(data), logits)

    quantized, plan, report = mptq.run_mptq(model, data, {"samples": 8, "bw": 5, "ba": 5, "redistribution": "sq-b"})
    validator("plan.schema.json").validate(plan)
    validator("report.schema.json").validate(report)
    assert sum(report["bit_histogram"].values()) == len(report["layers"])
    assert quantized.forward(data).shape == logits.shape

    again = mptq.run_mptq(model, data, {"samples": 8, "bw": 5, "ba": 5, "redistribution": "sq-b"})
    assert json.dumps(again[1]) == json.dumps(plan)
    assert json.dumps(again[2]) == json.dumps(report)

    fp = mptq.run_mptq(model, data, {"samples": 8, "mode": "fp"})
    np.testing.assert_array_equal(fp[0].forward(data), logits)

    with pytest.raises(mptq.PipelineError, match="config"):
        mptq.run_mptq(model, data, {"bits": 9, "mode": "sp"})
    with pytest.raises(mptq.InputError):
        mptq.run_mptq(model, data, {"no_such_key": 1})


def test_golden_files_validate():
    validator("plan.schema.json").validate(json.loads((DOCS / "golden" / "plan.json").read_text()))
    validator("report.schema.json").validate(json.loads((DOCS / "golden" / "report.json").read_text()))


def test_cli_in_process(tmp_path):
    model, data, out = tmp_path / "m.bin", tmp_path / "d.bin", tmp_path / "q"
    assert mptq.cli_main(["gen-model", "--out", str(model), "--depth", "2", "--patch-dim", "12"]) == 0
    assert mptq.cli_main(["gen-data", "--out", str(data), "--count", "10", "--tokens", "4", "--patch-dim", "12"]) == 0
    assert mptq.cli_main(["quantize", "--model", str(model), "--data", str(data), "--samples", "4", "--mode", "sp",
                          "--bits", "6", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    validator("report.schema.json").validate(report)
    assert {layer["bits"] for layer in report["layers"]} == {6}
    assert mptq.cli_main(["quantize", "--out", str(out), "--bogus"]) == 2
    assert mptq.cli_main(["quantize", "--model", str(tmp_path / "none.bin"), "--data", str(data),
                          "--out", str(out)]) == 1
