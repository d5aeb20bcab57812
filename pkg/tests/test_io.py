import json

import numpy as np
import pytest

from c5ed.io import (
    CheckpointError,
    load_checkpoint,
    load_weights,
    magnitude_to_gray,
    read_array_csv,
    read_complex_csv,
    read_json,
    read_pgm,
    save_checkpoint,
    save_weights,
    write_array_csv,
    write_complex_csv,
    write_json,
    write_pgm,
)
from c5ed.network import build_cascade, load_preset
from c5ed.training import model_state


def test_pgm_roundtrip_and_header(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", gray)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert len(raw) == len(b"P5\n4 3\n255\n") + 12
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), gray)


def test_pgm_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))


def test_magnitude_scaling():
    z = np.array([[0, 0.5j], [1.0, 2.0]])
    np.testing.assert_array_equal(magnitude_to_gray(z, vmax=1.0), [[0, 128], [255, 255]])
    np.testing.assert_array_equal(magnitude_to_gray(z), [[0, 64], [128, 255]])
    np.testing.assert_array_equal(magnitude_to_gray(np.zeros((2, 2))), 0)


def test_csv_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    write_array_csv(tmp_path / "a.csv", a)
    np.testing.assert_array_equal(read_array_csv(tmp_path / "a.csv"), a)
    z = a + 1j * rng.normal(size=(3, 5))
    write_complex_csv(tmp_path / "z.csv", z)
    np.testing.assert_array_equal(read_complex_csv(tmp_path / "z.csv"), z)
    write_array_csv(tmp_path / "m.csv", np.array([[0.0, 1.0]]))
    assert (tmp_path / "m.csv").read_text() == "0,1\n"


def test_json_non_finite_values_are_strings(tmp_path):
    write_json(tmp_path / "r.json", {"psnr": float("inf"), "x": np.float64(1.5), "n": np.int64(3), "a": np.arange(2)})
    text = (tmp_path / "r.json").read_text()
    assert json.loads(text) == {"psnr": "inf", "x": 1.5, "n": 3, "a": [0, 1]}
    assert read_json(tmp_path / "r.json")["psnr"] == "inf"


@pytest.mark.parametrize("mode", ["real", "complex"])
def test_weights_roundtrip(tmp_path, mode):
    spec = load_preset("smoke", mode=mode)
    a, b = build_cascade(spec, seed=1), build_cascade(spec, seed=2)
    for _, buf in a.named_buffers():
        buf[...] += 0.25
    save_weights(a, tmp_path)
    load_weights(b, tmp_path)
    sa, sb = model_state(a), model_state(b)
    assert sa.keys() == sb.keys()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])


def test_weights_manifest_layout(tmp_path):
    model = build_cascade(load_preset("smoke"))
    save_weights(model, tmp_path)
    manifest = read_json(tmp_path / "weights.json")
    assert manifest["dtype"] == "<f8"
    offset = 0
    for e in manifest["arrays"]:
        assert e["offset"] == offset
        assert e["nbytes"] == 8 * int(np.prod(e["shape"], dtype=int))
        offset += e["nbytes"]
    assert offset == manifest["total_bytes"] == (tmp_path / "weights.bin").stat().st_size
    first = manifest["arrays"][0]
    stored = np.frombuffer((tmp_path / "weights.bin").read_bytes()[:first["nbytes"]], "<f8")
    np.testing.assert_array_equal(stored, model.parameters()[0].data.ravel())


def test_loading_into_a_different_architecture_fails(tmp_path):
    save_weights(build_cascade(load_preset("smoke")), tmp_path)
    with pytest.raises(CheckpointError):
        load_weights(build_cascade(load_preset("tiny")), tmp_path)
    with pytest.raises(CheckpointError):
        load_weights(build_cascade(load_preset("smoke", mode="complex")), tmp_path)


def test_checkpoint_roundtrip(tmp_path):
    model = build_cascade(load_preset("smoke", mode="complex"), seed=3)
    save_checkpoint(tmp_path / "ck", model, {"image_size": 32})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"image_size": 32}
    assert loaded.spec == model.spec
    for (n, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path)
