import json

import numpy as np
import pytest

from facefit import FaceParams
from facefit.io import read_landmarks, read_ppm, to_bytes, write_landmarks, write_ppm
from facefit.params import block_slices, load_params, save_params


def test_quantization_rounding():
    vals = np.array([0.0, 0.5 / 255, 1.0, 127.5 / 255, -0.2, 1.3, 0.999])
    expected = [int(np.floor(min(max(v, 0), 1) * 255 + 0.5)) for v in vals]
    assert to_bytes(vals).tolist() == expected
    assert to_bytes([127.5 / 255])[0] == 128


def test_ppm_layout_and_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 5 * 7 * 3
    back = read_ppm(tmp_path / "a.ppm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    write_ppm(tmp_path / "b.ppm", back)
    assert (tmp_path / "b.ppm").read_bytes() == raw


def test_ppm_comments_and_errors(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
    assert (read_ppm(tmp_path / "c.ppm") * 255).round().ravel().tolist() == list(range(6))
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p3.ppm")
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "g.ppm", np.zeros((4, 4)))


def test_landmark_file(tmp_path):
    pts = np.array([[1.5, 2.0], [np.nan, np.nan], [3.0, 4.25]])
    write_landmarks(tmp_path / "l", pts)
    assert json.loads((tmp_path / "l").read_text()) == [[1.5, 2.0], None, [3.0, 4.25]]
    back = read_landmarks(tmp_path / "l")
    np.testing.assert_array_equal(back, pts)
    (tmp_path / "bad").write_text("[[1, 2, 3]]")
    with pytest.raises(ValueError):
        read_landmarks(tmp_path / "bad")


def test_params_json_roundtrip(tmp_path):
    p = FaceParams.from_vector(np.random.default_rng(1).normal(size=257), (80, 64, 80, 27, 6))
    save_params(p, tmp_path / "p.json")
    d = json.loads((tmp_path / "p.json").read_text())
    assert list(d) == ["alpha", "delta", "gamma", "phi", "cam"]
    assert np.array_equal(load_params(tmp_path / "p.json").to_vector(), p.to_vector())


def test_params_layout_and_errors():
    s = block_slices((80, 64, 80, 27, 6))
    assert [(v.start, v.stop) for v in s.values()] == [(0, 80), (80, 144), (144, 224),
                                                      (224, 251), (251, 257)]
    with pytest.raises(ValueError):
        FaceParams.from_vector(np.zeros(256), (80, 64, 80, 27, 6))
    with pytest.raises(ValueError):
        FaceParams.from_dict({"alpha": []})
    with pytest.raises(ValueError):
        FaceParams(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(26), np.zeros(6))
    p = FaceParams.zeros()
    assert p.is_finite()
    p.cam[0] = np.inf
    assert not p.is_finite()
