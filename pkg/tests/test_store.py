import json

import numpy as np
import pytest

from neurolidar.extrap import ExtrapolatorConfig, ExtrapolatorModel
from neurolidar.keyframe import DetectorModel
from neurolidar.store import load_model, save_model


def test_roundtrip_both_kinds(tmp_path):
    det = DetectorModel(16, 24, (4, 8), seed=3)
    ext = ExtrapolatorModel(ExtrapolatorConfig.variant("no_skip", height=16, width=16,
                                                       widths=(4, 8), bottleneck=8), seed=2)
    for model, name in ((det, "d.nlnn"), (ext, "sub/e.nlnn")):
        save_model(model, tmp_path / name, {"seed": 9})
        back, desc = load_model(tmp_path / name)
        assert desc["seed"] == 9
        assert type(back) is type(model)
        for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(a.data, b.data)
    assert load_model(tmp_path / "sub/e.nlnn")[0].config == ext.config
    assert load_model(tmp_path / "d.nlnn")[0].geometry == (16, 24)


def test_errors(tmp_path):
    with pytest.raises(TypeError):
        save_model(object(), tmp_path / "x.nlnn")
    save_model(DetectorModel(16, 16, (4,)), tmp_path / "d.nlnn")
    (tmp_path / "d.json").write_text(json.dumps({"kind": "toaster"}))
    with pytest.raises(ValueError):
        load_model(tmp_path / "d.nlnn")
    (tmp_path / "d.json").write_text("{")
    with pytest.raises(ValueError):
        load_model(tmp_path / "d.nlnn")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.nlnn")
