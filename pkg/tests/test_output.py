import json
import math

import numpy as np

from src.models import FitStatus
from src.output import RunManifest, dump_csv, dump_json, format_float, manifest_path, to_plain, write_text


def test_to_plain_converts_numpy_and_enums():
    value = to_plain({"status": FitStatus.CONVERGED, "x": np.array([1.0, np.nan]), "n": np.int64(3)})
    assert value == {"status": "converged", "x": [1.0, "nan"], "n": 3}
    assert to_plain(-math.inf) == "-inf"


def test_json_floats_round_trip():
    value = 0.1 + 0.2
    assert json.loads(dump_json({"v": value}))["v"] == value


def test_csv_uses_full_precision():
    assert format_float(1.0 / 3.0) == "0.33333333333333331"
    text = dump_csv(["a", "b"], [[1.0 / 3.0, ""]])
    assert text == "a,b\n0.33333333333333331,\n"


def test_write_text_to_stream_and_file(tmp_path, capsys):
    write_text("hello\n", None)
    assert capsys.readouterr().out == "hello\n"
    target = tmp_path / "out.json"
    write_text("{}\n", str(target))
    assert target.read_text(encoding="utf-8") == "{}\n"
    assert manifest_path(str(target)).endswith("out.json.manifest.json")


def test_manifest_json_has_versions():
    manifest = RunManifest(command="fit", arguments=["fit"], config={}, seeds={"integrator": 1, "sampler": 1})
    document = json.loads(manifest.to_json())
    assert document["command"] == "fit"
    assert "python" in document["versions"]
    assert document["duration_seconds"] is None
