"""Command outputs validate against the JSON schemas shipped in schemas/."""

import json
import os
import pathlib
import subprocess

import jsonschema
import numpy as np
import pytest
from referencing import Registry, Resource
from safetensors.numpy import load_file, save_file

CLI = os.environ["QKSCOPE_CLI"]
SCHEMAS = pathlib.Path(os.environ["QKSCOPE_SOURCE_DIR"]) / "schemas"
FIXTURES = pathlib.Path(os.environ["QKSCOPE_FIXTURE_DIR"])
COMMANDS = ["modes", "cosine-trend", "preference", "mode-maps", "mine", "anisotropy", "same-object", "verify"]


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


REGISTRY = Registry().with_resources(
    (s["$id"], Resource.from_contents(s)) for s in (schema(n) for n in ["spectrum", "modes_report", "manifest", "verify"])
)


def validator(name):
    s = schema(name)
    jsonschema.Draft202012Validator.check_schema(s)
    return jsonschema.Draft202012Validator(s, registry=REGISTRY)


def run(command, out, checkpoint=FIXTURES / "toy.safetensors", mapping=FIXTURES / "toy.mapping.json"):
    args = [CLI, command, "--checkpoint", checkpoint, "--mapping", mapping, "--out", out,
            "--top-k", "2", "--null-samples", "20000"]
    if command == "same-object":
        args += ["--images", FIXTURES / "seg"]
    elif command not in ("modes", "cosine-trend"):
        args += ["--images", FIXTURES / "o3"]
    subprocess.run([str(a) for a in args], check=True, capture_output=True)
    return pathlib.Path(out)


def check_spectrum_order(head):
    n = len(head["index"])
    for key in ("sigma", "cosine", "degenerate_group", "degenerate"):
        assert len(head[key]) == n
    assert all(a >= b for a, b in zip(head["sigma"], head["sigma"][1:]))


def test_modes_report_validates(tmp_path):
    report = json.loads((run("modes", tmp_path / "m") / "modes.json").read_text())
    validator("modes_report").validate(report)
    assert len(report["heads"]) == 4
    spectrum = validator("spectrum")
    for head in report["heads"]:
        spectrum.validate(head)
        check_spectrum_order(head)


def test_all_zero_head_validates(tmp_path):
    tensors = load_file(str(FIXTURES / "toy.safetensors"))
    tensors["blocks.0.attn.q.weight"] = np.zeros_like(tensors["blocks.0.attn.q.weight"])
    ckpt = tmp_path / "zero.safetensors"
    save_file(tensors, str(ckpt))
    report = json.loads((run("modes", tmp_path / "z", checkpoint=ckpt) / "modes.json").read_text())
    validator("modes_report").validate(report)
    zero = [h for h in report["heads"] if h["layer"] == 0]
    for head in zero:
        assert head["weighted_cosine"] is None
        assert all(s == 0 for s in head["sigma"])
        assert all(head["degenerate"])


def test_schemas_reject_malformed_documents(tmp_path):
    report = json.loads((run("modes", tmp_path / "m") / "modes.json").read_text())
    bad = json.loads(json.dumps(report))
    bad["heads"][0]["sigma"][0] = -1.0
    with pytest.raises(jsonschema.ValidationError):
        validator("modes_report").validate(bad)
    bad = json.loads(json.dumps(report["heads"][0]))
    del bad["cosine"]
    with pytest.raises(jsonschema.ValidationError):
        validator("spectrum").validate(bad)


@pytest.mark.parametrize("command", COMMANDS)
def test_manifest_validates(tmp_path, command):
    out = run(command, tmp_path / command)
    manifest = json.loads((out / "manifest.json").read_text())
    validator("manifest").validate(manifest)
    assert manifest["command"] == command
    listed = {a["path"] for a in manifest["artifacts"]}
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk


def test_verify_report_validates(tmp_path):
    report = json.loads((run("verify", tmp_path / "v") / "verify.json").read_text())
    validator("verify").validate(report)
    assert report["passed"] is True
