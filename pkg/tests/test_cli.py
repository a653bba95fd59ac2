"""Command-line interface: config schema, commands, reproducibility."""

import json
import os

import numpy as np
import pytest

from selfguide import formats
from selfguide.cli import ConfigError, EditConfig, caption_from_words, main
from selfguide.scenes import gen_scene

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    """Checkpoint from a 4-step training run (default architecture)."""
    d = tmp_path_factory.mktemp("train")
    cfg = {"model": {},
           "train": {"steps": 4, "batch_size": 2, "dataset_size": 8,
                     "warmup": 2, "log_every": 2}}
    path = d / "train.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path), "--out", str(d)]) == 0
    assert (d / "metrics.txt").exists()
    return str(d / "model.sgdf")


def run_config(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# -- config documents --------------------------------------------------------

def base_doc(ckpt_path="model.sgdf"):
    return {"checkpoint": ckpt_path, "prompt": ["large", "red", "disk"]}


def test_parse_then_emit_is_a_fixed_point():
    cfg = EditConfig.parse(json.dumps(base_doc()))
    text = cfg.emit()
    assert EditConfig.parse(text).emit() == text
    # defaults are materialized into the canonical form
    assert cfg.doc["weights"] == "ema"
    assert cfg.doc["sampler"]["cfg_scale"] == 0.0
    assert cfg.doc["sampler"]["clip_x0"] is True
    assert cfg.doc["edit"] is None


def test_unknown_keys_rejected_at_every_level():
    bad = dict(base_doc(), extra=1)
    with pytest.raises(ConfigError, match="unknown key"):
        EditConfig.parse(json.dumps(bad))
    bad = dict(base_doc(), sampler={"warp": 9})
    with pytest.raises(ConfigError, match="unknown key"):
        EditConfig.parse(json.dumps(bad))
    bad = dict(base_doc(), edit={"kind": "resize", "factor": 2, "wild": 0})
    with pytest.raises(ConfigError, match="unknown key"):
        EditConfig.parse(json.dumps(bad))


def test_bad_prompts_and_kinds_rejected():
    with pytest.raises(ConfigError, match="triplet"):
        EditConfig.parse(json.dumps(dict(base_doc(), prompt=["red"])))
    with pytest.raises(ConfigError, match="bad triplet"):
        EditConfig.parse(json.dumps(dict(base_doc(), prompt=["huge", "red", "disk"])))
    with pytest.raises(ConfigError, match="caption longer"):
        EditConfig.parse(json.dumps(dict(
            base_doc(), prompt=["large", "red", "disk"] * 3)))
    with pytest.raises(ConfigError, match="unknown edit kind"):
        EditConfig.parse(json.dumps(dict(base_doc(), edit={"kind": "teleport"})))
    with pytest.raises(ConfigError, match="unknown source kind"):
        EditConfig.parse(json.dumps(dict(base_doc(), sources={"x": {"kind": "wish"}})))


def test_schedule_forms():
    doc = dict(base_doc(), sampler={"schedule": "all-on", "steps": 40})
    cfg = EditConfig.parse(json.dumps(doc))
    assert cfg.guidance_flags(40).all()
    doc["sampler"]["schedule"] = "all-off"
    assert not EditConfig.parse(json.dumps(doc)).guidance_flags(40).any()
    doc["sampler"]["schedule"] = [True, False, True]
    cfg = EditConfig.parse(json.dumps(doc))
    assert cfg.guidance_flags(3).tolist() == [True, False, True]
    with pytest.raises(ConfigError, match="length"):
        cfg.guidance_flags(5)
    doc["sampler"]["schedule"] = "sometimes"
    with pytest.raises(ConfigError):
        EditConfig.parse(json.dumps(doc))


def test_caption_words_to_ids():
    ids = caption_from_words(["large", "red", "disk"])
    assert ids.tolist() == [1, 14, 3, 9, 2, 0, 0, 0]
    ids = caption_from_words(["small", "blue", "square", "large", "green", "triangle"])
    assert ids.tolist() == [1, 13, 7, 10, 14, 5, 11, 2]


def test_shipped_configs_are_valid():
    for name in sorted(os.listdir(CONFIG_DIR)):
        path = os.path.join(CONFIG_DIR, name)
        with open(path) as f:
            text = f.read()
        if name.startswith("train"):
            doc = json.loads(text)
            assert set(doc) <= {"model", "train", "resume"}, name
        elif name.startswith("extract"):
            doc = json.loads(text)
            assert set(doc) <= {"checkpoint", "weights", "image", "prompt", "seed"}, name
        elif name.startswith("eval"):
            doc = json.loads(text)
            assert set(doc) <= {"dump", "tokens", "timestep"}, name
        else:
            EditConfig.parse(text)  # raises on any schema violation


# -- commands ----------------------------------------------------------------

def test_sample_reproducible_across_thread_counts(ckpt, tmp_path, monkeypatch):
    doc = dict(base_doc(ckpt),
               sampler={"method": "ddim", "steps": 48, "seed": [0, 1]})
    cfgp = run_config(tmp_path, "s.json", doc)
    monkeypatch.setenv("SELFGUIDE_THREADS", "1")
    assert main(["sample", "--config", cfgp, "--out", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv("SELFGUIDE_THREADS", "2")
    assert main(["sample", "--config", cfgp, "--out", str(tmp_path / "par")]) == 0
    for name in ("sample_0.ppm", "sample_1.ppm"):
        a = (tmp_path / "seq" / name).read_bytes()
        b = (tmp_path / "par" / name).read_bytes()
        assert a == b
    assert (tmp_path / "seq" / "sample_0.ppm").read_bytes() != \
        (tmp_path / "seq" / "sample_1.ppm").read_bytes()


def test_sample_seed_override_and_internals(ckpt, tmp_path, capsys):
    doc = dict(base_doc(ckpt), dump_internals=True,
               sampler={"method": "ddim", "steps": 48, "seed": 7})
    cfgp = run_config(tmp_path, "s.json", doc)
    assert main(["sample", "--config", cfgp, "--out", str(tmp_path / "a")]) == 0
    assert main(["sample", "--config", cfgp, "--out", str(tmp_path / "b"),
                 "--seed", "5"]) == 0
    img = formats.read_ppm(str(tmp_path / "a" / "sample.ppm"))
    assert img.shape == (3, 32, 32)
    assert (tmp_path / "a" / "sample.ppm").read_bytes() != \
        (tmp_path / "b" / "sample.ppm").read_bytes()
    seq = formats.read_internals(str(tmp_path / "a" / "internals.sgin"))
    assert seq.provenance == "sampled"
    assert len(seq.steps) == 48

    ev = run_config(tmp_path, "e.json",
                    {"dump": str(tmp_path / "a" / "internals.sgin"),
                     "tokens": [1, 2, 3], "timestep": 1})
    assert main(["eval-props", "--config", ev, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "token 1: centroid" in out and "size" in out


def test_edit_writes_triptych_deterministically(ckpt, tmp_path):
    doc = dict(base_doc(ckpt),
               sampler={"method": "ddim", "steps": 32, "seed": 3,
                        "sg_weight": 5000.0, "clip_x0": False,
                        "schedule": "all-on"},
               edit={"kind": "move_via_centroid", "target": [0.3, 0.6]})
    cfgp = run_config(tmp_path, "edit.json", doc)
    assert main(["edit", "--config", cfgp, "--out", str(tmp_path / "x")]) == 0
    assert main(["edit", "--config", cfgp, "--out", str(tmp_path / "y")]) == 0
    for name in ("original.ppm", "edited.ppm", "side_by_side.ppm"):
        assert (tmp_path / "x" / name).read_bytes() == \
            (tmp_path / "y" / name).read_bytes()
    orig = formats.read_ppm(str(tmp_path / "x" / "original.ppm"))
    edited = formats.read_ppm(str(tmp_path / "x" / "edited.ppm"))
    sheet = formats.read_ppm(str(tmp_path / "x" / "side_by_side.ppm"))
    assert sheet.shape == (3, 32, 66)
    assert not np.array_equal(orig, edited)  # the energy term steered the chain


def test_edit_requires_edit_section(ckpt, tmp_path):
    cfgp = run_config(tmp_path, "plain.json", base_doc(ckpt))
    assert main(["edit", "--config", cfgp, "--out", str(tmp_path)]) == 2


def test_extract_full_coverage(ckpt, tmp_path):
    img, _, objs = gen_scene(3)
    ppm = tmp_path / "scene.ppm"
    formats.write_ppm(str(ppm), img)
    words = [w for o in objs for w in (o.size_word, o.color, o.shape)]
    cfgp = run_config(tmp_path, "x.json",
                      {"checkpoint": ckpt, "image": str(ppm), "prompt": words,
                       "seed": 11})
    assert main(["extract", "--config", cfgp, "--out", str(tmp_path / "out")]) == 0
    seq = formats.read_internals(str(tmp_path / "out" / "internals.sgin"))
    assert seq.provenance == "extracted"
    assert seq.timesteps == list(range(1, 257))


def test_errors_exit_2(tmp_path):
    assert main(["sample", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["sample", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "all checks passed" in capsys.readouterr().out
