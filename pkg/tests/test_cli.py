import csv
import json

import pytest

from cgvqa.cli import build_parser, main
from cgvqa.manifest import DatasetManifest
from cgvqa.synthetic import VariantSpec, write_corpus

pytestmark = pytest.mark.slow

CONFIG = """
[train]
epochs = 1
batch_size = 8
head_learning_rate = 0.003
eval_batch_size = 8

[model]
backbone = "Xception"
trainable_modules = 1
pretrained = false
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    write_corpus(corpus, games=3, sequences_per_game=2, frames=6,
                 variants=(VariantSpec("hi", 1500, (640, 360)), VariantSpec("lo", 150, (640, 360))))
    (root / "c.toml").write_text(CONFIG)
    assert main(["scan", str(corpus), "--validation-games", "game02", "--overlap-games", "game00", "--seed", "1"]) == 0
    return root, corpus


def test_global_flags_before_or_after_subcommand():
    p = build_parser()
    assert p.parse_args(["--seed", "3", "report"]).seed == 3
    assert p.parse_args(["report", "--seed", "4"]).seed == 4
    assert p.parse_args(["--out", "x", "study", "crop"]).out == "x"
    with pytest.raises(SystemExit):
        p.parse_args(["study", "lstm"])


def test_end_to_end(workspace, capsys):
    root, corpus = workspace
    manifest = str(corpus / "manifest.json")
    cache = str(root / "labels")
    cfg = str(root / "c.toml")

    m = DatasetManifest.load(manifest)
    assert len(m.split.train_sequences) == 3 and len(m.split.validation_sequences) == 3

    assert main(["label", "--manifest", manifest, "--cache-root", cache]) == 0
    assert len(list((root / "labels").glob("*.csv"))) == 12

    out = root / "train"
    assert main(["train", "--manifest", manifest, "--cache-root", cache, "--config", cfg, "--out", str(out)]) == 0
    with open(out / "history.csv") as f:
        assert len(list(csv.reader(f))) == 2

    assert main(["evaluate", "--manifest", manifest, "--cache-root", cache, "--checkpoint", str(out / "best.npz"),
                 "--out", str(root / "eval")]) == 0
    reports = json.loads((root / "eval" / "evaluation.json").read_text())
    assert {(r["level"], r["group"]) for r in reports} >= {("frame", "all"), ("video", "all")}

    study = root / "depth"
    code = main(["study", "depth", "--grid", "0,15", "--manifest", manifest, "--cache-root", cache,
                 "--config", cfg, "--out", str(study)])
    assert code == 1  # k=15 does not exist, so one cell fails
    assert main(["report", "--out", str(study)]) == 1

    ok = root / "crop"
    assert main(["--config", cfg, "--manifest", manifest, "--cache-root", cache, "--out", str(ok),
                 "study", "crop"]) == 0
    assert (ok / "crop.csv").exists()
    assert main(["report", "--out", str(ok)]) == 0


def test_fr_tool_env_override(workspace, monkeypatch, tmp_path, capsys):
    root, corpus = workspace
    from cgvqa import ffmpeg

    monkeypatch.setenv("CGVQA_FR_TOOL", "/nonexistent/vmaf-tool")
    ffmpeg.version.cache_clear()
    try:
        code = main(["label", "--manifest", str(corpus / "manifest.json"), "--cache-root", str(tmp_path / "l")])
    finally:
        ffmpeg.version.cache_clear()
    assert code == 1
    assert "FAILED" in capsys.readouterr().err
