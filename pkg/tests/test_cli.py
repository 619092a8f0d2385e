import json

import numpy as np
import pytest

from soundlm import cli, fileio, world
from soundlm.codec import RvqConfig, save_codebooks, train_codebooks
from soundlm.experiments import LabConfig
from soundlm.model import Model
from soundlm.vocab import default_vocab


@pytest.fixture(scope="module")
def small_artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scenes = world.build_scenes(30, seed=5)
    frames = np.concatenate([s.frames for s in scenes], axis=0)
    books = train_codebooks(frames, RvqConfig(), iters=15)
    books_path = root / "books.urvq"
    save_codebooks(books_path, books)
    cfg = LabConfig().model_config()
    model = Model(cfg, default_vocab(), seed=0)
    model_path = root / "model.ualm"
    model.save(model_path)
    data_dir = root / "world"
    records = world.write_dataset(scenes[:8], data_dir)
    return {
        "root": root,
        "books": str(books_path),
        "model": str(model_path),
        "records": records,
    }


def test_world_build_cli(tmp_path):
    rc = cli.main(["--out", str(tmp_path), "--seed", "3", "world", "build",
                   "--scenes", "5"])
    assert rc == 0
    records = world.read_records(tmp_path / "world" / "records.jsonl")
    assert len(records) == 15
    frames_path = records[0]["frames_path"]
    assert (tmp_path / "world" / frames_path).exists()


def test_sample_cli_writes_frames_and_sidecar(small_artifacts, tmp_path):
    out = tmp_path / "gen.ufrm"
    rc = cli.main([
        "sample", "--prompt", "a dog barks", "--lambda", "2.0", "--topk", "5",
        "--frames", "8", "--model", small_artifacts["model"],
        "--books", small_artifacts["books"], "--out", str(out),
    ])
    assert rc == 0
    frames = fileio.read_frames(out)
    assert frames.shape == (8, 16)
    sidecar = json.loads(open(str(out) + ".tokens.json").read())
    assert np.asarray(sidecar["tokens"]).shape == (8, 8)
    assert sidecar["lambda"] == 2.0


def test_sample_cli_deterministic(small_artifacts, tmp_path):
    args = ["--seed", "9", "sample", "--prompt", "rain falls", "--frames", "6",
            "--model", small_artifacts["model"], "--books", small_artifacts["books"]]
    a, b = tmp_path / "a.ufrm", tmp_path / "b.ufrm"
    assert cli.main([*args, "--out", str(a)]) == 0
    assert cli.main([*args, "--out", str(b)]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_eval_cli_report_columns(small_artifacts, tmp_path):
    report = tmp_path / "report.csv"
    rc = cli.main([
        "--seed", "2", "eval", "--set", small_artifacts["records"],
        "--model", small_artifacts["model"], "--books", small_artifacts["books"],
        "--report", str(report),
    ])
    assert rc == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "FD,KL,IS,CL"
    values = [float(v) for v in lines[1].split(",")]
    assert len(values) == 4
    assert values[2] >= 1.0  # IS lower bound


def test_eval_cli_rerun_byte_identical(small_artifacts, tmp_path):
    args = ["--seed", "2", "eval", "--set", small_artifacts["records"],
            "--model", small_artifacts["model"], "--books", small_artifacts["books"]]
    r1, r2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert cli.main([*args, "--report", str(r1)]) == 0
    assert cli.main([*args, "--report", str(r2)]) == 0
    assert r1.read_bytes() == r2.read_bytes()


def test_chat_repl_round(small_artifacts, monkeypatch, capsys):
    import io

    monkeypatch.setattr("sys.stdin", io.StringIO("hello there\n\n"))
    rc = cli.main(["chat", "--model", small_artifacts["model"]])
    assert rc == 0
    out = capsys.readouterr().out
    assert "assistant>" in out


def test_model_logits_shapes(small_artifacts):
    from soundlm.data import text_sample
    from soundlm.layout import pack_single
    from soundlm.model import Model

    model = Model.load(small_artifacts["model"])
    s = text_sample(model.vocab, model.cfg.n_q, "x", "text", "a dog barks", "rain falls")
    out = model.logits(pack_single(s))
    assert out["text"].shape == (len(s), model.vocab.text_size)
    assert out["audio"].shape == (model.cfg.n_q, len(s), model.cfg.codebook_size)


def test_missing_artifact_is_operational_error(tmp_path, capsys):
    rc = cli.main(["sample", "--prompt", "x", "--model", str(tmp_path / "nope.ualm"),
                   "--books", str(tmp_path / "nope.urvq"), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_experiment_rejected():
    with pytest.raises(SystemExit):
        cli.main(["experiment", "--name", "warp_drive"])


def test_config_file_overrides(tmp_path):
    cfg_path = tmp_path / "lab.cfg"
    fileio.write_config(cfg_path, {"train_scenes": 7, "pretrain_lr": 1e-3})
    parser = cli.build_parser()
    args = parser.parse_args(["--config", str(cfg_path), "pretrain"])
    lab_cfg = cli._lab_config(args)
    assert lab_cfg.train_scenes == 7
    assert lab_cfg.pretrain_lr == 1e-3
    bad = tmp_path / "bad.cfg"
    fileio.write_config(bad, {"no_such_key": 1})
    args = parser.parse_args(["--config", str(bad), "pretrain"])
    with pytest.raises(Exception):
        cli._lab_config(args)
