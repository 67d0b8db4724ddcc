import os

import pytest

from conftest import TINY_INI
from prodembed.cli import main
from prodembed.core import ConfigError, DataError, load_table
from prodembed.evaluation import read_reports
from prodembed.pipeline import (
    METHODS,
    TASKS,
    Paths,
    PipelineConfig,
    check_inputs,
    default_config_text,
    parse_config,
)


def test_default_config_text_round_trips():
    cfg = parse_config(default_config_text())
    assert cfg.as_dict() == PipelineConfig().as_dict()
    assert cfg.digest() == PipelineConfig().digest()


def test_parse_config_types_and_errors():
    cfg = parse_config("[pipeline]\nmethods = P2V, PSI2V\ngrid_search = yes\n[sgns]\nwindow = 3\n"
                       "[eval]\nks = 1, 3\n")
    assert cfg.methods == ("P2V", "PSI2V") and cfg.grid_search is True
    assert cfg.sgns.window == 3 and cfg.eval.ks == (1, 3)
    for bad in ("[sgns]\nbogus = 1\n", "[nope]\nx = 1\n", "[sgns]\ndimension = ten\n",
                "[sgns]\nexponent = 0\n", "[pipeline]\nmethods = W2V\n", "not an ini"):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_digest_ignores_output_dir_and_tracks_seed():
    a = PipelineConfig()
    b = PipelineConfig(paths=Paths(out="elsewhere"))
    assert a.digest() == b.digest()
    c = a.with_seed(3)
    assert c.digest() != a.digest()
    assert c.sgns.seed == c.world.seed == c.bpr.seed == c.dae.seed == c.logistic.seed == 3


def test_check_inputs_names_missing_file(tmp_path):
    cat = tmp_path / "catalog.jsonl"
    cat.write_text("")
    paths = Paths(catalog=str(cat), events=str(tmp_path / "events.jsonl"))
    check_inputs(paths, ["DAE"])
    with pytest.raises(DataError, match="events.jsonl"):
        check_inputs(paths, ["P2V"])
    with pytest.raises(ConfigError, match="images"):
        check_inputs(paths, ["DAE", "IE"])


def test_cli_exit_codes(tmp_path, tiny_ini, capsys):
    out = str(tmp_path / "o")
    assert main(["bogus"]) == 2
    assert main(["train", "W2V", "--config", str(tiny_ini), "--out", out]) == 2
    assert main(["eval", "attributes", "--config", str(tiny_ini), "--out", out]) == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("[sgns]\nnegatives = 0\n")
    assert main(["train", "P2V", "--config", str(bad)]) == 2
    assert main(["synth", "--config", str(tiny_ini), "--out", out]) == 0
    os.remove(os.path.join(out, "world", "events.jsonl"))
    capsys.readouterr()
    assert main(["train", "P2V", "--config", str(tiny_ini), "--out", out]) == 3
    assert "events.jsonl" in capsys.readouterr().err


def test_train_unify_eval_neighbors(tmp_path, tiny_ini, capsys):
    out = str(tmp_path / "o")
    args = ["--config", str(tiny_ini), "--out", out]
    assert main(["synth", *args]) == 0
    assert main(["train", "PSI2V", *args]) == 0
    assert main(["train", "IE", *args]) == 0
    assert main(["unify", "UPSII2V", *args]) == 0
    t = load_table(os.path.join(out, "UPSII2V.emb"))
    assert t.metadata["method"] == "UPSII2V" and any("=" in tok for tok in t.tokens)
    assert main(["eval", "sparse", *args]) == 0
    rows = read_reports(os.path.join(out, "report_sparse.csv"))
    assert {r[1] for r in rows} == {"IE", "PSI2V", "UPSII2V"}
    loss = open(os.path.join(out, "PSI2V.loss.csv")).read().splitlines()
    assert loss[0] == "epoch,objective" and len(loss) == 3
    capsys.readouterr()
    assert main(["neighbors", "p00001", "-k", "4", *args]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all("=" not in l.split("\t")[1] for l in lines)
    # tables carry the config digest; another seed refuses them unless forced
    assert main(["eval", "sparse", *args, "--seed", "1"]) == 2
    assert main(["eval", "sparse", *args, "--seed", "1", "--force"]) == 0


def test_pipeline_writes_every_report(tmp_path, tiny_ini):
    out = tmp_path / "o"
    assert main(["pipeline", "--config", str(tiny_ini), "--out", str(out)]) == 0
    for task in TASKS:
        rows = read_reports(out / f"report_{task}.csv")
        names = {r[1] for r in rows}
        assert set(METHODS) <= names
    returns = read_reports(out / "report_returns.csv")
    assert "none" in {r[1] for r in returns}
    assert (out / "BPR-MF.users.emb").exists()
