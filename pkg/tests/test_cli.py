import json

from click.testing import CliRunner

from qdqa import qdg
from qdqa.cli import main
from qdqa.decompose import demo_bank
from test_decompose import good_graph_json
from test_metrics import row1_fixture_graphs_and_preds

RUNNER = CliRunner()


def demo_jsonl():
    return "".join(qdg.serialize(g) + "\n" for _, g in demo_bank().flat())


def cyclic_jsonl():
    doc = {
        "graph_id": "gcyc", "video_id": "v", "edge_types": ["Conjunction"],
        "nodes": [
            {"id": "a", "text": "a", "kind": "binary", "role": "main",
             "answer": "yes"},
            {"id": "b", "text": "b", "kind": "binary", "role": "leaf",
             "answer": "yes"},
            {"id": "c", "text": "c", "kind": "binary", "role": "leaf",
             "answer": "yes"},
        ],
        "edges": [
            {"parent": "a", "child": "b", "op": "Conjunction"},
            {"parent": "b", "child": "c", "op": "Conjunction"},
            {"parent": "c", "child": "b", "op": "Conjunction"},
        ],
    }
    return json.dumps(doc) + "\n"


def test_validate_ok(tmp_path):
    path = tmp_path / "graphs.jsonl"
    path.write_text(demo_jsonl())
    result = RUNNER.invoke(main, ["validate", str(path)])
    assert result.exit_code == 0
    assert json.loads(result.stdout) == {"status": "ok", "graphs": 3}


def test_validate_cycle_exits_1_with_error_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(cyclic_jsonl())
    result = RUNNER.invoke(main, ["validate", str(path)])
    assert result.exit_code == 1
    payload = json.loads(result.stderr)
    assert payload["error"] == "CycleError"
    assert payload["graph_id"] == "gcyc"


def test_validate_missing_file_is_usage_error():
    result = RUNNER.invoke(main, ["validate", "/nonexistent.jsonl"])
    assert result.exit_code == 2


def test_threads_must_be_positive(tmp_path):
    path = tmp_path / "graphs.jsonl"
    path.write_text(demo_jsonl())
    result = RUNNER.invoke(main, ["--threads", "0", "validate", str(path)])
    assert result.exit_code == 2


def write_row1_fixture(tmp_path):
    graphs, preds = row1_fixture_graphs_and_preds()
    gpath = tmp_path / "graphs.jsonl"
    gpath.write_text("".join(qdg.serialize(g) + "\n" for g in graphs))
    gold = tmp_path / "gold.jsonl"
    gold.write_text("".join(
        json.dumps({"id": n.id, "answer": n.gold_answer}) + "\n"
        for g in graphs for n in g.nodes
    ))
    pred = tmp_path / "pred.jsonl"
    pred.write_text("".join(
        json.dumps({"id": nid, "answer": ans}) + "\n"
        for nid, ans in preds.items()
    ))
    return gpath, gold, pred


def test_eval_row1_fixture_writes_cf1(tmp_path):
    gpath, gold, pred = write_row1_fixture(tmp_path)
    out = tmp_path / "report.json"
    result = RUNNER.invoke(main, [
        "eval", "--graphs", str(gpath), "--gold", str(gold),
        "--pred", str(pred), "--out", str(out),
    ])
    assert result.exit_code == 0
    report = json.loads(out.read_text())
    assert report["c_f"] == 66.67
    assert report["ca"] == 50.0


def test_eval_missing_prediction_exits_1(tmp_path):
    gpath, gold, pred = write_row1_fixture(tmp_path)
    pred.write_text(pred.read_text().split("\n", 1)[1])
    result = RUNNER.invoke(main, [
        "eval", "--graphs", str(gpath), "--gold", str(gold),
        "--pred", str(pred), "--out", str(tmp_path / "r.json"),
    ])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] == "MissingPredictionError"


def tiny_run_config(tmp_path, **kw):
    from qdqa.synth import SyntheticConfig
    from qdqa.train import RunConfig

    cfg = RunConfig(synthetic=SyntheticConfig(clusters=8, seed=0),
                    steps=4, eval_every=2, batch_clusters=2, **kw)
    path = tmp_path / "run.json"
    path.write_text(cfg.to_json())
    return path


def test_train_command_is_reproducible(tmp_path):
    cfg_path = tiny_run_config(tmp_path)

    def run(name):
        out = tmp_path / name
        result = RUNNER.invoke(main, [
            "--threads", "1", "train", "--config", str(cfg_path),
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        return (out / "report.json").read_text()

    assert run("a") == run("b")


def test_train_command_writes_artifacts(tmp_path):
    cfg_path = tiny_run_config(tmp_path)
    out = tmp_path / "run_out"
    result = RUNNER.invoke(main, [
        "train", "--config", str(cfg_path), "--out", str(out),
    ])
    assert result.exit_code == 0
    status = json.loads(result.stdout)
    assert status["status"] == "ok"
    for name in ("report.json", "epochs.csv", "runtime.json",
                 "run_config.json"):
        assert (out / name).exists()
    assert (out / "checkpoint" / "params.bin").exists()


def test_train_command_bad_config_exits_1(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"steps": -5}))
    result = RUNNER.invoke(main, [
        "train", "--config", str(cfg), "--out", str(tmp_path / "o"),
    ])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] == "ConfigError"


def test_ablate_command(tmp_path):
    cfg_path = tiny_run_config(tmp_path)
    out = tmp_path / "table.csv"
    result = RUNNER.invoke(main, [
        "ablate", "--config", str(cfg_path), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "row,main_acc,sub_acc,c_f,nc_f"
    assert len(lines) == 6


def test_gradcheck_command():
    result = RUNNER.invoke(main, [
        "gradcheck", "--module", "aggregator", "--instances", "1",
    ])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert payload["status"] == "ok"
    assert all(err < 1e-4 for err in payload["max_errors"].values())


def test_decompose_command_with_stub(tmp_path):
    questions = tmp_path / "q.txt"
    questions.write_text("Does A happen and B happen?\n")
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps(
        {"responses": ["1, 2, 3", good_graph_json("cli01")]}
    ))

    def run():
        return RUNNER.invoke(main, [
            "decompose", "--questions", str(questions), "--k", "3",
            "--stub", str(stub),
        ])

    result = run()
    assert result.exit_code == 0, result.output
    graphs = qdg.load_jsonl(result.stdout)
    assert graphs[0].graph_id == "cli01"
    assert json.loads(result.stderr)["succeeded"] == 1
    assert run().stdout == result.stdout


def test_decompose_all_failures_exits_1(tmp_path):
    questions = tmp_path / "q.txt"
    questions.write_text("q?\n")
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({"responses": ["junk"] * 6}))
    result = RUNNER.invoke(main, [
        "decompose", "--questions", str(questions), "--stub", str(stub),
    ])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["succeeded"] == 0


def test_help_lists_all_subcommands():
    result = RUNNER.invoke(main, ["--help"])
    assert result.exit_code == 0
    for cmd in ("validate", "eval", "train", "ablate", "gradcheck",
                "decompose"):
        assert cmd in result.output
