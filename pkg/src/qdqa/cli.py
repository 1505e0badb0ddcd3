"""Command-line entry point: validation, evaluation, training, ablation,
gradient checking, and question decomposition."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import decompose as dc, metrics, qdg
from .qdg import QdgError
from .synth import ConfigError


def _fail(error: Exception, **extra):
    """Machine-readable data-error JSON on stderr, exit 1."""
    payload = {"error": type(error).__name__, "message": str(error)}
    payload.update(extra)
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


@click.group()
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker thread budget; 1 keeps runs bit-reproducible.")
@click.pass_context
def main(ctx, threads):
    """Decomposition-graph VidQA toolkit."""
    if threads < 1:
        raise click.UsageError("--threads must be >= 1")
    ctx.obj = {"threads": threads}


@main.command()
@click.argument("graphs", type=click.Path(exists=True, dir_okay=False))
def validate(graphs):
    """Parse and validate a JSONL file of decomposition graphs."""
    try:
        parsed = qdg.load_jsonl(Path(graphs).read_text())
    except QdgError as exc:
        _fail(exc, graph_id=getattr(exc, "graph_id", None))
    except (json.JSONDecodeError, ValueError) as exc:
        _fail(exc)
    click.echo(json.dumps({"status": "ok", "graphs": len(parsed)}))


def _apply_gold(graph, gold_map):
    doc = qdg.to_dict(graph)
    for node in doc["nodes"]:
        if node["id"] in gold_map:
            node["answer"] = gold_map[node["id"]]
    return qdg.from_dict(doc)


@main.command("eval")
@click.option("--graphs", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--gold", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--pred", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def eval_cmd(graphs, gold, pred, beta, out):
    """Consistency metrics for predictions against gold answers."""
    try:
        graph_list = qdg.load_jsonl(Path(graphs).read_text())
        gold_map = metrics.load_predictions_jsonl(Path(gold).read_text())
        predictions = metrics.load_predictions_jsonl(Path(pred).read_text())
        graph_list = [_apply_gold(g, gold_map) for g in graph_list]
        report = metrics.full_report(graph_list, predictions, beta)
    except (QdgError, KeyError, ValueError, json.JSONDecodeError) as exc:
        _fail(exc)
    Path(out).write_text(metrics.emit_report(report, "json"))
    click.echo(json.dumps({"status": "ok", "out": out}))


@main.command("train")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
def train_cmd(config_path, out_dir):
    """Train the joint model; writes report, epoch CSV, and checkpoint."""
    from . import train as tr

    try:
        cfg = tr.RunConfig.from_json(Path(config_path).read_text())
        report, _ = tr.train(cfg, out_dir=out_dir)
    except (ConfigError, tr.NonFiniteLossError, ValueError,
            json.JSONDecodeError) as exc:
        _fail(exc, dump=getattr(exc, "dump", None))
    click.echo(json.dumps({
        "status": "ok", "out": out_dir, "best_step": report.best_step,
        "val_c_f": report.best_validation["val_c_f"],
    }))


@main.command("ablate")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def ablate_cmd(config_path, out):
    """Train every component-flag variant and tabulate the metrics."""
    from . import train as tr

    try:
        cfg = tr.RunConfig.from_json(Path(config_path).read_text())
        table = tr.ablate(cfg)
    except (ConfigError, tr.NonFiniteLossError, ValueError,
            json.JSONDecodeError) as exc:
        _fail(exc)
    Path(out).write_text(tr.ablation_csv(table))
    click.echo(json.dumps({"status": "ok", "out": out, "rows": list(table)}))


@main.command()
@click.option("--module", default="all", show_default=True,
              type=click.Choice(["all", "autodiff", "aligner", "aggregator",
                                 "train"]))
@click.option("--instances", type=int, default=3, show_default=True)
def gradcheck(module, instances):
    """Finite-difference checks over the composite operations."""
    from . import verify

    results = verify.run_suite(module, instances)
    ok = all(err < verify.TOLERANCE for err in results.values())
    click.echo(json.dumps({
        "status": "ok" if ok else "fail",
        "tolerance": verify.TOLERANCE,
        "max_errors": results,
    }, indent=2))
    if not ok:
        sys.exit(1)


@main.command("decompose")
@click.option("--bank", type=click.Path(exists=True, dir_okay=False),
              help="Exemplar bank JSON; defaults to the built-in demo bank.")
@click.option("--questions", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="One question per line.")
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--stub", type=click.Path(exists=True, dir_okay=False),
              help="Deterministic completion fixture instead of the HTTP "
                   "endpoint (QDQA_LLM_ENDPOINT / QDQA_LLM_API_KEY).")
@click.option("--out", type=click.Path(dir_okay=False),
              help="Write graphs JSONL here instead of stdout.")
def decompose_cmd(bank, questions, k, stub, out):
    """Decompose questions into validated graphs via a completion model."""
    try:
        bank_obj = (dc.ExampleBank.from_json(Path(bank).read_text())
                    if bank else dc.demo_bank())
        client = (dc.StubClient.from_fixture(stub) if stub
                  else dc.HttpCompletionClient())
        lines = Path(questions).read_text().splitlines()
        question_list = [q.strip() for q in lines if q.strip()]
        report = dc.extend_dataset(question_list, bank_obj, k, client)
    except (QdgError, dc.DecompositionError, ValueError,
            json.JSONDecodeError) as exc:
        _fail(exc)
    if out:
        Path(out).write_text(report.to_jsonl())
    else:
        click.echo(report.to_jsonl(), nl=False)
    click.echo(json.dumps(report.failure_report()), err=True)
    if report.failures and not report.graphs:
        sys.exit(1)


if __name__ == "__main__":
    main()
