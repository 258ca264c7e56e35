"""Thin command-line client for the job service.

Every subcommand builds a request, submits it to the service, polls the
job, and prints the result.  With --server (or ARNE_SERVER) the requests
go to a running `arne serve` instance over HTTP; otherwise an in-process
service instance handles them, so single-machine use needs no daemon.

A flat key=value config file supplies defaults; explicit flags win.
"""

import json
import os
import sys
import time

import click

from .harness import parse_config_file
from .service.app import create_app
from .service.schemas import ModelParams, TrainParams


class ServiceClient:
    """Submit-and-poll wrapper over HTTP or an in-process app."""

    def __init__(self, server=None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=30.0)
        else:
            from starlette.testclient import TestClient

            self._client = TestClient(create_app())

    def run_job(self, path, payload, poll_interval=0.2):
        created = self._client.post(path, json=payload)
        if created.status_code != 200:
            raise click.ClickException(f"{path} failed: {created.status_code} {created.text}")
        job_id = created.json()["job_id"]
        while True:
            status = self._client.get(f"/jobs/{job_id}").json()
            if status["state"] == "done":
                return status["result"]
            if status["state"] == "error":
                raise click.ClickException(f"job {job_id} failed: {status['error']}")
            time.sleep(poll_interval)


def _load_config(path):
    return parse_config_file(path) if path else {}


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(raw, like):
    if isinstance(like, bool):
        return _BOOL[raw.lower()]
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, list):
        return [type(like[0])(v) for v in raw.split(",")] if like else raw.split(",")
    return raw


def _model_params(kind, desk, config, flags):
    """Config-file values fill ModelParams fields the flags left unset."""
    values = {"kind": kind, "desk": desk}
    fields = ModelParams.model_fields
    for name, value in flags.items():
        if name in fields and value is not None:
            values[name] = value
    for key, raw in config.items():
        if key in fields and key not in values and key not in ("kind", "desk"):
            annotation_probe = {"f_dims": [0], "g_dims": [0], "use_delimiter": True,
                               "f_dropout": 0.0, "dropout_p": 0.0, "attn_dropout_p": 0.0}
            like = annotation_probe.get(key, 0)
            values[key] = _convert(raw, like)
    return ModelParams(**values)


def _train_params(config, flags):
    values = {}
    fields = TrainParams.model_fields
    for name, value in flags.items():
        if name in fields and value is not None:
            values[name] = value
    probes = {"lr": 0.0, "beta": 0.0, "scheduler_trigger_loss": 0.0, "scheduler_decay": 0.0,
              "grad_clip": 0.0, "batch_size": 0, "early_stop_patience": 0, "seed": 0,
              "max_epochs": 0}
    for key, raw in config.items():
        if key in fields and key not in values:
            values[key] = _convert(raw, probes.get(key, 0))
    return TrainParams(**values)


def _emit(result):
    click.echo(json.dumps(result, indent=2, sort_keys=True, default=str))


server_option = click.option(
    "--server", envvar="ARNE_SERVER", default=None,
    help="service URL; omit to run the service in-process",
)
config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True), default=None,
    help="flat key=value defaults file, overridden by flags",
)


@click.group()
def main():
    """Matrix-reasoning experiments: generate data, train, evaluate."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8707, show_default=True)
def serve(host, port):
    """Run the job service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


@main.command()
@server_option
@config_option
@click.option("--out", required=True, help="output dataset path")
@click.option("--n", required=True, type=int, help="number of samples")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--panel-size", default=32, type=int, show_default=True)
@click.option("--min-rules", default=1, type=int, show_default=True)
@click.option("--max-rules", default=4, type=int, show_default=True)
@click.option("--split", default="train", type=click.Choice(["train", "val", "test"]), show_default=True)
@click.option("--orientation", default="row", type=click.Choice(["row", "column"]), show_default=True)
def generate(server, config_path, out, n, seed, panel_size, min_rules, max_rules, split, orientation):
    """Generate a puzzle dataset file."""
    _emit(ServiceClient(server).run_job("/datasets/generate", {
        "out": out, "n": n, "seed": seed, "panel_size": panel_size,
        "min_rules": min_rules, "max_rules": max_rules,
        "split": split, "orientation": orientation,
    }))


def model_options(fn):
    decorators = [
        click.option("--model", "kind", default="arne", type=click.Choice(["arne", "wren"]), show_default=True),
        click.option("--desk/--full-scale", default=True, show_default=True,
                     help="start from the CPU preset or the full-scale defaults"),
        click.option("--height", type=int, default=None),
        click.option("--width", type=int, default=None),
        click.option("--d-model", "d_model", type=int, default=None),
        click.option("--n-encoder-layers", "n_encoder_layers", type=int, default=None),
        click.option("--n-heads", "n_heads", type=int, default=None),
        click.option("--d-k", "d_k", type=int, default=None),
        click.option("--d-v", "d_v", type=int, default=None),
        click.option("--d-hidden", "d_hidden", type=int, default=None),
        click.option("--g-layers", "g_layers", type=int, default=None),
        click.option("--f-dropout", "f_dropout", type=float, default=None),
        click.option("--dropout-p", "dropout_p", type=float, default=None),
        click.option("--attn-dropout-p", "attn_dropout_p", type=float, default=None),
        click.option("--use-delimiter/--no-delimiter", "use_delimiter", default=None),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


def train_options(fn):
    decorators = [
        click.option("--batch-size", "batch_size", type=int, default=None),
        click.option("--lr", type=float, default=None),
        click.option("--beta", type=float, default=None),
        click.option("--early-stop-patience", "early_stop_patience", type=int, default=None),
        click.option("--grad-clip", "grad_clip", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--max-epochs", "max_epochs", type=int, default=None),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


@main.command()
@server_option
@config_option
@click.option("--run-dir", required=True)
@click.option("--train-data", "train_path", required=True)
@click.option("--val-data", "val_path", required=True)
@click.option("--test-data", "test_path", default=None)
@model_options
@train_options
def train(server, config_path, run_dir, train_path, val_path, test_path, kind, desk, **flags):
    """Train a model and write run artifacts (report.csv, model.ckpt, manifest)."""
    config = _load_config(config_path)
    _emit(ServiceClient(server).run_job("/train", {
        "run_dir": run_dir,
        "train_path": train_path,
        "val_path": val_path,
        "test_path": test_path,
        "model": _model_params(kind, desk, config, flags).model_dump(),
        "train": _train_params(config, flags).model_dump(),
    }))


@main.command(name="eval")
@server_option
@click.option("--run-dir", required=True, help="training run directory (manifest + checkpoint)")
@click.option("--data", "data_path", required=True)
@click.option("--beta", default=10.0, type=float, show_default=True)
@click.option("--batch-size", default=64, type=int, show_default=True)
@click.option("--threshold", default=0.5, type=float, show_default=True)
@click.option("--out-dir", default=None, help="where to write eval.json and meta_metrics.csv")
def eval_cmd(server, run_dir, data_path, beta, batch_size, threshold, out_dir):
    """Evaluate a trained run on a dataset."""
    _emit(ServiceClient(server).run_job("/evaluate", {
        "run_dir": run_dir, "data_path": data_path, "beta": beta,
        "batch_size": batch_size, "threshold": threshold, "out_dir": out_dir,
    }))


@main.command()
@server_option
@config_option
@click.option("--run-dir", required=True)
@click.option("--train-data", "train_path", required=True)
@click.option("--val-data", "val_path", required=True)
@click.option("--test-data", "test_path", required=True)
@click.option("--fractions", default="0.05,0.1,0.2,0.35,0.5,1.0", show_default=True)
@click.option("--kinds", default="arne,wren", show_default=True)
@click.option("--shuffle-seed", default=0, type=int, show_default=True)
@click.option("--desk/--full-scale", default=True, show_default=True)
@train_options
def sweep(server, config_path, run_dir, train_path, val_path, test_path,
          fractions, kinds, shuffle_seed, desk, **flags):
    """Sample-efficiency sweep over training-set fractions for each model kind."""
    config = _load_config(config_path)
    _emit(ServiceClient(server).run_job("/sweep", {
        "run_dir": run_dir,
        "train_path": train_path, "val_path": val_path, "test_path": test_path,
        "fractions": [float(f) for f in fractions.split(",")],
        "model_kinds": kinds.split(","),
        "arne": _model_params("arne", desk, config, {}).model_dump(),
        "wren": _model_params("wren", desk, config, {}).model_dump(),
        "train": _train_params(config, flags).model_dump(),
        "shuffle_seed": shuffle_seed,
    }))


@main.command()
@server_option
@config_option
@click.option("--run-dir", required=True)
@click.option("--train-data", "train_path", required=True)
@click.option("--val-data", "val_path", required=True)
@click.option("--test-data", "test_path", required=True)
@click.option("--dropout-p", "dropout_p", default=None, help="comma list, e.g. 0.1,0.17")
@click.option("--lr", default=None, help="comma list")
@click.option("--use-delimiter", "use_delimiter", default=None, help="comma list of true/false")
@click.option("--beta", default=None, help="comma list")
@click.option("--fraction", default="1.0", show_default=True, help="comma list")
@click.option("--shuffle-seed", default=0, type=int, show_default=True)
@click.option("--desk/--full-scale", default=True, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--max-epochs", "max_epochs", type=int, default=None)
@click.option("--batch-size", "batch_size", type=int, default=None)
def ablate(server, config_path, run_dir, train_path, val_path, test_path,
           dropout_p, lr, use_delimiter, beta, fraction, shuffle_seed, desk, **flags):
    """Train the config grid and emit one CSV row per cell."""
    config = _load_config(config_path)
    payload = {
        "run_dir": run_dir,
        "train_path": train_path, "val_path": val_path, "test_path": test_path,
        "fraction": [float(f) for f in fraction.split(",")],
        "model": _model_params("arne", desk, config, {}).model_dump(),
        "train": _train_params(config, flags).model_dump(),
        "shuffle_seed": shuffle_seed,
    }
    if dropout_p:
        payload["dropout_p"] = [float(v) for v in dropout_p.split(",")]
    if lr:
        payload["lr"] = [float(v) for v in lr.split(",")]
    if beta:
        payload["beta"] = [float(v) for v in beta.split(",")]
    if use_delimiter:
        payload["use_delimiter"] = [_BOOL[v.lower()] for v in use_delimiter.split(",")]
    _emit(ServiceClient(server).run_job("/ablate", payload))


@main.command()
@server_option
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--eps", default=1e-5, type=float, show_default=True)
@click.option("--tol-ops", default=1e-4, type=float, show_default=True)
@click.option("--tol-layers", default=1e-3, type=float, show_default=True)
@click.option("--max-entries", default=3, type=int, show_default=True)
def gradcheck(server, seed, eps, tol_ops, tol_layers, max_entries):
    """Finite-difference gradient battery; exits nonzero on any failure."""
    result = ServiceClient(server).run_job("/gradcheck", {
        "seed": seed, "eps": eps, "tol_ops": tol_ops,
        "tol_layers": tol_layers, "max_entries": max_entries,
    })
    for row in result["reports"]:
        state = "PASS" if row["passed"] else "FAIL"
        click.echo(f"{row['op_name']:22s} rel_err={row['max_relative_error']:.3e} "
                   f"tol={row['tolerance']:.0e} {state}")
    if not result["passed"]:
        sys.exit(1)
    click.echo("all gradient checks passed")


@main.command(name="dump-maps")
@server_option
@click.option("--run-dir", required=True)
@click.option("--data", "data_path", required=True)
@click.option("--index", "sample_index", default=0, type=int, show_default=True)
@click.option("--out-dir", required=True)
@click.option("--layer", "layer_index", default=3, type=int, show_default=True)
def dump_maps(server, run_dir, data_path, sample_index, out_dir, layer_index):
    """Export panel-encoder activation maps as PGM images."""
    _emit(ServiceClient(server).run_job("/dump-maps", {
        "run_dir": run_dir, "data_path": data_path, "sample_index": sample_index,
        "out_dir": out_dir, "layer_index": layer_index,
    }))


if __name__ == "__main__":
    main()
