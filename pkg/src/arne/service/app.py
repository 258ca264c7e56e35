"""HTTP endpoints wrapping the experiment harness.

Every operational endpoint enqueues a job and returns its id; clients
poll /jobs/{id} for completion and results.  Compute runs on the job
worker, never on the event loop.
"""

import os

from fastapi import FastAPI, HTTPException

from .. import __version__, checks, harness, pgm
from ..model import ArneConfig
from ..wren import WrenConfig
from .jobs import JobManager
from .schemas import (
    AblateRequest,
    DumpMapsRequest,
    EvalRequest,
    GenerateRequest,
    GradcheckRequest,
    HealthResponse,
    JobCreated,
    JobStatus,
    SweepRequest,
    TrainRequest,
)


def resolve_model_config(params):
    """ModelParams -> (kind, config dict) starting from the chosen preset."""
    if params.kind == "arne":
        base = ArneConfig.desk() if params.desk else ArneConfig()
    else:
        base = WrenConfig.desk() if params.desk else WrenConfig()
    config = base.to_dict()
    config.update(params.overrides())
    return params.kind, config


def _do_generate(req: GenerateRequest):
    ds = pgm.generate_dataset(
        req.n, seed=req.seed, panel_size=req.panel_size,
        min_rules=req.min_rules, max_rules=req.max_rules,
        split=req.split, orientation=req.orientation,
    )
    os.makedirs(os.path.dirname(os.path.abspath(req.out)), exist_ok=True)
    ds.save(req.out)
    return {
        "path": req.out,
        "n": len(ds),
        "panel_size": req.panel_size,
        "split": req.split,
        "sha256": harness.dataset_sha256(req.out),
    }


def _do_train(req: TrainRequest):
    kind, model_config = resolve_model_config(req.model)
    _, report = harness.train_run(
        req.run_dir, kind, model_config, req.train.overrides(),
        req.train_path, req.val_path, req.test_path,
    )
    return {
        "run_dir": req.run_dir,
        "model_kind": kind,
        "report_csv": os.path.join(req.run_dir, "report.csv"),
        "checkpoint": os.path.join(req.run_dir, "model.ckpt"),
        **report.summary(),
    }


def _do_eval(req: EvalRequest):
    model, manifest = harness.load_model_from_run(req.run_dir, req.checkpoint)
    dataset = pgm.PgmDataset.load(req.data_path)
    result = harness.evaluate(model, dataset, beta=req.beta,
                              batch_size=req.batch_size, threshold=req.threshold)
    payload = result.summary()
    payload["model_kind"] = manifest["model_kind"]
    if req.out_dir:
        os.makedirs(req.out_dir, exist_ok=True)
        harness.write_meta_metrics_csv(os.path.join(req.out_dir, "meta_metrics.csv"), result.meta)
        import json

        with open(os.path.join(req.out_dir, "eval.json"), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    return payload


def _do_sweep(req: SweepRequest):
    os.makedirs(req.run_dir, exist_ok=True)
    train_set = pgm.PgmDataset.load(req.train_path)
    val_set = pgm.PgmDataset.load(req.val_path)
    test_set = pgm.PgmDataset.load(req.test_path)
    model_configs = {}
    for kind in req.model_kinds:
        params = req.arne if kind == "arne" else req.wren
        resolved_kind, config = resolve_model_config(params)
        if resolved_kind != kind:
            raise ValueError(f"model params for {kind} carry kind={resolved_kind}")
        model_configs[kind] = config
    results = harness.sample_efficiency_sweep(
        train_set, val_set, test_set, req.fractions, req.model_kinds,
        model_configs, req.train.overrides(), shuffle_seed=req.shuffle_seed,
    )
    csv_path = os.path.join(req.run_dir, "sweep.csv")
    harness.write_sweep_csv(csv_path, results)
    harness.write_manifest(req.run_dir, {
        "command": "sweep",
        "fractions": req.fractions,
        "model_kinds": req.model_kinds,
        "model_configs": model_configs,
        "train_config": req.train.overrides(),
        "seed": req.train.overrides().get("seed", 0),
        "shuffle_seed": req.shuffle_seed,
        "dataset_sha256": {
            "train": harness.dataset_sha256(req.train_path),
            "val": harness.dataset_sha256(req.val_path),
            "test": harness.dataset_sha256(req.test_path),
        },
    })
    return {"csv": csv_path, "rows": [vars(r) for r in results]}


def _do_ablate(req: AblateRequest):
    os.makedirs(req.run_dir, exist_ok=True)
    train_set = pgm.PgmDataset.load(req.train_path)
    val_set = pgm.PgmDataset.load(req.val_path)
    test_set = pgm.PgmDataset.load(req.test_path)
    kind, model_config = resolve_model_config(req.model)
    if kind != "arne":
        raise ValueError("the ablation grid drives the attention model")
    grid = {}
    for axis in ("dropout_p", "lr", "use_delimiter", "beta", "fraction"):
        values = getattr(req, axis)
        if values is not None:
            grid[axis] = values
    val_sha = harness.dataset_sha256(req.val_path)
    test_sha = harness.dataset_sha256(req.test_path)
    rows = harness.ablation_grid(
        train_set, val_set, test_set, grid, model_config, req.train.overrides(),
        shuffle_seed=req.shuffle_seed, val_sha=val_sha, test_sha=test_sha,
    )
    csv_path = os.path.join(req.run_dir, "ablation.csv")
    harness.write_ablation_csv(csv_path, rows)
    harness.write_manifest(req.run_dir, {
        "command": "ablate",
        "grid": grid,
        "model_config": model_config,
        "train_config": req.train.overrides(),
        "seed": req.train.overrides().get("seed", 0),
        "shuffle_seed": req.shuffle_seed,
        "dataset_sha256": {"val": val_sha, "test": test_sha},
    })
    return {"csv": csv_path, "rows": rows}


def _do_gradcheck(req: GradcheckRequest):
    reports = checks.full_battery(
        seed=req.seed, eps=req.eps, tol_ops=req.tol_ops,
        tol_layers=req.tol_layers, max_entries=req.max_entries,
    )
    return {
        "passed": all(r.passed for r in reports),
        "reports": [vars(r) for r in reports],
    }


def _do_dump_maps(req: DumpMapsRequest):
    model, _ = harness.load_model_from_run(req.run_dir)
    dataset = pgm.PgmDataset.load(req.data_path)
    if not 0 <= req.sample_index < len(dataset):
        raise ValueError(f"sample_index {req.sample_index} outside dataset of {len(dataset)}")
    files = harness.dump_feature_maps(
        model, dataset.panels[req.sample_index], dataset.targets[req.sample_index],
        req.out_dir, layer_index=req.layer_index,
    )
    return {"out_dir": req.out_dir, "n_files": len(files)}


def create_app():
    app = FastAPI(title="arne", version=__version__)
    manager = JobManager()
    app.state.jobs = manager

    def enqueue(kind, fn):
        job = manager.submit(kind, fn)
        return JobCreated(job_id=job.job_id, kind=kind)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/datasets/generate", response_model=JobCreated)
    def generate(req: GenerateRequest):
        return enqueue("generate", lambda: _do_generate(req))

    @app.post("/train", response_model=JobCreated)
    def train(req: TrainRequest):
        return enqueue("train", lambda: _do_train(req))

    @app.post("/evaluate", response_model=JobCreated)
    def evaluate(req: EvalRequest):
        return enqueue("eval", lambda: _do_eval(req))

    @app.post("/sweep", response_model=JobCreated)
    def sweep(req: SweepRequest):
        return enqueue("sweep", lambda: _do_sweep(req))

    @app.post("/ablate", response_model=JobCreated)
    def ablate(req: AblateRequest):
        return enqueue("ablate", lambda: _do_ablate(req))

    @app.post("/gradcheck", response_model=JobCreated)
    def gradcheck(req: GradcheckRequest):
        return enqueue("gradcheck", lambda: _do_gradcheck(req))

    @app.post("/dump-maps", response_model=JobCreated)
    def dump_maps(req: DumpMapsRequest):
        return enqueue("dump-maps", lambda: _do_dump_maps(req))

    @app.get("/jobs", response_model=list[JobStatus])
    def jobs():
        return [JobStatus(**job.status()) for job in manager.list()]

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str):
        job = manager.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return JobStatus(**job.status())

    return app
