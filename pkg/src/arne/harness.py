"""Evaluation suite and experiment drivers.

Metrics tables, rule-count breakdown, the sample-efficiency sweep, the
ablation grid, activation-map dumps, and the run-directory bookkeeping
(manifest with seed, configs, dataset hashes, and code version).
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, FormatError
from .model import ArneConfig, ArneModel, aggregate_meta_logits
from .pgm import N_META_BITS, PgmDataset
from .training import TrainConfig, eval_pass, loss_components, train
from .wren import WrenConfig, WrenModel

META_BIT_NAMES = (
    "progression", "and", "or", "xor", "consistent_union",
    "shape", "line",
    "size", "type", "position", "number", "color",
)


# -- metrics -----------------------------------------------------------------


@dataclass
class MetaMetrics:
    """Per-bit confusion counts and the rates derived from them."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    accuracy: np.ndarray = field(init=False)
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    f1: np.ndarray = field(init=False)
    macro_f1: float = field(init=False)

    def __post_init__(self):
        tp, fp, tn, fn = (x.astype(np.float64) for x in (self.tp, self.fp, self.tn, self.fn))
        total = tp + fp + tn + fn
        self.accuracy = _safe_div(tp + tn, total)
        self.precision = _safe_div(tp, tp + fp)
        self.recall = _safe_div(tp, tp + fn)
        self.f1 = _safe_div(2 * self.precision * self.recall, self.precision + self.recall)
        self.macro_f1 = float(self.f1.mean())

    def to_rows(self):
        rows = []
        for i, name in enumerate(META_BIT_NAMES):
            rows.append({
                "bit": name,
                "tp": int(self.tp[i]), "fp": int(self.fp[i]),
                "tn": int(self.tn[i]), "fn": int(self.fn[i]),
                "accuracy": float(self.accuracy[i]),
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1": float(self.f1[i]),
            })
        return rows


def _safe_div(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class EvalResult:
    choice_accuracy: float
    loss: float
    meta: MetaMetrics
    accuracy_by_rule_count: dict
    n_samples: int

    def summary(self):
        return {
            "n_samples": self.n_samples,
            "choice_accuracy": self.choice_accuracy,
            "loss": self.loss,
            "macro_f1": self.meta.macro_f1,
            "accuracy_by_rule_count": {str(k): v for k, v in sorted(self.accuracy_by_rule_count.items())},
        }


def evaluate(model, dataset, beta=10.0, batch_size=64, threshold=0.5):
    """Choice accuracy, per-bit rule metrics, and a rule-count breakdown.

    Rule predictions threshold the sigmoid of the choice-summed rule
    logits at ``threshold``.  Model parameters are left untouched.
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    meta_true = dataset.meta_matrix().astype(bool)
    preds = np.empty(len(dataset), dtype=np.int64)
    meta_pred = np.empty((len(dataset), N_META_BITS), dtype=bool)
    loss_sum = 0.0
    try:
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(dataset)))
                out = model.forward_batch(dataset.panels[idx])
                total, _, _ = loss_components(out, dataset.targets[idx],
                                              meta_true[idx].astype(np.float64), beta)
                loss_sum += total.item() * len(idx)
                preds[idx] = np.argmax(out.choice_logits.data, axis=-1)
                probs = T.sigmoid(aggregate_meta_logits(out.meta_logits).detach())
                meta_pred[idx] = probs.data >= threshold
    finally:
        model.train(was_training)

    hits = preds == dataset.targets
    tp = np.sum(meta_pred & meta_true, axis=0)
    fp = np.sum(meta_pred & ~meta_true, axis=0)
    tn = np.sum(~meta_pred & ~meta_true, axis=0)
    fn = np.sum(~meta_pred & meta_true, axis=0)
    counts = dataset.rule_counts()
    by_count = {}
    for k in sorted(set(counts.tolist())):
        sel = counts == k
        by_count[int(k)] = float(np.mean(hits[sel]))
    return EvalResult(
        choice_accuracy=float(np.mean(hits)),
        loss=loss_sum / len(dataset),
        meta=MetaMetrics(tp=tp, fp=fp, tn=tn, fn=fn),
        accuracy_by_rule_count=by_count,
        n_samples=len(dataset),
    )


def write_meta_metrics_csv(path, metrics):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["bit", "tp", "fp", "tn", "fn",
                                               "accuracy", "precision", "recall", "f1"])
        writer.writeheader()
        for row in metrics.to_rows():
            row = dict(row)
            for key in ("accuracy", "precision", "recall", "f1"):
                row[key] = repr(row[key])
            writer.writerow(row)


# -- model construction and run directories ----------------------------------


def build_model(kind, model_config, seed):
    rng = np.random.default_rng([seed, 0xA12])
    if kind == "arne":
        return ArneModel(ArneConfig(**model_config), rng)
    if kind == "wren":
        return WrenModel(WrenConfig(**model_config), rng)
    raise ConfigError(f"unknown model kind {kind!r}")


def dataset_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(run_dir, payload):
    payload = dict(payload)
    payload["code_version"] = __version__
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"no manifest.json under {run_dir}")
    with open(path) as f:
        return json.load(f)


def load_model_from_run(run_dir, checkpoint=None):
    manifest = load_manifest(run_dir)
    ckpt_path = checkpoint or os.path.join(run_dir, "model.ckpt")
    kind, arrays = nn.load_checkpoint(ckpt_path)
    if kind != manifest["model_kind"]:
        raise FormatError(f"checkpoint kind {kind!r} does not match manifest {manifest['model_kind']!r}")
    model = build_model(kind, manifest["model_config"], manifest.get("seed", 0))
    model.load_arrays(arrays)
    return model, manifest


def train_run(run_dir, kind, model_config, train_config, train_path, val_path, test_path=None):
    """Train one model from dataset files and write all run artifacts."""
    os.makedirs(run_dir, exist_ok=True)
    train_set = PgmDataset.load(train_path)
    val_set = PgmDataset.load(val_path)
    test_set = PgmDataset.load(test_path) if test_path else None
    cfg = TrainConfig(**train_config)
    model = build_model(kind, model_config, cfg.seed)
    report = train(model, train_set, val_set, cfg, test_set=test_set)

    report.to_csv(os.path.join(run_dir, "report.csv"))
    report.save_summary(os.path.join(run_dir, "summary.json"))
    nn.save_checkpoint(os.path.join(run_dir, "model.ckpt"), model, model.kind)
    datasets = {"train": train_path, "val": val_path}
    if test_path:
        datasets["test"] = test_path
    write_manifest(run_dir, {
        "command": "train",
        "model_kind": kind,
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "seed": cfg.seed,
        "datasets": datasets,
        "dataset_sha256": {name: dataset_sha256(p) for name, p in datasets.items()},
    })
    return model, report


# -- sample-efficiency sweep ---------------------------------------------------


@dataclass
class SweepResult:
    model_kind: str
    fraction: float
    n_train: int
    train_acc: float
    val_acc: float
    val_loss: float
    test_acc: float
    test_loss: float


SWEEP_FIELDS = ("model_kind", "fraction", "n_train", "train_acc",
                "val_acc", "val_loss", "test_acc", "test_loss")


def sample_efficiency_sweep(train_set, val_set, test_set, fractions, model_kinds,
                            model_configs, train_config, shuffle_seed=0):
    """Train every model kind on growing prefixes of one fixed shuffle.

    The shuffle happens once with ``shuffle_seed``; each fraction takes a
    prefix, so smaller subsets are contained in larger ones.  Validation
    and test sets stay untouched across every cell.
    """
    cfg = TrainConfig(**train_config)
    order = np.random.default_rng(shuffle_seed).permutation(len(train_set))
    results = []
    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise ConfigError(f"fractions must lie in (0, 1], got {fraction}")
        n = int(len(train_set) * fraction)
        if n < cfg.batch_size:
            raise ConfigError(
                f"fraction {fraction} keeps {n} samples, fewer than one batch of {cfg.batch_size}"
            )
        subset = train_set.subset(order[:n])
        for kind in model_kinds:
            model = build_model(kind, model_configs[kind], cfg.seed)
            report = train(model, subset, val_set, cfg, test_set=test_set)
            last = report.rows[-1]
            best = min(report.rows, key=lambda r: r.val_loss)
            results.append(SweepResult(
                model_kind=kind,
                fraction=float(fraction),
                n_train=n,
                train_acc=last.train_acc,
                val_acc=best.val_acc,
                val_loss=best.val_loss,
                test_acc=report.test_acc,
                test_loss=report.test_loss,
            ))
    return results


def write_sweep_csv(path, results):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_FIELDS)
        for r in results:
            writer.writerow([r.model_kind, repr(r.fraction), r.n_train, repr(r.train_acc),
                             repr(r.val_acc), repr(r.val_loss), repr(r.test_acc), repr(r.test_loss)])


# -- ablation grid --------------------------------------------------------------


ABLATION_FIELDS = ("dropout_p", "lr", "use_delimiter", "beta", "fraction",
                   "train_acc", "val_acc", "test_acc", "val_sha256", "test_sha256")


def ablation_grid(train_set, val_set, test_set, grid, base_model_config, base_train_config,
                  shuffle_seed=0, val_sha="", test_sha=""):
    """Cartesian product over {dropout_p, lr, use_delimiter, beta, fraction};
    every cell shares the seed and the exact validation/test sets."""
    axes = {
        "dropout_p": grid.get("dropout_p", [None]),
        "lr": grid.get("lr", [None]),
        "use_delimiter": grid.get("use_delimiter", [None]),
        "beta": grid.get("beta", [None]),
        "fraction": grid.get("fraction", [1.0]),
    }
    order = np.random.default_rng(shuffle_seed).permutation(len(train_set))
    rows = []
    for dropout_p in axes["dropout_p"]:
        for lr in axes["lr"]:
            for use_delimiter in axes["use_delimiter"]:
                for beta in axes["beta"]:
                    for fraction in axes["fraction"]:
                        mc = dict(base_model_config)
                        tc = dict(base_train_config)
                        if dropout_p is not None:
                            mc["dropout_p"] = dropout_p
                            mc["attn_dropout_p"] = dropout_p
                        if use_delimiter is not None:
                            mc["use_delimiter"] = use_delimiter
                        if lr is not None:
                            tc["lr"] = lr
                        if beta is not None:
                            tc["beta"] = beta
                        cfg = TrainConfig(**tc)
                        n = int(len(train_set) * fraction)
                        if n < cfg.batch_size:
                            raise ConfigError(f"fraction {fraction} keeps fewer than one batch")
                        subset = train_set.subset(order[:n])
                        model = build_model("arne", mc, cfg.seed)
                        report = train(model, subset, val_set, cfg, test_set=test_set)
                        last = report.rows[-1]
                        best = min(report.rows, key=lambda r: r.val_loss)
                        rows.append({
                            "dropout_p": mc.get("dropout_p"),
                            "lr": cfg.lr,
                            "use_delimiter": mc.get("use_delimiter", False),
                            "beta": cfg.beta,
                            "fraction": fraction,
                            "train_acc": last.train_acc,
                            "val_acc": best.val_acc,
                            "test_acc": report.test_acc,
                            "val_sha256": val_sha,
                            "test_sha256": test_sha,
                        })
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            row = dict(row)
            for key in ("lr", "beta", "fraction", "train_acc", "val_acc", "test_acc"):
                if row[key] is not None:
                    row[key] = repr(float(row[key]))
            writer.writerow(row)


# -- activation dumps -----------------------------------------------------------


def dump_feature_maps(model, panels, target, out_dir, layer_index=3):
    """Write per-channel PGM activation maps for the 8 context panels and
    the correct choice, plus one channel-sum composite per panel."""
    from .panels import normalize_to_u8, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    panels = np.asarray(panels)
    chosen = list(panels[:8]) + [panels[8 + int(target)]]
    dtype = T.default_dtype()
    written = []
    for p, panel in enumerate(chosen):
        x = panel.astype(dtype) / dtype.type(255.0) if panel.dtype == np.uint8 else panel.astype(dtype)
        maps = model.panel_encoder.activations(x[None, ...], layer_index)
        for c in range(maps.shape[0]):
            path = os.path.join(out_dir, f"panel{p}_ch{c:02d}.pgm")
            write_pgm(path, normalize_to_u8(maps[c]))
            written.append(path)
        path = os.path.join(out_dir, f"panel{p}_sum.pgm")
        write_pgm(path, normalize_to_u8(maps.sum(axis=0)))
        written.append(path)
    return written


# -- config files -----------------------------------------------------------------


def parse_config_file(path):
    """Flat key=value text file; '#' starts a comment, values stay strings."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values
