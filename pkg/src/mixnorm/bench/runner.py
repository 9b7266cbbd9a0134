"""Execute experiment configs and summarize the run CSVs.

Per run the runner writes ``runs/<variant>_s<seed>.csv`` (rows streamed as
they are produced, so a failed run leaves its prefix behind), a timing
sidecar under ``timing/`` and checkpoints at mid-run and at the end. Wall
time lives only in the sidecar so reruns reproduce run CSVs byte for byte.
"""

import csv
import logging
import math
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import save_checkpoint
from ..datagen import make_dataset
from ..smallnet import build_net, steps_to_accuracy, train
from ..smallnet.train import RunRecord, RunRow

log = logging.getLogger(__name__)

CSV_VERSION = "mixnorm-run v1"
COLUMNS = ("run_id", "seed", "step", "epoch", "train_loss", "test_loss", "test_acc", "effective_k")
FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class CsvFormatError(ValueError):
    pass


def run_id(variant, seed):
    return f"{variant}_s{seed}"


def _fmt(v):
    return repr(float(v))


def _header(meta):
    return "# " + CSV_VERSION + " " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n"


class RunWriter:
    """Streams rows of one run to its CSV and timing sidecar."""

    def __init__(self, out_dir, meta):
        out_dir = Path(out_dir)
        (out_dir / "runs").mkdir(parents=True, exist_ok=True)
        (out_dir / "timing").mkdir(parents=True, exist_ok=True)
        rid = meta["run_id"]
        self.path = out_dir / "runs" / f"{rid}.csv"
        self.fh = open(self.path, "w", newline="")
        self.timing = open(out_dir / "timing" / f"{rid}.csv", "w", newline="")
        self.fh.write(_header(meta))
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(COLUMNS)
        self.timing.write("step,wall_seconds\n")
        self.meta = meta

    def write(self, row):
        k = ";".join(str(v) for v in row.effective_k)
        self.writer.writerow([self.meta["run_id"], self.meta["seed"], row.step, _fmt(row.epoch),
                              _fmt(row.train_loss), _fmt(row.test_loss), _fmt(row.test_acc), k])
        self.timing.write(f"{row.step},{row.wall_seconds!r}\n")
        self.fh.flush()
        self.timing.flush()

    def close(self, status):
        self.fh.write(f"# status={status}\n")
        self.fh.close()
        self.timing.close()


def read_run_csv(path):
    """Parse a run CSV into (meta, RunRecord, status). Malformed content
    raises CsvFormatError naming the line."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# " + CSV_VERSION):
        raise CsvFormatError(f"{path}: line 1: missing '{CSV_VERSION}' header comment")
    meta = {}
    for token in lines[0][len("# " + CSV_VERSION):].split():
        key, _, value = token.partition("=")
        meta[key] = value
    if len(lines) < 2 or tuple(lines[1].split(",")) != COLUMNS:
        raise CsvFormatError(f"{path}: line 2: expected columns {','.join(COLUMNS)}")
    status = "incomplete"
    rows = []
    for n, line in enumerate(lines[2:], start=3):
        if line.startswith("# status="):
            status = line.split("=", 1)[1]
            continue
        fields = next(csv.reader([line]))
        if len(fields) != len(COLUMNS):
            raise CsvFormatError(f"{path}: line {n}: expected {len(COLUMNS)} fields, got {len(fields)}")
        try:
            k = tuple(int(v) for v in fields[7].split(";")) if fields[7] else ()
            rows.append(RunRow(int(fields[2]), float(fields[3]), float(fields[4]), float(fields[5]),
                               float(fields[6]), math.nan, k))
        except ValueError as err:
            raise CsvFormatError(f"{path}: line {n}: {err}") from None
        if len(rows) > 1 and rows[-1].step <= rows[-2].step:
            raise CsvFormatError(f"{path}: line {n}: steps must increase")
    record = RunRecord(meta.get("run_id", path.stem), int(meta.get("seed", 0)), rows,
                       int(meta.get("updates_per_epoch", 0)))
    return meta, record, status


def execute_run(config, variant_name, seed, out_dir):
    """Train one (variant, seed) pair; returns (run id, status, message)."""
    out_dir = Path(out_dir)
    variant = config.variant(variant_name)
    rid = run_id(variant_name, seed)
    writer = None
    try:
        data = make_dataset(config.dataset_spec(seed))
        specs = variant.layer_specs(config.network, config.base_norm)
        net = build_net(specs, data.sample_shape, seed=seed)
        per_epoch = data.x_train.shape[0] // config.batch_size
        meta = {"run_id": rid, "variant": variant_name, "seed": seed, "epochs": config.epochs,
                "updates_per_epoch": per_epoch, "evals_per_epoch": config.evals_per_epoch}
        writer = RunWriter(out_dir, meta)
        ck_meta = {"seed": seed, "variant": variant_name, "config": config.name,
                   "dataset": {k: v for k, v in config.dataset.items()}}
        ck_dir = out_dir / "checkpoints"
        mid = config.epochs / 2
        saved_mid = []

        def on_row(row):
            writer.write(row)
            if config.checkpoints and not saved_mid and row.epoch >= mid:
                ck_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ck_dir / f"{rid}_mid.json", net, dict(ck_meta, epoch=row.epoch))
                saved_mid.append(row.step)

        train(net, data, config.optimizer_spec(), config.epochs, config.batch_size,
              np.random.default_rng([seed, 0x7A1]), evals_per_epoch=config.evals_per_epoch,
              augment=data.augment, on_row=on_row, run_id=rid, seed=seed)
        if config.checkpoints:
            ck_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ck_dir / f"{rid}_final.json", net, dict(ck_meta, epoch=config.epochs))
        writer.close("ok")
        return rid, "ok", ""
    except Exception as err:  # a failed run must not take the others down
        log.error("run %s failed: %s", rid, err)
        log.debug("%s", traceback.format_exc())
        if writer is not None:
            writer.close("failed")
        return rid, "failed", f"{type(err).__name__}: {err}"


# -- summary -----------------------------------------------------------------

@dataclass
class RunSummary:
    run_id: str
    variant: str
    seed: int
    status: str
    max_acc: tuple
    best_acc: float
    steps_to_best: int
    steps_to_ref: object
    ratio: float


def _max_until(rows, limit):
    accs = [r.test_acc for r in rows if r.epoch <= limit + 1e-9]
    return max(accs) if accs else math.nan


def summarize(csv_paths, reference):
    """Per-run and per-variant summaries computed from run CSVs alone."""
    runs = {}
    for p in csv_paths:
        meta, record, status = read_run_csv(p)
        runs[(meta["variant"], int(meta["seed"]))] = (meta, record, status)
    out = []
    for (variant, seed), (meta, record, status) in sorted(runs.items()):
        epochs = int(meta["epochs"])
        if not record.rows:
            out.append(RunSummary(meta["run_id"], variant, seed, status, (math.nan,) * 4,
                                  math.nan, None, None, math.nan))
            continue
        max_acc = tuple(_max_until(record.rows, f * epochs) for f in FRACTIONS)
        steps_ref, ratio = None, math.nan
        ref = runs.get((reference, seed))
        if ref is not None and ref[1].rows:
            target = ref[1].best_accuracy()
            steps_ref = steps_to_accuracy(record, target)
            if steps_ref is not None:
                ratio = steps_ref / ref[1].steps_to_best()
        out.append(RunSummary(meta["run_id"], variant, seed, status, max_acc,
                              record.best_accuracy(), record.steps_to_best(), steps_ref, ratio))
    return out


def _median(values):
    values = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return statistics.median(values) if values else math.nan


def aggregate(summaries):
    """Median over seeds per variant. A run that never reaches the target
    counts as an infinite ratio."""
    by_variant = {}
    for s in summaries:
        by_variant.setdefault(s.variant, []).append(s)
    rows = []
    for variant, group in by_variant.items():
        ratios = [s.ratio if not math.isnan(s.ratio) else math.inf for s in group if s.status == "ok"]
        rows.append({
            "variant": variant,
            "runs": len(group),
            "failed": sum(s.status != "ok" for s in group),
            "max_acc": tuple(_median([s.max_acc[i] for s in group]) for i in range(len(FRACTIONS))),
            "steps_to_ref": _median([s.steps_to_ref for s in group]),
            "ratio": statistics.median(ratios) if ratios else math.nan,
        })
    return rows


def _num(v, digits=4):
    if v is None:
        return ""
    if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
        return "nan" if math.isnan(v) else "inf"
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def write_summary(out_dir, summaries, reference):
    out_dir = Path(out_dir)
    pct = [f"max_acc_{int(f * 100)}" for f in FRACTIONS]
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "variant", "seed", "status", *pct, "best_acc", "steps_to_best",
                    f"steps_to_{reference}_max", "ratio"])
        for s in summaries:
            w.writerow([s.run_id, s.variant, s.seed, s.status, *(_num(a) for a in s.max_acc),
                        _num(s.best_acc), _num(s.steps_to_best), _num(s.steps_to_ref), _num(s.ratio, 3)])
    agg = aggregate(summaries)
    lines = [
        f"| variant | runs | failed | {' | '.join(pct)} | steps to {reference} max | ratio |",
        "|" + "---|" * (6 + len(pct) - 1),
    ]
    for a in agg:
        accs = " | ".join(_num(v) for v in a["max_acc"])
        lines.append(f"| {a['variant']} | {a['runs']} | {a['failed']} | {accs} | "
                     f"{_num(a['steps_to_ref'], 1)} | {_num(a['ratio'], 3)} |")
    (out_dir / "summary.md").write_text("\n".join(lines) + "\n")
    return agg


def run_experiment(config, seeds=None, out_dir=None, workers=None):
    """Run every (variant, seed) pair, then summarize and plot. Returns
    (per-variant aggregate rows, list of failed run ids)."""
    from .plots import plot_runs

    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else config.seeds)
    jobs = [(v.name, s) for v in config.variants for s in seeds]
    workers = workers or config.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute_run, [config] * len(jobs), *zip(*jobs), [out_dir] * len(jobs)))
    else:
        results = [execute_run(config, v, s, out_dir) for v, s in jobs]
    failed = [rid for rid, status, _ in results if status != "ok"]

    paths = [out_dir / "runs" / f"{run_id(v, s)}.csv" for v, s in jobs]
    paths = [p for p in paths if p.exists()]
    summaries = summarize(paths, config.reference_variant)
    agg = write_summary(out_dir, summaries, config.reference_variant)
    if paths:
        (out_dir / "plots").mkdir(exist_ok=True)
        plot_runs(paths, out_dir / "plots" / "test_error.svg")
    return agg, failed
