"""The CLI verbs as plain functions returning exit codes.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 IO error,
4 corrupt artifact, 5 run failure.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import metrics, segnet, stacklab, synthgen, trainer
from ..rng import Rng
from .config import ExperimentConfig
from .manifest import RunManifest, config_digest, sha256_file, substream_table

log = logging.getLogger(__name__)

OK, VERIFY_FAILED, CONFIG_ERROR, IO_ERROR, CORRUPT, RUN_FAILED = range(6)

VERIFY_COLUMNS = ("check", "n", "sigma", "trials", "empirical_std", "predicted_std", "ratio",
                  "instances", "violations", "max_error", "passed")
COMPARE_COLUMNS = ("mode", "seed", "split", "mean_dice", "mean_iou", "mean_precision", "mean_recall", "mean_hausdorff")
SUMMARY_METRICS = ("mean_dice", "mean_iou", "mean_precision", "mean_recall", "mean_hausdorff")
EVAL_SPLITS = ("test_source", "test_target")


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _num(v) -> str:
    return "" if v is None else repr(float(v))


# -- verify -------------------------------------------------------------------

def run_verification(seed: int = 0, fault: str | None = None) -> list[dict]:
    """Stacking law, batch-vs-sequential Bayes update, and the L1 bound, as CSV rows."""
    root = Rng(seed).named("verify")
    rows = []
    for r in stacklab.stacking_law_mc(1.0, (1, 4, 16, 64), 10000, root.child(0),
                                      shrink_by_sqrt_n=fault != "skip-sqrt-n"):
        rows.append({"check": "stacking_law", "n": r.n, "sigma": _num(r.sigma), "trials": r.trials,
                     "empirical_std": _num(r.empirical_std), "predicted_std": _num(r.predicted_std),
                     "ratio": _num(r.ratio), "passed": int(0.95 <= r.ratio <= 1.05)})

    gen = root.child(1).generator()
    worst = 0.0
    for _ in range(100):
        shape = (int(gen.integers(1, 6)),)
        prior = stacklab.GaussianPrior(gen.normal(size=shape), gen.uniform(0.1, 3.0), gen.uniform(0.1, 3.0))
        obs = [gen.normal(size=shape) for _ in range(int(gen.integers(1, 20)))]
        m_b, v_b = stacklab.bayes_update(prior, obs)
        m_s, v_s = stacklab.sequential_update(prior, obs)
        rel = np.abs(m_b - m_s) / np.maximum(np.abs(m_b), 1e-300)
        worst = max(worst, float(rel.max()), abs(v_b - v_s) / v_b)
    m, v = stacklab.bayes_update(stacklab.GaussianPrior(np.zeros(1), 1.0, 1.0), [np.array([2.0]), np.array([4.0])])
    hand_ok = abs(m[0] - 2.0) <= 1e-12 and abs(v - 1.0 / 3.0) <= 1e-12
    rows.append({"check": "bayes_sequential", "instances": 100, "max_error": _num(worst),
                 "passed": int(worst <= 1e-9 and hand_ok)})

    summary = stacklab.random_bound_trials(root.child(2), 1000)
    eq = stacklab.bound_check(stacklab.FeatureStack([np.array([1.7])]),
                              stacklab.GaussianPrior(np.array([-0.4]), 1.3, 1.3), 0)
    eq_err = abs(eq.lhs - eq.rhs)
    rows.append({"check": "bound_l1", "instances": summary.instances, "violations": summary.violations,
                 "max_error": _num(summary.max_gap),
                 "passed": int(summary.violations == 0 and eq_err <= 1e-12)})
    return [{c: row.get(c, "") for c in VERIFY_COLUMNS} for row in rows]


def cmd_verify(out: Path, seed: int = 0, fault: str | None = None) -> int:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create %s: %s", out, exc)
        return IO_ERROR
    manifest = RunManifest("verify", {"seed": seed, "fault": fault}, substream_table(seed))
    rows = run_verification(seed, fault)
    try:
        _write_csv(out / "verify.csv", VERIFY_COLUMNS, rows)
    except OSError as exc:
        log.error("cannot write verify.csv: %s", exc)
        return IO_ERROR
    manifest.register(out, [out / "verify.csv"])
    failed = [r for r in rows if not int(r["passed"])]
    for r in failed:
        log.error("verification failed: %s", {k: v for k, v in r.items() if v != ""})
    manifest.finish("complete" if not failed else "failed",
                    None if not failed else "failing rows: " + ", ".join(f"{r['check']}(n={r['n']})" if r["n"] != "" else r["check"] for r in failed))
    manifest.write(out / "manifest.json")
    return VERIFY_FAILED if failed else OK


# -- gen ------------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, out: Path) -> int:
    out = Path(out)
    manifest = RunManifest("gen", {"dataset": cfg.dataset.to_dict()}, substream_table(cfg.dataset.seed))
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds = synthgen.gen_dataset(cfg.dataset)
        written = synthgen.write_dataset(ds, out)
        manifest.register(out, written)
        manifest.finish()
        manifest.write(out / "manifest.json")
    except OSError as exc:
        log.error("IO error writing dataset to %s: %s", out, exc)
        return IO_ERROR
    log.info("wrote %d training stacks, %d + %d test images to %s", len(ds.train),
             len(ds.test_source), len(ds.test_target), out)
    return OK


# -- train / eval ---------------------------------------------------------------

def load_or_generate(cfg: ExperimentConfig, data: Path | None) -> synthgen.Dataset:
    if data is not None:
        return synthgen.read_dataset(Path(data))
    return synthgen.gen_dataset(cfg.dataset)


def cmd_train(cfg: ExperimentConfig, out: Path, data: Path | None = None) -> int:
    out = Path(out)
    tcfg = cfg.train.for_mode(cfg.train.mode)
    manifest = RunManifest("train", {"dataset": cfg.dataset.to_dict(), "train": asdict(tcfg),
                                     "data_dir": str(data) if data else None},
                           {"dataset": substream_table(cfg.dataset.seed), "train": substream_table(tcfg.seed)})
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds = load_or_generate(cfg, data)
    except OSError as exc:
        log.error("IO error: %s", exc)
        return IO_ERROR
    try:
        trainer.train(tcfg, ds.train, out)
    except trainer.TrainingAborted as exc:
        manifest.finish("aborted", f"{exc} {exc.record}")
        manifest.write(out / "manifest.json")
        log.error("training aborted: %s", exc)
        return RUN_FAILED
    except OSError as exc:
        log.error("IO error: %s", exc)
        return IO_ERROR
    manifest.register(out, [out / "model.ckpt", out / "loss.csv"])
    manifest.finish()
    manifest.write(out / "manifest.json")
    return OK


class _OraclePredictor:
    """Debug predictor returning the ground truth of each image it is asked about."""

    def __init__(self, split):
        self.masks = [m.labels for _, m in split]
        self.cursor = 0

    def __call__(self, batch):
        out = self.masks[self.cursor:self.cursor + len(batch)]
        self.cursor += len(batch)
        return out


def eval_rows(predictor, ds: synthgen.Dataset, split: str, run_id: str = "", mode: str = "", seed="") -> tuple[metrics.MetricsRecord, list[dict]]:
    rec = metrics.evaluate(predictor, ds.split(split), ds.config.num_classes)
    return rec, rec.csv_rows(run_id, mode, seed, split)


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None, split: str, out: Path,
             data: Path | None = None, oracle: bool = False) -> int:
    out = Path(out)
    if split not in synthgen.SPLITS:
        log.error("unknown split %r", split)
        return CONFIG_ERROR
    try:
        ds = load_or_generate(cfg, data)
        if oracle:
            predictor = _OraclePredictor(ds.split(split))
            mode, seed = "oracle", ""
        else:
            if checkpoint is None:
                log.error("eval needs --checkpoint (or --oracle)")
                return CONFIG_ERROR
            predictor = segnet.load(checkpoint)
            mode, seed = "checkpoint", predictor.init_seed
    except segnet.CorruptCheckpointError as exc:
        log.error("corrupt checkpoint %s: %s", checkpoint, exc)
        return CORRUPT
    except OSError as exc:
        log.error("IO error: %s", exc)
        return IO_ERROR
    # the run id names the checkpoint by content so it does not depend on where the file lives
    identity = {"checkpoint_sha256": None if oracle else sha256_file(Path(checkpoint)), "split": split,
                "oracle": oracle, "dataset": ds.config.to_dict()}
    manifest = RunManifest("eval", {**identity, "checkpoint": str(checkpoint) if checkpoint else None},
                           substream_table(ds.config.seed), run_id="eval-" + config_digest(identity)[:12])
    rec, rows = eval_rows(predictor, ds, split, manifest.run_id, mode, seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"metrics_{split}.csv"
        metrics.write_metrics_csv(path, rows)
    except OSError as exc:
        log.error("IO error: %s", exc)
        return IO_ERROR
    manifest.register(out, [path])
    manifest.finish()
    manifest.write(out / f"manifest_eval_{split}.json")
    log.info("%s mean dice %.4f over %d images", split, rec.mean_dice or 0.0, rec.num_samples)
    return OK


# -- compare --------------------------------------------------------------------

@dataclass
class CellResult:
    mode: str
    seed: int
    ok: bool
    rows: list[dict]
    metric_rows: list[dict]
    files: list[str]
    error: str | None = None


def run_cell(cfg: ExperimentConfig, mode: str, seed: int, out: Path,
             ds: synthgen.Dataset | None = None) -> CellResult:
    """Train one (mode, seed) cell and evaluate it on both test splits."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        ds = ds or synthgen.gen_dataset(cfg.dataset)
        tcfg = replace(cfg.train.for_mode(mode), seed=seed)
        cell_dir = Path(out) / "cells" / f"{mode}_s{seed}"
        try:
            result = trainer.train(tcfg, ds.train, cell_dir)
        except trainer.TrainingAborted as exc:
            return CellResult(mode, seed, False, [], [], [], f"{exc} {exc.record}")
        rows, mrows = [], []
        run_id = f"{mode}_s{seed}"
        for split in EVAL_SPLITS:
            rec, r = eval_rows(result.params, ds, split, run_id, mode, seed)
            mrows.extend(r)
            rows.append({"mode": mode, "seed": seed, "split": split,
                         **{m: _num(getattr(rec, m)) for m in SUMMARY_METRICS}})
        metrics.write_metrics_csv(cell_dir / "metrics.csv", mrows)
    files = [str(cell_dir / n) for n in ("model.ckpt", "loss.csv", "metrics.csv")]
    return CellResult(mode, seed, True, rows, mrows, files)


def _cell_job(args):
    cfg_dict, mode, seed, out = args
    return run_cell(ExperimentConfig.from_dict(cfg_dict), mode, seed, Path(out))


def summarize(rows: list[dict], modes, baseline: str = "baseline") -> list[dict]:
    """Per (mode, split): mean and sample std over seeds, and delta of the mean vs. baseline."""
    out = []
    means: dict[tuple[str, str], dict[str, float]] = {}
    for mode in modes:
        for split in EVAL_SPLITS:
            sel = [r for r in rows if r["mode"] == mode and r["split"] == split]
            entry = {"mode": mode, "split": split, "n_seeds": len(sel)}
            for m in SUMMARY_METRICS:
                vals = [float(r[m]) for r in sel if r[m] != ""]
                mu = float(np.mean(vals)) if vals else None
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
                means.setdefault((mode, split), {})[m] = mu
                entry[m + "_mean"] = _num(mu)
                entry[m + "_std"] = _num(sd)
            out.append(entry)
    for entry in out:
        base = means.get((baseline, entry["split"]))
        for m in SUMMARY_METRICS:
            mu = means[(entry["mode"], entry["split"])][m]
            delta = None if base is None or base[m] is None or mu is None else mu - base[m]
            entry[m + "_delta_vs_baseline"] = _num(delta)
    return out


def summary_columns() -> list[str]:
    cols = ["mode", "split", "n_seeds"]
    for m in SUMMARY_METRICS:
        cols += [m + "_mean", m + "_std", m + "_delta_vs_baseline"]
    return cols


def ladder_report(rows: list[dict], modes, seeds) -> list[str]:
    """Human-readable table of mean Dice per mode/split, plus per-seed ordering checks."""
    lines = [f"{'mode':<15}{'split':<13}" + "".join(f"{'s' + str(s):>9}" for s in seeds) + f"{'mean':>9}"]
    table: dict[tuple[str, str, int], float] = {}
    for r in rows:
        table[(r["mode"], r["split"], int(r["seed"]))] = float(r["mean_dice"])
    for mode in modes:
        for split in EVAL_SPLITS:
            vals = [table.get((mode, split, s)) for s in seeds]
            cells = "".join(f"{v:9.4f}" if v is not None else f"{'-':>9}" for v in vals)
            present = [v for v in vals if v is not None]
            lines.append(f"{mode:<15}{split:<13}{cells}{np.mean(present) if present else float('nan'):9.4f}")
    if "baseline" in modes:
        for mode in modes:
            if mode == "baseline":
                continue
            worse = [s for s in seeds if (mode, "test_target", s) in table and ("baseline", "test_target", s) in table
                     and table[(mode, "test_target", s)] < table[("baseline", "test_target", s)]]
            if worse:
                detail = ", ".join(f"seed {s}: {table[(mode, 'test_target', s)]:.4f} < {table[('baseline', 'test_target', s)]:.4f}"
                                   for s in worse)
                lines.append(f"note: {mode} below baseline out-of-domain for {detail}")
    return lines


def cmd_compare(cfg: ExperimentConfig, out: Path, threads: int = 1) -> tuple[int, list[str]]:
    out = Path(out)
    if len(cfg.modes) < 2 or len(cfg.seeds) < 3:
        log.error("compare needs at least 2 modes and 3 seeds")
        return CONFIG_ERROR, []
    manifest = RunManifest("compare", cfg.to_dict(), {"dataset": substream_table(cfg.dataset.seed),
                                                     "train": {s: substream_table(s) for s in cfg.seeds}})
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create %s: %s", out, exc)
        return IO_ERROR, []
    cells = [(m, s) for s in cfg.seeds for m in cfg.modes]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cell_job, [(cfg.to_dict(), m, s, str(out)) for m, s in cells]))
    else:
        ds = synthgen.gen_dataset(cfg.dataset)
        results = []
        for m, s in cells:
            log.info("compare cell mode=%s seed=%d", m, s)
            results.append(run_cell(cfg, m, s, out, ds))
    failed = [r for r in results if not r.ok]
    if failed:
        manifest.finish("aborted", "; ".join(f"{r.mode}/seed {r.seed}: {r.error}" for r in failed))
        manifest.write(out / "manifest.json")
        for r in failed:
            log.error("run failed for mode=%s seed=%d: %s", r.mode, r.seed, r.error)
        return RUN_FAILED, []
    order = {(m, s): i for i, (m, s) in enumerate((m, s) for m in cfg.modes for s in cfg.seeds)}
    results.sort(key=lambda r: order[(r.mode, r.seed)])
    rows = [row for r in results for row in r.rows]
    _write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    _write_csv(out / "compare_summary.csv", summary_columns(), summarize(rows, cfg.modes))
    report = ladder_report(rows, cfg.modes, cfg.seeds)
    (out / "ladder.txt").write_text("\n".join(report) + "\n")
    files = [out / "compare.csv", out / "compare_summary.csv", out / "ladder.txt"]
    files += [Path(f) for r in results for f in r.files]
    manifest.register(out, files)
    manifest.finish()
    manifest.write(out / "manifest.json")
    return OK, report
