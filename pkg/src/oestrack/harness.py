"""Experiment configuration, hyperparameter search and run orchestration."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import __version__
from .baselines import (
    DtsConfig,
    WindowSchedule,
    dts_sgd_run,
    fit_pooled,
    train_expanding_dnn,
)
from .earlystop import StopConfig
from .evaluation import (
    block_average,
    ensemble_combine,
    evaluate,
    feature_importance,
    interval_correlation,
    prediction_frame,
    rolling_average,
)
from .nn import LossConfig, Topology, _forward_eval
from .oes import OESConfig, average_members, oes_run
from .panel import PanelPreprocessor, PreprocessConfig, load_panel
from .synthgen import SynthConfig, generate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODELS = ("oes", "dnn", "dts_sgd")
OUTPUT_ROOT_ENV = "OESTRACK_OUTPUT_ROOT"
_MODEL_KEY = {name: k for k, name in enumerate(MODELS)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    l1: tuple[float, ...] = (1e-5, 1e-4, 1e-3)
    learning_rate: tuple[float, ...] = (0.001, 0.01)
    window: tuple[int, ...] = (5, 10, 20)
    forget: tuple[float, ...] = (0.9, 0.8, 0.7)

    def cells(self, model: str) -> list[dict]:
        """Grid cells in lexicographic order of their hyperparameter tuples."""
        if model == "dts_sgd":
            keys = ("l1", "learning_rate", "window", "forget")
        else:
            keys = ("l1", "learning_rate")
        values = [sorted(getattr(self, k)) for k in keys]
        return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run; serialised as one JSON document.

    Split ranges are 0-based, half-open positions into the ordered
    intervals.  ``batch_size`` maps model name to minibatch size; missing
    entries fall back to 50 for synthetic data and to 1000 (online) or
    10000 (pooled) for panel files.
    """

    models: tuple[str, ...] = ("oes", "dnn", "dts_sgd")
    source: str = "synthetic"
    synthetic: SynthConfig = SynthConfig()
    panel_path: str | None = None
    preprocess: PreprocessConfig | None = None
    train: tuple[int, int] = (0, 60)
    validation: tuple[int, int] = (60, 120)
    test: tuple[int, int] = (120, 180)
    grid: GridSpec = GridSpec()
    ensemble_size: int = 10
    grid_ensemble_size: int = 1
    batch_size: dict = field(default_factory=dict)
    max_iter: int = 100
    tol: float = 1e-3
    patience: int = 5
    hidden_sizes: tuple[int, ...] = (32, 16, 8)
    batch_norm: bool = True
    refit_every: int = 10
    expanding: bool = False
    dnn_retune: bool | None = None
    seed: int = 0
    n_jobs: int | None = 1
    ensemble_combine: str | None = None
    feature_importance: bool = True
    fi_window: int = 12
    output_dir: str = "run"

    def __post_init__(self):
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"unknown model {m!r}; choose from {MODELS}")
        if not self.models:
            raise ConfigError("no model requested")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("a model is listed twice")
        if self.source not in ("synthetic", "panel_csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "panel_csv" and not self.panel_path:
            raise ConfigError("panel_csv source needs panel_path")
        (a, b), (c, d), (e, f) = self.train, self.validation, self.test
        if not (0 <= a < b <= c < d <= e < f):
            raise ConfigError(
                f"split ranges must be non-empty, disjoint and chronological: "
                f"train {self.train}, validation {self.validation}, test {self.test}")
        if c < 2:
            raise ConfigError("validation must start at position 2 or later")
        for name in ("l1", "learning_rate", "window", "forget"):
            if not getattr(self.grid, name):
                raise ConfigError(f"grid dimension {name} is empty")
        if self.ensemble_size < 1 or self.grid_ensemble_size < 1:
            raise ConfigError("ensemble sizes must be positive")
        if self.ensemble_combine not in (None, "raw_mean", "standardized_mean"):
            raise ConfigError(f"unknown ensemble_combine {self.ensemble_combine!r}")
        if self.ensemble_combine and len(self.models) != 2:
            raise ConfigError("ensemble_combine needs exactly two models")
        unknown = set(self.batch_size) - set(MODELS)
        if unknown:
            raise ConfigError(f"batch_size given for unknown model(s) {sorted(unknown)}")

    def batch_for(self, model: str) -> int:
        if model in self.batch_size:
            return int(self.batch_size[model])
        if self.source == "synthetic":
            return 50
        return 10000 if model == "dnn" else 1000

    def retune_dnn(self) -> bool:
        """Re-run the grid at every pooled refit; defaults to on for panel files only."""
        if self.dnn_retune is not None:
            return self.dnn_retune
        return self.source == "panel_csv"

    def stop_config(self, model: str, learning_rate: float) -> StopConfig:
        return StopConfig(self.max_iter, self.tol, self.patience, learning_rate,
                          self.batch_for(model))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
        try:
            if isinstance(d.get("synthetic"), dict):
                d["synthetic"] = SynthConfig(**d["synthetic"])
            if isinstance(d.get("preprocess"), dict):
                pp = dict(d["preprocess"])
                if pp.get("winsorize") is not None:
                    pp["winsorize"] = tuple(pp["winsorize"])
                d["preprocess"] = PreprocessConfig(**pp)
            if isinstance(d.get("grid"), dict):
                d["grid"] = GridSpec(**{k: tuple(v) for k, v in d["grid"].items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("models", "train", "validation", "test", "hidden_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a (model, purpose, ...) key."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def load_data(cfg: ExperimentConfig):
    """Ordered intervals as ``PanelSlice`` objects, truncated to the end of the test range."""
    if cfg.source == "synthetic":
        panels, _ = generate(cfg.synthetic)
    else:
        panels = load_panel(cfg.panel_path)
        if cfg.preprocess is not None:
            panels = PanelPreprocessor.from_config(cfg.preprocess).fit_transform(panels)
    if len(panels) < cfg.test[1]:
        raise ConfigError(f"data has {len(panels)} intervals but the test range ends at {cfg.test[1]}")
    return panels[:cfg.test[1]]


def _monthly_mse(preds, panels, lo, hi) -> float:
    losses = []
    for k in range(lo, hi):
        resid = preds[k] - panels[k].r
        losses.append(float(resid @ resid) / panels[k].n)
    return float(np.mean(losses))


def _oes_config(cfg: ExperimentConfig, cell: dict) -> OESConfig:
    return OESConfig(cfg.stop_config("oes", cell["learning_rate"]), LossConfig(cell["l1"]),
                     tuple(cfg.hidden_sizes), cfg.batch_norm)


def _dts_config(cell: dict) -> DtsConfig:
    return DtsConfig(int(cell["window"]), cell["forget"], cell["learning_rate"])


def _score_cell(model: str, cell: dict, panels, cfg: ExperimentConfig, seed: int):
    """Validation score of one cell; ``inf`` when any member diverged."""
    (a, b), (c, d) = cfg.train, cfg.validation
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(cfg.grid_ensemble_size)]
    if model == "oes":
        run = oes_run(panels, _oes_config(cfg, cell), seeds=seeds, n_jobs=1)
        if run.diverged:
            return math.inf, True
        return _monthly_mse(run.predictions, panels, c, d), False
    if model == "dts_sgd":
        runs = [dts_sgd_run(panels, _dts_config(cell), LossConfig(cell["l1"]),
                            tuple(cfg.hidden_sizes), cfg.batch_norm, s) for s in seeds]
        if any(r.diverged for r in runs):
            return math.inf, True
        preds = average_members([r.predictions for r in runs])
        return _monthly_mse(preds, panels, c, d), False
    topology = Topology(panels[0].m, tuple(cfg.hidden_sizes), cfg.batch_norm)
    member = []
    for s in seeds:
        weights, _, diverged = fit_pooled(panels[a:b], panels[c:d], topology,
                                          cfg.stop_config("dnn", cell["learning_rate"]),
                                          LossConfig(cell["l1"]), np.random.default_rng(s))
        if diverged:
            return math.inf, True
        member.append([None] * c + [_forward_eval(weights, p.X) for p in panels[c:d]])
    return _monthly_mse(average_members(member), panels, c, d), False


@dataclass
class GridResult:
    model: str
    cells: list[dict]
    scores: list[float]
    diverged: list[bool]
    selected: dict
    seed: int

    @property
    def best_score(self) -> float:
        return min(self.scores)

    def table(self) -> pd.DataFrame:
        df = pd.DataFrame(self.cells)
        df["score"] = self.scores
        df["diverged"] = self.diverged
        df["selected"] = [c == self.selected for c in self.cells]
        return df

    def to_dict(self) -> dict:
        return {"cells": self.cells,
                "scores": [None if math.isinf(s) else s for s in self.scores],
                "diverged": self.diverged, "selected": self.selected, "seed": self.seed}


def grid_search(model: str, panels, cfg: ExperimentConfig) -> GridResult:
    """Score every grid cell on the validation range and pick the lowest.

    ``panels`` must end at the validation range; passing anything longer is
    an error so out-of-sample intervals can never influence the choice.
    Cells are visited in lexicographic order and the first minimum wins.
    """
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}")
    panels = list(panels)
    if len(panels) != cfg.validation[1]:
        raise ValueError(
            f"grid search must see exactly the first {cfg.validation[1]} intervals, got {len(panels)}")
    cells = cfg.grid.cells(model)
    seed = derive_seed(cfg.seed, _MODEL_KEY[model], 0)
    out = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_score_cell)(model, cell, panels, cfg, seed) for cell in cells
    )
    scores = [s for s, _ in out]
    diverged = [dv for _, dv in out]
    if all(math.isinf(s) for s in scores):
        raise FloatingPointError(f"every {model} grid cell diverged")
    best = int(np.argmin(scores))
    for cell, s in zip(cells, scores):
        log.info("%s grid %s -> %.6g", model, cell, s)
    return GridResult(model, cells, scores, diverged, cells[best], seed)


@dataclass
class ModelRun:
    model: str
    hyperparameters: dict
    seeds: list[int]
    predictions: list
    diverged: bool
    trace: list[dict] = field(default_factory=list)
    weights: list | None = None


def run_model(model: str, panels, cfg: ExperimentConfig, cell: dict,
              keep_weights: bool = False) -> ModelRun:
    """Out-of-sample run of one model with fixed hyperparameters over all ``panels``."""
    seeds = [int(s) for s in np.random.SeedSequence(
        derive_seed(cfg.seed, _MODEL_KEY[model], 1)).generate_state(cfg.ensemble_size)]
    if model == "oes":
        run = oes_run(panels, _oes_config(cfg, cell), seeds=seeds, n_jobs=cfg.n_jobs,
                      store_weights=keep_weights)
        trace = [
            {"member": k, "t": panels[r.t].t, "index": r.t, "tau_prime": r.tau_prime,
             "n_passes": r.n_passes, "tau_mean": r.tau_mean,
             "gradient_deficit": r.gradient_deficit, "val_loss_start": r.val_loss_start,
             "val_loss_best": r.val_loss_best, "es_iterations": r.es_iterations}
            for k, c in enumerate(run.chains) for r in c.reports
        ]
        weights = [c.weights for c in run.chains] if keep_weights else None
        return ModelRun(model, cell, seeds, run.predictions, run.diverged, trace, weights)
    if model == "dts_sgd":
        runs = Parallel(n_jobs=cfg.n_jobs)(
            delayed(dts_sgd_run)(panels, _dts_config(cell), LossConfig(cell["l1"]),
                                 tuple(cfg.hidden_sizes), cfg.batch_norm, s) for s in seeds
        )
        trace = [{"member": k, "n_updates": r.n_updates, "halted_at": r.halted_at}
                 for k, r in enumerate(runs)]
        return ModelRun(model, cell, seeds, average_members([r.predictions for r in runs]),
                        any(r.diverged for r in runs), trace)
    schedule = WindowSchedule(tuple(cfg.train), tuple(cfg.validation), cfg.refit_every,
                              cfg.expanding, stop=cfg.test[1])
    candidates = None
    if cfg.retune_dnn():
        cells = cfg.grid.cells("dnn")
        candidates = [(cfg.stop_config("dnn", c["learning_rate"]), LossConfig(c["l1"]))
                      for c in cells]
    run = train_expanding_dnn(panels, schedule, cfg.stop_config("dnn", cell["learning_rate"]),
                              LossConfig(cell["l1"]), seeds=seeds,
                              hidden_sizes=tuple(cfg.hidden_sizes), batch_norm=cfg.batch_norm,
                              n_jobs=cfg.n_jobs, candidates=candidates)
    trace = [{"train": list(tr), "validation": list(va), "predict": list(pr)}
             for tr, va, pr in run.blocks]
    if candidates is not None:
        for k, block in enumerate(trace):
            block["selected"] = [cells[ch[k]] for ch in run.chosen]
    return ModelRun(model, cell, seeds, run.predictions, run.diverged, trace)


def resolve_output(path) -> Path:
    """Relative output paths are placed under ``$OESTRACK_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _fmt(x) -> str:
    return repr(float(x))


def write_predictions(frames: dict, path) -> None:
    """``model,t,entity_id,prediction,realized`` with shortest round-trip floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "t", "entity_id", "prediction", "realized"])
        for model, df in frames.items():
            for t, e, p, r in zip(df["t"], df["entity_id"], df["prediction"], df["realized"]):
                w.writerow([model, t, e, _fmt(p), _fmt(r)])


def read_predictions(path) -> dict:
    df = pd.read_csv(path, dtype={"entity_id": str, "model": str},
                     float_precision="round_trip")
    return {m: g.drop(columns="model").reset_index(drop=True)
            for m, g in df.groupby("model", sort=False)}


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_metrics(frames: dict, out: Path) -> dict:
    """Metric tables and plot data for every model; returns the summary dict."""
    summary = {}
    rows = []
    for model, df in frames.items():
        report, series, dec = evaluate(df)
        summary[model] = report.to_dict()
        rows.append({"model": model, **report.to_dict()})
        series.to_csv(out / f"series_{model}.csv")
        dec.table.to_csv(out / f"deciles_{model}.csv")
        cum = dec.portfolio_returns.cumsum()
        cum["P10-1"] = dec.spread.cumsum()
        cum.to_csv(out / f"decile_cumulative_{model}.csv")
    pd.DataFrame(rows).to_csv(out / "metrics.csv", index=False)
    _write_json(summary, out / "metrics.json")
    names = list(frames)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            interval_correlation(frames[a], frames[b]).to_csv(out / f"correlation_{a}_{b}.csv")
    return summary


def oes_importance(panels, weights, test, window: int = 12) -> pd.DataFrame:
    """Feature importance over the test range from stored per-interval chain weights.

    ``weights[k][t]`` are member ``k``'s prediction weights for interval
    index ``t``; the ensemble forecast is their mean.
    """
    lo, hi = test

    def predictor(t):
        return lambda X: np.mean([_forward_eval(w[t], X) for w in weights], axis=0)

    idx = range(lo, hi)
    return feature_importance([predictor(t) for t in idx], [panels[t].X for t in idx],
                              labels=[panels[t].t for t in idx],
                              feature_names=list(panels[0].feature_names) or None)


def write_importance(fi: pd.DataFrame, out: Path, window: int = 12) -> None:
    fi.to_csv(out / "fi_oes.csv")
    rolling_average(fi, window).to_csv(out / "fi_oes_rolling.csv")
    block_average(fi, window).to_csv(out / "fi_oes_yearly.csv")


def _versions() -> dict:
    import joblib
    import scipy
    import sklearn
    return {"oestrack": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "pandas": pd.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "joblib": joblib.__version__}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Grid search, out-of-sample runs, metrics, plot data and manifest.

    Returns the run directory.  Predictions are written before anything
    else that could fail, and every file is deterministic given the config
    except the wall-clock entries in ``manifest.json``.
    """
    started = time.perf_counter()
    out = resolve_output(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = load_data(cfg)
    (e, f) = cfg.test
    frames, grids, runs, timing = {}, {}, {}, {}
    fi = None
    for model in cfg.models:
        t0 = time.perf_counter()
        grid = grid_search(model, panels[:cfg.validation[1]], cfg)
        grid.table().to_csv(out / f"grid_{model}.csv", index=False)
        keep = model == "oes" and cfg.feature_importance
        run = run_model(model, panels, cfg, grid.selected, keep_weights=keep)
        if run.diverged:
            raise FloatingPointError(f"{model} diverged in the out-of-sample run")
        frames[model] = prediction_frame(panels, run.predictions, range(e, f))
        if keep:
            fi = oes_importance(panels, run.weights, cfg.test, cfg.fi_window)
        grids[model], runs[model] = grid, run
        timing[model] = time.perf_counter() - t0
        log.info("%s done in %.1fs with %s", model, timing[model], grid.selected)
    if cfg.ensemble_combine:
        a, b = cfg.models
        frames[f"{a}+{b}"] = ensemble_combine(frames[a], frames[b], cfg.ensemble_combine)
    write_predictions(frames, out / "predictions.csv")
    summary = write_metrics(frames, out)
    if fi is not None:
        write_importance(fi, out, cfg.fi_window)
    manifest = {
        "config": cfg.to_dict(),
        "versions": _versions(),
        "models": {
            m: {"grid": grids[m].to_dict(), "selected": runs[m].hyperparameters,
                "seeds": runs[m].seeds, "trace": runs[m].trace}
            for m in cfg.models
        },
        "metrics": summary,
        "wall_clock_seconds": {**timing, "total": time.perf_counter() - started},
    }
    _write_json(manifest, out / "manifest.json")
    return out


def load_manifest(run_dir) -> tuple[ExperimentConfig, dict]:
    with open(Path(run_dir) / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return ExperimentConfig.from_dict(manifest["config"]), manifest


def replay_importance(run_dir) -> pd.DataFrame:
    """Rerun the recorded OES configuration and write feature-importance files."""
    run_dir = Path(run_dir)
    cfg, manifest = load_manifest(run_dir)
    if "oes" not in manifest["models"]:
        raise ConfigError(f"{run_dir} has no oes run to replay")
    panels = load_data(cfg)
    run = run_model("oes", panels, cfg, manifest["models"]["oes"]["selected"], keep_weights=True)
    fi = oes_importance(panels, run.weights, cfg.test, cfg.fi_window)
    write_importance(fi, run_dir, cfg.fi_window)
    return fi


def compare_models(a, b, out=None) -> pd.DataFrame:
    """Per-interval and rolling correlation between two prediction sets.

    ``a`` and ``b`` are ``(run_dir, model)`` pairs or prediction frames.
    """
    frames = []
    for src in (a, b):
        if isinstance(src, pd.DataFrame):
            frames.append(src)
            continue
        run_dir, model = src
        sets = read_predictions(Path(run_dir) / "predictions.csv")
        if model is None:
            if len(sets) != 1:
                raise ValueError(f"{run_dir} holds several models {list(sets)}; name one")
            model = next(iter(sets))
        if model not in sets:
            raise ValueError(f"{run_dir} has no predictions for {model!r}")
        frames.append(sets[model])
    ta, tb = (sorted(set(map(str, f["t"]))) for f in frames)
    if ta != tb:
        raise ValueError("prediction sets cover different intervals")
    corr = interval_correlation(*frames)
    if out is not None:
        corr.to_csv(out)
    return corr
