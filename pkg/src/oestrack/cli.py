"""Command line entry point: ``oestrack <command> ...``.

Settings are layered: built-in defaults, then ``--config`` JSON, then
explicit flags.  Relative output paths go under ``$OESTRACK_OUTPUT_ROOT``
when set.  The exit code is 0 only when every requested file was written.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .evaluation import ensemble_combine
from .harness import (
    MODELS,
    ConfigError,
    ExperimentConfig,
    compare_models,
    grid_search,
    load_data,
    read_predictions,
    replay_importance,
    resolve_output,
    run_experiment,
    write_metrics,
    write_predictions,
)
from .panel import PanelFormatError, PreprocessConfig, write_panel
from .synthgen import SynthConfig, generate, write_psi

log = logging.getLogger("oestrack")


def _base_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "model", None):
        over["models"] = tuple(args.model)
    if getattr(args, "data", None):
        over["source"] = "panel_csv"
        over["panel_path"] = str(args.data)
        if cfg.preprocess is None:
            over["preprocess"] = PreprocessConfig()
    for key in ("seed", "ensemble_size", "grid_ensemble_size", "n_jobs", "ensemble_combine"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "data_seed", None) is not None:
        over["synthetic"] = replace(cfg.synthetic, seed=args.data_seed)
    try:
        return replace(cfg, **over)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args) -> None:
    cfg = SynthConfig(T=args.T, n=args.n, m=args.m, persistence=args.persistence,
                      innovation=args.innovation, noise_std=args.noise_std, seed=args.seed)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panels, psi = generate(cfg)
    write_panel(panels, out / "panel.csv")
    write_psi(psi, out / "psi.csv")
    with open(out / "synthetic.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(out / "panel.csv")


def cmd_backtest(args) -> None:
    cfg = _base_config(args)
    out = run_experiment(cfg, args.out)
    with open(out / "metrics.json", encoding="utf-8") as fh:
        summary = json.load(fh)
    for model, rep in summary.items():
        print(f"{model}: R2oos={rep['pooled_r2_oos']:.4f} meanR2={rep['mean_r2']:.4f} "
              f"IC={rep['mean_ic']:.4f} P10-1={rep['mean_spread']:.4g}")
    print(out)


def cmd_grid(args) -> None:
    cfg = _base_config(args)
    out = resolve_output(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = load_data(cfg)[:cfg.validation[1]]
    selected = {}
    for model in cfg.models:
        res = grid_search(model, panels, cfg)
        res.table().to_csv(out / f"grid_{model}.csv", index=False)
        selected[model] = res.to_dict()
        print(f"{model}: {res.selected} score={res.best_score:.6g}")
    with open(out / "grid.json", "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "grid": selected}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_importance(args) -> None:
    fi = replay_importance(resolve_output(args.run_dir))
    top = fi.mean().sort_values(ascending=False).head(5)
    for name, v in top.items():
        print(f"{name}: {v:.4f}")


def cmd_report(args) -> None:
    src = Path(args.predictions)
    if src.is_dir():
        src = src / "predictions.csv"
    frames = read_predictions(src)
    if args.combine:
        if len(frames) != 2:
            raise ConfigError("--combine needs a predictions file with exactly two models")
        a, b = list(frames)
        frames[f"{a}+{b}"] = ensemble_combine(frames[a], frames[b], args.combine)
    out = resolve_output(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    if args.combine:
        write_predictions(frames, out / "predictions.csv")
    summary = write_metrics(frames, out)
    print(json.dumps(summary, indent=2, sort_keys=True))


def _model_ref(text: str):
    path, _, model = text.partition(":")
    return resolve_output(path), (model or None)


def cmd_compare(args) -> None:
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corr = compare_models(_model_ref(args.a), _model_ref(args.b), out)
    print(f"mean correlation {corr['correlation'].mean():.4f} over {len(corr)} intervals")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oestrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic drifting panel")
    d = SynthConfig()
    s.add_argument("--T", type=int, default=d.T)
    s.add_argument("--n", type=int, default=d.n)
    s.add_argument("--m", type=int, default=d.m)
    s.add_argument("--persistence", type=float, default=d.persistence)
    s.add_argument("--innovation", type=float, default=d.innovation)
    s.add_argument("--noise-std", type=float, default=d.noise_std)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--out", default="synthetic")
    s.set_defaults(func=cmd_simulate)

    def experiment_flags(q):
        q.add_argument("--config", help="experiment JSON")
        q.add_argument("--model", action="append", choices=MODELS,
                       help="repeat to run several models")
        q.add_argument("--data", help="panel CSV instead of the synthetic generator")
        q.add_argument("--seed", type=int)
        q.add_argument("--data-seed", type=int, help="seed of the synthetic generator")
        q.add_argument("--ensemble-size", type=int)
        q.add_argument("--grid-ensemble-size", type=int)
        q.add_argument("--n-jobs", type=int)
        q.add_argument("--out")

    s = sub.add_parser("backtest", help="grid search then out-of-sample run")
    experiment_flags(s)
    s.add_argument("--ensemble-combine", choices=("raw_mean", "standardized_mean"))
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("grid", help="hyperparameter search only")
    experiment_flags(s)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("importance", help="feature importance replay of a backtest")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("report", help="metrics from a predictions CSV or run directory")
    s.add_argument("predictions")
    s.add_argument("--combine", choices=("raw_mean", "standardized_mean"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", help="correlation between two models' forecasts")
    s.add_argument("a", help="RUN_DIR[:MODEL]")
    s.add_argument("b", help="RUN_DIR[:MODEL]")
    s.add_argument("--out", default="comparison.csv")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, PanelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
