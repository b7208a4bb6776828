"""Command-line surface for graph building, data prep, training, and reports.

All numeric defaults live in `DEFAULTS` and can be overridden by a flat
key=value config file (`--config`) and per-key `--set key=value` flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment, geo, pipeline
from .autodiff import ParamStore
from .model import Episode, Forecaster, ModelConfig

DEFAULTS: dict[str, str] = {
    "pollutant": "pm25",
    "history": "24",
    "horizon": "24",
    "hidden_width": "48",
    "gcn_width": "32",
    "fuse_width": "32",
    "periods": "1,2,4",
    "gcn_activation": "relu",
    "variant": "full",
    "city_feedback": "head",
    "lr": "1e-4",
    "batch_size": "64",
    "epochs": "50",
    "patience": "10",
    "seeds": "1,2,3,4,5",
    "clip_norm": "",
    # graph construction
    "sigma_sq": str(geo.DEFAULT_SIGMA_SQ),
    "epsilon": str(geo.DEFAULT_EPSILON),
    "ridge_limit_m": str(geo.DEFAULT_RIDGE_LIMIT_M),
    "profile_samples": str(geo.DEFAULT_PROFILE_SAMPLES),
    # imputation
    "knn_k": "5",
    "w_time": "1.0",
    "w_space": "0.02",
    "time_window": "8",
    "missing_ceiling": "0.15",
    # resampling / splits / windowing
    "resample_factor": "1",
    "train_frac": "0.6",
    "val_frac": "0.2",
    "train_stride": "1",
    "eval_stride": "",          # empty: horizon (non-overlapping test windows)
    # synthetic generator
    "synth_stations": "8",
    "synth_cities": "2",
    "synth_segments": "16:1.0:100,48:1.0:160,6:1.0:90",   # period:amplitude:length
    "synth_noise_sd": "0.1",
    "synth_met_channels": "2",
    "synth_city_amplitude": "0.0",
    # grid search candidates, ';' separated
    "grid_candidates": "1,2;1,4;1,8;1,2,4;1,2,8;1,4,8;1,2,4,8",
}


def load_settings(config_path: str | None, overrides: list[str]) -> dict[str, str]:
    settings = dict(DEFAULTS)
    if config_path:
        settings.update(pipeline.load_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip()] = value.strip()
    return settings


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _graph_config(s: dict[str, str]) -> geo.GraphConfig:
    return geo.GraphConfig(float(s["sigma_sq"]), float(s["epsilon"]),
                           float(s["ridge_limit_m"]), int(s["profile_samples"]))


def _impute_config(s: dict[str, str]) -> pipeline.ImputeConfig:
    return pipeline.ImputeConfig(int(s["knn_k"]), float(s["w_time"]), float(s["w_space"]),
                                 int(s["time_window"]), float(s["missing_ceiling"]))


def _model_config(s: dict[str, str], met_channels: int) -> ModelConfig:
    return ModelConfig(
        met_channels=met_channels,
        gcn_width=int(s["gcn_width"]),
        fuse_width=int(s["fuse_width"]),
        hidden_width=int(s["hidden_width"]),
        periods=_int_list(s["periods"]),
        gcn_activation=s["gcn_activation"],
        variant=s["variant"],
        city_feedback=s["city_feedback"],
    )


def _train_config(s: dict[str, str], seeds: tuple[int, ...] | None = None) -> experiment.TrainConfig:
    return experiment.TrainConfig(
        lr=float(s["lr"]),
        batch_size=int(s["batch_size"]),
        epochs=int(s["epochs"]),
        patience=int(s["patience"]),
        seeds=seeds or _int_list(s["seeds"]),
        clip_norm=float(s["clip_norm"]) if s["clip_norm"] else None,
    )


def _segments(raw: str) -> list[pipeline.Segment]:
    segs = []
    for part in raw.split(","):
        period, amplitude, length = part.split(":")
        segs.append(pipeline.Segment(int(period), float(amplitude), int(length)))
    return segs


class AssembledData:
    """Everything a training or evaluation run needs, built from files or synth."""

    def __init__(self, stations, bundle, settings, labels=None, period_rank=None):
        s = settings
        self.stations = stations
        gcfg = _graph_config(s)
        profile = None
        if s.get("elevation_grid"):
            profile = geo.ElevationGrid.from_file(s["elevation_grid"])
        self.station_graph = geo.build_scale_graph(stations, gcfg, profile)
        cities = geo.city_centroids(stations)
        self.city_graph = geo.build_scale_graph(cities, gcfg, profile)
        self.gamma = geo.build_assignment(stations, cities)

        factor = int(s["resample_factor"])
        if not (bundle.air_mask.all() and bundle.met_mask.all()):
            bundle = pipeline.knn_impute(bundle, stations, _impute_config(s))
        if factor > 1:
            bundle = pipeline.resample_mean(bundle, factor)
        self.split = pipeline.SplitSpec.fractions(bundle.length, float(s["train_frac"]),
                                                  float(s["val_frac"]))
        self.norm = pipeline.zscore_fit(bundle, self.split)
        self.bundle = self.norm.transform(bundle)
        self.raw_bundle = bundle
        self.labels = labels
        self.period_rank = period_rank

        history, horizon = int(s["history"]), int(s["horizon"])
        train_stride = int(s["train_stride"])
        eval_stride = int(s["eval_stride"]) if s["eval_stride"] else horizon
        self.train_eps = pipeline.window_episodes(self.bundle, self.split.train,
                                                  history, horizon, train_stride)
        self.val_eps = pipeline.window_episodes(self.bundle, self.split.val,
                                                history, horizon, eval_stride)
        self.test_eps = pipeline.window_episodes(self.bundle, self.split.test,
                                                 history, horizon, eval_stride)
        self.model_cfg = _model_config(s, self.bundle.met_channels)

    def make_forecaster(self, model_cfg: ModelConfig | None = None) -> Forecaster:
        return Forecaster(model_cfg or self.model_cfg, self.station_graph,
                          self.city_graph, self.gamma)


def assemble_from_files(settings: dict[str, str]) -> AssembledData:
    for key in ("stations_csv", "measurements_csv"):
        if not settings.get(key):
            raise SystemExit(f"config key {key!r} is required for this command")
    stations = geo.load_stations_csv(settings["stations_csv"])
    sids = [st.station_id for st in stations]
    ts, air, air_mask = pipeline.load_measurements_csv(
        settings["measurements_csv"], settings["pollutant"], sids)
    if settings.get("meteorology_csv"):
        mts, met, met_mask, met_names = pipeline.load_meteorology_csv(
            settings["meteorology_csv"], sids)
        if len(mts) != len(ts) or np.any(mts != ts):
            raise SystemExit("meteorology and measurement timestamps differ")
    else:
        met = np.zeros((len(ts), len(sids), 0))
        met_mask = np.ones(met.shape, dtype=bool)
        met_names = []
    bundle = pipeline.SeriesBundle(sids, ts, air, met, air_mask, met_mask, met_names)
    labels = period_rank = None
    if settings.get("labels_csv"):
        arr = np.loadtxt(settings["labels_csv"], delimiter=",", skiprows=1, dtype=int)
        labels, period_rank = arr[:, 0], arr[:, 1]
    return AssembledData(stations, bundle, settings, labels, period_rank)


def assemble_synthetic(settings: dict[str, str], seed: int) -> tuple[AssembledData,
                                                                     pipeline.SyntheticDataset]:
    stations = pipeline.synthetic_stations(int(settings["synth_stations"]),
                                           int(settings["synth_cities"]), seed)
    synth = pipeline.gen_multiperiod(
        stations, _segments(settings["synth_segments"]),
        noise_sd=float(settings["synth_noise_sd"]),
        met_channels=int(settings["synth_met_channels"]),
        city_amplitude=float(settings["synth_city_amplitude"]),
        seed=seed)
    data = AssembledData(stations, synth.bundle, settings,
                         synth.dominant_period, synth.period_rank)
    return data, synth


def _load_checkpoint(path: str, data: AssembledData) -> Forecaster:
    store, meta = ParamStore.load(path)
    cfg = ModelConfig(**meta["model_config"])
    forecaster = data.make_forecaster(cfg)
    forecaster.store = store
    return forecaster


def _save_checkpoint(forecaster: Forecaster, path: Path) -> None:
    cfg = forecaster.config
    meta = {"model_config": {
        "met_channels": cfg.met_channels, "gcn_width": cfg.gcn_width,
        "fuse_width": cfg.fuse_width, "hidden_width": cfg.hidden_width,
        "periods": list(cfg.periods), "gcn_activation": cfg.gcn_activation,
        "variant": cfg.variant, "city_feedback": cfg.city_feedback,
    }}
    forecaster.store.save(path, meta)


# -- subcommands -----------------------------------------------------------------

def cmd_build_graph(settings, args) -> int:
    stations = geo.load_stations_csv(settings["stations_csv"])
    gcfg = _graph_config(settings)
    profile = None
    if settings.get("elevation_grid"):
        profile = geo.ElevationGrid.from_file(settings["elevation_grid"])
    out = Path(args.out_dir)
    station_graph = geo.build_scale_graph(stations, gcfg, profile)
    cities = geo.city_centroids(stations)
    city_graph = geo.build_scale_graph(cities, gcfg, profile)
    geo.dump_graph_csv(station_graph, out, "station")
    geo.dump_graph_csv(city_graph, out, "city")
    gamma = geo.build_assignment(stations, cities)
    np.savetxt(out / "assignment.csv", gamma, delimiter=",",
               header=",".join(c.city_id for c in cities), comments="")
    print(f"wrote station ({station_graph.node_count} nodes) and "
          f"city ({city_graph.node_count} nodes) graphs to {out}")
    return 0


def cmd_impute(settings, args) -> int:
    data = assemble_from_files(settings)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = data.raw_bundle
    lines = ["timestamp,station_id,pollutant,value"]
    for t in range(b.length):
        for s, sid in enumerate(b.station_ids):
            lines.append(f"{b.timestamps[t]},{sid},{settings['pollutant']},{b.air[t, s]:.10g}")
    (out / "imputed_measurements.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"imputed series written to {out / 'imputed_measurements.csv'}")
    return 0


def cmd_synth(settings, args) -> int:
    data, synth = assemble_synthetic(settings, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = synth.bundle
    with open(out / "stations.csv", "w", encoding="utf-8") as fh:
        fh.write("station_id,city_id,latitude,longitude,elevation\n")
        for st in synth.stations:
            fh.write(f"{st.station_id},{st.city_id},{st.latitude},{st.longitude},{st.elevation}\n")
    lines = ["timestamp,station_id,pollutant,value"]
    for t in range(b.length):
        for s, sid in enumerate(b.station_ids):
            lines.append(f"{b.timestamps[t]},{sid},{settings['pollutant']},{b.air[t, s]:.10g}")
    (out / "measurements.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["dominant_period,period_rank"]
    for p, r in zip(synth.dominant_period, synth.period_rank):
        lines.append(f"{p},{r}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"synthetic dataset ({b.length} steps, {b.station_count} stations) in {out}")
    return 0


def _assemble(settings, args):
    if settings.get("stations_csv"):
        return assemble_from_files(settings), None
    data, synth = assemble_synthetic(settings, args.seed)
    return data, synth


def cmd_train(settings, args) -> int:
    data, _ = _assemble(settings, args)
    cfg = _train_config(settings, seeds=(args.seed,))
    forecaster = data.make_forecaster()
    forecaster.init_params(args.seed)
    log = experiment.train(forecaster, data.train_eps, data.val_eps, cfg, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_checkpoint(forecaster, out / "checkpoint.npz")
    log.to_csv(out / "training_log.csv")
    print(f"trained to epoch {log.stopped_epoch} (best val {log.best_val:.6f} "
          f"at epoch {log.best_epoch}); checkpoint in {out}")
    return 0


def cmd_evaluate(settings, args) -> int:
    data, _ = _assemble(settings, args)
    forecaster = _load_checkpoint(args.checkpoint, data)
    report = experiment.evaluate(forecaster, data.test_eps, data.norm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    print(report.describe())
    return 0


def cmd_forecast(settings, args) -> int:
    data, _ = _assemble(settings, args)
    forecaster = _load_checkpoint(args.checkpoint, data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    experiment.dump_predictions_csv(forecaster, data.test_eps,
                                    data.bundle.station_ids, data.norm,
                                    out / "predictions.csv")
    print(f"predictions written to {out / 'predictions.csv'}")
    return 0


def cmd_ablate(settings, args) -> int:
    data, _ = _assemble(settings, args)
    cfg = _train_config(settings)
    full, ablated = experiment.ablate(data.model_cfg, args.variant,
                                      data.make_forecaster, data.train_eps,
                                      data.val_eps, data.test_eps, cfg, data.norm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["model,segment_start,segment_end,mae_mean,mae_std,rmse_mean,rmse_std"]
    for name, sweep in (("full", full), (args.variant, ablated)):
        for steps, mm, ms, rm, rs in sweep.aggregate():
            lines.append(f"{name},{steps[0]},{steps[1]},{mm:.10g},{ms:.10g},{rm:.10g},{rs:.10g}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"full mean MAE {full.mean_mae:.4f} vs {args.variant} {ablated.mean_mae:.4f}")
    return 0


def cmd_grid_p(settings, args) -> int:
    data, _ = _assemble(settings, args)
    cfg = _train_config(settings)
    candidates = [_int_list(c) for c in settings["grid_candidates"].split(";")]
    rows, skipped = experiment.grid_search_periods(
        data.model_cfg, candidates, data.make_forecaster,
        data.train_eps, data.val_eps, data.test_eps, cfg, data.norm)
    for periods in skipped:
        print(f"warning: skipped {list(periods)} "
              f"(hidden width {data.model_cfg.hidden_width} not divisible)", file=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["periods,mae_mean,rmse_mean"]
    for periods, sweep in rows:
        lines.append(f"{' '.join(map(str, periods))},{sweep.mean_mae:.10g},{sweep.mean_rmse:.10g}")
    (out / "grid_p.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    best = rows[0][0] if rows else None
    print(f"best period vector: {list(best) if best else 'none'}")
    return 0


def cmd_diagnose_weights(settings, args) -> int:
    data, synth = _assemble(settings, args)
    if synth is None:
        raise SystemExit("diagnose-weights requires a labeled synthetic dataset")
    forecaster = _load_checkpoint(args.checkpoint, data)
    diag = experiment.weight_diagnostic(forecaster, synth, data.norm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    v = diag.weights.shape[1]
    lines = ["step,argmax_part,label_rank," + ",".join(f"w{k + 1}" for k in range(v))]
    for t in range(len(diag.argmax_part)):
        ws = ",".join(f"{w:.6g}" for w in diag.weights[t])
        lines.append(f"{t},{diag.argmax_part[t]},{synth.period_rank[t]},{ws}")
    (out / "weight_trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"agreement score: {diag.agreement:.4f}")
    return 0


COMMANDS = {
    "build-graph": cmd_build_graph,
    "impute": cmd_impute,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "ablate": cmd_ablate,
    "grid-p": cmd_grid_p,
    "diagnose-weights": cmd_diagnose_weights,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualscale",
        description="Two-scale graph + multi-period recurrent air-quality forecaster")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--out-dir", default="out")
        if name in ("evaluate", "forecast", "diagnose-weights"):
            p.add_argument("--checkpoint", required=True)
        if name == "ablate":
            p.add_argument("--variant", required=True,
                           choices=experiment.ABLATION_VARIANTS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, args.overrides)
        return COMMANDS[args.command](settings, args)
    except (ValueError, OSError, experiment.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
