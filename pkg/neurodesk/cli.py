"""
Command-line pipeline: synth, train-rbm, dbn-pretrain, dbn-finetune, embed, eval, plot.

Every subcommand reads one JSON config (plus --seed / --out / --set overrides), echoes
the effective config to <out>/config.json and writes only declared file formats.
Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from neurodesk import __version__, classify, dbn, embed, evaluation, plots, rbm, synth
from neurodesk.config import (
    DbnFinetuneRunConfig,
    DbnPretrainRunConfig,
    EmbedRunConfig,
    EvalRunConfig,
    PlotRunConfig,
    RUN_CONFIGS,
    RunConfig,
    SynthRunConfig,
    TrainRbmRunConfig,
    load_run_config,
)
from neurodesk.data import (
    MatrixHeaderError,
    SampleMatrix,
    load_labels,
    load_matrix,
    preprocess,
    save_matrix,
    zscore_voxels,
)

logger = logging.getLogger("neurodesk")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


# ==========================================
# 1. Output helpers
# ==========================================

def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.echo(), encoding="utf-8")
    return out


def _write_json(obj: dict, path: Path) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _read_table(path: Path, *columns: Optional[str]) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = [c for c in columns if c is not None and c not in df.columns]
    if missing:
        raise MatrixHeaderError(f"{path}: missing columns {missing}, have {list(df.columns)}")
    return df


def _train_rows(labels_path: Optional[Path], split_column: str, n: int) -> np.ndarray:
    """Rows marked 'train' in the split column; every row when there is no such column."""
    if labels_path is None:
        return np.arange(n)
    df = pd.read_csv(labels_path)
    if len(df) != n:
        raise MatrixHeaderError(f"{labels_path}: {len(df)} label rows for {n} samples")
    if split_column not in df.columns:
        return np.arange(n)
    return np.flatnonzero(df[split_column].astype(str).to_numpy() == "train")


def _label_table(labels: np.ndarray, holdout: np.ndarray, severity: Optional[np.ndarray] = None) -> pd.DataFrame:
    table = pd.DataFrame({"label": labels, "split": np.where(holdout, "validation", "train")})
    if severity is not None:
        table["severity"] = severity
    return table


# ==========================================
# 2. Subcommands
# ==========================================

def cmd_synth(cfg: SynthRunConfig) -> Path:
    out = _prepare_out(cfg)
    if cfg.kind == "ground-truth":
        gt = synth.generate(cfg.spec)
        synth.save_ground_truth(gt, out)
        save_matrix(SampleMatrix(evaluation.fnc(gt.TC)), out / "fnc_gt.ndm")
    elif cfg.kind == "sweep":
        summary = []
        for i, gt in enumerate(synth.overlap_sweep(cfg.spec, cfg.levels)):
            synth.save_ground_truth(gt, out / f"level_{i}")
            sm_r = evaluation.correlation_matrix(gt.SM, gt.SM)
            iu = np.triu_indices(len(sm_r), k=1)
            summary.append({"level": i, "overlap": cfg.levels[i],
                            "mean_sm_correlation": float(sm_r[iu].mean()) if iu[0].size else 0.0})
        pd.DataFrame(summary).to_csv(out / "levels.csv", index=False)
    else:
        severity = None
        if cfg.kind == "graded":
            matrix, labels, severity = synth.generate_graded(
                cfg.spec, cfg.n_per_class, cfg.effect, cfg.noise, cfg.amplitude_sd)
        else:
            matrix, labels = synth.generate_labeled(
                cfg.spec, cfg.n_per_class, cfg.effect, cfg.noise, cfg.amplitude_sd)
        holdout = classify.holdout_split(labels, cfg.holdout_fraction, cfg.seed)
        save_matrix(matrix, out / "X.ndm")
        _label_table(labels, holdout, severity).to_csv(out / "labels.csv", index=False)
    logger.info("[synth] %s written to %s", cfg.kind, out)
    return out


def _fit_rbm(matrix: SampleMatrix, mask: bool, cfg: rbm.RbmTrainConfig, flip: bool):
    pre, retained = preprocess(matrix, mask=mask)
    params, trace = rbm.train(pre, cfg)
    if flip:
        params = rbm.flip_negative_fields(params)
    maps = np.zeros((params.n_hidden, matrix.cols))
    maps[:, retained] = rbm.receptive_fields(params).values
    return params, trace, pre, retained, SampleMatrix(maps, matrix.geometry)


def cmd_train_rbm(cfg: TrainRbmRunConfig) -> Path:
    out = _prepare_out(cfg)
    matrix = load_matrix(cfg.data)
    params, trace, pre, retained, maps = _fit_rbm(matrix, cfg.mask, cfg.rbm, cfg.flip_fields)

    rbm.save_rbm(params, out / "model.rbm")
    save_matrix(maps, out / "maps.ndm")
    save_matrix(rbm.feed_forward_timecourses(pre, params), out / "timecourses.ndm")
    trace.to_frame().to_csv(out / "trace.csv", index=False)
    _write_json({
        "n_visible": params.n_visible,
        "n_hidden": params.n_hidden,
        "retained_columns": int(retained.size),
        "active_units": rbm.active_units(params),
        "final_recon_error": trace.recon_error[-1],
        "final_mean_abs_w": trace.mean_abs_w[-1],
    }, out / "report.json")
    return out


def cmd_dbn_pretrain(cfg: DbnPretrainRunConfig) -> Path:
    out = _prepare_out(cfg)
    x = zscore_voxels(load_matrix(cfg.data)).values
    rows = _train_rows(cfg.labels, cfg.split_column, x.shape[0])
    model = dbn.pretrain(x[rows], cfg.layer_sizes, cfg.rbm)
    dbn.save_dbn(model, out / "model.dbn")
    frames = [t.to_frame().assign(layer=i + 1) for i, t in enumerate(model.pretrain_traces)]
    pd.concat(frames, ignore_index=True).to_csv(out / "pretrain_trace.csv", index=False)
    return out


def cmd_dbn_finetune(cfg: DbnFinetuneRunConfig) -> Path:
    out = _prepare_out(cfg)
    x = zscore_voxels(load_matrix(cfg.data)).values
    labels = load_labels(cfg.labels, cfg.label_column)
    if labels.size != x.shape[0]:
        raise MatrixHeaderError(f"{cfg.labels}: {labels.size} labels for {x.shape[0]} samples")
    rows = _train_rows(cfg.labels, cfg.split_column, x.shape[0])

    model, losses = dbn.fine_tune(dbn.load_dbn(cfg.model), x[rows], labels[rows], cfg.finetune)
    dbn.save_dbn(model, out / "model.dbn")
    pd.DataFrame({"epoch": np.arange(1, len(losses) + 1), "loss": losses}).to_csv(out / "loss.csv", index=False)
    pred, _ = dbn.predict(model, x[rows])
    _write_json({"train_macro_f": classify.macro_f_score(pred, labels[rows]),
                 "first_loss": losses[0], "final_loss": losses[-1]}, out / "report.json")
    return out


def cmd_embed(cfg: EmbedRunConfig) -> Path:
    out = _prepare_out(cfg)
    matrix = load_matrix(cfg.data)
    x = zscore_voxels(matrix).values if cfg.preprocess or cfg.model is not None else matrix.values
    if cfg.model is not None:
        model = dbn.load_dbn(cfg.model)
        x = dbn.hidden_features(model, x, cfg.depth or model.depth).values

    result = embed.embed(x, cfg.embed)
    save_matrix(SampleMatrix(result.positions), out / "positions.ndm")
    pd.DataFrame({"iteration": np.arange(1, result.iterations + 1),
                  "residual": result.residual_trace}).to_csv(out / "residual.csv", index=False)
    _write_json(result.report(), out / "report.json")
    return out


def _eval_sources(gt_dir: Path, maps: np.ndarray, tc: Optional[np.ndarray],
                  data: Optional[np.ndarray] = None) -> tuple[dict, dict]:
    """PCA runs on `data`, the rows the model was trained on (default: X.ndm preprocessed without a mask)."""
    gt_sm = load_matrix(gt_dir / "SM.ndm").values
    gt_tc = load_matrix(gt_dir / "TC.ndm").values
    if data is None:
        data = preprocess(load_matrix(gt_dir / "X.ndm"), mask=False)[0].values
    report = evaluation.source_recovery(gt_sm, gt_tc, data, maps, tc)
    matrices = {"fnc_gt": evaluation.fnc(gt_tc)}
    if tc is not None:
        match = evaluation.match_components(maps, gt_sm, tc, gt_tc)
        est = evaluation.matched_fnc(tc, match)
        report.update(communities=evaluation.modularity(est)[1].tolist(),
                      permutation={str(k): v for k, v in match.permutation.items()})
        matrices["fnc_est"] = est
    return report, matrices


def cmd_eval(cfg: EvalRunConfig) -> Path:
    out = _prepare_out(cfg)
    if cfg.mode == "sources":
        maps = load_matrix(cfg.maps).values
        tc = load_matrix(cfg.timecourses).values if cfg.timecourses is not None else None
        report, matrices = _eval_sources(cfg.ground_truth, maps, tc)
        for name, mat in matrices.items():
            save_matrix(SampleMatrix(mat), out / f"{name}.ndm")
        _write_json(report, out / "report.json")

    elif cfg.mode == "sweep":
        rows = []
        levels = sorted(cfg.ground_truth.glob("level_*"), key=lambda p: int(p.name.split("_")[1]))
        if not levels:
            raise FileNotFoundError(f"{cfg.ground_truth}: no level_* directories")
        for i, level_dir in enumerate(levels):
            logger.info("[eval sweep %d/%d] %s", i + 1, len(levels), level_dir.name)
            overlap = json.loads((level_dir / "spec.json").read_text(encoding="utf-8"))["overlap"]
            matrix = load_matrix(level_dir / "X.ndm")
            params, _, pre, _, maps = _fit_rbm(matrix, False, cfg.rbm, True)
            tc = rbm.feed_forward_timecourses(pre, params).values
            report, _ = _eval_sources(level_dir, maps.values, tc, pre.values)
            rows.append({"overlap": overlap, "sm": report["model_sm"], "tc": report["model_tc"],
                         "fnc": report.get("model_fnc", np.nan), "pca_sm": report["pca_sm"],
                         "modularity": report.get("model_modularity", np.nan),
                         "pca_modularity": report.get("pca_modularity", np.nan)})
        table = pd.DataFrame(rows)
        table.to_csv(out / "sweep.csv", index=False)
        pairs = table[["modularity", "pca_modularity"]].dropna()
        _write_json({"modularity": evaluation.paired_comparison(pairs["modularity"], pairs["pca_modularity"])},
                    out / "report.json")

    elif cfg.mode == "dbn":
        x = zscore_voxels(load_matrix(cfg.data)).values
        labels = load_labels(cfg.labels, cfg.label_column)
        model = dbn.load_dbn(cfg.model)
        pred, probs = dbn.predict(model, x)
        table = pd.read_csv(cfg.labels)
        table["prediction"] = pred
        table["p_max"] = probs.max(axis=1)
        table.to_csv(out / "predictions.csv", index=False)
        report = {"macro_f": classify.macro_f_score(pred, labels),
                  "per_class_f": {str(k): v for k, v in classify.per_class_f_scores(pred, labels).items()}}
        if cfg.split_column in table.columns:
            for split in sorted(table[cfg.split_column].astype(str).unique()):
                keep = table[cfg.split_column].astype(str).to_numpy() == split
                report[f"macro_f_{split}"] = classify.macro_f_score(pred[keep], labels[keep])
        _write_json(report, out / "report.json")

    else:
        x = load_matrix(cfg.data).values
        labels = load_labels(cfg.labels, cfg.label_column)
        if cfg.shuffle_labels:
            labels = np.random.default_rng(cfg.seed).permutation(labels)
        table = classify.depth_experiment(x, labels, cfg.layer_sizes, cfg.rbm, cfg.finetune,
                                          folds=cfg.folds, seed=cfg.seed, knn_k=cfg.knn_k, logreg_cfg=cfg.logreg,
                                          protocol=cfg.protocol)
        table.to_csv(out / "depth_table.csv", index=False)
    return out


def cmd_plot(cfg: PlotRunConfig) -> Path:
    out = _prepare_out(cfg)
    if cfg.kind == "map":
        positions = load_matrix(cfg.input).values
        labels = split = severity = None
        if cfg.labels is not None:
            df = _read_table(cfg.labels, cfg.label_column, cfg.split_column, cfg.severity_column)
            labels = df[cfg.label_column].tolist()
            if cfg.split_column is not None:
                split = (df[cfg.split_column].astype(str) == "validation").tolist()
            if cfg.severity_column is not None:
                severity = df[cfg.severity_column].astype(str).tolist()
        title = cfg.title or "Embedding map"
        plots.write_svg(plots.svg_embedding_map(positions, labels, split, severity, title), out / "map.svg")
        if cfg.html:
            plots.write_html(plots.html_embedding_map(positions, labels, title), out / "map.html", title)

    elif cfg.kind == "fnc":
        c = load_matrix(cfg.input).values
        title = cfg.title or "FNC"
        plots.write_svg(plots.svg_fnc_heatmap(c, title=title), out / "fnc.svg")
        if cfg.html:
            plots.write_html(plots.html_fnc_heatmap(c, title), out / "fnc.html", title)

    else:
        df = _read_table(cfg.input, "overlap")
        series = {col: df[col].tolist() for col in df.columns if col != "overlap"}
        plots.write_svg(plots.svg_sweep_curves(df["overlap"].tolist(), series, cfg.title or "Correlation vs overlap"),
                        out / "sweep.svg")
    return out


COMMANDS: dict[str, Callable[..., Path]] = {
    "synth": cmd_synth,
    "train-rbm": cmd_train_rbm,
    "dbn-pretrain": cmd_dbn_pretrain,
    "dbn-finetune": cmd_dbn_finetune,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


# ==========================================
# 3. Entry point
# ==========================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurodesk", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUN_CONFIGS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--seed", type=int, help="global seed (overrides every nested seed)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. rbm.epochs=20 (repeatable)")
        verbosity = p.add_mutually_exclusive_group()
        verbosity.add_argument("-v", "--verbose", action="store_true")
        verbosity.add_argument("-q", "--quiet", action="store_true")
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _error_line(kind: str, exc: BaseException) -> str:
    message = " ".join(str(exc).split()).replace('"', "'")
    return f'error kind={kind} type={type(exc).__name__} message="{message}"'


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    try:
        cfg = load_run_config(args.command, args.config, args.overrides, args.seed, args.out)
    except (ValueError, FileNotFoundError) as exc:
        print(_error_line("validation", exc), file=sys.stderr)
        return EXIT_VALIDATION

    try:
        out = COMMANDS[args.command](cfg)
    except Exception as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(_error_line("runtime", exc), file=sys.stderr)
        return EXIT_RUNTIME
    logger.info("[%s] done -> %s", args.command, out)
    return EXIT_OK
