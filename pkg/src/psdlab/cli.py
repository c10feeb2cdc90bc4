"""Command-line entry point: ``psdlab <subcommand> [flags]``.

Every flag can also come from an INI file given with ``--config``. Keys use
the flag name with dashes turned into underscores and live in a section named
after the subcommand (or in ``[DEFAULT]``). Flags on the command line win.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

OUTPUT_ENV = "PSDLAB_OUTPUT"


class UsageError(Exception):
    pass


def _default_out(sub: str) -> str:
    return str(Path(os.environ.get(OUTPUT_ENV, "psdlab-out")) / sub)


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v for v in str(text).replace(" ", "").split(",") if v]


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


def _add_model_flags(p):
    p.add_argument("--height", type=int, default=32, help="image height in pixels")
    p.add_argument("--view", default="T", choices=["T", "U", "TU", "STU"], help="image view")
    p.add_argument("--mode", default="G", choices=["G", "C"], help="G grayscale, C color")
    p.add_argument("--filters", type=_int_list, default=None,
                   help="four conv filter counts; unset means S,2S,4S,4S for height S")
    p.add_argument("--kernel", type=int, default=5, help="conv kernel size")
    p.add_argument("--fc-widths", type=_int_list, default=[256, 128, 64], help="dense block widths")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout probability")
    p.add_argument("--channel-dropout", action=argparse.BooleanOptionalAction, default=False,
                   help="drop whole feature maps instead of single activations")
    p.add_argument("--epochs", type=int, default=10, help="epoch budget")
    p.add_argument("--batch-size", type=int, default=None,
                   help="minibatch size; unset scales from 256 for G32T to 8 for C160TU")
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum coefficient")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"], help="floating-point precision")
    p.add_argument("--output-bias", default="mean", choices=["mean", "zero"],
                   help="initial output bias: training-label mean or zero")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="psdlab", formatter_class=fmt,
                                     description="Synthetic granulometry: generate, train, evaluate.")
    parser.add_argument("--version", action="version", version=f"psdlab {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="INI file with defaults for these flags")
        return p

    p = sub("gen", "generate a dataset of rendered sphere packings")
    p.add_argument("--out", default=_default_out("dataset"), help="dataset root")
    p.add_argument("--step", type=float, default=5.0, help="enumeration step in percent")
    p.add_argument("--n-targets", type=int, default=None, help="stratified subset size; unset takes every target")
    p.add_argument("--scenes-per-target", type=int, default=1, help="replicate packings per target")
    p.add_argument("--sizes", type=_int_list, default=[32, 64, 96, 128, 160], help="image heights")
    p.add_argument("--views", type=_str_list, default=["T", "U", "TU", "STU"], help="views to write")
    p.add_argument("--modes", type=_str_list, default=["G", "C"], help="color modes to write")
    p.add_argument("--ratios", type=_float_list, default=[80, 10, 10], help="train,val,test percent")
    p.add_argument("--seed", type=int, default=0, help="global generation seed")
    p.add_argument("--box-size", type=float, default=4450.0, help="box width in micrometres")
    p.add_argument("--fill-height", type=float, default=None,
                   help="fill height in micrometres; unset adapts to the target")
    p.add_argument("--resolution", type=int, default=400, help="master render size")
    p.add_argument("--flat-shading", action=argparse.BooleanOptionalAction, default=False,
                   help="paint sphere colors without lighting")
    p.add_argument("--keep-assemblies", action=argparse.BooleanOptionalAction, default=False,
                   help="also store sphere dumps")

    p = sub("train", "train PSDNet on a dataset")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", default=_default_out("train"), help="run directory")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="zero the timing column so reruns are byte-identical")
    _add_model_flags(p)

    p = sub("eval", "evaluate a checkpoint on a split, or score a prediction CSV")
    p.add_argument("--checkpoint", default=None, help="trained model file")
    p.add_argument("--data", default=None, help="dataset root (with --checkpoint)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to score")
    p.add_argument("--pred", default=None, help="prediction CSV (id + pred_/p columns)")
    p.add_argument("--truth", default=None, help="truth CSV (id + p columns)")
    p.add_argument("--project", action=argparse.BooleanOptionalAction, default=False,
                   help="repair predictions to monotone curves in [0, 100] before scoring")
    p.add_argument("--chart-samples", type=int, default=6, help="pairs drawn in the PSD chart")
    p.add_argument("--seed", type=int, default=0, help="picks the charted samples")
    p.add_argument("--out", default=_default_out("eval"), help="report directory")

    p = sub("sweep", "train and evaluate one model per grid cell")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--axis", action="append", default=[],
                   help="axis=v1,v2,... (repeatable); axes: filters kernel epochs height mode view")
    p.add_argument("--workers", type=int, default=1, help="cells trained in parallel")
    p.add_argument("--out", default=_default_out("sweep"), help="sweep directory")
    _add_model_flags(p)

    p = sub("predict", "predict PSDs for image files")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--image", action="append", default=[], help="PNG file (repeatable)")
    p.add_argument("--project", action=argparse.BooleanOptionalAction, default=False,
                   help="repair outputs to monotone curves in [0, 100]")
    p.add_argument("--json", default=None, help="also write predictions to this JSON file")

    p = sub("features-train", "fit the shallow feature regressor with Levenberg-Marquardt")
    p.add_argument("--features", required=True, help="feature CSV (T view, or the only view)")
    p.add_argument("--features-under", default=None, help="second feature CSV appended as U columns")
    p.add_argument("--data", required=True, help="dataset root providing labels and splits")
    p.add_argument("--ratios", type=_float_list, default=[70, 15, 15], help="re-split train,val,test")
    p.add_argument("--hidden", type=int, default=10, help="hidden neurons")
    p.add_argument("--seed", type=int, default=0, help="split and initialization seed")
    p.add_argument("--mu", type=float, default=1e-3, help="initial damping")
    p.add_argument("--mu-increase", type=float, default=10.0, help="damping factor after a rejected step")
    p.add_argument("--mu-decrease", type=float, default=0.1, help="damping factor after an accepted step")
    p.add_argument("--mu-max", type=float, default=1e10, help="damping limit")
    p.add_argument("--max-iter", type=int, default=1000, help="iteration budget")
    p.add_argument("--patience", type=int, default=6, help="consecutive validation increases tolerated")
    p.add_argument("--out", default=_default_out("features"), help="model directory")

    p = sub("features-predict", "apply a trained feature regressor")
    p.add_argument("--model", required=True, help="model.json from features-train")
    p.add_argument("--features", required=True, help="feature CSV (T view, or the only view)")
    p.add_argument("--features-under", default=None, help="second feature CSV appended as U columns")
    p.add_argument("--project", action=argparse.BooleanOptionalAction, default=False,
                   help="repair outputs to monotone curves in [0, 100]")
    p.add_argument("--out", default=None, help="prediction CSV; unset writes to standard output")
    return parser


def _find_config(argv):
    command = next((a for a in argv if a in COMMANDS), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def _apply_config(parser, argv):
    """Parse with INI values as defaults, so explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    command, path = _find_config(argv)
    if command and path:
        cfg = configparser.ConfigParser()
        if not cfg.read(path):
            raise UsageError(f"cannot read config file {path}")
        section = cfg[command] if cfg.has_section(command) else cfg[cfg.default_section]
        subparser = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest: a for a in subparser._actions}
        values = {}
        for key, raw in section.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                if cfg.has_section(command) and key in cfg.defaults():
                    continue
                raise UsageError(f"{path}: unknown key {key!r} for {command}")
            action = known[dest]
            try:
                if isinstance(action, argparse._AppendAction):
                    value = [v.strip() for v in raw.splitlines() if v.strip()]
                elif isinstance(action, argparse.BooleanOptionalAction):
                    if raw.lower() not in cfg.BOOLEAN_STATES:
                        raise ValueError(f"not a boolean: {raw!r}")
                    value = cfg.BOOLEAN_STATES[raw.lower()]
                elif action.type is not None:
                    value = action.type(raw)
                else:
                    value = raw
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {sorted(action.choices)}")
            values[dest] = value
            action.required = False
        subparser.set_defaults(**values)
    return parser.parse_args(argv)


def _model_config(args):
    from .psdnet import PsdNetConfig

    return PsdNetConfig(height=args.height, view=args.view, mode=args.mode, filters=args.filters,
                        kernel=args.kernel, fc_widths=tuple(args.fc_widths), dropout=args.dropout,
                        channel_dropout=args.channel_dropout, epochs=args.epochs, batch_size=args.batch_size,
                        lr=args.lr, momentum=args.momentum, seed=args.seed, dtype=args.dtype,
                        output_bias=args.output_bias)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .dataset import GenConfig, generate_dataset

    if len(args.ratios) != 3:
        raise UsageError("--ratios needs three values")
    config = GenConfig(step_percent=args.step, n_targets=args.n_targets,
                       scenes_per_target=args.scenes_per_target, sizes=tuple(args.sizes),
                       views=tuple(args.views), modes=tuple(args.modes), seed=args.seed,
                       ratios=tuple(args.ratios), box_size=args.box_size, fill_height=args.fill_height,
                       resolution=args.resolution, flat_shading=args.flat_shading,
                       keep_assemblies=args.keep_assemblies)
    for v in config.views:
        if v not in ("T", "U", "TU", "STU"):
            raise UsageError(f"unknown view {v!r}")
    for m in config.modes:
        if m not in ("G", "C"):
            raise UsageError(f"unknown color mode {m!r}")
    out = Path(args.out)
    before = _count_files(out)

    def progress(done, total, sid):
        if done == total or done % 50 == 0:
            print(f"  {done}/{total} scenes", file=sys.stderr)

    manifest = generate_dataset(out, config, progress)
    counts = {s: len({r.scene_id for r in manifest.records if r.split == s}) for s in ("train", "val", "test")}
    print(f"dataset {out}: {len(manifest.scene_ids())} scenes, {len(manifest)} images "
          f"({_count_files(out) - before} new files); scenes per split {counts}; seed {args.seed}")
    return 0


def _count_files(root: Path) -> int:
    return sum(1 for p in root.rglob("*") if p.is_file()) if root.exists() else 0


def cmd_train(args) -> int:
    from .dataset import read_manifest
    from .plots import draw_history
    from .psdnet import build, param_count, save_model, train

    config = _model_config(args)
    manifest = read_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network = build(config)

    def progress(epoch, loss, rmse):
        print(f"  epoch {epoch}: train loss {loss:.4f}, val RMSE {rmse:.4f}", file=sys.stderr)

    network, history = train(network, manifest, config, deterministic=args.deterministic, progress=progress)
    save_model(out / "model.ckpt", network, config, history)
    (out / "history.csv").write_text(history.to_csv())
    summary = {"model": config.name, "config": config.to_dict(), "params": param_count(network),
               "best_epoch": history.best_epoch,
               "best_val_rmse": min(history.val_rmse) if history.val_rmse else None,
               "dataset": str(Path(args.data)), "dataset_seed": manifest.metadata.get("seed"),
               "version": __version__}
    _write_json(out / "train.json", summary)
    if history.val_rmse:
        draw_history(history, out / "history.svg")
    best = f"best epoch {history.best_epoch}, val RMSE {summary['best_val_rmse']:.3f}" if history.val_rmse \
        else "no epochs run"
    print(f"{config.name}: {summary['params']} parameters, {best}; wrote {out / 'model.ckpt'}")
    return 0


def _read_prediction_csv(path, ladder, prefix):
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        cols = [f"{prefix}{c}" for c in ladder.columns]
        if not all(c in fields for c in cols):
            cols = ladder.columns
        missing = [c for c in cols if c not in fields]
        if missing or "id" not in fields:
            raise ValueError(f"{path} needs an id column and columns {ladder.columns}")
        ids, rows = [], []
        for row in reader:
            ids.append(row["id"])
            rows.append([float(row[c]) for c in cols])
    return ids, np.array(rows, dtype=float).reshape(len(ids), len(cols))


def cmd_eval(args) -> int:
    from .evaluation import evaluate, predictions_csv, psd_chart
    from .isotonic import project_psd
    from .psd import DEFAULT_LADDER

    out = Path(args.out)
    ladder = DEFAULT_LADDER
    if args.checkpoint:
        if not args.data:
            raise UsageError("--checkpoint needs --data")
        from .dataset import read_manifest
        from .psdnet import load_model, predict_manifest

        network, config = load_model(args.checkpoint)
        manifest = read_manifest(args.data)
        ladder = manifest.ladder
        pred, truth, records = predict_manifest(network, manifest, config, args.split, args.project)
        ids = [r.scene_id for r in records]
        model = config.name
        source = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                  "seed": config.seed, "dataset_seed": manifest.metadata.get("seed")}
    elif args.pred and args.truth:
        ids, pred = _read_prediction_csv(args.pred, ladder, "pred_")
        tids, truth_all = _read_prediction_csv(args.truth, ladder, "true_")
        pos = {s: i for i, s in enumerate(tids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise ValueError(f"{len(missing)} predicted ids have no truth row, e.g. {missing[:3]}")
        truth = truth_all[[pos[s] for s in ids]]
        if args.project:
            pred = project_psd(pred)
        model = Path(args.pred).stem
        source = {"pred": str(args.pred), "truth": str(args.truth)}
    else:
        raise UsageError("give --checkpoint with --data, or --pred with --truth")

    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(pred, truth, ladder, model)
    body = json.loads(report.to_json())
    body.update(source=source, projected=bool(args.project), version=__version__)
    _write_json(out / "report.json", body)
    (out / "predictions.csv").write_text(predictions_csv(ids, pred, truth, ladder))
    n = min(max(args.chart_samples, 1), 12, len(ids))
    pick = np.sort(np.random.default_rng(args.seed).choice(len(ids), size=n, replace=False))
    psd_chart([(truth[i], pred[i]) for i in pick], out / "psd_chart.svg", ladder, [ids[i] for i in pick])
    per = ", ".join(f"{v:.3f}" for v in report.rmse_per_sieve)
    print(f"{model}: n={report.n_samples} RMSE all {report.rmse_all:.3f} (per sieve {per}), "
          f"R2 {report.r_squared:.4f}, D50 error {report.mean_d50_percent_error:.2f}%")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import SweepGrid, run_sweep

    if not args.axis:
        raise UsageError("give at least one --axis name=v1,v2,...")
    axes = {}
    for spec in args.axis:
        name, _, values = spec.partition("=")
        if not values:
            raise UsageError(f"bad --axis {spec!r}; expected name=v1,v2,...")
        conv = int if name in ("filters", "kernel", "epochs", "height") else str
        try:
            axes[name] = [conv(v) for v in _str_list(values)]
        except ValueError:
            raise UsageError(f"bad values in --axis {spec!r}") from None
    try:
        grid = SweepGrid(axes, _model_config(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    grid = run_sweep(grid, args.data, args.out, args.workers)
    failed = [r for r in grid.results if r["status"] != "ok"]
    for r in grid.results:
        rmse = f"{r['report']['rmse_all']:.3f}" if r["report"] else r["status"]
        print(f"  {r['cell']}: {rmse}")
    print(f"sweep: {len(grid.results)} cells, {len(failed)} failed; wrote {Path(args.out) / 'sweep.csv'}")
    return 1 if failed else 0


def cmd_predict(args) -> int:
    from .psdnet import load_model, predict
    from .render import RasterImage

    if not args.image:
        raise UsageError("give at least one --image")
    network, config = load_model(args.checkpoint)
    arrays = []
    for path in args.image:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing image {path}")
        img = RasterImage.load_png(path, "TU" if config.view == "TU" else "T")
        px = img.pixels[None] if img.pixels.ndim == 2 else img.pixels.transpose(2, 0, 1)
        arrays.append(px)
    x = np.stack(arrays).astype(network.dtype) / network.dtype.type(255.0)
    pred = predict(network, x, project=args.project)
    for path, row in zip(args.image, pred):
        print(" ".join(f"{v:.4f}" for v in row))
    if args.json:
        _write_json(Path(args.json), {"model": config.name, "projected": bool(args.project),
                                      "predictions": [{"image": str(p), "passing": [float(v) for v in row]}
                                                      for p, row in zip(args.image, pred)],
                                      "version": __version__})
    return 0


def _load_feature_inputs(args, order=None):
    from .feature_ann import concat_features, import_features

    fm = import_features(args.features, order)
    if args.features_under:
        under = import_features(args.features_under, fm.ids)
        fm = concat_features(_raw(fm), _raw(under))
    return _raw(fm)


def _raw(fm):
    from .feature_ann import FeatureMatrix

    return FeatureMatrix(list(fm.ids), fm.values, list(fm.columns))


def cmd_features_train(args) -> int:
    from .dataset import read_manifest, split
    from .evaluation import evaluate
    from .feature_ann import LmState, ann_predict, train_on_features

    manifest = read_manifest(args.data)
    resplit = split(manifest, args.ratios, args.seed)
    labels, splits = {}, {}
    for r in resplit.records:
        labels[r.scene_id] = r.achieved
        splits[r.scene_id] = r.split
    fm = _load_feature_inputs(args)
    unknown = [s for s in fm.ids if s not in labels]
    if unknown:
        raise ValueError(f"{len(unknown)} feature rows have no scene in the dataset, e.g. {unknown[:3]}")
    state = LmState(mu=args.mu, increase=args.mu_increase, decrease=args.mu_decrease, mu_max=args.mu_max,
                    max_iter=args.max_iter, patience=args.patience)
    train_ids = [s for s in fm.ids if splits[s] == "train"]
    fm = fm.fit_standardization(train_ids)
    ann, history = train_on_features(fm, labels, splits, args.hidden, args.seed, state)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(ann.to_json())
    report = {"dropped_columns": fm.dropped, "iterations": len(history.sse) - 1,
              "stop_reason": history.stop_reason, "best_iteration": history.best_iteration,
              "seed": args.seed, "version": __version__, "splits": {}}
    for name in ("train", "val", "test"):
        ids = [s for s in fm.ids if splits[s] == name]
        if ids:
            pred = ann_predict(ann, fm.rows(ids))
            truth = np.array([labels[s] for s in ids])
            report["splits"][name] = json.loads(evaluate(pred, truth).to_json())
    _write_json(out / "report.json", report)
    test = report["splits"].get("test")
    tail = f"test RMSE {test['rmse_all']:.3f}" if test else "no test rows"
    print(f"feature ANN: {len(fm.columns)} inputs ({len(fm.dropped)} constant columns dropped), "
          f"{report['iterations']} LM steps ({history.stop_reason}); {tail}")
    return 0


def cmd_features_predict(args) -> int:
    from .evaluation import predictions_csv
    from .feature_ann import FeatureAnn, ann_predict
    from .isotonic import project_psd

    ann = FeatureAnn.from_json(Path(args.model).read_text())
    fm = _load_feature_inputs(args)
    pred = ann_predict(ann, fm)
    if args.project:
        pred = project_psd(pred)
    text = predictions_csv(fm.ids, pred)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "predict": cmd_predict,
    "features-train": cmd_features_train, "features-predict": cmd_features_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"psdlab: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"psdlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"psdlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
