import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from main import (
    APP_NAME,
    APP_VERSION,
    SETTINGS_PATH,
    ConfigError,
    InvalidHyperparameterError,
    InvalidInputError,
    RobustPLError,
    derive_seed,
    load_settings,
    setup_logging,
    summarize_settings,
    write_json_atomic,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

LOGGER = logging.getLogger("RobustPL.CLI")

_CONFIG_ERRORS = (ConfigError, InvalidHyperparameterError, InvalidInputError)


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (schema version 1)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    common.add_argument(
        "--log",
        default=None,
        choices=["DEBUG", "INFO", "WARN", "ERROR"],
        help="Logging level (default: from settings)",
    )
    common.add_argument("--settings", default=SETTINGS_PATH, help="Application settings file")
    return common


def _loss_flags(parser):
    parser.add_argument("--q", type=float, help="GCE exponent q")
    parser.add_argument("--beta", type=float, help="BCE exponent beta")
    parser.add_argument("--A", dest="A", type=float, help="RCE clip constant A (< 0)")
    parser.add_argument("--alpha", type=float, help="SCE weight on CE")
    parser.add_argument("--gamma", type=float, help="SCE weight on RCE")


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="robustpl",
        description="Robust losses for teacher-student pseudo-labelling: gradient checks, simulations and experiments.",
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every loss gradient")
    p_grad.add_argument("--families", help="Comma-separated loss families (default: all)")
    _loss_flags(p_grad)
    p_grad.add_argument("--tolerance", type=float, default=None, help="Relative tolerance (default: 1e-5)")
    p_grad.add_argument("--points", type=int, default=None, help="Random points per case (default: 100)")
    p_grad.add_argument("--model", action="store_true", help="Also check whole-network backprop on a 2-16-3 MLP")

    p_sim = sub.add_parser("simulate", parents=[common], help="Three-class mixture with a mislabeled cluster, CE vs robust")
    p_sim.add_argument("--robust", help="Robust loss family for the second arm")
    _loss_flags(p_sim)
    p_sim.add_argument("--repeats", type=int, help="Number of seeds to average")

    p_exp = sub.add_parser("experiment", parents=[common], help="Teacher-student experiment with lower and upper bounds")
    p_exp.add_argument("--p", help="Labeled fraction, or a comma-separated sweep such as 0.3,0.5,0.7")
    p_exp.add_argument("--robust", help="Comma-separated robust loss families (one student arm each)")
    _loss_flags(p_exp)
    p_exp.add_argument("--repeats", type=int, help="Repeats per fraction")
    p_exp.add_argument("--n-jobs", dest="n_jobs", type=int, help="Parallel repeats (joblib)")
    p_exp.add_argument("--xlsx", action="store_true", help="Also write result.xlsx")

    sub.add_parser("datagen", parents=[common], help="Generate a dataset CSV and manifest, or a scene directory")
    return parser


def _overrides(args):
    return {
        key: getattr(args, key, None)
        for key in ("p", "robust", "q", "beta", "A", "alpha", "gamma", "seed", "repeats", "n_jobs")
    }


def _out_dir(args, settings, command):
    if args.out:
        return os.path.abspath(args.out)
    return os.path.join(settings["output_directory"], command)


def _load_raw(path, required):
    from modules.experiment_config import load_config_file

    if not path:
        if required:
            raise ConfigError("missing required flag", "--config")
        return {}
    return load_config_file(path)


# ---------- gradcheck ----------
def _gradcheck_cases(args):
    from modules.gradcheck import default_cases
    from modules.losses import LossFamily, RobustLossConfig

    families = None
    if args.families:
        families = [LossFamily.parse(f.strip()) for f in args.families.split(",") if f.strip()]
    flags = {"q_exponent": args.q, "beta": args.beta, "A": args.A, "alpha": args.alpha, "gamma": args.gamma}
    given = {k: v for k, v in flags.items() if v is not None}
    cases = default_cases()
    if families is not None:
        cases = [c for c in cases if c.family in families]
        seen = {c.family for c in cases}
        cases += [RobustLossConfig(family=f) for f in families if f not in seen]
    if given:
        rebuilt = []
        for case in cases:
            relevant = set(case.relevant_hyperparameters())
            if relevant & set(given):
                merged = case.to_dict()
                merged.update({k: v for k, v in given.items() if k in relevant})
                rebuilt.append(RobustLossConfig.from_dict(merged))
            else:
                rebuilt.append(case)
        cases = list({c.label: c for c in rebuilt}.values())
    return cases


def cmd_gradcheck(args, settings):
    from modules.gradcheck import DEFAULT_ATOL, DEFAULT_POINTS, DEFAULT_RTOL, check_model_gradients, run_gradcheck

    try:
        cases = _gradcheck_cases(args)
        rtol = DEFAULT_RTOL if args.tolerance is None else float(args.tolerance)
        points = DEFAULT_POINTS if args.points is None else int(args.points)
        if not rtol > 0.0:
            raise InvalidInputError(f"tolerance must be > 0, got {rtol}")
        if points < 1:
            raise InvalidInputError(f"points must be >= 1, got {points}")
    except _CONFIG_ERRORS as exc:
        print(f"ERROR: {exc}")
        return EXIT_CONFIG

    seed = 0 if args.seed is None else args.seed
    # the absolute floor scales with the requested tolerance
    atol = DEFAULT_ATOL * rtol / DEFAULT_RTOL
    report = run_gradcheck(cases, points=points, rtol=rtol, atol=atol, seed=seed)
    for label, err in report.max_error.items():
        print(f"{label:<28} max rel error {err:.3e}")
    ok = report.ok
    for failure in report.failures:
        print(f"FAIL {failure.describe()}")
    if args.model:
        model_report = check_model_gradients(cases if args.families else None, seed=seed)
        for label, err in model_report.max_error.items():
            print(f"model {label:<22} max rel error {err:.3e}")
        for failure in model_report.failures:
            print(f"FAIL model {failure.describe()}")
        ok = ok and model_report.ok
    print(f"families: {', '.join(report.families())}")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------- simulate ----------
def _lattice_axes(spec, features):
    from modules.experiment_config import DEFAULT_MARGIN

    lo = features.min(axis=0) - DEFAULT_MARGIN
    hi = features.max(axis=0) + DEFAULT_MARGIN
    x_range = spec.x_range or (float(lo[0]), float(hi[0]))
    y_range = spec.y_range or (float(lo[1]), float(hi[1]))
    return np.linspace(x_range[0], x_range[1], spec.lattice), np.linspace(y_range[0], y_range[1], spec.lattice)


def write_decision_grid(path, xs, ys, model_ce, model_robust):
    from modules.model import predict_batch

    gx, gy = np.meshgrid(xs, ys)
    points = np.column_stack([gx.reshape(-1), gy.reshape(-1)])
    pred_ce = predict_batch(model_ce, points)
    pred_robust = predict_batch(model_robust, points)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["x", "y", "pred_ce", "pred_robust"])
        for (x, y), a, b in zip(points, pred_ce, pred_robust):
            writer.writerow([repr(float(x)), repr(float(y)), int(a), int(b)])
    return path


def run_simulation(spec, out_dir):
    from dataclasses import replace

    from modules.datagen import Provenance, gen_gaussian_mixture
    from modules.dataset_io import write_dataset
    from modules.losses import RobustLossConfig
    from modules.model import evaluate_accuracy, init_model, save_checkpoint, train
    from modules.pipeline import MetricSummary

    acc_ce, acc_robust = [], []
    outputs = {}
    for r in range(spec.repeats):
        train_ds = gen_gaussian_mixture(spec.mixture, derive_seed(spec.seed, "data", r))
        test_ds = gen_gaussian_mixture(
            spec.mixture.scaled(spec.test_count_per_class), derive_seed(spec.seed, "test", r), include_outliers=False
        )
        sgd = replace(spec.sgd, seed=derive_seed(spec.seed, "init", r))
        dims = spec.architecture.layer_dims(train_ds.d, train_ds.num_classes)
        models = {}
        for arm, loss in (("ce", RobustLossConfig.cross_entropy()), ("robust", spec.robust)):
            model = init_model(dims, spec.architecture.activation, sgd.seed)
            models[arm], _record = train(model, train_ds, {Provenance.TRUE_LABEL: loss}, sgd)
        acc_ce.append(evaluate_accuracy(models["ce"], test_ds))
        acc_robust.append(evaluate_accuracy(models["robust"], test_ds))
        LOGGER.info("simulate seed %d: CE acc %.4f, %s acc %.4f", r, acc_ce[-1], spec.robust.label, acc_robust[-1])
        if r == 0:
            csv_path, manifest_path = write_dataset(train_ds, os.path.join(out_dir, "dataset.csv"), spec.seed, spec.mixture.digest())
            xs, ys = _lattice_axes(spec, train_ds.features)
            outputs["dataset_csv"] = csv_path
            outputs["dataset_manifest"] = manifest_path
            outputs["grid_csv"] = write_decision_grid(os.path.join(out_dir, "grid.csv"), xs, ys, models["ce"], models["robust"])
            outputs["checkpoint_ce"] = save_checkpoint(models["ce"], os.path.join(out_dir, "model_ce.json"))
            outputs["checkpoint_robust"] = save_checkpoint(models["robust"], os.path.join(out_dir, "model_robust.json"))

    summary = {
        "tool": APP_NAME,
        "version": APP_VERSION,
        "config_digest": spec.digest,
        "config": spec.echo,
        "robust_loss": spec.robust.to_dict(),
        "accuracy": {
            "ce": MetricSummary.from_values(acc_ce).to_dict(),
            "robust": MetricSummary.from_values(acc_robust).to_dict(),
        },
    }
    outputs["summary_json"] = write_json_atomic(summary, os.path.join(out_dir, "summary.json"))
    return summary, outputs


def cmd_simulate(args, settings):
    from modules.experiment_config import apply_overrides, parse_simulate

    try:
        raw = apply_overrides(_load_raw(args.config, required=False), _overrides(args))
        spec = parse_simulate(raw, settings)
    except _CONFIG_ERRORS as exc:
        print(f"ERROR: {exc}")
        return EXIT_CONFIG

    out_dir = _out_dir(args, settings, "simulate")
    try:
        summary, outputs = run_simulation(spec, out_dir)
    except (RobustPLError, OSError) as exc:
        LOGGER.error("simulate failed: %s", exc)
        print(f"ERROR: {exc}")
        return EXIT_RUNTIME
    acc = summary["accuracy"]
    print(f"CE accuracy     {acc['ce']['mean']:.4f}")
    print(f"{spec.robust.label:<15} {acc['robust']['mean']:.4f}")
    print(outputs["summary_json"])
    return EXIT_OK


# ---------- experiment ----------
def cmd_experiment(args, settings):
    from modules.experiment_config import apply_overrides, parse_experiment
    from modules.pipeline import run_sweep
    from modules.reporting import RunManifest, summary_table, write_experiment_outputs

    try:
        raw = apply_overrides(_load_raw(args.config, required=True), _overrides(args))
        base_dir = os.path.dirname(os.path.abspath(args.config))
        spec = parse_experiment(raw, settings, base_dir=base_dir)
    except _CONFIG_ERRORS as exc:
        print(f"ERROR: {exc}")
        return EXIT_CONFIG

    out_dir = _out_dir(args, settings, "experiment")
    manifest = RunManifest(config_digest=spec.digest, master_seed=spec.config.seed, command="experiment").start()
    started = time.perf_counter()
    try:
        results = run_sweep(spec.config, spec.fractions)
        manifest.outputs.update(write_experiment_outputs(results, spec.echo, spec.digest, out_dir, xlsx=args.xlsx))
        manifest.record_arm_times(results)
        manifest.finish(time.perf_counter() - started)
        manifest.write(out_dir)
    except (RobustPLError, OSError) as exc:
        LOGGER.error("experiment failed: %s", exc)
        print(f"ERROR: {exc}")
        return EXIT_RUNTIME
    print(summary_table(results))
    print(manifest.outputs["result_json"])
    return EXIT_OK


# ---------- datagen ----------
def cmd_datagen(args, settings):
    from modules.experiment_config import DATAGEN_MIXTURE, apply_overrides, parse_datagen

    try:
        raw = apply_overrides(_load_raw(args.config, required=True), {"seed": args.seed})
        spec = parse_datagen(raw)
    except _CONFIG_ERRORS as exc:
        print(f"ERROR: {exc}")
        return EXIT_CONFIG

    out_dir = _out_dir(args, settings, "datagen")
    try:
        if spec.kind == DATAGEN_MIXTURE:
            path = _write_mixture(spec, out_dir)
        else:
            path = _write_scene_set(spec, out_dir)
    except (RobustPLError, OSError) as exc:
        print(f"ERROR: {exc}")
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


def _write_mixture(spec, out_dir):
    from modules.datagen import gen_gaussian_mixture, inject_label_noise
    from modules.dataset_io import write_dataset

    ds = gen_gaussian_mixture(spec.mixture, derive_seed(spec.seed, "data"), include_outliers=spec.include_outliers)
    if spec.noise is not None and spec.noise.flip_rate > 0.0:
        ds = inject_label_noise(ds, spec.noise, derive_seed(spec.seed, "noise"))
    csv_path, _manifest = write_dataset(ds, os.path.join(out_dir, f"{spec.name}.csv"), spec.seed, spec.digest)
    return csv_path


def _write_scene_set(spec, out_dir):
    from modules.datagen import gen_toy_segmentation
    from modules.dataset_io import write_scenes

    scenes = gen_toy_segmentation(spec.scenes, spec.height, spec.width, derive_seed(spec.seed, "data"), spec.num_classes)
    target = os.path.join(out_dir, spec.name)
    write_scenes(scenes, target, seed=spec.seed)
    return target


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "datagen": cmd_datagen,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = load_settings(args.settings)
    level = args.log or settings.get("log_level", "INFO")
    setup_logging(level, settings["log_file_path"] if settings.get("log_to_file") else None)
    LOGGER.debug("Settings: %s", summarize_settings(settings))

    try:
        return COMMANDS[args.command](args, settings)
    except KeyboardInterrupt:
        print("ERROR: interrupted")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
