"""Command line entry points.

Commands share one flat key=value configuration namespace; values come
from built-in defaults, then an optional config file, then key=value
arguments, later sources winning. Every run directory gets the fully
resolved config written back as config.txt, so a finished run is also a
reusable config source.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, datagen, metrics, training
from . import model as net

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ENV_OUT_ROOT = "INFOMASK_OUT_ROOT"


# ---------------------------------------------------------------------------
# configuration table


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError(f"must be finite, got {s}")
    return v


def _opt_float(s: str):
    if s == "auto":
        return None
    return _float(s)


def _choice(*options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


def _method_list(s: str) -> list:
    names = [p.strip() for p in s.split(",") if p.strip()]
    if not names:
        raise ValueError("empty method list")
    for n in names:
        if n not in baselines.METHODS:
            raise ValueError(f"method {n!r} not in {baselines.METHODS}")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate method in {names}")
    return names


_ENCODER_STEP_NAMES = ("enc1", "enc2", "pool1", "enc3", "enc4", "pool2", "enc5", "enc6")

# name -> (parser, default); insertion order is the config.txt order
CONFIG_KEYS = {
    # synthetic data
    "image_size": (_int, 64),
    "n_samples": (_int, 3000),
    "blob_intensity_low": (_float, 0.45),
    "blob_intensity_high": (_float, 0.85),
    "blob_radius_low": (_float, 6.0),
    "blob_radius_high": (_float, 12.0),
    "texture_amplitude": (_float, 0.15),
    "distractor_count": (_int, 3),
    "split_train": (_float, 2 / 3),
    "split_val": (_float, 1 / 6),
    "split_test": (_float, 1 / 6),
    # objective
    "variant": (_choice("infomask", "featuremask", "regl1"), "infomask"),
    "alpha": (_float, 1e-3),
    "eps_samples": (_int, 1),
    "l1_weight": (_float, 1e-2),
    "classifier_input": (
        _choice("mask", "masked_input", "masked_attention"),
        "mask",
    ),
    "tau_train": (_float, 0.5),
    # optimization
    "learning_rate": (_float, 1e-3),
    "optimizer": (_choice(*training.OPTIMIZERS), "adaptive-moments"),
    "momentum": (_float, 0.9),
    "batch_size": (_int, 16),
    "epochs": (_int, 6),
    "seed": (_int, 0),
    "dtype": (_choice("float32", "float64"), "float32"),
    # checkpointing and thresholding
    "n_checkpoints": (_int, 3),
    "checkpoint_every": (_int, 1),
    "eval_draws": (_int, 0),
    "fnr_cap": (_float, 0.95),
    "threshold_step": (_float, 0.05),
    "threshold": (_opt_float, None),
    # comparison and reporting
    "methods": (_method_list, ["infomask", "featuremask", "regl1", "gradcam"]),
    "gradcam_layer": (_choice(*_ENCODER_STEP_NAMES), "enc6"),
    "kde_bandwidth": (_opt_float, None),
}


def parse_config_text(text: str, origin: str = "config") -> dict:
    """key=value lines to a raw string map; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ValueError(f"{origin}:{lineno}: expected key=value, got {line.strip()!r}")
        k, v = (p.strip() for p in s.split("=", 1))
        if k in out:
            raise ValueError(f"{origin}:{lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def resolve_config(*sources: dict) -> dict:
    """Typed config from raw string maps; later sources override earlier."""
    values = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for src in sources:
        for k, raw in src.items():
            if k not in CONFIG_KEYS:
                raise ValueError(f"unknown config key {k!r}")
            try:
                values[k] = CONFIG_KEYS[k][0](raw)
            except ValueError as exc:
                raise ValueError(f"config key {k}: {exc}") from None
    return values


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, list):
        return ",".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(values: dict) -> str:
    return "".join(f"{k} = {_format_value(values[k])}\n" for k in CONFIG_KEYS)


def _gather_config(args, extra_sources: list | None = None) -> dict:
    sources = list(extra_sources or [])
    if getattr(args, "config", None):
        path = Path(args.config)
        sources.append(parse_config_text(path.read_text(), origin=str(path)))
    pairs = getattr(args, "set", None) or []
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value argument, got {pair!r}")
        k, v = (p.strip() for p in pair.split("=", 1))
        if k in overrides:
            raise ValueError(f"duplicate key {k!r} on the command line")
        overrides[k] = v
    sources.append(overrides)
    return resolve_config(*sources)


def _default_out(kind: str, values: dict) -> Path:
    root = Path(os.environ.get(ENV_OUT_ROOT, "runs"))
    return root / f"{kind}_seed{values['seed']}"


# ---------------------------------------------------------------------------
# run directories


def _spec_from_values(method: str, values: dict) -> baselines.MethodSpec:
    return baselines.method_spec(
        method,
        alpha=values["alpha"],
        l1_weight=values["l1_weight"],
        eps_samples=values["eps_samples"],
        classifier_input=values["classifier_input"],
        gradcam_layer=values["gradcam_layer"],
    )


def _train_config(values: dict, spec: baselines.MethodSpec) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=values["learning_rate"],
        optimizer=values["optimizer"],
        momentum=values["momentum"],
        batch_size=values["batch_size"],
        epochs=values["epochs"],
        seed=values["seed"],
        tau=values["tau_train"],
        dtype=values["dtype"],
        classifier_input=spec.classifier_input,
        loss=spec.loss,
        fnr_cap=values["fnr_cap"],
        threshold_step=values["threshold_step"],
        checkpoint_every=values["checkpoint_every"],
        n_checkpoints=values["n_checkpoints"],
        eval_draws=values["eval_draws"],
    )


def _load_split(data_dir, split: str) -> list:
    manifest = Path(data_dir) / f"manifest_{split}.tsv"
    if not manifest.is_file():
        raise ValueError(f"no manifest for split {split!r} at {manifest}")
    return datagen.load_manifest(manifest)


def _write_run(out: Path, values: dict, fitted: baselines.FittedMethod) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(values))
    (out / "log.txt").write_text("\n".join(fitted.result.log_lines) + "\n")
    for ck in fitted.result.checkpoints:
        net.save_checkpoint(ck.params, out / f"ckpt_{ck.epoch}.bin")
    net.save_checkpoint(fitted.params, out / "selected.bin")
    ck = fitted.checkpoint
    (out / "result.txt").write_text(
        f"method = {fitted.spec.method}\n"
        f"selected_epoch = {ck.epoch}\n"
        f"threshold = {fitted.threshold!r}\n"
        f"val_accuracy = {ck.val_accuracy!r}\n"
        f"val_iop = {ck.val_iop!r}\n"
    )


def _load_run(run_dir) -> tuple[dict, baselines.FittedMethod]:
    """A run directory back as (raw config strings, fitted method)."""
    run = Path(run_dir)
    cfg_path, result_path = run / "config.txt", run / "result.txt"
    for p in (cfg_path, result_path, run / "selected.bin"):
        if not p.is_file():
            raise ValueError(f"{run} is not a run directory ({p.name} missing)")
    raw = parse_config_text(cfg_path.read_text(), origin=str(cfg_path))
    values = resolve_config(raw)
    fields = parse_config_text(result_path.read_text(), origin=str(result_path))
    for key in ("method", "selected_epoch", "threshold", "val_accuracy", "val_iop"):
        if key not in fields:
            raise ValueError(f"{result_path}: missing field {key!r}")
    method = fields["method"]
    if method not in baselines.METHODS:
        raise ValueError(f"{result_path}: unknown method {method!r}")
    spec = _spec_from_values(method, values)
    params = net.load_checkpoint(run / "selected.bin")
    checkpoint = training.Checkpoint(
        epoch=int(fields["selected_epoch"]),
        params=params,
        val_accuracy=float(fields["val_accuracy"]),
        val_iop=float(fields["val_iop"]),
        threshold=float(fields["threshold"]),
    )
    fitted = baselines.FittedMethod(
        spec, params, float(fields["threshold"]), checkpoint, training.TrainResult([], [])
    )
    return raw, fitted


def _write_report(
    out: Path, report: metrics.LocalizationReport, threshold: float, label: str
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_image.csv").write_text(report.to_per_image_csv())
    (out / "kde.csv").write_text(report.to_kde_csv())
    (out / "summary.txt").write_text(metrics.summary_table([(label, report)]))
    auc_s = "" if report.auc is None else repr(report.auc)
    (out / "scores.txt").write_text(
        f"accuracy = {report.accuracy!r}\n"
        f"auc = {auc_s}\n"
        f"empty_pred_count = {report.empty_pred_count}\n"
        f"n_scored = {len(report.scores)}\n"
        f"threshold = {threshold!r}\n"
    )


def _read_report(eval_dir) -> metrics.LocalizationReport:
    """Rebuild a report from a written eval directory (no model needed)."""
    d = Path(eval_dir)
    for name in ("per_image.csv", "scores.txt"):
        if not (d / name).is_file():
            raise ValueError(f"{d} is not an eval directory ({name} missing)")
    scores = []
    lines = (d / "per_image.csv").read_text().strip().split("\n")
    if lines and lines[0] == "index,iop,fpr,fnr":
        lines = lines[1:]
    for line in lines:
        if not line:
            continue
        _, iop_s, fpr_s, fnr_s = line.split(",")
        scores.append(
            metrics.LocalizationScores(
                iop=float(iop_s) if iop_s else None,
                fpr=float(fpr_s) if fpr_s else None,
                fnr=float(fnr_s),
            )
        )
    fields = parse_config_text((d / "scores.txt").read_text(), origin=str(d / "scores.txt"))
    aggregates, empties = metrics.aggregate_scores(scores)
    return metrics.LocalizationReport(
        scores=scores,
        aggregates=aggregates,
        empty_pred_count=empties,
        accuracy=float(fields["accuracy"]),
        auc=float(fields["auc"]) if fields.get("auc") else None,
    )


# ---------------------------------------------------------------------------
# overlays


def _mask_boundary(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:] & m
    return m & ~interior


def overlay(image: np.ndarray, mask: np.ndarray, bbox=None) -> np.ndarray:
    """Image with the mask outlined and the truth box drawn over it."""
    canvas = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0).copy()
    canvas[_mask_boundary(mask)] = 200.0 / 255.0
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        canvas[y0, x0 : x1 + 1] = 1.0
        canvas[y1, x0 : x1 + 1] = 1.0
        canvas[y0 : y1 + 1, x0] = 1.0
        canvas[y0 : y1 + 1, x1] = 1.0
    return canvas


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    values = _gather_config(args)
    cfg = datagen.SynthConfig(
        image_size=values["image_size"],
        blob_intensity=(values["blob_intensity_low"], values["blob_intensity_high"]),
        blob_radius=(values["blob_radius_low"], values["blob_radius_high"]),
        texture_amplitude=values["texture_amplitude"],
        distractor_count=values["distractor_count"],
        seed=values["seed"],
    )
    samples = datagen.generate(values["n_samples"], cfg)
    fractions = (values["split_train"], values["split_val"], values["split_test"])
    parts = datagen.split(samples, fractions, values["seed"])

    out = Path(args.out) if args.out else _default_out("data", values)
    (out / "images").mkdir(parents=True, exist_ok=True)
    index = 0
    for split, part in zip(SPLITS, parts):
        rows = []
        for sample in part:
            rel = f"images/sample_{index:05d}.pgm"
            datagen.write_pgm(out / rel, sample.image)
            rows.append((rel, sample))
            index += 1
        datagen.write_manifest(out / f"manifest_{split}.tsv", rows)
    (out / "config.txt").write_text(format_config(values))
    counts = ", ".join(f"{s}={len(p)}" for s, p in zip(SPLITS, parts))
    print(f"wrote {index} images to {out} ({counts})")
    return 0


def cmd_train(args) -> int:
    values = _gather_config(args)
    train_set = _load_split(args.data, "train")
    val_set = _load_split(args.data, "val")
    spec = _spec_from_values(values["variant"], values)
    fitted = baselines.fit_method(spec, train_set, val_set, _train_config(values, spec))
    out = Path(args.out) if args.out else _default_out(f"train_{values['variant']}", values)
    _write_run(out, values, fitted)
    ck = fitted.checkpoint
    print(
        f"{spec.method}: epoch {ck.epoch} selected, threshold {fitted.threshold:.2f}, "
        f"val acc {ck.val_accuracy:.3f}, val IoP {ck.val_iop:.3f} -> {out}"
    )
    return 0


def _eval_report(args) -> tuple[baselines.FittedMethod, metrics.LocalizationReport, float]:
    raw_run, fitted = _load_run(args.run)
    # the run's recorded config is the base; file and key=value args override
    values = _gather_config(args, extra_sources=[raw_run])
    samples = _load_split(args.data, args.split)
    threshold = values["threshold"] if values["threshold"] is not None else fitted.threshold
    maps = baselines.localization_maps(
        fitted, samples, batch_size=values["batch_size"], tau=values["tau_train"]
    )
    report = training.evaluate(
        fitted.params,
        samples,
        threshold,
        tau=values["tau_train"],
        classifier_input=fitted.spec.classifier_input,
        batch_size=values["batch_size"],
        maps=maps,
        kde_bandwidth=values["kde_bandwidth"],
        eval_draws=values["eval_draws"],
    )
    return fitted, report, threshold


def cmd_eval(args) -> int:
    fitted, report, threshold = _eval_report(args)
    out = Path(args.out) if args.out else Path(args.run) / f"eval_{args.split}"
    _write_report(out, report, threshold, fitted.spec.method)
    print(metrics.summary_table([(fitted.spec.method, report)]), end="")
    return 0


def cmd_localize(args) -> int:
    raw_run, fitted = _load_run(args.run)
    values = resolve_config(raw_run)
    samples = _load_split(args.data, args.split)
    positives = [s for s in samples if s.bbox is not None][: args.limit]
    if not positives:
        raise ValueError(f"split {args.split!r} has no boxed samples")
    maps = baselines.localization_maps(
        fitted, positives, batch_size=values["batch_size"], tau=values["tau_train"]
    )
    out = Path(args.out) if args.out else Path(args.run) / f"overlays_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    for i, (sample, m) in enumerate(zip(positives, maps)):
        img = overlay(sample.image, m > fitted.threshold, sample.bbox)
        datagen.write_pgm(out / f"overlay_{i:04d}.pgm", img)
    print(f"wrote {len(positives)} overlays to {out}")
    return 0


def cmd_compare(args) -> int:
    values = _gather_config(args)
    train_set = _load_split(args.data, "train")
    val_set = _load_split(args.data, "val")
    test_set = _load_split(args.data, "test")
    specs = [_spec_from_values(m, values) for m in values["methods"]]
    spec0 = specs[0]
    rows = baselines.compare(specs, train_set, val_set, test_set, _train_config(values, spec0))
    out = Path(args.out) if args.out else _default_out("compare", values)
    out.mkdir(parents=True, exist_ok=True)
    for name, report, fitted in rows:
        method_dir = out / f"run_{name}"
        _write_run(method_dir, values, fitted)
        _write_report(method_dir / "eval_test", report, fitted.threshold, name)
    table = metrics.summary_table([(name, report) for name, report, _ in rows])
    (out / "comparison.tsv").write_text(table)
    print(table, end="")
    return 0


def _report_label(eval_dir: Path) -> str:
    result = eval_dir.parent / "result.txt"
    if result.is_file():
        fields = parse_config_text(result.read_text(), origin=str(result))
        if "method" in fields:
            return fields["method"]
    return eval_dir.parent.name or eval_dir.name or str(eval_dir)


def cmd_report(args) -> int:
    rows = [(_report_label(Path(d)), _read_report(d)) for d in args.dirs]
    table = metrics.summary_table(rows)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("set", nargs="*", metavar="key=value", help="config overrides")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="infomask",
        description="weakly supervised localization via masked variational attention",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    g.add_argument("--out", help=f"output directory (default under ${ENV_OUT_ROOT} or ./runs)")
    _add_config_args(g)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one loss variant and pick a checkpoint")
    t.add_argument("--data", required=True, help="directory from gen-data")
    t.add_argument("--out", help="run directory to create")
    _add_config_args(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a trained run on one split")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", help="eval directory (default <run>/eval_<split>)")
    _add_config_args(e)
    e.set_defaults(fn=cmd_eval)

    lo = sub.add_parser("localize", help="write mask-vs-box overlay images")
    lo.add_argument("--run", required=True)
    lo.add_argument("--data", required=True)
    lo.add_argument("--split", choices=SPLITS, default="test")
    lo.add_argument("--out")
    lo.add_argument("--limit", type=int, default=12, help="max overlays to write")
    lo.set_defaults(fn=cmd_localize)

    c = sub.add_parser("compare", help="train and score several methods side by side")
    c.add_argument("--data", required=True)
    c.add_argument("--out")
    _add_config_args(c)
    c.set_defaults(fn=cmd_compare)

    r = sub.add_parser("report", help="re-render summary tables from eval directories")
    r.add_argument("dirs", nargs="+", help="eval directories (containing per_image.csv)")
    r.add_argument("--out", help="also write the table to this file")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
