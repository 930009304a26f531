from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .bundle import create_bundle, verify_bundle
from .cloudio import PointCloud, Space, normalize
from .config import apply_overrides, get_settings, load_run_config, override_model, resolved_config_json
from .detplot import render_det_svg
from .errors import ConfigError, DatasetError, GradientCheckError, ParseError, VoxatnError
from .padeval import (
    ScoreSet,
    average_line,
    evaluate,
    format_report_table,
    misclassified,
    read_det_csv,
    report_row,
    split_protocol,
    write_det_csv,
)
from .schemas import FilterVariant, RunConfig
from .synthface import dataset_from_config, export_dataset, read_manifest
from .tengine.gradcheck import run_layer_checks
from .voxatnnet import (
    build_model,
    load_checkpoint,
    model_gradient_check,
    model_summary,
    save_checkpoint,
    score_clouds,
    train,
)

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = (FilterVariant.all_3x3, FilterVariant.all_5x5, FilterVariant.all_7x7, FilterVariant.paper_default)
GRADCHECK_RESOLUTION = 16
U64_MAX = 2**64 - 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {value}")
    return value


# --- shared plumbing ---


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    return apply_overrides(cfg, seed=args.seed, resolution=args.resolution, deterministic=args.deterministic)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(get_settings().artifacts_dir) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: RunConfig, out: Path) -> str:
    text = resolved_config_json(cfg)
    (out / "resolved_config.json").write_text(text, encoding="utf-8")
    logger.info(f"Resolved config: path={out / 'resolved_config.json'}")
    logger.debug(text)
    return text


def _threads(cfg: RunConfig) -> int:
    return 1 if cfg.train.deterministic else get_settings().threads


def _samples(cfg: RunConfig, manifest: Optional[str]) -> List[PointCloud]:
    clouds = read_manifest(manifest) if manifest else dataset_from_config(cfg.data)
    return [c if c.space is Space.normalized else normalize(c) for c in clouds]


def _loss_csv(history: Sequence[float]) -> str:
    return "epoch,loss\n" + "".join(f"{i},{loss!r}\n" for i, loss in enumerate(history))


def _score_set(model, clouds: Sequence[PointCloud], threads: int) -> ScoreSet:
    if not clouds:
        raise DatasetError("test split is empty")
    scores = score_clouds(model, clouds, threads=threads)
    return ScoreSet.from_arrays(
        scores, [c.label for c in clouds], [c.identity for c in clouds], [c.source for c in clouds]
    )


def _misclassified_csv(scores: ScoreSet, threshold: float) -> str:
    rows = "".join(f"{e.source},{e.label.value},{e.identity},{e.score!r}\n" for e in misclassified(scores, threshold))
    return "source,class,identity,score\n" + rows


# --- commands ---


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _write_resolved(cfg, out)
    clouds = dataset_from_config(cfg.data)
    manifest = export_dataset(clouds, out)
    print(f"wrote {len(clouds)} clouds and {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    config_text = _write_resolved(cfg, out)
    train_set, _test = split_protocol(_samples(cfg, args.manifest), cfg.protocol)

    model = build_model(cfg.model)
    result = train(model, train_set, cfg.train)
    files = {
        "model.vxm": save_checkpoint(result.model),
        "loss_history.csv": _loss_csv(result.loss_history).encode("utf-8"),
        "summary.txt": model_summary(result.model).encode("utf-8"),
        "resolved_config.json": config_text.encode("utf-8"),
    }
    for name, data in files.items():
        (out / name).write_bytes(data)
    _zip, bundle_hash = create_bundle(out, "train", cfg.train.rng_seed, cfg.model_dump(mode="json"), files)
    print(files["summary.txt"].decode("utf-8"), end="")
    print(f"final loss: {result.loss_history[-1]:.6f}")
    print(f"bundle: {bundle_hash}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    config_text = _write_resolved(cfg, out)
    model = load_checkpoint(Path(args.checkpoint).read_bytes(), cfg.model)
    _train, test_set = split_protocol(_samples(cfg, args.manifest), cfg.protocol)
    scores = _score_set(model, test_set, _threads(cfg))
    report = evaluate(scores)

    table = format_report_table([report_row(cfg.protocol, report)])
    files = {
        "report.txt": table.encode("utf-8"),
        "det.csv": write_det_csv(report.det_points).encode("utf-8"),
        "misclassified.csv": _misclassified_csv(scores, report.threshold_at_eer).encode("utf-8"),
        "resolved_config.json": config_text.encode("utf-8"),
    }
    for name, data in files.items():
        (out / name).write_bytes(data)
    _zip, bundle_hash = create_bundle(out, "eval", cfg.protocol.seed, cfg.model_dump(mode="json"), files)
    print(table, end="")
    print(f"threshold at D-EER: {report.threshold_at_eer!r}")
    print(f"bundle: {bundle_hash}")
    return 0


def _run_variant(cfg: RunConfig, variant: FilterVariant, attention: bool, train_set, test_set) -> Tuple[str, int, object]:
    model_cfg = override_model(cfg.model, filter_variant=variant, attention_enabled=attention)
    model = build_model(model_cfg)
    train(model, train_set, cfg.train)
    report = evaluate(_score_set(model, test_set, 1))
    label = f"{variant.value}{'' if attention else '-noatt'}"
    logger.info(f"Ablation variant done: variant={label}, parameters={model.parameter_count()}, d_eer={report.d_eer:.4f}")
    return label, model.parameter_count(), report


def format_ablation_table(rows: Sequence[Tuple[str, int, object]]) -> str:
    header = f"{'Variant':<22} {'Parameters':>12} {'D-EER (%)':>10} {'BPCER@APCER=10%':>16} {'BPCER@APCER=5%':>15}"
    lines = [header, "-" * len(header)]
    for label, params, report in rows:
        lines.append(
            f"{label:<22} {params:>12} {report.d_eer:>10.2f} "
            f"{report.bpcer_at_apcer_10:>16.2f} {report.bpcer_at_apcer_5:>15.2f}"
        )
    if rows:
        lines.append(average_line(report for _label, _params, report in rows))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _write_resolved(cfg, out)
    train_set, test_set = split_protocol(_samples(cfg, args.manifest), cfg.protocol)
    jobs = [(v, att) for v in ABLATION_VARIANTS for att in (True, False)]

    threads = _threads(cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            rows = list(pool.map(lambda job: _run_variant(cfg, job[0], job[1], train_set, test_set), jobs))
    else:
        rows = [_run_variant(cfg, v, att, train_set, test_set) for v, att in jobs]

    for label, _params, report in rows:
        (out / f"det_{label}.csv").write_text(write_det_csv(report.det_points), encoding="utf-8")
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _write_resolved(cfg, out)
    seed = cfg.model.init_seed
    reports = run_layer_checks(seed=seed)
    model_cfg = override_model(cfg.model, input_resolution=GRADCHECK_RESOLUTION)
    reports.append(model_gradient_check(model_cfg, seed=seed))

    lines = [line for r in reports for line in r.lines()]
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    failed = [r.label for r in reports if not r.passed]
    if failed:
        raise GradientCheckError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_det_plot(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _write_resolved(cfg, out)
    curves = []
    for path in args.csv:
        p = Path(path)
        if not p.exists():
            raise DatasetError(f"DET CSV not found: {p}")
        try:
            points = read_det_csv(p.read_text(encoding="utf-8"))
        except ParseError as e:
            raise ParseError(f"{p}: {e}") from e
        curves.append((p.stem, points))
    svg_path = Path(args.svg) if args.svg else out / "det.svg"
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.write_bytes(render_det_svg(curves))
    logger.info(f"DET plot written: path={svg_path}, curves={len(curves)}")
    print(f"wrote {svg_path}")
    return 0


def cmd_verify(args) -> int:
    cfg = _resolve(args)
    _write_resolved(cfg, _out_dir(args))
    result = verify_bundle(args.bundle)
    print(f"bundle_hash: {result.bundle_hash}")
    for err in result.errors:
        print(f"error: {err}")
    if not result.ok:
        raise DatasetError(f"bundle verification failed with {len(result.errors)} error(s)")
    print("ok")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "det-plot": cmd_det_plot,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults when omitted)")
    common.add_argument("--out", help="output directory (default: $VOXATN_ARTIFACTS_DIR/<command>)")
    common.add_argument("--seed", type=_u64, help="override every seed in the config")
    common.add_argument("--resolution", type=int, help="override model.input_resolution")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible run")

    parser = _Parser(prog="voxatn", description="Voxel-based 3D face presentation attack detection")
    parser.add_argument("--version", action="version", version=f"voxatn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    for name, helptext in (("train", "train on the protocol's train split"), ("ablate", "filter-size and attention ablation")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest", help="dataset manifest.csv (synthesized in memory when omitted)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the protocol's test split")
    p.add_argument("--manifest", help="dataset manifest.csv (synthesized in memory when omitted)")
    p.add_argument("--checkpoint", required=True, help="VXM1 checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p = sub.add_parser("det-plot", parents=[common], help="render DET CSVs to SVG")
    p.add_argument("--csv", nargs="+", required=True, help="one or more DET CSV files")
    p.add_argument("--svg", help="output SVG path (default: <out>/det.svg)")
    p = sub.add_parser("verify", parents=[common], help="verify a run.zip bundle")
    p.add_argument("--bundle", required=True, help="run.zip to verify")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging(get_settings().log_level)
    try:
        args = build_parser().parse_args(argv)
        logger.info(f"Command started: command={args.command}, config={args.config}, seed={args.seed}")
        return COMMANDS[args.command](args)
    except VoxatnError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
