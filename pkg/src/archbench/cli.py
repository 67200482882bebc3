"""``archbench`` command-line front end.

Exit codes: 0 success, 2 input or config error, 3 empty ground truth.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from archbench import __version__
from archbench.annot import PKLOT_SIZE, DatasetConfig, annotation_to_yolo, format_yolo_txt, parse_pklot_xml
from archbench.annot import from_yolo_record, parse_yolo_txt, split_dataset
from archbench.catalog.shapes import TensorShape
from archbench.config import load_model_config
from archbench.errors import ArchbenchError, NoGroundTruth
from archbench.graph import CSV_COLUMNS, analyze_model, compare_models, read_comparison_csv
from archbench.metrics import DEFAULT_CONF, DEFAULT_IOU, IoUThresholdSet, evaluate, parse_predictions

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NO_GT = 0, 2, 3
EVAL_COLUMNS = ("Precision", "Recall", "mAP50", "mAP50:95")


class CliError(Exception):
    """Input problem reported to stderr with a specific exit code."""

    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        _write_atomic(Path(output), text)
    else:
        sys.stdout.write(text)


def _threshold(raw: str) -> float:
    value = float(raw)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1], got {raw}")
    return value


def _ratios(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(r) for r in raw.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be comma-separated numbers, got {raw!r}") from None


def _image_size(raw: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in raw.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"image size must look like 1280x720, got {raw!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"image size must be positive, got {raw!r}")
    return w, h


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"{path}: cannot read ({exc.strerror or exc})") from None


def format_metric(value: Optional[float]) -> str:
    """Three decimals with trailing zeros dropped, keeping at least one decimal."""
    if value is None:
        return "-"
    text = f"{value:.3f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


# -- analyze ----------------------------------------------------------------


def _located(path: str, exc: ArchbenchError) -> str:
    line = exc.line
    if line is None and exc.layer is not None:
        try:
            line = load_model_config(path).line_of(exc.layer)
        except ArchbenchError:
            pass
    return f"{path}:{line}: {exc}" if line else f"{path}: {exc}"


def cmd_analyze(args: argparse.Namespace) -> int:
    shape = TensorShape(3, args.imgsz, args.imgsz)
    summaries = []
    for path in args.models:
        if not Path(path).is_file():
            raise CliError(f"{path}: no such model config")
        try:
            summaries.append(analyze_model(path, shape, args.scale))
        except ArchbenchError as exc:
            raise CliError(_located(path, exc)) from None
    _emit(compare_models(summaries).render(args.format), args.output)
    return EXIT_OK


# -- convert ----------------------------------------------------------------


def cmd_convert(args: argparse.Namespace) -> int:
    xml_dir, out_dir = Path(args.xml_dir), Path(args.out_dir)
    if not xml_dir.is_dir():
        raise CliError(f"{xml_dir}: not a directory")
    sources = sorted(xml_dir.glob("*.xml"))
    if not sources:
        raise CliError(f"{xml_dir}: no input files")
    classes = DatasetConfig.load(args.data).occupancy_classes() if args.data else None

    converted, failed = [], []
    for src in sources:
        try:
            ann = parse_pklot_xml(src.read_text(encoding="utf-8"), src.stem, args.image_size, classes)
            text = format_yolo_txt(annotation_to_yolo(ann))
        except (ArchbenchError, UnicodeDecodeError) as exc:
            failed.append({"file": src.name, "error": str(exc)})
            continue
        _write_atomic(out_dir / f"{src.stem}.txt", text)
        converted.append(src.stem)

    manifest = {"schema_version": SCHEMA_VERSION, "converted": converted, "failed": failed}
    _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    for f in failed:
        print(f"archbench: {f['file']}: {f['error']}", file=sys.stderr)
    return EXIT_OK if converted else EXIT_INPUT


# -- split ------------------------------------------------------------------


def _manifest_ids(path: str) -> list[str]:
    text = _read_text(path)
    if path.endswith(".json"):
        try:
            doc = json.loads(text)
            return [str(i) for i in doc["converted"]]
        except (ValueError, KeyError, TypeError):
            raise CliError(f"{path}: not a convert manifest") from None
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_split(args: argparse.Namespace) -> int:
    ids = _manifest_ids(args.manifest)
    split = split_dataset(ids, args.ratios, args.seed)
    out = Path(args.out) if args.out else Path(args.manifest).parent
    for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        _write_atomic(out / f"{name}.txt", "".join(f"{i}\n" for i in part))
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def _load_ground_truth(gt_dir: str, image_size: tuple[int, int]) -> dict:
    root = Path(gt_dir)
    if not root.is_dir():
        raise CliError(f"{gt_dir}: not a directory")
    gts = {}
    for path in sorted(root.glob("*.txt")):
        try:
            records = parse_yolo_txt(path.read_text(encoding="utf-8"))
        except ArchbenchError as exc:
            raise CliError(f"{path}: {exc}") from None
        gts[path.stem] = [from_yolo_record(r, image_size) for r in records]
    return gts


def _eval_row(doc: dict) -> list[str]:
    return [doc["model"]] + [format_metric(doc[c]) for c in EVAL_COLUMNS]


def _render_eval(doc: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("model",) + EVAL_COLUMNS)
        writer.writerow([doc["model"]] + [doc[c] for c in EVAL_COLUMNS])
        return buf.getvalue()
    return _eval_table([doc])


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        dets = parse_predictions(_read_text(args.preds), args.image_size)
    except ArchbenchError as exc:
        raise CliError(f"{args.preds}: {exc}") from None
    gts = _load_ground_truth(args.gt, args.image_size)
    thresholds = IoUThresholdSet.coco() if args.map5095 else IoUThresholdSet.map50()
    name = args.name or Path(args.preds).stem
    try:
        report = evaluate(dets, gts, args.iou, args.conf, thresholds, args.ap_method, name)
    except NoGroundTruth as exc:
        raise CliError(f"{args.gt}: {exc}", EXIT_NO_GT) from None
    doc = report.to_dict()
    if not args.map5095:
        doc["mAP50:95"] = None
    _emit(_render_eval(doc, args.format), args.output)
    return EXIT_OK


# -- report -----------------------------------------------------------------


def _eval_table(docs: Sequence[dict]) -> str:
    lines = ["| Model | " + " | ".join(EVAL_COLUMNS) + " |", "|---|" + "---:|" * len(EVAL_COLUMNS)]
    lines += ["| " + " | ".join(_eval_row(d)) + " |" for d in docs]
    return "\n".join(lines) + "\n"


def _load_eval_json(path: str) -> dict:
    try:
        doc = json.loads(_read_text(path))
    except ValueError:
        raise CliError(f"{path}: not valid JSON") from None
    missing = [k for k in ("model",) + EVAL_COLUMNS if k not in doc] if isinstance(doc, dict) else ["model"]
    if missing or doc.get("schema_version") != SCHEMA_VERSION:
        raise CliError(f"{path}: not an eval report (schema_version {SCHEMA_VERSION}, missing {missing})")
    return doc


def cmd_report(args: argparse.Namespace) -> int:
    if not args.evals:
        raise CliError("report needs at least one eval JSON")
    docs = [_load_eval_json(p) for p in args.evals]
    try:
        rows = read_comparison_csv(_read_text(args.analyze))
    except ArchbenchError as exc:
        raise CliError(f"{args.analyze}: {exc}") from None
    if not rows:
        raise CliError(f"{args.analyze}: comparison table is empty")

    parts = ["# Detection benchmark report", "", "## Accuracy", "", _eval_table(docs), "## Complexity", ""]
    parts.append("| Model | Params (M) | Layers | GFLOPs |\n|---|---:|---:|---:|")
    parts += [f"| {r['model']} | {r['params_m']} | {r['layers']} | {r['gflops']} |" for r in rows]
    _emit("\n".join(parts) + "\n", args.output)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archbench", description="Static detector analysis and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter, layer and FLOP table for model configs")
    p.add_argument("models", nargs="+")
    p.add_argument("--imgsz", type=int, default=640, help="square input extent (default 640)")
    p.add_argument("--format", choices=("csv", "md", "json"), default="csv")
    p.add_argument("--scale", default=None, help="scale key, e.g. n (default: the config's only scale or n)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("convert", help="PKLot XML to YOLO TXT")
    p.add_argument("xml_dir")
    p.add_argument("out_dir")
    p.add_argument("--data", help="data.yaml whose names define the class ids")
    p.add_argument("--image-size", type=_image_size, default=None, help="WxH, default from XML or 1280x720")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("split", help="seeded train/val/test split")
    p.add_argument("manifest", help="id list (one per line) or convert manifest.json")
    p.add_argument("--ratios", type=_ratios, default=(0.7, 0.2, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: next to the manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", help="precision, recall and mAP from predictions")
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True, help="directory of YOLO TXT labels")
    p.add_argument("--iou", type=_threshold, default=DEFAULT_IOU)
    p.add_argument("--conf", type=_threshold, default=DEFAULT_CONF)
    p.add_argument("--map5095", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--ap-method", choices=("interp101", "allpoint"), default="interp101")
    p.add_argument("--image-size", type=_image_size, default=PKLOT_SIZE)
    p.add_argument("--name", help="model name in the report (default: predictions file stem)")
    p.add_argument("--format", choices=("json", "csv", "md"), default="json")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine eval JSONs and an analyze CSV into Markdown")
    p.add_argument("evals", nargs="*")
    p.add_argument("--analyze", required=True, help=f"CSV with columns {','.join(CSV_COLUMNS)}")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"archbench: error: {exc}", file=sys.stderr)
        return exc.code
    except ArchbenchError as exc:
        print(f"archbench: error: {exc}", file=sys.stderr)
        return EXIT_NO_GT if isinstance(exc, NoGroundTruth) else EXIT_INPUT
    except (OSError, ValueError) as exc:
        print(f"archbench: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
