"""Command-line entry point: generate, build-graph, train, evaluate, sweep, predict, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .baselines import VARIANTS
from .dataset import (
    DatasetSplit,
    PoiDataset,
    build_graph,
    dump_pois,
    load_graph,
    save_graph,
    split_dataset,
)
from .experiment import (
    ExperimentError,
    evaluate_baseline,
    evaluate_model,
    predict_adhoc,
    predict_blocks,
    report_bundle,
    sweep,
)
from .geo import road_model_from_dict
from .metrics import render_preferences, render_premiums, render_table, reports_to_json
from .model import load_params, save_params
from .synth import SynthConfig, generate_city
from .trainer import TrainingConfig, TrainingError, train

logger = logging.getLogger("urbanprice")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input: reported with exit code 2."""


# ---------------------------------------------------------------------------
# Manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None
    version: str = __version__

    def add_input(self, path: Path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: Path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, out_dir: Path):
        self.finished = _now()
        path = out_dir / f"manifest-{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _args_digest(args) -> str:
    return _digest({k: v for k, v in vars(args).items() if k not in ("func", "log_level")})


# ---------------------------------------------------------------------------
# Helpers


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what} path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_config(path: str | None, section: str) -> dict:
    """JSON object; a nested ``section`` key wins over top-level fields."""
    if path is None:
        return {}
    p = _existing(path, "config")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    if section in doc:
        doc = doc[section]
        if not isinstance(doc, dict):
            raise UsageError(f"config section {section!r} must be an object")
    return {k: v for k, v in doc.items() if k not in ("synth", "training")}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str, manifest: RunManifest):
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    manifest.add_output(path)


def _training_config(args) -> TrainingConfig:
    cfg = _load_config(args.config, "training")
    overrides = {
        "radius_km": args.radius_km,
        "seed": args.seed,
        "shard_count": args.shards,
        "workers": getattr(args, "workers", None),
        "max_epochs": getattr(args, "max_epochs", None),
        "method": getattr(args, "method", None),
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return TrainingConfig.from_dict(cfg)


def _road_arg(value: str | None) -> dict | None:
    """``manhattan``, ``detour`` or a JSON object such as ``{"kind": "detour", "factor": 1.4}``."""
    if not value:
        return None
    if value in ("manhattan", "detour"):
        return {"kind": value}
    try:
        spec = json.loads(value)
    except json.JSONDecodeError:
        raise UsageError(f"--road-model must be manhattan, detour or a JSON object, got {value!r}") from None
    road_model_from_dict(spec)
    return spec


def _load_dataset(path: str, manifest: RunManifest) -> PoiDataset:
    p = _existing(path, "POI")
    manifest.add_input(p)
    return PoiDataset.load(p)


def _graph_for(args, dataset: PoiDataset, radius_km: float, manifest: RunManifest, road_model=None):
    if getattr(args, "graph", None):
        p = _existing(args.graph, "graph")
        manifest.add_input(p)
        graph = load_graph(p)
        if abs(graph.radius_km - radius_km) > 1e-12:
            raise UsageError(f"graph {p} was built for radius {graph.radius_km} km, not {radius_km} km")
        return graph
    return build_graph(dataset, radius_km, road_model_from_dict(road_model))


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    cfg = _load_config(args.config, "synth")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.radius_km is not None:
        cfg["radius_km"] = args.radius_km
    synth = SynthConfig.from_dict(cfg)
    out = _out_dir(args)
    manifest = RunManifest("generate", _digest(synth.to_dict()), synth.seed)
    records, planted = generate_city(synth)
    pois = out / "pois.jsonl"
    dump_pois(records, pois)
    manifest.add_output(pois)
    snap = out / "planted.json"
    save_params(planted, snap)
    manifest.add_output(snap)
    _write_text(out / "synth_config.json", json.dumps(synth.to_dict(), indent=2, sort_keys=True), manifest)
    manifest.write(out)
    print(f"wrote {len(records)} POIs to {pois} and planted parameters to {snap}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    radius = args.radius_km if args.radius_km is not None else 1.0
    road = _road_arg(args.road_model)
    out = _out_dir(args)
    manifest = RunManifest("build-graph", _digest({"radius_km": radius, "road_model": road}), None)
    dataset = _load_dataset(args.pois, manifest)
    graph = build_graph(dataset, radius, road_model_from_dict(road))
    path = out / "graph.jsonl"
    save_graph(graph, path)
    manifest.add_output(path)
    manifest.write(out)
    counts = graph.mean_counts(dataset)
    print(
        f"radius {radius} km: {counts['covered']} covered blocks, {counts['isolated']} isolated, "
        f"mean {counts['blocks']:.1f} blocks and {counts['facilities']:.1f} facilities per block"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        raise UsageError("resuming an interrupted run is not supported; start a fresh run with a new --out")
    config = _training_config(args)
    out = _out_dir(args)
    manifest = RunManifest("train", config.digest(), config.seed)
    dataset = _load_dataset(args.pois, manifest)
    graph = _graph_for(args, dataset, config.radius_km, manifest, _road_arg(args.road_model))
    log_path = out / "epochs.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:

        def on_epoch(rep):
            log.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")
            log.flush()
            logger.info("epoch %d loss %.6g", rep.epoch, rep.loss)

        result = train(dataset, graph, config, on_epoch=on_epoch)
    manifest.add_output(log_path)
    best, final = out / "model.json", out / "final.json"
    save_params(result.best, best)
    save_params(result.params, final)
    manifest.add_output(best)
    manifest.add_output(final)
    report = evaluate_model(result.best, dataset, graph, result.split)
    _write_text(out / "test_report.json", reports_to_json([report]), manifest)
    _write_text(out / "test_report.txt", render_table([report]), manifest)
    manifest.write(out)
    print(f"trained {len(result.reports)} epochs; best epoch {result.best_epoch}")
    print(render_table([report]))
    return EXIT_OK


def _split_for(dataset: PoiDataset, args) -> DatasetSplit:
    seed = args.split_seed if args.split_seed is not None else (args.seed if args.seed is not None else 0)
    return split_dataset(dataset.priced_block_ids(), seed)


def cmd_evaluate(args) -> int:
    if not args.snapshot and not args.baseline:
        raise UsageError("give --snapshot and/or at least one --baseline")
    out = _out_dir(args)
    manifest = RunManifest("evaluate", _args_digest(args), args.seed)
    dataset = _load_dataset(args.pois, manifest)
    split = _split_for(dataset, args)
    rows = []
    params = None
    if args.snapshot:
        p = _existing(args.snapshot, "snapshot")
        manifest.add_input(p)
        params = load_params(p)
    radius = args.radius_km
    if radius is None:
        radius = float(params.meta.get("radius_km", 1.0)) if params is not None else 1.0
    road = params.meta.get("road_model") if params is not None else None
    graph = _graph_for(args, dataset, radius, manifest, road)
    if params is not None:
        rows.append(evaluate_model(params, dataset, graph, split))
    for tag in args.baseline or ():
        rows.append(evaluate_baseline(tag, dataset, graph, split, radius))
    _write_text(out / "report.json", reports_to_json(rows), manifest)
    table = render_table(rows, title=f"Test split (seed {split.seed}), radius {radius} km")
    _write_text(out / "report.txt", table, manifest)
    manifest.write(out)
    print(table)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _training_config(args)
    try:
        radii = [float(r) for r in args.radii.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--radii must be comma-separated numbers, got {args.radii!r}") from None
    out = _out_dir(args)
    manifest = RunManifest("sweep", _digest({"config": config.digest(), "radii": radii}), config.seed)
    dataset = _load_dataset(args.pois, manifest)
    road = _road_arg(args.road_model)
    result = sweep(dataset, radii, config, road)
    doc = {"best_radius_km": result.best_radius, "rows": [r.to_json() for r in result.rows]}
    _write_text(out / "sweep.json", json.dumps(doc, indent=2, sort_keys=True), manifest)
    _write_text(out / "curve.json", json.dumps(result.curve(), indent=2, sort_keys=True), manifest)
    lines = ["radius_km  val_MAE      test_MAE     test_RMSE    test_R²   blocks/blk  facilities/blk"]
    for r in result.rows:
        lines.append(
            f"{r.radius_km:9.2f}  {r.validation.mae:11.2f}  {r.test.mae:11.2f}  {r.test.rmse:11.2f}  "
            f"{r.test.r2:8.4f}  {r.mean_blocks:10.1f}  {r.mean_facilities:14.1f}"
        )
    lines.append(f"best radius by validation MAE: {result.best_radius} km")
    _write_text(out / "curve.txt", "\n".join(lines), manifest)
    manifest.write(out)
    print("\n".join(lines))
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.block and not args.blocks_json:
        raise UsageError("give --block ids and/or --blocks-json with ad-hoc blocks")
    out = _out_dir(args)
    manifest = RunManifest("predict", _args_digest(args), args.seed)
    snap = _existing(args.snapshot, "snapshot")
    manifest.add_input(snap)
    params = load_params(snap)
    dataset = _load_dataset(args.pois, manifest)
    radius = args.radius_km if args.radius_km is not None else float(params.meta.get("radius_km", 1.0))
    preds = []
    if args.block:
        graph = _graph_for(args, dataset, radius, manifest, params.meta.get("road_model"))
        preds += predict_blocks(params, dataset, graph, args.block, args.top)
    if args.blocks_json:
        p = _existing(args.blocks_json, "ad-hoc blocks")
        manifest.add_input(p)
        try:
            blocks = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p} is not valid JSON: {exc.msg}") from None
        if isinstance(blocks, dict):
            blocks = [blocks]
        preds += predict_adhoc(params, dataset, blocks, radius, top=args.top)
    _write_text(out / "predictions.json", json.dumps([x.to_json() for x in preds], indent=2), manifest)
    lines = []
    for x in preds:
        if x.status != "ok":
            lines.append(f"{x.block_id}: {x.status} (no priced neighbour within {radius} km)")
            continue
        lines.append(f"{x.block_id}: {x.price:,.2f}  S={x.scale:.4f}")
        for c in x.contributions:
            lines.append(f"    {c['id']:<12} F={c['weight']:.4f}  w={c['value']:,.0f}  S*F*w={c['term']:,.2f}")
    _write_text(out / "predictions.txt", "\n".join(lines), manifest)
    manifest.write(out)
    print("\n".join(lines))
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    manifest = RunManifest("report", _args_digest(args), args.seed)
    snap = _existing(args.snapshot, "snapshot")
    manifest.add_input(snap)
    params = load_params(snap)
    dataset = _load_dataset(args.pois, manifest)
    radius = args.radius_km if args.radius_km is not None else float(params.meta.get("radius_km", 1.0))
    graph = _graph_for(args, dataset, radius, manifest, params.meta.get("road_model"))
    bundle = report_bundle(params, dataset, graph, args.min_observers)
    _write_text(out / "report.json", json.dumps(bundle, indent=2, sort_keys=True), manifest)
    text = "\n\n".join(
        [
            render_preferences(bundle["attribute_preferences"], "Attribute preferences (L1-normalised |theta|)"),
            render_preferences(bundle["distance_preferences"], "Distance preferences (L1-normalised |phi|)"),
            render_premiums(bundle["facilities"]),
        ]
    )
    _write_text(out / "report.txt", text, manifest)
    manifest.write(out)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--radius-km", type=float, default=None, help="influence radius in km")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--shards", type=int, default=None, help="map-phase shard count")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="urbanprice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic city with planted parameters")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-graph", parents=[common], help="precompute neighbour sets")
    p.add_argument("--pois", required=True)
    p.add_argument("--road-model", default=None, help="manhattan, detour (default) or a JSON road model")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common], help="learn prices, theta and phi")
    p.add_argument("--pois", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--road-model", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--method", default=None, choices=["gauss_newton", "gradient"])
    p.add_argument("--resume", action="store_true", help="not supported; fails with a message")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="test-split metrics for a snapshot or baselines")
    p.add_argument("--pois", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--snapshot", default=None)
    p.add_argument("--baseline", action="append", choices=list(VARIANTS))
    p.add_argument("--split-seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="retrain at several radii")
    p.add_argument("--pois", required=True)
    p.add_argument("--radii", default="0.5,1.0,3.0,5.0")
    p.add_argument("--road-model", default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--method", default=None, choices=["gauss_newton", "gradient"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", parents=[common], help="price blocks with a contribution breakdown")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--pois", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--block", action="append", help="block id from the POI file (repeatable)")
    p.add_argument("--blocks-json", default=None, help='JSON list of {"id", "lat", "lon", "attributes"}')
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="preference tables and facility rankings")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--pois", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--min-observers", type=int, default=1, help="facilities seen by fewer priced blocks are left out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, ExperimentError) as exc:
        # every validation error in the package derives from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
