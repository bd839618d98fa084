"""Command-line surface: extract, train, detect, discover, cluster, eval,
report.

Every subcommand reads a run configuration JSON via --config and writes
its artifacts under the output directory.  Exit codes: 0 success, 1 usage
error, 2 data error.  Set PATTERNMINE_LOG=debug|info|warning for logging
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .discovery import (DiscoveryConfig, build_graph, clusters_to_json,
                        discover_all_pairs, extract_clusters, pairs_from_json,
                        pairs_to_json)
from .evaluation import EvalConfig, average_precision, detection_map, \
    read_annotations
from .features import (FormatError, ImageManifestEntry, builtin_extract,
                       read_manifest, read_pyramid_file, write_manifest,
                       write_pyramid_file)
from .geometry import ScoringConfig
from .matching import extract_detect_query, one_shot_detect
from .mining import MiningConfig
from .report import emit_report
from .training import (LossConfig, adapt_pyramid, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("patternmine.cli")

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Run configuration, deserialized from the --config JSON."""

    manifest: str
    out_dir: str
    seed: int = 0
    jobs: int = 1
    adapter: str | None = None          # optional checkpoint to apply
    annotations: str | None = None      # for `eval`
    pairs: str | None = None            # for `cluster` / `report`
    clusters: str | None = None         # for `report`
    rounds: int = 50
    lr: float = 1e-5
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"config is not valid JSON: {path}: {exc}")
        if "manifest" not in raw or "out_dir" not in raw:
            raise UsageError("config must set 'manifest' and 'out_dir'")
        kwargs = {k: raw[k] for k in
                  ("manifest", "out_dir", "seed", "jobs", "adapter",
                   "annotations", "pairs", "clusters", "rounds", "lr")
                  if k in raw}
        try:
            scoring = ScoringConfig(**raw.get("scoring", {}))
            disc_raw = dict(raw.get("discovery", {}))
            kwargs["mining"] = MiningConfig(**raw.get("mining", {}))
            kwargs["loss"] = LossConfig(**raw.get("loss", {}))
            kwargs["scoring"] = scoring
            kwargs["discovery"] = DiscoveryConfig(scoring=scoring, **disc_raw)
            kwargs["eval"] = EvalConfig(**raw.get("eval", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad config values: {exc}")
        return cls(**kwargs)


def _load_pyramids(cfg: RunConfig):
    try:
        entries = read_manifest(cfg.manifest)
    except FileNotFoundError:
        raise DataError(f"manifest file not found: {cfg.manifest}")
    except (FormatError, json.JSONDecodeError) as exc:
        raise DataError(f"bad manifest {cfg.manifest}: {exc}")
    pyramids = {}
    for e in entries:
        try:
            pyramids[e.image_id] = read_pyramid_file(e.pyramid_path,
                                                     image_id=e.image_id)
        except FileNotFoundError:
            raise DataError(f"pyramid file not found: {e.pyramid_path}")
        except FormatError as exc:
            raise DataError(f"bad pyramid {e.pyramid_path}: {exc}")
    if cfg.adapter:
        try:
            params, _ = load_checkpoint(cfg.adapter)
        except FileNotFoundError:
            raise DataError(f"adapter checkpoint not found: {cfg.adapter}")
        pyramids = {iid: adapt_pyramid(params, p)
                    for iid, p in pyramids.items()}
    return entries, pyramids


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)


def cmd_extract(cfg: RunConfig, args) -> int:
    try:
        entries = read_manifest(cfg.manifest)
    except FileNotFoundError:
        raise DataError(f"manifest file not found: {cfg.manifest}")
    out = _out(cfg)
    pyr_dir = out / "pyramids"
    pyr_dir.mkdir(exist_ok=True)
    updated = []
    for e in entries:
        try:
            img = Image.open(e.source_path)
        except OSError:
            raise DataError(f"image not readable: {e.source_path}")
        pyr = builtin_extract(img, image_id=e.image_id)
        dest = pyr_dir / f"{e.image_id}.amfp"
        write_pyramid_file(dest, pyr)
        updated.append(ImageManifestEntry(
            image_id=e.image_id, source_path=e.source_path,
            pixel_width=img.width, pixel_height=img.height,
            pyramid_path=str(dest)))
    write_manifest(out / "manifest.jsonl", updated)
    log.info("extracted %d pyramids", len(updated))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    _, pyramids = _load_pyramids(cfg)
    out = _out(cfg)
    params, history = train(
        sorted(pyramids.values(), key=lambda p: p.image_id),
        cfg.mining, cfg.loss, rounds=cfg.rounds, seed=cfg.seed, lr=cfg.lr)
    from .training import AdamState
    save_checkpoint(out / "adapter.npz", params,
                    AdamState.for_params(params, lr=cfg.lr))
    history.write_csv(out / "history.csv")
    return 0


def _parse_query(spec: str):
    try:
        image_id, coords = spec.split(":", 1)
        x, y, w, h = (float(v) for v in coords.split(","))
    except ValueError:
        raise UsageError(
            f"query must look like image_id:x,y,w,h (got {spec!r})")
    return image_id, (x, y, w, h)


def cmd_detect(cfg: RunConfig, args) -> int:
    if not args.query:
        raise UsageError("detect requires --query image_id:x,y,w,h")
    image_id, box = _parse_query(args.query)
    entries, pyramids = _load_pyramids(cfg)
    by_id = {e.image_id: e for e in entries}
    if image_id not in by_id:
        raise DataError(f"query image_id not in manifest: {image_id}")
    try:
        img = Image.open(by_id[image_id].source_path)
    except OSError:
        raise DataError(f"image not readable: {by_id[image_id].source_path}")
    q = extract_detect_query(img, box)
    q = type(q)(source_image_id=image_id, cells=q.cells, origin=q.origin)
    targets = [pyramids[i] for i in sorted(pyramids) if i != image_id]
    dets = one_shot_detect(q, targets)
    payload = [{"image_id": d.image_id, "box": list(d.box),
                "score": d.score, "scale_index": d.scale_index}
               for d in dets]
    _write_json(_out(cfg) / "detections.json", payload)
    return 0


def cmd_discover(cfg: RunConfig, args) -> int:
    _, pyramids = _load_pyramids(cfg)
    pairs = discover_all_pairs(
        sorted(pyramids.values(), key=lambda p: p.image_id),
        cfg.discovery, seed=cfg.seed)
    _write_json(_out(cfg) / "pairs.json", pairs_to_json(pairs))
    return 0


def cmd_cluster(cfg: RunConfig, args) -> int:
    pairs_path = Path(cfg.pairs or (Path(cfg.out_dir) / "pairs.json"))
    try:
        pairs = pairs_from_json(json.loads(pairs_path.read_text()))
    except FileNotFoundError:
        raise DataError(f"pairs file not found: {pairs_path}")
    graph = build_graph(pairs, cfg.discovery.iou_threshold)
    clusters = extract_clusters(graph, pairs,
                                min_size=cfg.discovery.min_cluster_size)
    _write_json(_out(cfg) / "clusters.json", clusters_to_json(clusters))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.annotations:
        raise UsageError("eval requires 'annotations' in the config")
    try:
        annotations = read_annotations(cfg.annotations)
    except FileNotFoundError:
        raise DataError(f"annotations file not found: {cfg.annotations}")
    entries, pyramids = _load_pyramids(cfg)
    by_id = {e.image_id: e for e in entries}
    rows = []
    for qi, query in enumerate(annotations):
        if query.image_id not in by_id:
            raise DataError(f"annotated image not in manifest: "
                            f"{query.image_id}")
        try:
            img = Image.open(by_id[query.image_id].source_path)
        except OSError:
            raise DataError("image not readable: "
                            + by_id[query.image_id].source_path)
        q = extract_detect_query(img, query.box)
        dets = one_shot_detect(q, [pyramids[i] for i in sorted(pyramids)])
        gt = [(a.image_id, a.box) for a in annotations
              if a.pattern_id == query.pattern_id and a is not query]
        ap = average_precision([(d.image_id, d.box, d.score) for d in dets],
                               gt, det_iou=cfg.eval.det_iou)
        rows.append((qi, query.pattern_id, ap))
    out = _out(cfg)
    with open(out / "eval.csv", "w") as fh:
        fh.write("query,class,AP\n")
        for qi, cls, ap in rows:
            fh.write(f"{qi},{cls},{'' if ap is None else ap}\n")
    scored = [(cls, ap) for _, cls, ap in rows if ap is not None]
    summary = {"n_queries": len(rows),
               "detection_map": detection_map(scored) if scored else None}
    _write_json(out / "summary.json", summary)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    clusters_path = Path(cfg.clusters
                         or (Path(cfg.out_dir) / "clusters.json"))
    try:
        clusters = json.loads(clusters_path.read_text())
    except FileNotFoundError:
        raise DataError(f"clusters file not found: {clusters_path}")
    try:
        entries = read_manifest(cfg.manifest)
    except FileNotFoundError:
        raise DataError(f"manifest file not found: {cfg.manifest}")
    emit_report(clusters, entries, Path(cfg.out_dir) / "report")
    return 0


_COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "detect": cmd_detect,
    "discover": cmd_discover,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="patternmine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "detect":
            p.add_argument("--query", default=None,
                           help="image_id:x,y,w,h (pixels)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("PATTERNMINE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def cli(argv: list[str]) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.out is not None:
            cfg.out_dir = args.out
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
