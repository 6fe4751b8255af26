"""Command-line front end: ``generate``, ``run`` and ``mesh``.

Set ``ELASTIC_SUBMAPS_LOG`` (e.g. ``INFO`` or ``DEBUG``) for log output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import AtlasConfig, ConfigError
from .dataset import DatasetError, load_dataset
from .mesh import extract_mesh, write_ply
from .occupancy import OccupancyGrid
from .pipeline import replay
from .se3 import PoseSE3
from .synth import (
    PRESETS,
    EnvironmentSpec,
    EnvironmentSpecError,
    DegeneratePoseError,
    NoiseModel,
    ScanPattern,
    generate_mission,
)

log = logging.getLogger("elastic_submaps")

METRICS_COLUMNS = ("scan_index", "submap_count", "memory_bytes", "fusions", "rejections")


class CliError(Exception):
    pass


@dataclass
class RunReport:
    rows: list  # dicts keyed by METRICS_COLUMNS
    submaps: list
    config: dict
    mode: str

    def __post_init__(self):
        idx = [r["scan_index"] for r in self.rows]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("metrics rows must have strictly increasing scan indices")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in METRICS_COLUMNS])
    return buf.getvalue()


# -- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec:
        try:
            spec = json.loads(Path(args.spec).read_text())
            env = EnvironmentSpec.from_json(spec["env"])
            waypoints = np.asarray(spec["waypoints"], dtype=float).reshape(-1, 3)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"invalid spec file {args.spec}: {exc}") from None
    else:
        preset = PRESETS[args.preset](args.laps)
        env, waypoints = preset.env, preset.waypoints
    pattern = ScanPattern(args.beams, args.samples, args.fov, args.max_range)
    noise = NoiseModel(
        odometry_std=tuple(args.odometry_noise),
        range_std=args.range_noise,
        loop_correction=not args.no_loop_correction,
        correction_factor=args.correction_factor,
    )
    mission = generate_mission(env, waypoints, args.node_spacing, pattern, noise,
                               args.loop_radius, args.seed, out_dir=args.out)
    print(f"wrote {len(mission.nodes)} nodes and {len(mission.loops)} loop closures to {args.out}")
    return 0


# -- run --------------------------------------------------------------------

def _save_submap(path: Path, submap) -> None:
    g = submap.grid
    np.savez(path, resolution=g.resolution, packed_keys=g.packed_keys, values=g.values,
             quaternion=submap.root_pose.quaternion, translation=submap.root_pose.translation,
             root_node_id=submap.root_node_id, log_odds=np.array(list(asdict(g.params).values())))


def _load_submap(path: Path):
    from .occupancy import LogOddsParams

    with np.load(path) as z:
        params = LogOddsParams(*(float(v) for v in z["log_odds"]))
        grid = OccupancyGrid.from_arrays(float(z["resolution"]), z["packed_keys"], z["values"], params)
        pose = PoseSE3(z["quaternion"], z["translation"])
    return grid, pose


def cmd_run(args) -> int:
    try:
        base = AtlasConfig.load(args.config) if args.config else AtlasConfig()
        config = base.for_mode(args.mode)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    (out / "submaps").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(parents=True, exist_ok=True)

    events_tmp = out / "events.jsonl.tmp"
    with events_tmp.open("w") as fh:
        def sink(record):
            fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")

        def progress(m):
            log.info("scan %d: %d submaps, %d bytes", m.scan_index, m.submap_count, m.total_memory_bytes)

        atlas, rows = replay(dataset, config, sink, progress)
    os.replace(events_tmp, out / "events.jsonl")

    row_dicts = [
        {"scan_index": m.scan_index, "submap_count": m.submap_count, "memory_bytes": m.total_memory_bytes,
         "fusions": m.fusion_events, "rejections": m.rejection_events}
        for m in rows
    ]
    for old in (out / "submaps").glob("*.npz"):
        old.unlink()
    for old in (out / "meshes").glob("*.ply"):
        old.unlink()
    for s in atlas.submaps:
        _save_submap(out / "submaps" / f"{s.id}.npz", s)
        if not args.no_mesh:
            write_ply(out / "meshes" / f"submap_{s.id}.ply", extract_mesh(s.grid), f"submap {s.id}")
    report = RunReport(row_dicts, atlas.submap_summaries(), config.to_dict(), args.mode)
    _write_atomic(out / "config.txt", config.to_text())
    _write_atomic(out / "report.json", report.to_json())
    _write_atomic(out / "metrics.csv", metrics_csv(row_dicts))
    last = rows[-1] if rows else None
    if last:
        print(f"{args.mode}: {last.submap_count} submaps, {last.total_memory_bytes} bytes, "
              f"{last.fusion_events} fusions, {last.rejection_events} rejections")
    else:
        print(f"{args.mode}: empty dataset")
    return 0


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


# -- mesh -------------------------------------------------------------------

def cmd_mesh(args) -> int:
    run = Path(args.run_dir)
    files = {int(p.stem): p for p in (run / "submaps").glob("*.npz")} if (run / "submaps").is_dir() else {}
    if not files:
        raise CliError(f"no run output under {run}")
    if args.submap == "all":
        ids = sorted(files)
    else:
        try:
            ids = [int(args.submap)]
        except ValueError:
            raise CliError(f"submap must be an integer id or 'all', got {args.submap!r}") from None
        if ids[0] not in files:
            raise CliError(f"unknown submap id {ids[0]} (have {sorted(files)})")
    out = Path(args.out) if args.out else run / "meshes"
    out.mkdir(parents=True, exist_ok=True)
    for i in ids:
        grid, _ = _load_submap(files[i])
        write_ply(out / f"submap_{i}.ply", extract_mesh(grid), f"submap {i}")
    print(f"wrote {len(ids)} mesh file(s) to {out}")
    return 0


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastic-submaps", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a room-network dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS), default="small-network")
    src.add_argument("--spec", help='JSON file {"env": <environment>, "waypoints": [[x, y, z], ...]}')
    g.add_argument("--laps", type=int, default=3, help="laps around a preset (default 3)")
    g.add_argument("--out", required=True, help="dataset directory to write")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--node-spacing", type=float, default=2.0, help="metres between pose-graph nodes")
    g.add_argument("--loop-radius", type=float, default=0.4, help="loop-closure proximity radius (m)")
    g.add_argument("--beams", type=int, default=32, help="vertical beam count")
    g.add_argument("--samples", type=int, default=256, help="horizontal samples per revolution")
    g.add_argument("--fov", type=float, default=90.0, help="vertical field of view (deg)")
    g.add_argument("--max-range", type=float, default=50.0)
    g.add_argument("--odometry-noise", type=float, nargs=6, default=list(NoiseModel().odometry_std),
                   metavar=("RX", "RY", "RZ", "TX", "TY", "TZ"), help="per-step twist std-devs")
    g.add_argument("--range-noise", type=float, default=NoiseModel().range_std)
    g.add_argument("--correction-factor", type=float, default=NoiseModel().correction_factor,
                   help="covariance shrink factor applied at loop closures")
    g.add_argument("--no-loop-correction", action="store_true")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="replay a dataset through the submap atlas")
    r.add_argument("dataset")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", help="flat 'key = value' config file")
    r.add_argument("--mode", choices=("proposed", "baseline"), default="proposed")
    r.add_argument("--no-mesh", action="store_true", help="skip per-submap mesh export")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mesh", help="export meshes from a run directory")
    m.add_argument("run_dir")
    m.add_argument("--submap", default="all", help="submap id or 'all'")
    m.add_argument("--out", help="directory for .ply files (default <run_dir>/meshes)")
    m.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    level = os.environ.get("ELASTIC_SUBMAPS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, EnvironmentSpecError, DegeneratePoseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
