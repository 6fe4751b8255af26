"""Replay a dataset through an Atlas, sampling metrics after every scan."""

from __future__ import annotations

from .atlas import Atlas, Metrics
from .config import AtlasConfig
from .dataset import Dataset


def replay(dataset: Dataset, config: AtlasConfig, event_sink=None, progress=None):
    """Returns ``(atlas, rows)``; one Metrics row per node, taken after the
    node and any closures arriving with it have been processed."""
    atlas = Atlas(config, event_sink)
    for (a, b), block in dataset.cross.items():
        atlas.set_cross_covariance(a, b, block)
    rows: list[Metrics] = []
    for rec in dataset.records():
        atlas.ingest_node(rec.node, rec.scan)
        for edge in rec.loops:
            atlas.on_loop_closure(edge)
        rows.append(atlas.metrics())
        if progress is not None:
            progress(rows[-1])
    return atlas, rows
