"""Glue between a trained model and the retrieval protocol."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .data import DatasetManifest, load_sample
from .model import EGSModel
from .retrieval import Direction, GalleryIndex, MetricsReport, evaluate


def load_view(manifest: DatasetManifest, view: str, side: int) -> tuple[np.ndarray, np.ndarray]:
    """All images of one view (paired and unpaired classes) as (ids, (n, 3, side, side))."""
    items = manifest.images(view, include_unpaired=True)
    ids = np.array([cid for cid, _ in items], dtype=np.int64)
    images = np.stack([load_sample(p, cid, view, side).image for cid, p in items]) if items else \
        np.zeros((0, 3, side, side))
    return ids, images


def embed_view(model: EGSModel, manifest: DatasetManifest, view: str, side: int,
               batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    ids, images = load_view(manifest, view, side)
    with nx.precision("f32"):
        return ids, model.embed(images.astype(np.float32), batch_size)


def evaluate_model(model: EGSModel, manifest: DatasetManifest, side: int,
                   direction: Direction | str = Direction.DRONE_TO_SATELLITE) -> MetricsReport:
    direction = Direction(direction)
    q_view, g_view = ("drone", "satellite") if direction is Direction.DRONE_TO_SATELLITE else ("satellite", "drone")
    qids, Q = embed_view(model, manifest, q_view, side)
    gids, G = embed_view(model, manifest, g_view, side)
    return evaluate(Q, qids, GalleryIndex(G, gids, [g_view] * len(gids)), direction)
