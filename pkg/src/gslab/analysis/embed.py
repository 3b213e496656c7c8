"""Embedding export for visual inspection."""

from __future__ import annotations

import numpy as np

from gslab import augment as A
from gslab.analysis.report import sample_rows, write_embeddings_csv
from gslab.data import Dataset
from gslab.numerics import checkpoint
from gslab.numerics.resnet import MicroResNet, extract


def penultimate(model: MicroResNet) -> str:
    """Name of the representation the classifier reads (or would read)."""
    if model.config.classifier_input == "embedding" and "triplet.w" in model.params:
        return "embedding"
    return "features"


def export_embeddings(model_or_checkpoint, ds: Dataset, sample_n: int, seed: int = 0, path=None,
                      geometry: A.Geometry = A.DESK_GEOMETRY):
    """Sample ``sample_n`` items, embed them under the evaluation pipeline and
    return ``(ids, labels, values)``; also written as CSV when ``path`` is set."""
    model = model_or_checkpoint
    if not isinstance(model, MicroResNet):
        model, _ = checkpoint.load(model_or_checkpoint)
    pos = sample_rows(len(ds), sample_n, seed)
    order = np.argsort(ds.ids[pos], kind="stable")
    pos = pos[order]
    side = model.config.input_side
    pipeline = A.eval_pipeline(geometry, side if side != geometry.crop_side else None)
    x = pipeline.apply_batch(ds.images, pos, 0, id_map=ds.ids)
    values = extract(model, x, penultimate(model))
    ids, labels = ds.ids[pos], ds.labels[pos]
    if path is not None:
        write_embeddings_csv(path, ids, labels, values)
    return ids, labels, values
