"""Slide-level scoring by Monte-Carlo bag sampling and patch-level heatmaps.

A slide's score distribution is estimated by repeatedly sampling bags with
replacement, running the model on each, and averaging the class
probabilities. The heatmap reuses the same sampling: every patch in a
sampled bag receives the bag's positivity probability weighted by that
patch's attention, and each location is finalized as the mean of its
accumulated contributions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .embeddings import EmbeddingStore
from .errors import DimensionMismatchError
from .model import MILParams, forward
from .numerics import RngStream
from .slides import SlideImage
from .training import sample_bag

DEFAULT_N_SAMPLES = 1000
POSITIVE_CLASSES = (2, 3)  # HER2-positive scores


@dataclass
class SlideScore:
    """Monte-Carlo estimate of a slide's class distribution."""

    slide_id: str
    probs: np.ndarray  # (C,) mean over sampled bags
    predicted: int
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "probs": [float(p) for p in self.probs],
            "predicted": int(self.predicted),
            "n_samples": int(self.n_samples),
            "seed": int(self.seed),
        }


def _check_model_store(params: MILParams, store: EmbeddingStore) -> None:
    if store.dim != params.embed_dim:
        raise DimensionMismatchError(
            f"dim mismatch: checkpoint expects embeddings of dim "
            f"{params.embed_dim}, store '{store.slide_id}' has dim {store.dim}")


def score_slide(params: MILParams, store: EmbeddingStore, n_samples: int,
                bag_size: int, seed: int) -> SlideScore:
    """Mean class probabilities over n_samples bags; argmax prediction with
    ties broken toward the lower score."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    _check_model_store(params, store)
    total = np.zeros(params.n_classes)
    for i in range(n_samples):
        bag = sample_bag(store, 0, bag_size, RngStream(seed, i))
        total += forward(params, bag).probs
    mean = total / n_samples
    return SlideScore(slide_id=store.slide_id, probs=mean,
                      predicted=int(np.argmax(mean)), n_samples=n_samples,
                      seed=seed)


@dataclass
class Heatmap:
    """Per patch location: running sum and count of positivity contributions."""

    slide_id: str
    bag_size: int
    n_samples: int
    seed: int
    sums: dict[tuple[int, int], float] = field(default_factory=dict)
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def update(self, xy: tuple[int, int], value: float) -> None:
        self.sums[xy] = self.sums.get(xy, 0.0) + value
        self.counts[xy] = self.counts.get(xy, 0) + 1

    def finalized(self) -> dict[tuple[int, int], float]:
        """Mean contribution per location."""
        return {xy: self.sums[xy] / self.counts[xy] for xy in self.sums}


def heatmap(params: MILParams, store: EmbeddingStore, n_samples: int,
            bag_size: int, seed: int,
            positive_classes=POSITIVE_CLASSES) -> Heatmap:
    """Accumulate bag_positivity x attention_weight at every sampled patch.

    Bags are sampled with replacement across iterations using the same
    (seed, i) streams as score_slide, so scoring and localization can share
    a sampling budget.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    _check_model_store(params, store)
    for c in positive_classes:
        if not (0 <= c < params.n_classes):
            raise ValueError(f"positive class {c} out of range")
    hm = Heatmap(slide_id=store.slide_id, bag_size=bag_size,
                 n_samples=n_samples, seed=seed)
    pos = list(positive_classes)
    for i in range(n_samples):
        bag = sample_bag(store, 0, bag_size, RngStream(seed, i))
        out = forward(params, bag)
        p_pos = float(out.probs[pos].sum())
        contributions = p_pos * out.attention
        for (x, y), value in zip(bag.patch_xy, contributions):
            hm.update((int(x), int(y)), float(value))
    return hm


def write_heatmap_csv(hm: Heatmap, path, normalize: bool = False) -> None:
    """Rows of x,y,count,mean_p sorted by (y, x).

    Raw values carry the attention scale (roughly positivity / bag_size
    since attention sums to 1 across a bag); normalize=True multiplies the
    displayed means by bag_size for a per-patch probability reading.
    """
    final = hm.finalized()
    factor = float(hm.bag_size) if normalize else 1.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "count", "mean_p"])
        for (x, y) in sorted(final, key=lambda xy: (xy[1], xy[0])):
            writer.writerow([x, y, hm.counts[(x, y)], repr(final[(x, y)] * factor)])


def write_score_json(score: SlideScore, path) -> None:
    Path(path).write_text(json.dumps(score.to_dict(), indent=2, sort_keys=True) + "\n")


_RAMP_ANCHORS = np.array([
    [0, 0, 96],      # cold: deep blue
    [0, 160, 255],
    [255, 255, 64],
    [255, 32, 0],    # hot: red
], dtype=np.float64)


def _ramp(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through a blue-yellow-red ramp."""
    v = np.clip(values, 0.0, 1.0) * (len(_RAMP_ANCHORS) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP_ANCHORS) - 1)
    frac = (v - lo)[..., None]
    rgb = _RAMP_ANCHORS[lo] * (1 - frac) + _RAMP_ANCHORS[hi] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_heatmap_overlay(hm: Heatmap, slide: SlideImage, patch_size: int,
                          path, alpha: float = 0.5) -> None:
    """Blend a color ramp over the slide at every heatmap location.

    Values are scaled by the maximum finalized mean, so the hottest patch
    is always full red regardless of the raw attention scale.
    """
    final = hm.finalized()
    canvas = slide.pixels.astype(np.float64).copy()
    vmax = max(final.values()) if final else 0.0
    if vmax > 0:
        for (x, y), value in final.items():
            color = _ramp(np.array(value / vmax)).astype(np.float64)
            y1 = min(y + patch_size, slide.height)
            x1 = min(x + patch_size, slide.width)
            if y >= slide.height or x >= slide.width:
                continue
            cell = canvas[y:y1, x:x1]
            cell *= (1.0 - alpha)
            cell += alpha * color
    Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8),
                    mode="RGB").save(Path(path), format="PNG")
