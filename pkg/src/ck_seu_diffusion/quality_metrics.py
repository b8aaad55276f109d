"""
Image scoring.

clip_like_score is 100 * max(0, cos(E_I, E_T)) over pooled embeddings.
corruption_stats measures where and how an image departs from its
error-free baseline: scattered noise gives many small components, colour
blocks give few large ones.
"""
from dataclasses import asdict, dataclass
from enum import StrEnum
from functools import cache

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ZeroNorm

DEFAULT_TAU = 2 / 255
IMAGE_EMBED_TAG = 5

# 4-connectivity
CROSS = ndimage.generate_binary_structure(2, 1)


class MetricName(StrEnum):
    CLIP_SCORE = 'clip_score'
    RELATIVE_DEVIATION = 'relative_deviation'
    CORRUPTED_FRACTION = 'corrupted_fraction'
    COMPONENT_COUNT = 'component_count'
    MEAN_COMPONENT_AREA = 'mean_component_area'


@dataclass(frozen=True)
class CorruptionStats:
    relative_deviation: float
    corrupted_fraction: float
    component_count: int
    mean_component_area: float

    def to_dict(self) -> dict:
        return asdict(self)


def clip_like_score(image_embedding: np.ndarray, text_embedding: np.ndarray) -> float:
    a = np.asarray(image_embedding, dtype=np.float64).ravel()
    b = np.asarray(text_embedding, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"embedding widths differ: {a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if not norm_a > 0 or not norm_b > 0:
        raise ZeroNorm('cosine is undefined for a zero-norm embedding')
    cos = float(np.dot(a / norm_a, b / norm_b))
    return 100.0 * min(1.0, max(0.0, cos))


def pooled_text_embedding(text_embedding: np.ndarray) -> np.ndarray:
    """Mean of the M token rows"""
    return np.asarray(text_embedding, dtype=np.float64).mean(axis=0)


@cache
def _projection(shape: tuple[int, ...], width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, IMAGE_EMBED_TAG]))
    projection = rng.standard_normal((int(np.prod(shape)), width)) / np.sqrt(np.prod(shape))
    projection.flags.writeable = False
    return projection


def toy_image_embed(image: np.ndarray, width: int, seed: int = 0) -> np.ndarray:
    """
    Fixed seeded linear projection of the mean-centred image, normalised to
    unit length. A constant image has no content after centring and comes
    back as the zero vector.
    """
    img = np.asarray(image, dtype=np.float64)
    centred = (img - img.mean()).ravel()
    vector = centred @ _projection(img.shape, width, seed)
    norm = np.linalg.norm(vector)
    if norm == 0:
        return vector
    return vector / norm


def corruption_mask(image: np.ndarray, baseline: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    ref = np.asarray(baseline, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"image {img.shape} and baseline {ref.shape} differ in shape")
    return np.abs(img - ref).max(axis=0) > tau


def corruption_stats(image: np.ndarray, baseline: np.ndarray, tau: float = DEFAULT_TAU) -> CorruptionStats:
    mask = corruption_mask(image, baseline, tau)
    ref = np.asarray(baseline, dtype=np.float64)
    ref_norm = np.linalg.norm(ref)
    delta = np.linalg.norm(np.asarray(image, dtype=np.float64) - ref)
    deviation = float(delta / ref_norm) if ref_norm > 0 else float(delta)
    corrupted = int(mask.sum())
    _, count = ndimage.label(mask, structure=CROSS)
    return CorruptionStats(
        relative_deviation=deviation,
        corrupted_fraction=corrupted / mask.size,
        component_count=int(count),
        mean_component_area=corrupted / count if count else 0.0)
