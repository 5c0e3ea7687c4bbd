"""Counter-based random streams for reproducible noise draws.

Every noise tensor used in training comes from a Philox stream whose key is the
master seed and whose starting counter encodes (epoch, batch, example, layer).
Sample s of an example is the s-th row of that stream, so the draw with
coordinates (seed, epoch, batch, example, sample, layer) is always the same
numbers, whatever S is and whichever worker thread asks for it. A stream only
advances the lowest counter word, so streams with different coordinates never
overlap.
"""

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

__all__ = ["DrawCoordinates", "noise_generator", "stream"]

# Tags for non-draw streams; they set the top bit of counter word 1, which a
# draw's epoch never reaches.
INIT_STREAM = 0x1A17
SHUFFLE_STREAM = 0x5F1E
BOUNDS_STREAM = 0x9B0D
AUX_FLAG = 1 << 63

_MAX_EXAMPLE = 1 << 32
_MAX_SAMPLE = 1 << 16
_MAX_LAYER = 1 << 16


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


@dataclass(frozen=True)
class DrawCoordinates:
    """Identifies one noise sample of one example within a run."""

    seed: int
    epoch: int = 0
    batch_index: int = 0
    example_index: int = 0
    sample_index: int = 0

    def with_sample(self, sample_index: int) -> "DrawCoordinates":
        return replace(self, sample_index=sample_index)

    def as_tuple(self) -> Tuple[int, int, int, int, int]:
        return (self.seed, self.epoch, self.batch_index, self.example_index, self.sample_index)

    def key(self, layer_index: int) -> Tuple[int, int, int, int, int, int]:
        """Full rng coordinates of the draw for one noise layer."""
        return self.as_tuple() + (layer_index,)


def _counter(coordinates: DrawCoordinates, layer_index: int) -> np.ndarray:
    if not 0 <= coordinates.epoch < AUX_FLAG or not 0 <= coordinates.batch_index < 2 ** 64:
        raise ValueError(f"epoch/batch out of range in {coordinates}")
    if not 0 <= coordinates.example_index < _MAX_EXAMPLE:
        raise ValueError(f"example_index must be < {_MAX_EXAMPLE}, got {coordinates.example_index}")
    if not 0 <= coordinates.sample_index < _MAX_SAMPLE:
        raise ValueError(f"sample_index must be < {_MAX_SAMPLE}, got {coordinates.sample_index}")
    if not 0 <= layer_index < _MAX_LAYER:
        raise ValueError(f"layer_index must be < {_MAX_LAYER}, got {layer_index}")
    packed = (coordinates.example_index << 32) | layer_index
    return np.array([0, coordinates.epoch, coordinates.batch_index, packed], dtype=np.uint64)


def noise_generator(coordinates: DrawCoordinates, layer_index: int) -> np.random.Generator:
    """Return the generator for one (example, layer) pair.

    The sample index is validated but does not select the stream; samples
    are consecutive rows of it.

    Args:
        coordinates: Draw coordinates
        layer_index: Index of the noise layer within the network spec

    Returns:
        A fresh Philox-backed generator
    """
    key = _check_seed(coordinates.seed)
    return np.random.Generator(np.random.Philox(key=key, counter=_counter(coordinates, layer_index)))


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Return a generator for an auxiliary purpose (init, shuffling, ...).

    Args:
        seed: Master seed
        tag: One of the module-level stream tags
        index: Extra key component, e.g. the epoch for shuffling

    Returns:
        A fresh Philox-backed generator
    """
    counter = np.array([0, AUX_FLAG | tag, int(index), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_check_seed(seed), counter=counter))
