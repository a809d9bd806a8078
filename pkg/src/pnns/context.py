"""Context geometry, masking, centering, and training-time augmentation.

A block of width m at (row, col) is predicted from two rectangles of
previously decoded pixels:

  x0: 2m rows by m columns, left of the block, spanning from the block's
      top row down to m rows below it;
  x1: m rows by 3m columns, directly above, spanning from m columns left
      of the block to m columns past its right edge.

Together they hold 5*m*m pixels and fit in a 3m x 3m footprint whose
top-left corner is (row - m, col - m).  The bottom n0 rows of x0 and the
rightmost n1 columns of x1 cover the pixels a raster/z-scan decoder has
not produced yet; they are overwritten with the dataset mean alpha so
that centering zeroes them out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

BLOCK_WIDTHS = (4, 8, 16, 32, 64)


def mask_sizes(m: int) -> tuple[int, ...]:
    """The admissible mask extents {0, 4, ..., m}."""
    return tuple(range(0, m + 1, 4))


@dataclass
class ContextPair:
    """The two context rectangles with their masks already applied."""

    m: int
    x0: np.ndarray  # (2m, m) float64, values in [0, 255]
    x1: np.ndarray  # (m, 3m) float64
    n0: int
    n1: int
    alpha: float

    def __post_init__(self) -> None:
        m = self.m
        if self.x0.shape != (2 * m, m) or self.x1.shape != (m, 3 * m):
            raise InvalidArgument(
                f"context shapes {self.x0.shape}/{self.x1.shape} invalid for m={m}"
            )

    def centered(self) -> tuple[np.ndarray, np.ndarray]:
        """x0 - alpha and x1 - alpha; masked entries become exactly 0."""
        return self.x0 - self.alpha, self.x1 - self.alpha

    def vectorized(self) -> np.ndarray:
        return vectorize_context(self.x0, self.x1)


@dataclass
class BlockSample:
    """A context paired with the block it should predict."""

    context: ContextPair
    target: np.ndarray  # (m, m) float64 in [0, 255]

    def target_centered(self) -> np.ndarray:
        return self.target - self.context.alpha


def compute_alpha(images) -> float:
    """Mean pixel intensity over all pixels of all images."""
    total = 0.0
    count = 0
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        total += a.sum()
        count += a.size
    if count == 0:
        raise InvalidArgument("cannot compute the mean of an empty image set")
    return total / count


def apply_masks(x0: np.ndarray, x1: np.ndarray, n0: int, n1: int, alpha: float, m: int) -> None:
    """Overwrite the undecoded strips with alpha, in place."""
    if n0 not in mask_sizes(m) or n1 not in mask_sizes(m):
        raise InvalidArgument(f"mask sizes ({n0}, {n1}) not in {mask_sizes(m)}")
    if n0:
        x0[2 * m - n0 :, :] = alpha
    if n1:
        x1[:, 3 * m - n1 :] = alpha


def _slice_with_fill(image: np.ndarray, r0: int, r1: int, c0: int, c1: int, fill: float) -> np.ndarray:
    """Image slice where parts beyond the bottom/right edges take `fill`."""
    h, w = image.shape
    out = np.full((r1 - r0, c1 - c0), fill, dtype=np.float64)
    rr1, cc1 = min(r1, h), min(c1, w)
    if rr1 > r0 and cc1 > c0:
        out[: rr1 - r0, : cc1 - c0] = image[r0:rr1, c0:cc1]
    return out


def extract_context_test(
    decoded: np.ndarray,
    position: tuple[int, int],
    m: int,
    n0: int,
    n1: int,
    alpha: float,
) -> ContextPair | None:
    """Extract the masked context for a block at `position` in a decoded image.

    Returns None (the out-of-bounds signal) when the context's top-left
    corner (row - m, col - m) falls outside the image; the caller must
    substitute the zero prediction.  Context pixels past the right or
    bottom image edge can never be decoded and are filled with alpha.
    """
    row, col = position
    h, w = decoded.shape
    if row - m < 0 or col - m < 0:
        return None
    if row + m > h or col + m > w:
        return None  # the block itself does not fit
    x0 = _slice_with_fill(decoded, row, row + 2 * m, col - m, col, alpha)
    x1 = _slice_with_fill(decoded, row - m, row, col - m, col + 2 * m, alpha)
    apply_masks(x0, x1, n0, n1, alpha, m)
    return ContextPair(m=m, x0=x0, x1=x1, n0=n0, n1=n1, alpha=alpha)


def valid_block_positions(height: int, width: int, m: int) -> tuple[range, range]:
    """Block top-left positions whose full 3m x 3m footprint fits the image."""
    return range(m, height - 2 * m + 1), range(m, width - 2 * m + 1)


def extract_training_pair(
    image: np.ndarray,
    m: int,
    n0: int,
    n1: int,
    alpha: float,
    rng: np.random.Generator,
) -> BlockSample:
    """Extract a sample at a uniformly random valid position.

    Same geometry and masking as :func:`extract_context_test`; the target
    block is the m x m region at the drawn position.
    """
    h, w = image.shape
    rows, cols = valid_block_positions(h, w, m)
    if len(rows) <= 0 or len(cols) <= 0:
        raise InvalidArgument(f"image {h}x{w} cannot host the 3mx3m footprint for m={m}")
    row = int(rng.integers(rows.start, rows.stop))
    col = int(rng.integers(cols.start, cols.stop))
    ctx = extract_context_test(image, (row, col), m, n0, n1, alpha)
    assert ctx is not None  # footprint fits by construction
    target = np.asarray(image[row : row + m, col : col + m], dtype=np.float64)
    return BlockSample(context=ctx, target=target)


def augment_minibatch(
    crops: list[np.ndarray],
    m: int,
    alpha: float,
    rng: np.random.Generator,
    batch_size: int = 100,
    mask_policy=None,
) -> list[BlockSample]:
    """Draw one minibatch with rotation/flip augmentation and random masks.

    Per sample: a uniform crop index, a rotation by 0/90/180/270 degrees,
    a horizontal flip with probability one half, mask sizes n0 and n1
    drawn uniformly from {0, 4, ..., m}, then a random-position
    extraction from the transformed crop.  A `mask_policy` with a
    draw(m, rng) method can replace the uniform mask draw.
    """
    if not crops:
        raise InvalidArgument("crop set is empty")
    sizes = mask_sizes(m)
    samples = []
    for _ in range(batch_size):
        idx = int(rng.integers(len(crops)))
        quarter_turns = int(rng.integers(4))
        flip = bool(rng.integers(2))
        if mask_policy is None:
            n0 = int(sizes[rng.integers(len(sizes))])
            n1 = int(sizes[rng.integers(len(sizes))])
        else:
            n0, n1 = mask_policy.draw(m, rng)
        img = np.rot90(crops[idx], quarter_turns)
        if flip:
            img = img[:, ::-1]
        samples.append(extract_training_pair(img, m, n0, n1, alpha, rng))
    return samples


def vectorize_context(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Row-major x0 followed by row-major x1; length 5*m*m."""
    return np.concatenate([np.ravel(x0), np.ravel(x1)])


def devectorize_context(vector: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (5 * m * m,):
        raise InvalidArgument(f"vector length {v.shape} != 5*m*m for m={m}")
    split = 2 * m * m
    return v[:split].reshape(2 * m, m), v[split:].reshape(m, 3 * m)


def postprocess_prediction(prediction_centered: np.ndarray, alpha: float) -> np.ndarray:
    """Undo the centering and clip into the 8-bit range."""
    return np.clip(prediction_centered + alpha, 0.0, 255.0)
