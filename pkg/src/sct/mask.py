"""Stop-code masking: tile masks, quality maps, and encoder/decoder sync.

A tile's code stream ends the first time its transmitted code is all-zero.
That can happen because the tile's reconstruction got good enough (the code
is then forced to zero), because the encoder emitted an accidental all-zero
code, or because the tile stopped on an earlier iteration. Masks are
monotone: once stopped, always stopped. The decoder rebuilds the exact same
mask sequence from the received codes alone.

Iteration indices are 1-based. A mask "at iteration k" is the post-update
mask: it includes tiles that stop at k itself (their all-zero stop code is
still transmitted at k; trimming starts at k+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class CodeTensor:
    """Binarized codes for one iteration: (tilesH, tilesW, B) with values in {0,1}."""
    bits: np.ndarray
    iteration: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 3:
            raise ShapeError(f"CodeTensor bits must be (tilesH, tilesW, B), got {self.bits.shape}")

    @property
    def grid(self):
        return self.bits.shape[:2]

    @property
    def depth(self):
        return self.bits.shape[2]

    def zero_tiles(self):
        """Boolean grid of tiles whose code this iteration is all-zero."""
        return ~self.bits.any(axis=2)


@dataclass
class TileMask:
    """Per-tile stop state: boolean grid plus first-stop iteration (0 = never)."""
    stopped: np.ndarray
    first_stop: np.ndarray

    def __post_init__(self):
        self.stopped = np.asarray(self.stopped, dtype=bool)
        self.first_stop = np.asarray(self.first_stop, dtype=np.int32)
        if self.stopped.shape != self.first_stop.shape or self.stopped.ndim != 2:
            raise ShapeError(f"TileMask grids disagree: {self.stopped.shape} vs {self.first_stop.shape}")

    @classmethod
    def empty(cls, grid):
        return cls(np.zeros(grid, dtype=bool), np.zeros(grid, dtype=np.int32))

    @property
    def grid(self):
        return self.stopped.shape

    def stopped_fraction(self):
        return float(self.stopped.mean())

    def copy(self):
        return TileMask(self.stopped.copy(), self.first_stop.copy())

    def __eq__(self, other):
        if not isinstance(other, TileMask):
            return NotImplemented
        return (np.array_equal(self.stopped, other.stopped)
                and np.array_equal(self.first_stop, other.first_stop))


@dataclass
class TileQualityMap:
    """Per-tile mean absolute reconstruction error, in 8-bit (0-255) units."""
    l1_error: np.ndarray

    def __post_init__(self):
        self.l1_error = np.asarray(self.l1_error, dtype=np.float64)
        if self.l1_error.ndim != 2:
            raise ShapeError(f"TileQualityMap must be 2-D, got {self.l1_error.shape}")
        if np.any(self.l1_error < 0):
            raise ValueError("tile L1 errors must be nonnegative")


def tile_quality(image, recon, tile_size, true_h=None, true_w=None):
    """Per-tile L1 error map of recon vs image, over the unpadded region only.

    image/recon: (H, W, 3) floats in [0,1], H and W multiples of tile_size.
    Tiles that overlap padding average over their valid pixels alone.
    """
    image = np.asarray(image)
    recon = np.asarray(recon)
    if image.shape != recon.shape:
        raise ShapeError(f"tile_quality: image {image.shape} vs recon {recon.shape}")
    h, w = image.shape[:2]
    if h % tile_size or w % tile_size:
        raise ShapeError(f"tile_quality: extents {h}x{w} not multiples of tile {tile_size}")
    true_h = h if true_h is None else true_h
    true_w = w if true_w is None else true_w

    err = np.abs(image.astype(np.float64) - recon.astype(np.float64))
    err[true_h:, :, :] = 0.0
    err[:, true_w:, :] = 0.0
    th, tw = h // tile_size, w // tile_size
    sums = err.reshape(th, tile_size, tw, tile_size, -1).sum(axis=(1, 3, 4))

    ys = np.clip(true_h - np.arange(th) * tile_size, 0, tile_size)
    xs = np.clip(true_w - np.arange(tw) * tile_size, 0, tile_size)
    counts = np.outer(ys, xs) * image.shape[2]
    counts = np.maximum(counts, 1)  # tiles fully inside padding score 0 error
    return TileQualityMap(255.0 * sums / counts)


def update_mask(prev, codes, quality, threshold, k):
    """Advance the natural mask by one iteration.

    A tile newly stops when (a) its quality error is at or below threshold,
    (b) its code this iteration is the accidental all-zero stop code, or
    (c) it stopped earlier. Newly stopped tiles still transmit this
    iteration (their forced-zero stop code); trimming starts at k+1.
    """
    if prev.grid != codes.grid or prev.grid != quality.l1_error.shape:
        raise ShapeError(
            f"update_mask: grids disagree (mask {prev.grid}, codes {codes.grid}, "
            f"quality {quality.l1_error.shape})")
    newly = (quality.l1_error <= threshold) | codes.zero_tiles()
    stopped = prev.stopped | newly
    first = np.where(prev.stopped, prev.first_stop,
                     np.where(stopped, np.int32(k), np.int32(0)))
    return TileMask(stopped, first)


def apply_mask(codes, mask):
    """Zero the code bits of every stopped tile (including newly stopped)."""
    if codes.grid != mask.grid:
        raise ShapeError(f"apply_mask: codes {codes.grid} vs mask {mask.grid}")
    bits = codes.bits.copy()
    bits[mask.stopped] = 0
    return CodeTensor(bits, codes.iteration)


def decoder_mask_from_codes(received):
    """Rebuild the encoder's mask sequence from received codes alone.

    A tile is stopped at k exactly when its received code at k is all-zero;
    stopped tiles stay zero-filled, so the derivation is cumulative.
    """
    masks = []
    prev = None
    for k, codes in enumerate(received, start=1):
        zero = codes.zero_tiles()
        if prev is None:
            stopped = zero
            first = np.where(stopped, np.int32(k), np.int32(0))
        else:
            stopped = prev.stopped | zero
            first = np.where(prev.stopped, prev.first_stop,
                             np.where(stopped, np.int32(k), np.int32(0)))
        prev = TileMask(stopped, first)
        masks.append(prev)
    return masks


def forced_threshold(e_min, e_max, k, total_k):
    """Training-pass threshold: k/K of the way from the batch-min to batch-max error."""
    if e_min > e_max:
        raise ValueError(f"forced_threshold: e_min {e_min} > e_max {e_max}")
    return (k / total_k) * (e_max - e_min) + e_min


def forced_mask(quality, e_min, e_max, k, total_k):
    """Artificially aggressive mask used only by the stop-code training pass."""
    thr = forced_threshold(e_min, e_max, k, total_k)
    stopped = quality.l1_error <= thr
    first = np.where(stopped, np.int32(k), np.int32(0))
    return TileMask(stopped, first)


def merge_masks(a, b):
    """Union of two masks, preferring the first mask's stop index where both stop."""
    if a.grid != b.grid:
        raise ShapeError(f"merge_masks: {a.grid} vs {b.grid}")
    stopped = a.stopped | b.stopped
    first = np.where(a.stopped, a.first_stop,
                     np.where(b.stopped, b.first_stop, np.int32(0)))
    return TileMask(stopped, first)
