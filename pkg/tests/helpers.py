"""Shared generators for randomized mask/bitstream tests."""

import numpy as np

from sct import mask as M
from sct.bitstream import SctHeader, SctBitstream, write


def simulate_natural_masks(rng, grid, depth, iters, threshold, p_one=0.7):
    """Drive the real encoder-side mask chain over random codes and qualities.

    Returns (post-mask codes, post-update masks), exactly what a real encode
    hands to the bitstream writer.
    """
    prev = M.TileMask.empty(grid)
    sent = []
    masks = []
    for k in range(1, iters + 1):
        bits = (rng.random(grid + (depth,)) < p_one).astype(np.uint8)
        codes = M.CodeTensor(bits, k)
        quality = M.TileQualityMap(rng.uniform(0.0, 40.0, grid))
        prev = M.update_mask(prev, codes, quality, threshold, k)
        sent.append(M.apply_mask(codes, prev))
        masks.append(prev.copy())
    return sent, masks


def random_stream(rng, grid=(2, 3), depth=6, iters=5, threshold=8.0, model_hash=0):
    """A consistent random SCT bitstream plus its source codes/masks."""
    codes, masks = simulate_natural_masks(rng, grid, depth, iters, threshold)
    header = SctHeader(true_h=grid[0] * 16, true_w=grid[1] * 16,
                       iterations=iters, code_depth=depth, model_hash=model_hash)
    return write(codes, masks, header), codes, masks
