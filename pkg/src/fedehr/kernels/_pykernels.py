"""Pure-numpy implementations of the hot encoder kernels.

These are the fallback for :mod:`fedehr.kernels._ckernels`. Both backends
accumulate in float64 and in the same element order, so their outputs are
interchangeable.
"""

import numpy as np

BACKEND = "python"


def embedding_bag_forward(table, ids, pad_id=0):
    """Masked mean of embedding rows per token sequence.

    table: (V, d) float64, ids: (M, T) int32. Positions equal to pad_id are
    skipped; a row with no real tokens yields the zero vector.

    Returns (out (M, d), counts (M,) float64).
    """
    mask = ids != pad_id
    counts = mask.sum(axis=1).astype(np.float64)
    gathered = table[ids] * mask[:, :, None]
    out = gathered.sum(axis=1) / np.maximum(counts, 1.0)[:, None]
    return out, counts


def embedding_bag_backward(grad_out, ids, counts, vocab_size, pad_id=0):
    """Scatter-add gradient of embedding_bag_forward into a (V, d) table."""
    grad_table = np.zeros((vocab_size, grad_out.shape[1]))
    mask = ids != pad_id
    scaled = grad_out / np.maximum(counts, 1.0)[:, None]
    m, t = ids.shape
    updates = np.broadcast_to(scaled[:, None, :], (m, t, grad_out.shape[1]))
    np.add.at(grad_table, ids[mask], updates[mask])
    return grad_table


def segment_mean_forward(x, offsets):
    """Mean of consecutive row segments. offsets: (B+1,) int64, ascending."""
    sums = np.add.reduceat(x, offsets[:-1], axis=0)
    counts = np.diff(offsets).astype(np.float64)
    return sums / np.maximum(counts, 1.0)[:, None]


def segment_mean_backward(grad_out, offsets, n_rows):
    """Distribute segment-mean gradients back over the member rows."""
    counts = np.diff(offsets).astype(np.float64)
    scaled = grad_out / np.maximum(counts, 1.0)[:, None]
    return np.repeat(scaled, np.diff(offsets), axis=0)
