"""Pure numpy fallback for the compiled coordinate-hash core.

Same observable behavior as voxpipe._kernels: build an index over int64 keys
keeping the first occurrence of duplicates, then look up row indices (-1 for
misses). Uses a stable argsort + binary search instead of a hash table.
"""

from __future__ import annotations

import numpy as np


def build_table(keys: np.ndarray):
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    if len(sorted_keys) > 1:
        # keep the first occurrence of each duplicated key, as the hash does;
        # the stable sort puts the earliest input row first within equal runs
        dup = sorted_keys[1:] == sorted_keys[:-1]
        if dup.any():
            keep = np.ones(len(sorted_keys), dtype=bool)
            keep[np.flatnonzero(dup) + 1] = False
            sorted_keys = sorted_keys[keep]
            order = order[keep]
    return sorted_keys, order


def lookup(sorted_keys: np.ndarray, rows: np.ndarray, queries: np.ndarray):
    queries = np.ascontiguousarray(queries, dtype=np.int64)
    if len(sorted_keys) == 0:
        return np.full(len(queries), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, queries)
    pos_clipped = np.minimum(pos, len(sorted_keys) - 1)
    hit = sorted_keys[pos_clipped] == queries
    out = np.where(hit, rows[pos_clipped], np.int64(-1))
    return np.ascontiguousarray(out, dtype=np.int64)
