# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled open-addressing hash over int64 coordinate keys.

Keys are packed coordinate rows (see voxpipe.kernels.pack_rows). The table
keeps the first occurrence of each key; lookups return the row index of the
key or -1. Insertion and probing are deterministic.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline unsigned long long _mix(unsigned long long x) nogil:
    # splitmix64 finalizer; good avalanche for packed lattice coordinates
    x += 0x9E3779B97F4A7C15ULL
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL
    return x ^ (x >> 31)


def build_table(cnp.int64_t[::1] keys):
    """Return (table_keys, table_rows) arrays for `lookup`."""
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t cap = 8
    while cap < 2 * n + 2:
        cap <<= 1
    table_keys_arr = np.zeros(cap, dtype=np.int64)
    table_rows_arr = np.full(cap, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] tk = table_keys_arr
    cdef cnp.int64_t[::1] tr = table_rows_arr
    cdef unsigned long long mask = <unsigned long long> (cap - 1)
    cdef Py_ssize_t i
    cdef cnp.int64_t k
    cdef unsigned long long slot
    with nogil:
        for i in range(n):
            k = keys[i]
            slot = _mix(<unsigned long long> k) & mask
            while tr[slot] != -1 and tk[slot] != k:
                slot = (slot + 1) & mask
            if tr[slot] == -1:
                tk[slot] = k
                tr[slot] = i
    return table_keys_arr, table_rows_arr


def lookup(cnp.int64_t[::1] table_keys, cnp.int64_t[::1] table_rows,
           cnp.int64_t[::1] queries):
    """Return int64 row indices for each query key, -1 where absent."""
    cdef Py_ssize_t nq = queries.shape[0]
    out_arr = np.empty(nq, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef unsigned long long mask = <unsigned long long> (table_keys.shape[0] - 1)
    cdef Py_ssize_t i
    cdef cnp.int64_t k, row
    cdef unsigned long long slot
    with nogil:
        for i in range(nq):
            k = queries[i]
            slot = _mix(<unsigned long long> k) & mask
            while True:
                row = table_rows[slot]
                if row == -1:
                    out[i] = -1
                    break
                if table_keys[slot] == k:
                    out[i] = row
                    break
                slot = (slot + 1) & mask
    return out_arr
