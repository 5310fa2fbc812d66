#!/usr/bin/env python3
"""
Tests for mini-batch chunking and seed helpers.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from chunker import chunk_indices, get_chunk_statistics, print_chunk_statistics, shuffled_chunks
from utils import derive_seed, format_kb, format_number


def test_chunk_indices_keeps_partial_tail():
    chunks = chunk_indices(10, 4)
    assert [c.tolist() for c in chunks] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    assert chunk_indices(0, 4) == []
    with pytest.raises(ValueError):
        chunk_indices(3, 0)


def test_shuffled_chunks_cover_every_index_once():
    rng = np.random.default_rng(0)
    chunks = shuffled_chunks(23, 5, rng)
    flat = np.concatenate(chunks)
    assert sorted(flat.tolist()) == list(range(23))
    assert [len(c) for c in chunks] == [5, 5, 5, 5, 3]

    again = shuffled_chunks(23, 5, np.random.default_rng(0))
    assert all(np.array_equal(a, b) for a, b in zip(chunks, again))

    ordered = shuffled_chunks(6, 4, np.random.default_rng(1), shuffle=False)
    assert [c.tolist() for c in ordered] == [[0, 1, 2, 3], [4, 5]]


def test_chunk_statistics(capsys):
    stats = get_chunk_statistics(chunk_indices(10, 4))
    assert stats == {"num_chunks": 3, "total_items": 10, "avg_items_per_chunk": 10 / 3,
                     "min_items": 2, "max_items": 4}
    assert get_chunk_statistics([])["num_chunks"] == 0
    print_chunk_statistics(chunk_indices(10, 4))
    assert "Batches: 3 (10 items, 2-4 per batch)" in capsys.readouterr().out


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(42, 1) == derive_seed(42, 1)
    assert derive_seed(42, 1) != derive_seed(42, 2)
    assert derive_seed(42, 1) != derive_seed(43, 1)


def test_number_formatting():
    assert format_number(0.9934219) == "0.993422"
    assert format_number(float("inf")) == "inf"
    assert format_number(0.0) == "0"
    assert format_kb(549400) == "549.4 kB"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
