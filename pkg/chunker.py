"""
Chunk splitting for batched work.

Splits sample indices into mini-batches for training and fine-tuning, and
window lists into scoring batches for detection.
"""

from typing import List, Optional

import numpy as np


def chunk_indices(
    count: int,
    chunk_size: int,
    order: Optional[np.ndarray] = None
) -> List[np.ndarray]:
    """
    Split indices 0..count-1 into consecutive chunks of chunk_size.

    The last partial chunk is kept.

    Args:
        count: Number of items
        chunk_size: Maximum items per chunk (>= 1)
        order: Optional permutation of the indices to chunk instead of 0..count-1

    Returns:
        List of index arrays
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    indices = np.arange(count) if order is None else np.asarray(order)
    return [indices[i:i + chunk_size] for i in range(0, count, chunk_size)]


def shuffled_chunks(
    count: int,
    chunk_size: int,
    rng: np.random.Generator,
    shuffle: bool = True
) -> List[np.ndarray]:
    """
    Split indices into mini-batches after a seeded shuffle.

    Args:
        count: Number of samples
        chunk_size: Batch size
        rng: Seeded generator; consumed only when shuffle is True
        shuffle: Whether to permute before chunking

    Returns:
        List of index arrays covering every sample exactly once
    """
    order = rng.permutation(count) if shuffle else None
    return chunk_indices(count, chunk_size, order)


def get_chunk_statistics(chunks: List[np.ndarray]) -> dict:
    """
    Calculate statistics about chunk distribution.

    Args:
        chunks: List of index chunks

    Returns:
        Dictionary with num_chunks, total_items, avg/min/max items per chunk
    """
    if not chunks:
        return {
            "num_chunks": 0,
            "total_items": 0,
            "avg_items_per_chunk": 0,
            "min_items": 0,
            "max_items": 0
        }

    sizes = [len(chunk) for chunk in chunks]
    return {
        "num_chunks": len(chunks),
        "total_items": sum(sizes),
        "avg_items_per_chunk": sum(sizes) / len(chunks),
        "min_items": min(sizes),
        "max_items": max(sizes)
    }


def print_chunk_statistics(chunks: List[np.ndarray], label: str = "Batch") -> None:
    """Print human-readable chunk statistics."""
    stats = get_chunk_statistics(chunks)
    print(f"  {label}es: {stats['num_chunks']} "
          f"({stats['total_items']} items, {stats['min_items']}-{stats['max_items']} per {label.lower()})")

