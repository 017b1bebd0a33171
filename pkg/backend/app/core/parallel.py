from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, Tuple, TypeVar
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def split_range(n: int, parts: int) -> List[Tuple[int, int]]:
    """Split [0, n) into at most `parts` contiguous half-open chunks"""
    parts = max(1, min(parts, n)) if n > 0 else 1
    bounds = [round(i * n / parts) for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts) if bounds[i + 1] > bounds[i]]


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Apply fn to every item, results in submission order

    With threads <= 1 everything runs inline. Each item must own a disjoint
    slice of the output so the join order cannot change any value.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(fn, item) for item in items]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except Exception as e:
                logger.error(f"Parallel task failed: {str(e)}")
                raise
        return results


def chunked(items: Iterable[T], threads: int) -> List[List[T]]:
    """Group items into one list per worker, preserving order"""
    items = list(items)
    return [items[a:b] for a, b in split_range(len(items), max(threads, 1))]
