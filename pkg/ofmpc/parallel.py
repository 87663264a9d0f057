"""
convenience function for running independent work items in parallel
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, List


def process_items(items: Iterable[Any], callback: Callable[[Any], Any], max_workers: int = None) -> List[Any]:
    """
    Call the callback for each item, in a separate thread if allowed.

    Results come back in item order whatever the completion order, so the
    caller can merge them deterministically.

    :param items: the work items
    :param callback: a callback that accepts an item as a single positional argument
    :param max_workers: 1 for blocking, 0 for one thread per item, or a positive integer for max workers
    """
    items = list(items)
    max_workers = int(max_workers or 0)

    # no threads if only one worker - e.g. for easier debugging
    if max_workers == 1 or len(items) <= 1:
        return [callback(item) for item in items]

    # otherwise use threads
    max_workers = max_workers if max_workers > 0 else len(items)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(callback, item) for item in items]
        return [future.result() for future in futures]
