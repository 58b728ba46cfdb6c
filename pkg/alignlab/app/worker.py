import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, Dict, Hashable, Iterable, List, Tuple

logger = logging.getLogger('alignlab.worker')

Job = Tuple[Hashable, Dict[str, Any]]
ErrorHandler = Callable[[Hashable, Exception], Any]


def _raise(key, exc):
    raise exc


def run_jobs(fn: Callable, jobs: Iterable[Job], workers: int = 1, on_error: ErrorHandler = _raise) -> List[Tuple]:
    """
    Call fn(**kwargs) for every (key, kwargs) job and return (key, result) pairs sorted by key.

    With more than one worker the jobs run in a process pool, so fn and its arguments must be picklable. A job that
    raises is passed to `on_error` whose return value stands in for the result.
    """
    jobs = list(jobs)
    results = {}
    if workers <= 1 or len(jobs) <= 1:
        for key, kwargs in jobs:
            try:
                results[key] = fn(**kwargs)
            except Exception as e:
                results[key] = on_error(key, e)
    else:
        logger.info('running %d jobs on %d worker processes', len(jobs), workers)
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(fn, **kwargs): key for key, kwargs in jobs}
            for future in as_completed(futures):
                key = futures[future]
                try:
                    results[key] = future.result()
                except Exception as e:
                    results[key] = on_error(key, e)
                logger.debug('job %s finished, %d/%d done', key, len(results), len(jobs))
    return [(key, results[key]) for key in sorted(results)]
