import logging
import logging.config
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Generator, Iterable, List, Optional, TypeVar

from app.core.config import settings

T = TypeVar("T")
R = TypeVar("R")

_configured = False


def configure_logging(config_path: Optional[str] = None) -> None:
    """Load logging.ini (same layout as the migration tooling used) or fall back to basicConfig"""
    global _configured
    if _configured:
        return
    path = Path(config_path or settings.LOGGING_CONFIG or "")
    if path.is_file():
        logging.config.fileConfig(path, disable_existing_loggers=False)
    else:
        logging.basicConfig(
            level=settings.LOG_LEVEL,
            format="%(levelname)-5.5s [%(name)s] %(message)s",
        )
    logging.getLogger("app").setLevel(settings.LOG_LEVEL)
    _configured = True


@contextmanager
def get_executor(max_workers: Optional[int] = None) -> Generator[Optional[ThreadPoolExecutor], None, None]:
    """Worker pool capped by OREPANEL_THREADS; None when running single-threaded"""
    workers = max_workers or settings.OREPANEL_THREADS
    if workers <= 1:
        yield None
        return
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        yield pool
    finally:
        pool.shutdown(wait=True)


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Ordered map over items; results come back in input order either way"""
    items = list(items)
    with get_executor() as pool:
        if pool is None:
            return [fn(item) for item in items]
        return list(pool.map(fn, items))
