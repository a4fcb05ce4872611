import logging
import time
from functools import wraps
from importlib import metadata
from typing import Any, Dict, Optional

import orjson
import torch
import xxhash

logger = logging.getLogger(__name__)


def format_duration(seconds: float) -> str:
    """Compact elapsed time: 850 ms, 12.3 s, 4m 05s, 1h 02m"""
    if seconds < 1.0:
        return f"{seconds * 1000.0:.0f} ms"
    if seconds < 60.0:
        return f"{seconds:.1f} s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def timing_decorator(func):
    """Log the wall time of a synchronous call under the callee's qualified name"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            logger.warning(f"{func.__qualname__} raised {type(e).__name__} after {format_duration(time.perf_counter() - start)}")
            raise
        logger.info(f"{func.__qualname__} took {format_duration(time.perf_counter() - start)}")
        return result

    return wrapper


def config_hash(config: Dict[str, Any]) -> str:
    """Stable hash of a JSON-able config; key order does not matter"""
    payload = orjson.dumps(config, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    return xxhash.xxh64(payload).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in ("recap", "torch", "numpy", "pandas", "pydantic", "click", "Pillow"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            if name == "recap":
                from recap import __version__
                versions[name] = __version__
    return versions


def configure_threads(threads: Optional[int]) -> int:
    from recap.config import RECAP_THREADS

    count = threads if threads and threads > 0 else RECAP_THREADS
    torch.set_num_threads(count)
    return count


# Vector helpers shared by the shading and splatting code

def dot(a: torch.Tensor, b: torch.Tensor, keepdim: bool = False) -> torch.Tensor:
    return (a * b).sum(dim=-1, keepdim=keepdim)


def safe_normalize(v: torch.Tensor, eps: float = 1e-20) -> torch.Tensor:
    return v / torch.sqrt(torch.clamp_min(dot(v, v, keepdim=True), eps))


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis, zero (with zero gradient) at the origin"""
    sq = dot(v, v)
    return torch.where(sq > 0, torch.sqrt(torch.clamp_min(sq, 1e-300)), torch.zeros_like(sq))
