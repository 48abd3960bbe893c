import os

_TRUTHY = {"1", "true", "yes", "on"}


def _flag(name: str) -> bool:
    return os.getenv(name, "").strip().lower() in _TRUTHY


# Default seed when no --seed flag is given. Every random stream in a run
# is derived from this one value.
DEFAULT_SEED = int(os.getenv("SCLAIR_SEED", "0"))
DEFAULT_JOBS = int(os.getenv("SCLAIR_JOBS", "1"))
DEFAULT_PRECISION = os.getenv("SCLAIR_PRECISION", "float32").strip().lower()
# joblib backend for fold-level parallelism: "loky" (processes) or "threading".
PARALLEL_BACKEND = os.getenv("SCLAIR_PARALLEL_BACKEND", "loky").strip().lower()

SCLAIR_DEBUG = _flag("SCLAIR_DEBUG")
SCLAIR_CHECK_FINITE = _flag("SCLAIR_CHECK_FINITE")


def debug_log(tag: str, message: str) -> None:
    if SCLAIR_DEBUG:
        print(f"[{tag}] {message}")
