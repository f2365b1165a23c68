"""Worker-count policy shared by every module that fans out work."""

import os


def worker_count(tasks):
    """Threads to use for ``tasks`` independent jobs, capped by ``DIRAC_THREADS``."""
    cap = os.environ.get("DIRAC_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, tasks))
