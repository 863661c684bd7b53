"""Joint RL of reasoning and last-token self-rewarding on a toy addition task."""

import os as _os

_threads = _os.environ.get("LASER_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from laser.task import VOCAB  # noqa: E402

__version__ = "0.1.0"
