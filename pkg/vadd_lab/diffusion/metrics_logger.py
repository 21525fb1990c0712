# vadd_lab/diffusion/metrics_logger.py

"""
Training Loss Log
One CSV row per logging interval; a resumed run appends to the same file.
"""

import csv
from pathlib import Path

from vadd_lab.objective import LossBreakdown

COLUMNS = ["step", "lambda", "lr", "loss", "recon", "kl", "kl_raw", "wallclock_ms"]


def _fmt(value: float) -> str:
    return repr(float(value))


class LossLog:
    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._file = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        if fresh:
            self._writer.writerow(COLUMNS)

    def log(self, step: int, lr: float, loss: float, breakdown: LossBreakdown,
            wallclock_ms: float = 0.0):
        self._writer.writerow([
            int(step),
            _fmt(breakdown.lam),
            _fmt(lr),
            _fmt(loss),
            _fmt(breakdown.recon),
            _fmt(breakdown.kl),
            _fmt(breakdown.kl_raw),
            _fmt(wallclock_ms),
        ])
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path: Path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
        for row in rows
    ]
