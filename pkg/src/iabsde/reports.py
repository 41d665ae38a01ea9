"""CSV and manifest writers with full double precision."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    """Header row then one line per row; floats as 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.reader(fh))


def versions() -> dict:
    import scipy

    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "iabsde": __version__}


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return repr(v)
