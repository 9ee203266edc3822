"""Shared utility functions for Passicert."""
import hashlib
import json
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc


def format_coefficient(value: float) -> str:
    """Fixed six-decimal form, scientific outside [1e-3, 1e6)."""
    magnitude = abs(value)
    if magnitude == 0.0 or 1e-3 <= magnitude < 1e6:
        return f"{value:.6f}"
    return f"{value:.6e}"


def format_number(value: float) -> str:
    """Shortest text that reads back to the same float; integral values without a point."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def halton_points(
    bounds: Sequence[Tuple[float, float]],
    count: int,
    seed: int,
    include_corners: bool = True,
) -> np.ndarray:
    """Scrambled Halton points in a box, optionally preceded by the box corners."""
    dim = len(bounds)
    if dim == 0:
        return np.zeros((max(count, 1), 0))
    lower = np.array([b[0] for b in bounds], dtype=float)
    upper = np.array([b[1] for b in bounds], dtype=float)
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    points = qmc.scale(sampler.random(count), lower, upper)
    if include_corners and dim <= 10:
        grid = np.array(np.meshgrid(*[[lo, hi] for lo, hi in bounds], indexing="ij"))
        corners = grid.reshape(dim, -1).T
        points = np.vstack([corners, points])
    return points


def canonical_json(document: Any) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def sha256_hex(document: Any) -> str:
    return hashlib.sha256(canonical_json(document).encode("utf-8")).hexdigest()


def parse_key_value(text: str) -> Dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""
    result: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"Line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        result[key.strip()] = value.strip()
    return result


def parse_float_list(text: Optional[str]) -> List[float]:
    if not text:
        return []
    return [float(part) for part in text.replace(";", ",").split(",") if part.strip()]
