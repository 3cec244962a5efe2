"""GSD-scaled spatial encodings and 8-dimensional temporal encodings.

Spatial: 2-D sine-cosine tables are generated once on the grid whose side is
the least common multiple of all modalities' token-grid sides, then block-
averaged down to each modality's own grid. Because the LCM grid spans the
same metric footprint for every modality, coarser modalities see coarser
(averaged) encodings, which is what scales them by ground sampling distance.

Temporal: per selected time step, (sin, cos) of the day-of-year phase,
(sin, cos) of the hour-of-day phase, and a year-offset feature replicated
four times. Phases carry a 2*pi factor on the normalized day/hour; the
offset against the tile's reference date is divided by 365.25 to stay O(1).

The encoding vector for a token is the concatenation
``[spatial (width-8) | temporal (8)]``, added onto the embedding.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .specs import ModalitySpec, lcm_token_grid
from .temporal import TimeRecord

DAYS_PER_YEAR = 365.25
TEMPORAL_DIMS = 8


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard 1-D sine-cosine encoding, ``dim`` even: [sin block | cos block]."""
    if dim % 2 != 0:
        raise ValueError("encoding dim must be even")
    half = dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(side: int, dim: int) -> np.ndarray:
    """2-D table [side*side, dim], rows encode (row, col) row-major; dim % 4 == 0."""
    if dim % 4 != 0:
        raise ValueError("2-D encoding dim must be divisible by 4")
    coords = np.arange(side, dtype=np.float64)
    emb = sincos_1d(coords, dim // 2)
    rows = np.repeat(emb, side, axis=0)
    cols = np.tile(emb, (side, 1))
    return np.concatenate([rows, cols], axis=1)


def spatial_table(specs: list[ModalitySpec], width: int) -> dict[str, np.ndarray]:
    """Per-modality table [(I/P)^2, width-8] averaged from the LCM grid."""
    sdim = width - TEMPORAL_DIMS
    if sdim <= 0 or sdim % 4 != 0:
        raise ValueError("width-8 must be positive and divisible by 4")
    lcm = lcm_token_grid(specs)
    base = sincos_2d(lcm, sdim).reshape(lcm, lcm, sdim)
    tables: dict[str, np.ndarray] = {}
    for m in specs:
        if not m.active:
            continue
        g = m.grid_side
        b = lcm // g
        avg = base.reshape(g, b, g, b, sdim).mean(axis=(1, 3))
        tables[m.name] = np.ascontiguousarray(avg.reshape(g * g, sdim))
    return tables


def temporal_features(t: TimeRecord, ref: TimeRecord) -> np.ndarray:
    """[sin d, cos d, sin h, cos h, delta, delta, delta, delta]."""
    day_phase = 2.0 * np.pi * t.day_of_year / DAYS_PER_YEAR
    hour_phase = 2.0 * np.pi * t.hour_of_day / 24.0
    delta = (t.absolute_day - ref.absolute_day) / DAYS_PER_YEAR
    return np.array([
        np.sin(day_phase), np.cos(day_phase),
        np.sin(hour_phase), np.cos(hour_phase),
        delta, delta, delta, delta,
    ])


def encoding_block(spatial: np.ndarray, temporal: np.ndarray) -> np.ndarray:
    """Per-token encoding rows: concat(spatial row, temporal features)."""
    n = spatial.shape[0]
    return np.concatenate([spatial, np.broadcast_to(temporal, (n, TEMPORAL_DIMS))], axis=1)


def reference_date(times: list[TimeRecord]) -> TimeRecord:
    """Per-tile reference: median absolute day over every selected time step."""
    if not times:
        raise ValueError("no time records")
    med = float(np.median([t.absolute_day for t in times]))
    return TimeRecord(day_of_year=0.0, hour_of_day=0.0, absolute_day=int(round(med)))


def table_digest(table: np.ndarray) -> str:
    """SHA-256 of the float64 little-endian bytes; used for golden tests."""
    data = np.ascontiguousarray(table, dtype="<f8")
    return hashlib.sha256(data.tobytes()).hexdigest()
