"""Particle size distributions on a sieve ladder.

Labels are cumulative mass percentages passing each sieve opening. Masses of
spheres are taken proportional to d**3 (uniform density).
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class PsdError(ValueError):
    pass


@dataclass(frozen=True)
class SieveLadder:
    openings: tuple = (106.0, 150.0, 250.0, 425.0, 710.0)
    lower_bound: float = 75.0
    upper_bound: float = 1180.0

    def __post_init__(self):
        openings = tuple(float(o) for o in self.openings)
        object.__setattr__(self, "openings", openings)
        if len(openings) == 0:
            raise PsdError("sieve ladder needs at least one opening")
        if any(b <= a for a, b in zip(openings, openings[1:])):
            raise PsdError(f"sieve openings must be strictly increasing: {openings}")
        if not self.lower_bound < openings[0]:
            raise PsdError("lower bound must be below the finest opening")
        if not openings[-1] < self.upper_bound:
            raise PsdError("upper bound must be above the coarsest opening")

    def __len__(self):
        return len(self.openings)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.array((self.lower_bound,) + self.openings + (self.upper_bound,))

    @property
    def columns(self) -> list[str]:
        """CSV column names, e.g. ``p106``."""
        return [f"p{o:g}" for o in self.openings]


DEFAULT_LADDER = SieveLadder()


@dataclass(frozen=True)
class PsdLabel:
    """Cumulative percentages passing, one per sieve opening."""

    passing: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.passing)
        object.__setattr__(self, "passing", values)
        for k, v in enumerate(values):
            if not (0.0 <= v <= 100.0):
                raise PsdError(f"passing[{k}] = {v} outside [0, 100]")
        for k in range(1, len(values)):
            if values[k] < values[k - 1]:
                raise PsdError(f"passing must be non-decreasing, got {values}")

    def __len__(self):
        return len(self.passing)

    def __iter__(self):
        return iter(self.passing)

    def __getitem__(self, k):
        return self.passing[k]

    def as_array(self) -> np.ndarray:
        return np.array(self.passing, dtype=float)


@dataclass
class PsdBinStats:
    bin_edges: np.ndarray
    retained_fraction: np.ndarray
    bin_mean_size: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bin_mean_size is None:
            self.bin_mean_size = 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


@dataclass(frozen=True)
class CharacteristicDiameters:
    d50: float
    d_m: float


def _check_label(label, ladder: SieveLadder) -> np.ndarray:
    if not isinstance(label, PsdLabel):
        label = PsdLabel(tuple(label))
    if len(label) != len(ladder):
        raise PsdError(f"label has {len(label)} values, ladder has {len(ladder)} openings")
    return label.as_array()


def psd_from_diameters(diameters, ladder: SieveLadder = DEFAULT_LADDER) -> PsdLabel:
    d = np.asarray(diameters, dtype=float).ravel()
    if d.size == 0:
        raise PsdError("no particles")
    bad = np.flatnonzero((d < ladder.lower_bound) | (d > ladder.upper_bound))
    if bad.size:
        i = int(bad[0])
        raise PsdError(f"sphere {i} has diameter {d[i]} outside "
                       f"[{ladder.lower_bound}, {ladder.upper_bound}]")
    mass = d ** 3
    total = mass.sum()
    passing = [100.0 * mass[d < o].sum() / total for o in ladder.openings]
    # rounding in the division can break monotonicity by an ulp
    passing = np.minimum(np.maximum.accumulate(passing), 100.0)
    return PsdLabel(tuple(passing))


def psd_from_assembly(assembly, ladder: SieveLadder = DEFAULT_LADDER) -> PsdLabel:
    """Mass-based label of a sphere assembly (or a plain array of diameters)."""
    diameters = getattr(assembly, "diameters", assembly)
    return psd_from_diameters(diameters, ladder)


def enumerate_target_psds(step_percent: float = 5, ladder: SieveLadder = DEFAULT_LADDER,
                          exclude: Iterable[Sequence[float]] = ()) -> list[PsdLabel]:
    """All monotone labels on a ``step_percent`` grid, in lexicographic order.

    ``exclude`` removes specific sequences from the result.
    """
    if step_percent <= 0:
        raise PsdError("step must be positive")
    n_levels = 100.0 / step_percent
    if abs(n_levels - round(n_levels)) > 1e-9:
        raise PsdError(f"step {step_percent} does not divide 100")
    levels = [i * step_percent for i in range(int(round(n_levels)) + 1)]
    skip = {tuple(float(v) for v in seq) for seq in exclude}
    out = []
    for combo in itertools.combinations_with_replacement(levels, len(ladder)):
        if combo in skip:
            continue
        out.append(PsdLabel(combo))
    return out


def retained_bins(label, ladder: SieveLadder = DEFAULT_LADDER) -> PsdBinStats:
    p = _check_label(label, ladder) / 100.0
    cumulative = np.concatenate(([0.0], p, [1.0]))
    return PsdBinStats(bin_edges=ladder.bin_edges, retained_fraction=np.diff(cumulative))


def cumulative_from_retained(stats: PsdBinStats) -> np.ndarray:
    """Inverse of :func:`retained_bins`, in percent."""
    return 100.0 * np.cumsum(stats.retained_fraction)[:-1]


def d50(label, ladder: SieveLadder = DEFAULT_LADDER, axis: str = "linear") -> float:
    """Diameter at 50 % passing by interpolation between bracketing points.

    The curve is closed with (lower_bound, 0 %) and (upper_bound, 100 %). An
    opening whose passing is exactly 50 % is returned as is, the smallest one on
    ties. ``axis`` selects interpolation in diameter ("linear") or log-diameter.
    """
    p = _check_label(label, ladder)
    exact = np.flatnonzero(p == 50.0)
    if exact.size:
        return ladder.openings[int(exact[0])]
    sizes = ladder.bin_edges
    curve = np.concatenate(([0.0], p, [100.0]))
    hi = int(np.argmax(curve > 50.0))
    lo = hi - 1
    frac = (50.0 - curve[lo]) / (curve[hi] - curve[lo])
    if axis == "linear":
        return float(sizes[lo] + frac * (sizes[hi] - sizes[lo]))
    if axis == "log":
        return float(np.exp(np.log(sizes[lo]) + frac * (np.log(sizes[hi]) - np.log(sizes[lo]))))
    raise PsdError(f"unknown interpolation axis {axis!r}")


def mean_diameter(label, ladder: SieveLadder = DEFAULT_LADDER) -> float:
    """Mass-weighted mean diameter over the retained bins (bin midpoints)."""
    stats = retained_bins(label, ladder)
    return float(np.dot(100.0 * stats.retained_fraction, stats.bin_mean_size) / 100.0)


def characteristic_diameters(label, ladder: SieveLadder = DEFAULT_LADDER,
                             axis: str = "linear") -> CharacteristicDiameters:
    return CharacteristicDiameters(d50=d50(label, ladder, axis), d_m=mean_diameter(label, ladder))


def format_labels_csv(labels, ladder: SieveLadder = DEFAULT_LADDER, ids=None) -> str:
    """Serialize labels as CSV with one ``p<opening>`` column per sieve."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ladder.columns if ids is None else ["id"] + ladder.columns
    writer.writerow(header)
    for i, label in enumerate(labels):
        row = [format_percent(v) for v in label]
        writer.writerow(row if ids is None else [ids[i]] + row)
    return buf.getvalue()


def parse_labels_csv(text: str, ladder: SieveLadder = DEFAULT_LADDER, validate: bool = True):
    """Returns (ids or None, N x len(ladder) array)."""
    reader = csv.DictReader(io.StringIO(text))
    cols = ladder.columns
    missing = [c for c in cols if c not in (reader.fieldnames or [])]
    if missing:
        raise PsdError(f"label CSV missing columns {missing}")
    has_ids = "id" in reader.fieldnames
    ids, rows = [], []
    for row in reader:
        values = [float(row[c]) for c in cols]
        if validate:
            PsdLabel(tuple(values))
        rows.append(values)
        if has_ids:
            ids.append(row["id"])
    return (ids if has_ids else None), np.array(rows, dtype=float).reshape(-1, len(cols))


def format_percent(value: float) -> str:
    """Up to six fractional digits, no trailing zeros."""
    s = f"{float(value):.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s
