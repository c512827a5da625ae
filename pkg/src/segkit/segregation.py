"""
Sectoral gender dominance, the Sectoral Segregation Index and the
high/low segregation split.

A sector is female-dominated at time ``t`` when its share of all employed
women exceeds its share of all employed men. The Sectoral Segregation
Index of a dominance group is half the summed absolute gap between the two
shares over the group's sectors; summed over both groups it equals the
Duncan dissimilarity index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import GroupTooSmall, IoFailure, MissingColumn, ZeroGenderTotal
from .frame import Frame

FEMALE, MALE = 0, 1
GROUPS = ("fd", "md")

#: Sector dominance in the UK 2005-2020 labour-force extract (SIC 2007
#: sections, O and U excluded): True = female-dominated.
UK_SIC_DOMINANCE = {
    "A": False, "B": False, "C": False, "D": False, "E": False, "F": False,
    "G": True, "H": False, "I": True, "J": False, "K": False, "L": True,
    "M": False, "N": False, "P": True, "Q": True, "R": False, "S": True,
    "T": True,
}

#: Published high/low segregation partition for the same sectors.
UK_SIC_DEGREE_PARTITION = {
    "A": "Low", "B": "Low", "C": "High", "D": "Low", "E": "Low", "F": "High",
    "G": "Low", "H": "High", "I": "High", "J": "High", "K": "Low", "L": "Low",
    "M": "High", "N": "Low", "P": "High", "Q": "High", "R": "Low", "S": "High",
    "T": "Low",
}

_GENDER_CODES = {"f": FEMALE, "female": FEMALE, "w": FEMALE, "1": FEMALE,
                 "m": MALE, "male": MALE, "0": MALE}


def _time_sort_key(values):
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def _codes(col, keep):
    """Dense codes and string levels of the kept cells of a column."""
    if col.kind == "categorical":
        codes = col.values[keep]
        used = np.unique(codes)
        remap = np.full(len(col.levels), -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return remap[codes], [col.levels[c] for c in used]
    vals = col.as_float()[keep]
    uniq, inv = np.unique(vals, return_inverse=True)
    labels = [str(int(v)) if float(v).is_integer() else repr(float(v)) for v in uniq]
    return inv, labels


@dataclass(frozen=True)
class SectorPanel:
    """Employment counts by time, sector and gender.

    ``counts[t, j, 0]`` is female and ``counts[t, j, 1]`` male employment
    in sector ``j`` at time ``t``.
    """

    times: tuple
    sectors: tuple
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        object.__setattr__(self, "times", tuple(str(t) for t in self.times))
        object.__setattr__(self, "sectors", tuple(str(s) for s in self.sectors))
        if counts.shape != (len(self.times), len(self.sectors), 2):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"({len(self.times)}, {len(self.sectors)}, 2)"
            )
        if np.any(~np.isfinite(counts)) or np.any(counts < 0):
            raise ValueError("employment counts must be finite and non-negative")
        if len(set(self.times)) != len(self.times) or len(set(self.sectors)) != len(self.sectors):
            raise ValueError("time and sector ids must be unique")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def totals(self):
        """``(T, 2)`` gender totals per time."""
        return self.counts.sum(axis=1)

    def shares(self):
        """``(T, J, 2)`` within-gender sector shares ``W_jt/W_t``, ``M_jt/M_t``."""
        tot = self.totals
        bad = np.argwhere(tot <= 0)
        if bad.size:
            t, g = bad[0]
            raise ZeroGenderTotal(
                f"no {'female' if g == FEMALE else 'male'} employment at time {self.times[t]}"
            )
        return self.counts / tot[:, None, :]

    def scaled(self, factor):
        return SectorPanel(self.times, self.sectors, self.counts * factor)

    def time_index(self, time):
        return self.times.index(str(time))

    # ---------------------------------------------------------------- IO
    @classmethod
    def from_long_csv(cls, path):
        """Read ``time,sector,gender,count`` rows; gender is F/M."""
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        need = {"time", "sector", "gender", "count"}
        if rows and not need <= set(rows[0]):
            raise MissingColumn(f"{path}: needs columns {sorted(need)}")
        return cls.from_records(
            (r["time"], r["sector"], r["gender"], float(r["count"])) for r in rows
        )

    @classmethod
    def from_records(cls, records):
        records = list(records)
        times = _time_sort_key({str(r[0]) for r in records})
        sectors = sorted({str(r[1]) for r in records})
        ti = {t: i for i, t in enumerate(times)}
        si = {s: i for i, s in enumerate(sectors)}
        counts = np.zeros((len(times), len(sectors), 2))
        for t, s, g, c in records:
            key = str(g).strip().lower()
            if key not in _GENDER_CODES:
                raise ValueError(f"unknown gender code {g!r}")
            counts[ti[str(t)], si[str(s)], _GENDER_CODES[key]] += c
        return cls(times, sectors, counts)

    @classmethod
    def from_frame(cls, frame: Frame, time="period", sector="sector", female="female",
                   employed=None):
        """Count rows of a person-level frame by time, sector and gender.

        Rows with a missing time, sector or gender are ignored, as are rows
        where the optional boolean ``employed`` column is not 1.
        """
        t_col, s_col, f_col = frame[time], frame[sector], frame[female]
        keep = ~(t_col.missing | s_col.missing | f_col.missing)
        if employed is not None:
            keep &= frame[employed].values == 1
        t_codes, t_levels = _codes(t_col, keep)
        s_codes, s_levels = _codes(s_col, keep)
        times = _time_sort_key(set(t_levels))
        sectors = sorted(set(s_levels))
        t_map = np.array([times.index(v) for v in t_levels], dtype=np.int64)
        s_map = np.array([sectors.index(v) for v in s_levels], dtype=np.int64)
        fem = f_col.as_float()[keep]
        g_idx = np.where(fem == 1, FEMALE, MALE)
        counts = np.zeros((len(times), len(sectors), 2))
        np.add.at(counts, (t_map[t_codes], s_map[s_codes], g_idx), 1.0)
        return cls(times, sectors, counts)

    def to_long_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "sector", "gender", "count"])
            for ti, t in enumerate(self.times):
                for si, s in enumerate(self.sectors):
                    for g, lab in ((FEMALE, "F"), (MALE, "M")):
                        w.writerow([t, s, lab, repr(float(self.counts[ti, si, g]))])


@dataclass(frozen=True)
class DominanceMap:
    """Female/male dominance labels, per time and pooled over time.

    ``mode`` selects which labels :meth:`female_mask` hands to downstream
    calculations.
    """

    times: tuple
    sectors: tuple
    per_time: np.ndarray
    pooled: np.ndarray
    mode: str = "per_time"

    def female_mask(self):
        """``(T, J)`` boolean mask of female-dominated cells under ``mode``."""
        if self.mode == "pooled":
            return np.broadcast_to(self.pooled, self.per_time.shape).copy()
        return self.per_time.copy()

    def label(self, sector, time=None):
        j = self.sectors.index(sector)
        if time is None:
            fem = self.pooled[j]
        else:
            fem = self.per_time[self.times.index(str(time)), j]
        return "Female" if fem else "Male"

    def pooled_labels(self):
        return {s: ("Female" if f else "Male") for s, f in zip(self.sectors, self.pooled)}

    def with_mode(self, mode):
        return DominanceMap(self.times, self.sectors, self.per_time, self.pooled, mode)


def _female_rule(w_share, m_share):
    # strict inequality: ties are male-dominated
    return w_share > m_share


def classify_dominance(panel: SectorPanel, pooling="per_time") -> DominanceMap:
    """Label each sector female- or male-dominated.

    Parameters
    ----------
    panel : SectorPanel
    pooling : {"per_time", "pooled"}
        Which labels downstream functions use by default. Both are always
        computed; pooled labels come from counts summed over all times.
    """
    if pooling not in ("per_time", "pooled"):
        raise ValueError(f"pooling must be 'per_time' or 'pooled', not {pooling!r}")
    sh = panel.shares()
    per_time = _female_rule(sh[..., FEMALE], sh[..., MALE])
    pooled_counts = panel.counts.sum(axis=0)
    tot = pooled_counts.sum(axis=0)
    pooled = _female_rule(pooled_counts[:, FEMALE] / tot[FEMALE],
                          pooled_counts[:, MALE] / tot[MALE])
    return DominanceMap(panel.times, panel.sectors, per_time, pooled, pooling)


@dataclass(frozen=True)
class SsiSeries:
    """Sectoral Segregation Index per time and dominance group.

    ``values[t, 0]`` is the female-dominated group and ``values[t, 1]`` the
    male-dominated group; ``contributions[t, j]`` is sector ``j``'s term
    ``|w_jt - m_jt| / 2``.
    """

    times: tuple
    sectors: tuple
    contributions: np.ndarray
    female_mask: np.ndarray
    values: np.ndarray
    dominance: DominanceMap = field(repr=False)

    def value(self, time, group):
        return float(self.values[self.times.index(str(time)), GROUPS.index(group)])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "group", "ssi"])
            for ti, t in enumerate(self.times):
                for gi, g in enumerate(GROUPS):
                    w.writerow([t, g, repr(float(self.values[ti, gi]))])

    def contributions_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "sector", "group", "contribution"])
            for ti, t in enumerate(self.times):
                for j, s in enumerate(self.sectors):
                    g = "fd" if self.female_mask[ti, j] else "md"
                    w.writerow([t, s, g, repr(float(self.contributions[ti, j]))])


def ssi(panel: SectorPanel, dominance: DominanceMap | None = None) -> SsiSeries:
    """Sectoral Segregation Index for both dominance groups at every time."""
    if dominance is None:
        dominance = classify_dominance(panel)
    if dominance.sectors != panel.sectors or dominance.times != panel.times:
        raise ValueError("dominance map was computed for a different panel")
    sh = panel.shares()
    contrib = 0.5 * np.abs(sh[..., FEMALE] - sh[..., MALE])
    fem = dominance.female_mask()
    values = np.column_stack([
        np.where(fem, contrib, 0.0).sum(axis=1),
        np.where(fem, 0.0, contrib).sum(axis=1),
    ])
    return SsiSeries(panel.times, panel.sectors, contrib, fem, values, dominance)


def duncan_index(panel: SectorPanel) -> np.ndarray:
    """Duncan dissimilarity index over all sectors, per time."""
    sh = panel.shares()
    return 0.5 * np.abs(sh[..., FEMALE] - sh[..., MALE]).sum(axis=1)


@dataclass(frozen=True)
class SegregationDegree:
    """High/low segregation label of each sector within its dominance group."""

    sectors: tuple
    group: tuple
    mean_contribution: np.ndarray
    label: tuple

    def as_dict(self):
        return {s: lab for s, lab in zip(self.sectors, self.label)}

    def members(self, group, label):
        return [s for s, g, lab in zip(self.sectors, self.group, self.label)
                if g == group and lab == label]

    def low_mask(self, sectors):
        d = self.as_dict()
        return np.array([d[s] == "Low" for s in sectors])


def rank_segregation(series: SsiSeries, split="median") -> SegregationDegree:
    """Split each dominance group into high and low segregation sectors.

    Sectors are grouped by their pooled dominance label and ranked by mean
    contribution over time. With ``split="median"`` a sector is High when
    its mean exceeds the group median (ties go Low). A mapping
    ``{sector: "High" | "Low"}`` imposes a given partition instead.

    Raises
    ------
    GroupTooSmall
        A dominance group has fewer than two sectors.
    """
    means = series.contributions.mean(axis=0)
    fem = series.dominance.pooled
    group = tuple("fd" if f else "md" for f in fem)
    for g in GROUPS:
        if group.count(g) < 2:
            raise GroupTooSmall(f"dominance group {g!r} has {group.count(g)} sector(s); need 2")
    if isinstance(split, str):
        if split != "median":
            raise ValueError(f"unknown split rule {split!r}")
        labels = [None] * len(group)
        for g in GROUPS:
            idx = [j for j, gg in enumerate(group) if gg == g]
            med = np.median(means[idx])
            for j in idx:
                labels[j] = "High" if means[j] > med else "Low"
    else:
        missing = [s for s in series.sectors if s not in split]
        if missing:
            raise ValueError(f"explicit split lacks sector(s) {missing}")
        labels = [str(split[s]) for s in series.sectors]
        bad = sorted({lab for lab in labels if lab not in ("High", "Low")})
        if bad:
            raise ValueError(f"labels must be 'High' or 'Low', got {bad}")
    return SegregationDegree(series.sectors, group, means, tuple(labels))
