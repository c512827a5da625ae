"""
Between/within decomposition of the change in a gender's employment share.

For each dominance group ``s`` and comparison time ``t`` against a base
time ``t0``::

    overall = sum_j a^g_j * d(e_j)  +  sum_j a_j * d(e^g_j)
              ---- between ------     ----- within ------

where ``e_j`` is sector ``j``'s share of employment, ``e^g_j`` the gender's
share inside sector ``j`` and ``a`` are midpoint averages of the base and
comparison values.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import UnknownBaseTime
from .segregation import FEMALE, GROUPS, MALE, DominanceMap, SectorPanel, classify_dominance


@dataclass(frozen=True)
class ShiftShareResult:
    """Components per comparison time (rows) and dominance group (columns).

    ``alpha_gender[t, j]`` and ``alpha_sector[t, j]`` are the midpoint
    weights used for sector ``j`` at comparison time ``t``.
    """

    gender: str
    base_time: str
    times: tuple
    sectors: tuple
    group_of_sector: tuple
    overall: np.ndarray
    between: np.ndarray
    within: np.ndarray
    residual: np.ndarray
    alpha_gender: np.ndarray
    alpha_sector: np.ndarray
    share_base: str

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "group", "overall", "between", "within", "residual"])
            for ti, t in enumerate(self.times):
                for gi, g in enumerate(GROUPS):
                    w.writerow([t, g] + [repr(float(a[ti, gi])) for a in
                                         (self.overall, self.between, self.within, self.residual)])

    def to_dict(self):
        return {
            "gender": self.gender,
            "base_time": self.base_time,
            "share_base": self.share_base,
            "rows": [
                {"time": t, "group": g,
                 "overall": float(self.overall[ti, gi]),
                 "between": float(self.between[ti, gi]),
                 "within": float(self.within[ti, gi]),
                 "residual": float(self.residual[ti, gi])}
                for ti, t in enumerate(self.times) for gi, g in enumerate(GROUPS)
            ],
        }


def _safe_ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def shift_share(panel: SectorPanel, gender="F", base_time=None,
                dominance: DominanceMap | None = None, share_base="group") -> ShiftShareResult:
    """Decompose the change in a gender's employment share since ``base_time``.

    Parameters
    ----------
    panel : SectorPanel
    gender : {"F", "M"}
        Gender whose share is decomposed.
    base_time : period id, optional
        Defaults to the earliest period in the panel.
    dominance : DominanceMap, optional
        Group membership uses its pooled (time-invariant) labels so that the
        set of sectors in each group is the same at both times. Computed from
        ``panel`` when omitted.
    share_base : {"group", "economy"}
        Denominator of the sector employment share ``e_j``. With
        ``"group"`` the share is taken within the dominance group and the
        components add up to the change in the group's gender share
        exactly. ``"economy"`` divides by total employment; the overall
        change is still the group's gender share and the gap shows up in
        ``residual``.

    Raises
    ------
    UnknownBaseTime
        ``base_time`` is not a panel period.
    """
    g = {"F": FEMALE, "f": FEMALE, "M": MALE, "m": MALE}.get(gender)
    if g is None:
        raise ValueError(f"gender must be 'F' or 'M', not {gender!r}")
    if share_base not in ("group", "economy"):
        raise ValueError(f"share_base must be 'group' or 'economy', not {share_base!r}")
    if base_time is None:
        base_time = panel.times[0]
    if str(base_time) not in panel.times:
        raise UnknownBaseTime(f"base time {base_time!r} is not in the panel {list(panel.times)}")
    b = panel.time_index(base_time)
    if dominance is None:
        dominance = classify_dominance(panel, "pooled")
    fem_group = np.asarray(dominance.pooled, dtype=bool)

    E = panel.counts.sum(axis=2)                      # (T, J) sector employment
    G = panel.counts[..., g]                          # (T, J) gender employment
    eg = _safe_ratio(G, E)                            # gender share inside sector

    T, J = E.shape
    shape = (T, len(GROUPS))
    overall, between, within = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    alpha_g = 0.5 * (eg[b] + eg)
    alpha_s = np.zeros((T, J))
    for gi, in_group in enumerate((fem_group, ~fem_group)):
        Es = E[:, in_group].sum(axis=1)
        Gs = G[:, in_group].sum(axis=1)
        denom = Es if share_base == "group" else E.sum(axis=1)
        e = _safe_ratio(E[:, in_group], denom[:, None])
        es_g = _safe_ratio(Gs, Es)
        a_s = 0.5 * (e[b] + e)
        alpha_s[:, in_group] = a_s
        overall[:, gi] = es_g - es_g[b]
        between[:, gi] = (alpha_g[:, in_group] * (e - e[b])).sum(axis=1)
        within[:, gi] = (a_s * (eg[:, in_group] - eg[b, in_group])).sum(axis=1)
    residual = overall - between - within
    return ShiftShareResult(
        gender="F" if g == FEMALE else "M",
        base_time=panel.times[b],
        times=panel.times,
        sectors=panel.sectors,
        group_of_sector=tuple("fd" if f else "md" for f in fem_group),
        overall=overall, between=between, within=within, residual=residual,
        alpha_gender=alpha_g, alpha_sector=alpha_s, share_base=share_base,
    )
