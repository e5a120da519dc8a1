"""Arc-length parameterized polyline paths and geometry helpers.

A ``Path`` is the spine of everything kinematic in the package: IDM
agents advance along paths, routes are paths, and map lanes are
resampled path centerlines. Positions along a path are scalar arc
lengths; ``pose_at`` converts back to world coordinates.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation


class Path:
    """Piecewise-linear path with cumulative arc-length lookup.

    ``speed_limit`` is per-point (m/s) and is linearly carried along —
    it lets scenario builders slow traffic through turn zones.
    """

    def __init__(self, points, speed_limit=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ContractViolation(f"path needs [N>=2, 2] points, got {pts.shape}")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 1e-9):
            raise ContractViolation("path has repeated consecutive points")
        self.points = pts
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self._yaw = np.arctan2(seg[:, 1], seg[:, 0])
        if speed_limit is None:
            limit = np.full(pts.shape[0], np.inf)
        elif np.isscalar(speed_limit):
            limit = np.full(pts.shape[0], float(speed_limit))
        else:
            limit = np.asarray(speed_limit, dtype=np.float64)
            if limit.shape != (pts.shape[0],):
                raise ContractViolation("speed_limit must be scalar or per-point")
        self.speed_limit = limit

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def _locate(self, s: float):
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        frac = (s - self._cum[i]) / self._seg_len[i]
        return i, frac

    def point_at(self, s: float) -> np.ndarray:
        i, frac = self._locate(s)
        return self.points[i] + frac * self._seg[i]

    def pose_at(self, s: float):
        """(x, y, yaw) at arc length s; yaw is the segment heading."""
        i, frac = self._locate(s)
        p = self.points[i] + frac * self._seg[i]
        return float(p[0]), float(p[1]), float(self._yaw[i])

    def speed_limit_at(self, s: float) -> float:
        i, frac = self._locate(s)
        a, b = self.speed_limit[i], self.speed_limit[i + 1]
        if math.isinf(a) or math.isinf(b):
            return float(min(a, b))
        return float(a * (1 - frac) + b * frac)

    def project(self, point):
        """Closest point on the path: returns (arc_length, lateral_distance)."""
        p = np.asarray(point, dtype=np.float64)
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self._seg) / (self._seg_len**2)
        t = np.clip(t, 0.0, 1.0)
        closest = self.points[:-1] + t[:, None] * self._seg
        d = np.hypot(*(p - closest).T)
        i = int(np.argmin(d))
        return float(self._cum[i] + t[i] * self._seg_len[i]), float(d[i])

    def resample(self, spacing: float) -> np.ndarray:
        """Evenly spaced points (including both endpoints)."""
        n = max(2, int(math.ceil(self.length / spacing)) + 1)
        ss = np.linspace(0.0, self.length, n)
        return np.array([self.point_at(s) for s in ss]), ss

    def crossings(self, other: "Path"):
        """Arc-length pairs (s_self, s_other) where the centerlines cross.

        Collinear overlaps (shared/merged geometry) are not reported —
        those are handled by longitudinal projection, not by crossing
        conflicts.
        """
        out = []
        for i in range(len(self._seg)):
            p, r = self.points[i], self._seg[i]
            for j in range(len(other._seg)):
                q, s = other.points[j], other._seg[j]
                denom = r[0] * s[1] - r[1] * s[0]
                if abs(denom) < 1e-12:
                    continue
                qp = q - p
                t = (qp[0] * s[1] - qp[1] * s[0]) / denom
                u = (qp[0] * r[1] - qp[1] * r[0]) / denom
                if -1e-9 <= t <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
                    out.append(
                        (
                            float(self._cum[i] + np.clip(t, 0, 1) * self._seg_len[i]),
                            float(other._cum[j] + np.clip(u, 0, 1) * other._seg_len[j]),
                        )
                    )
        # de-duplicate near-identical hits from adjacent segment pairs
        dedup = []
        for c in sorted(out):
            if not dedup or abs(c[0] - dedup[-1][0]) > 0.5 or abs(c[1] - dedup[-1][1]) > 0.5:
                dedup.append(c)
        return dedup


# -- constructors -------------------------------------------------------------


def straight(p0, p1, n: int = 2, speed_limit=None) -> Path:
    pts = np.linspace(np.asarray(p0, float), np.asarray(p1, float), max(n, 2))
    return Path(pts, speed_limit)


def arc(center, radius: float, theta0: float, theta1: float,
        n: int = 16, speed_limit=None) -> Path:
    if radius <= 0:
        raise ContractViolation("arc radius must be positive")
    th = np.linspace(theta0, theta1, max(n, 2))
    pts = np.stack(
        [center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], axis=1
    )
    return Path(pts, speed_limit)


def join(paths, speed_limits=None) -> Path:
    """Concatenate paths end-to-start into one (junction points merged).

    ``speed_limits`` optionally gives one scalar per piece.
    """
    if not paths:
        raise ContractViolation("join needs at least one path")
    chunks = []
    limits = []
    for idx, p in enumerate(paths):
        pts = p.points
        lim = (
            np.full(len(pts), float(speed_limits[idx]))
            if speed_limits is not None
            else p.speed_limit
        )
        if chunks:
            prev_end = chunks[-1][-1]
            if np.hypot(*(pts[0] - prev_end)) < 1e-6:
                pts = pts[1:]
                lim = lim[1:]
        chunks.append(pts)
        limits.append(lim)
    return Path(np.concatenate(chunks), np.concatenate(limits))
