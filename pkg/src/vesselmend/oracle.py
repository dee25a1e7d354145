"""Vesselness probability oracles for the reconnection walk.

An oracle maps a voxel coordinate to the probability that it lies on a
vessel centerline. The trainable default extracts two concentric cubic
intensity patches (a wide one max-pooled down to the narrow size, both
flattened and concatenated) and scores them with a logistic linear model
fit by L2-regularized gradient descent. A fixed intensity-percentile
ramp is available as a fallback when no training data exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Volume

__all__ = [
    "UntrainedOracleError",
    "ProbabilityOracle",
    "LinearPatchOracle",
    "IntensityPercentileOracle",
    "p_features",
    "sample_training_points",
]


class UntrainedOracleError(RuntimeError):
    """The trainable oracle was queried before fit()."""


def _replicated_patch(data: np.ndarray, coord, half: int) -> np.ndarray:
    """Cubic patch centered at coord; out-of-bounds indices clamp to edges."""
    idx = []
    for axis in range(3):
        rng = np.arange(coord[axis] - half, coord[axis] + half + 1)
        idx.append(np.clip(rng, 0, data.shape[axis] - 1))
    return data[np.ix_(idx[0], idx[1], idx[2])]


def _adaptive_max_pool(patch: np.ndarray, out: int) -> np.ndarray:
    """Max-pool a cube down to out^3 with near-equal index bins per axis."""
    cur = patch
    for axis in range(3):
        size = cur.shape[axis]
        slabs = []
        for b in range(out):
            lo = (b * size) // out
            hi = -(-(b + 1) * size // out)  # ceil
            sl = [slice(None)] * 3
            sl[axis] = slice(lo, hi)
            slabs.append(cur[tuple(sl)].max(axis=axis, keepdims=True))
        cur = np.concatenate(slabs, axis=axis)
    return cur


def p_features(vol: Volume, coord, big: int = 15, small: int = 7) -> np.ndarray:
    """Two-scale patch feature vector of length ``2 * small**3``.

    The big patch is max-pooled to the small patch's shape; both are
    flattened and concatenated. Patches replicate edge voxels outside
    the volume.
    """
    if big < small or small < 1 or big % 2 == 0 or small % 2 == 0:
        raise ValueError(f"patch sizes must be odd with big >= small, got ({big}, {small})")
    data = vol.data
    wide = _replicated_patch(data, coord, big // 2)
    narrow = _replicated_patch(data, coord, small // 2)
    pooled = _adaptive_max_pool(wide, small)
    return np.concatenate([pooled.ravel(), narrow.ravel()]).astype(np.float64)


def sample_training_points(
    lumen_fg: np.ndarray,
    centerline_fg: np.ndarray,
    seed: int = 0,
    wall_distance: float = 7.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 1:4 positive/negative coordinate sampling.

    Positives are all N centerline voxels. Negatives are 2N in-lumen
    non-centerline voxels plus 2N voxels outside the wall within
    ``wall_distance`` of the lumen (or as many as exist).
    """
    from scipy import ndimage

    pos = np.argwhere(centerline_fg)
    n = len(pos)
    if n == 0:
        raise ValueError("no centerline voxels to train on")
    rng = np.random.default_rng(seed)

    in_lumen = np.argwhere(lumen_fg & ~centerline_fg)
    take = min(2 * n, len(in_lumen))
    neg_a = in_lumen[rng.choice(len(in_lumen), size=take, replace=False)] if take else in_lumen[:0]

    d = ndimage.distance_transform_edt(~lumen_fg)
    shell = np.argwhere((d > 0) & (d <= wall_distance))
    take = min(2 * n, len(shell))
    neg_b = shell[rng.choice(len(shell), size=take, replace=False)] if take else shell[:0]

    coords = np.concatenate([pos, neg_a, neg_b])
    labels = np.concatenate(
        [np.ones(len(pos)), np.zeros(len(neg_a) + len(neg_b))]
    )
    return coords, labels


class ProbabilityOracle:
    """Interface: per-voxel centerline probability in [0, 1]."""

    def query(self, vol: Volume, coord) -> float:
        raise NotImplementedError

    def query_many(self, vol: Volume, coords) -> np.ndarray:
        return np.array([self.query(vol, c) for c in coords], dtype=np.float64)


@dataclass
class LinearPatchOracle(ProbabilityOracle):
    """Logistic linear model over the two-scale patch features."""

    big: int = 15
    small: int = 7
    epochs: int = 200
    learning_rate: float = 0.5
    # keeps the logistic response off float64 saturation so probability
    # sequences along a walk stay non-degenerate for downstream stats
    l2: float = 3e-2
    _w: np.ndarray | None = field(default=None, repr=False)
    _b: float = field(default=0.0, repr=False)
    _mu: np.ndarray | None = field(default=None, repr=False)
    _sd: np.ndarray | None = field(default=None, repr=False)

    def fit(
        self,
        vol: Volume,
        lumen_fg: np.ndarray,
        centerline_fg: np.ndarray,
        seed: int = 0,
    ) -> "LinearPatchOracle":
        """Fit on self-supervised samples drawn from a mask and centerline."""
        coords, labels = sample_training_points(lumen_fg, centerline_fg, seed)
        feats = np.stack([p_features(vol, c, self.big, self.small) for c in coords])
        self._mu = feats.mean(axis=0)
        sd = feats.std(axis=0)
        sd[sd == 0] = 1.0
        self._sd = sd
        x = (feats - self._mu) / self._sd
        y = labels.astype(np.float64)

        w = np.zeros(x.shape[1])
        b = 0.0
        n = len(y)
        for _ in range(self.epochs):
            z = x @ w + b
            p = 1.0 / (1.0 + np.exp(-z))
            err = p - y
            gw = x.T @ err / n + self.l2 * w
            gb = float(err.mean())
            w -= self.learning_rate * gw
            b -= self.learning_rate * gb
        self._w = w
        self._b = b
        return self

    def _features(self, vol: Volume, coords) -> np.ndarray:
        return np.stack([p_features(vol, c, self.big, self.small) for c in coords])

    def query_many(self, vol: Volume, coords) -> np.ndarray:
        if self._w is None:
            raise UntrainedOracleError("call fit() before query()")
        coords = np.asarray(coords).reshape(-1, 3)
        x = (self._features(vol, coords) - self._mu) / self._sd
        z = x @ self._w + self._b
        return 1.0 / (1.0 + np.exp(-z))

    def query(self, vol: Volume, coord) -> float:
        return float(self.query_many(vol, [coord])[0])


@dataclass
class IntensityPercentileOracle(ProbabilityOracle):
    """Fixed fallback: linear ramp between two intensity percentiles.

    Scores 0 at or below the low percentile of the volume's intensities
    and 1 at or above the high one. A constant volume scores 0.5
    everywhere.
    """

    low_pct: float = 50.0
    high_pct: float = 99.0
    _bounds: dict = field(default_factory=dict, repr=False)

    def _lo_hi(self, vol: Volume) -> tuple[float, float]:
        key = id(vol)
        if key not in self._bounds:
            lo = float(np.percentile(vol.data, self.low_pct))
            hi = float(np.percentile(vol.data, self.high_pct))
            self._bounds[key] = (vol, lo, hi)
        _, lo, hi = self._bounds[key]
        return lo, hi

    def query_many(self, vol: Volume, coords) -> np.ndarray:
        lo, hi = self._lo_hi(vol)
        coords = np.asarray(coords).reshape(-1, 3)
        vals = vol.data[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.float64)
        if hi <= lo:
            return np.full(len(coords), 0.5)
        return np.clip((vals - lo) / (hi - lo), 0.0, 1.0)

    def query(self, vol: Volume, coord) -> float:
        return float(self.query_many(vol, [coord])[0])
