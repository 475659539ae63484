"""Context sources: synthetic uniform features or rows ingested from CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .streams import Channel, RandomnessStream


class ContextSourceError(ValueError):
    pass


def project_unit_ball(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norms > 1.0, x / np.maximum(norms, 1e-300), x)


@dataclass
class SyntheticContexts:
    """Componentwise Unif(low, high) features, optionally pulled into the unit ball."""

    d: int
    normalize: bool = False
    low: float = -1.0
    high: float = 1.0

    kind = "synthetic"

    def draw(self, stream: RandomnessStream, t: int, attempt: int = 0) -> np.ndarray:
        u = stream.uniforms(t, Channel.ARRIVAL_CONTEXT, self.d, start=attempt * self.d)
        x = self.low + (self.high - self.low) * u
        return project_unit_ball(x) if self.normalize else x

    def draw_batch(self, stream: RandomnessStream, t: int, first: int, n: int) -> np.ndarray:
        """Attempts ``first .. first+n-1`` at once; row ``i`` equals ``draw(.., first+i)``."""
        u = stream.uniforms(t, Channel.ARRIVAL_CONTEXT, n * self.d, start=first * self.d)
        x = (self.low + (self.high - self.low) * u).reshape(n, self.d)
        return project_unit_ball(x) if self.normalize else x

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.uniform(self.low, self.high, size=(n, self.d))
        return project_unit_ball(x) if self.normalize else x


@dataclass
class MatrixContexts:
    """Finite pool of feature rows sampled with replacement."""

    rows: np.ndarray
    replace: bool = True

    kind = "csv"

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def draw(self, stream: RandomnessStream, t: int, attempt: int = 0) -> np.ndarray:
        n = self.rows.shape[0]
        if not self.replace:
            # without replacement: round t consumes row t-1, in file order
            if t - 1 + attempt >= n:
                raise ContextSourceError(f"context source exhausted at round {t}")
            return self.rows[t - 1 + attempt].copy()
        u = stream.uniform(t, Channel.ARRIVAL_CONTEXT, lane=attempt)
        return self.rows[min(int(u * n), n - 1)].copy()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.rows[rng.integers(0, self.rows.shape[0], size=n)]


def load_contexts_csv(path, standardize: bool = False, normalize: bool = False,
                      replace: bool = True) -> MatrixContexts:
    """Read a header + numeric rows file into a context pool.

    ``standardize`` rescales each column to mean 0 / std 1 (constant columns
    are only centred); ``normalize`` then projects rows onto the unit ball.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ContextSourceError(f"{path}: empty file")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ContextSourceError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ContextSourceError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise ContextSourceError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=float)
    if standardize:
        X = X - X.mean(axis=0)
        std = X.std(axis=0)
        X = X / np.where(std > 0, std, 1.0)
    if normalize:
        X = project_unit_ball(X)
    return MatrixContexts(X, replace=replace)
