"""Eigenvalue representation curves and eigenvector image exports."""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .data import write_pgm
from .errors import AnalysisError, ConfigurationError
from .featurespace import EPS_VALID, isqrt_exact


@dataclass(frozen=True)
class RepresentationCurve:
    """Share of each valid eigenvalue in the total, ranked descending."""

    layer: int
    eigenvalues: np.ndarray
    representation: np.ndarray
    cumulative: np.ndarray

    def points(self):
        return [(i + 1, float(r), float(c)) for i, (r, c) in enumerate(zip(self.representation, self.cumulative))]


def valid_eigenvalues(eigenvalues):
    """Real, positive eigenvalues above ``EPS_VALID`` times the largest."""
    lam = np.asarray(eigenvalues)
    if np.iscomplexobj(lam):
        lam = lam[np.abs(lam.imag) == 0].real
    lam = lam[np.isfinite(lam)].astype(np.float64)
    if lam.size == 0:
        return lam
    top = lam.max()
    return lam[(lam > 0) & (lam > EPS_VALID * top)]


def representation_curve(eigenvalues, layer=None):
    lam = np.sort(valid_eigenvalues(eigenvalues))[::-1]
    if lam.size == 0:
        raise AnalysisError(f"layer {layer}: no valid eigenvalues")
    rep = lam / lam.sum()
    return RepresentationCurve(layer, lam, rep, np.cumsum(rep))


def cumulative_fraction(curve, mass):
    """Fewest top-ranked eigenvectors whose cumulative representation reaches ``mass``."""
    if not 0 < mass <= 1:
        raise ConfigurationError(f"mass must lie in (0, 1], got {mass}")
    idx = int(np.searchsorted(curve.cumulative, mass, side="left"))
    return min(idx + 1, len(curve.cumulative))


def selection_cumulative(curve, count, mode="first_ranked"):
    """Cumulative representation of ``count`` eigenvectors picked from the top or bottom of the ranking."""
    if mode == "first_ranked":
        picked = curve.representation[:count]
    elif mode == "last_ranked":
        picked = curve.representation[::-1][:count]
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    return np.cumsum(picked)


def export_curve_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "representation", "cumulative"])
        for rank, rep, cum in curve.points():
            writer.writerow([rank, repr(rep), repr(cum)])


def to_gray_levels(row):
    """Map a vector affinely onto 0..255 (min -> 0, max -> 255); constant -> 128."""
    row = np.asarray(row, dtype=np.float64)
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.full(row.shape, 128, dtype=np.int64)
    return np.rint((row - lo) / (hi - lo) * 255).astype(np.int64)


def _square(space, what):
    side = isqrt_exact(space.n)
    if side is None:
        raise ConfigurationError(f"{what}: n={space.n} is not a perfect square")
    return side


def export_eigenimages(space, first_count, last_count, out_dir, layer=1):
    """Write the first and last basis rows as PGM images ``l{layer}_rank{r}.pgm``.

    Ranks are 1-based positions in the stored basis.  Returns the written paths.
    """
    side = _square(space, f"layer {layer}")
    os.makedirs(out_dir, exist_ok=True)
    p = space.p
    ranks = list(range(1, min(first_count, p) + 1))
    ranks += [r for r in range(max(p - last_count, 0) + 1, p + 1) if r not in ranks]
    paths = []
    for r in ranks:
        path = os.path.join(out_dir, f"l{layer}_rank{r}.pgm")
        write_pgm(path, to_gray_levels(space.basis[r - 1]).reshape(side, side))
        paths.append(path)
    return paths


def export_mean_image(space, out_path, layer=1):
    side = _square(space, f"layer {layer}")
    write_pgm(out_path, to_gray_levels(space.mean).reshape(side, side))
    return out_path
