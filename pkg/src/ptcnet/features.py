"""Patch features for the learned pseudo-time step and their z-score scaling.

A patch is an element plus its (up to three) edge neighbours.  Each of the
four element blocks holds 31 values::

    3 edge lengths (edge k is opposite local vertex k)
    u, v, p at the 3 vertices
    R_u, R_v, R_p at the 3 vertices   (assembled weak residual)
    r_u, r_v, r_p at the 3 vertices   (element strong residual)
    cell Reynolds number rho |u_c| h / mu

The centre element comes first, neighbours follow in ascending element id,
and blocks of missing neighbours are zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import EPS_U, Problem

BLOCK = 31
N_FEATURES = 4 * BLOCK
EPS_SIGMA = 1e-12
FEATURE_NAMES = [f"f{k:03d}" for k in range(N_FEATURES)]


def element_blocks(problem: Problem, x: np.ndarray, R: np.ndarray | None = None,
                   strong: np.ndarray | None = None) -> np.ndarray:
    """(E, 31) per-element blocks."""
    x = np.asarray(x, dtype=float)
    R = problem.residual(x) if R is None else np.asarray(R, dtype=float)
    strong = problem.strong_residuals(x) if strong is None else strong
    mesh, n = problem.mesh, problem.n
    el = mesh.elements
    E = mesh.n_elements
    out = np.empty((E, BLOCK))
    out[:, 0:3] = mesh.edge_lengths()
    col = 3
    for field in range(3):
        out[:, col:col + 3] = x[el + field * n]
        col += 3
    for field in range(3):
        out[:, col:col + 3] = R[el + field * n]
        col += 3
    for field in range(3):
        out[:, col:col + 3] = strong[:, :, field]
        col += 3
    speed = np.maximum(problem.centroid_speed(x), EPS_U)
    out[:, col] = problem.props.rho * speed * problem.h / problem.props.mu
    return out


def extract_all(problem: Problem, x: np.ndarray, R: np.ndarray | None = None,
                strong: np.ndarray | None = None) -> np.ndarray:
    """(E, 124) raw patch features for every element."""
    blocks = element_blocks(problem, x, R, strong)
    nb = problem.mesh.neighbors
    out = np.zeros((len(blocks), N_FEATURES))
    out[:, :BLOCK] = blocks
    for k in range(3):
        ids = nb[:, k]
        ok = ids >= 0
        out[ok, (k + 1) * BLOCK:(k + 2) * BLOCK] = blocks[ids[ok]]
    return out


def extract_patch(problem: Problem, x: np.ndarray, R: np.ndarray, strong: np.ndarray,
                  e: int) -> np.ndarray:
    """Raw 124-entry feature vector of element ``e``."""
    E = problem.mesh.n_elements
    if not (isinstance(e, (int, np.integer)) and 0 <= e < E):
        raise IndexError(f"element id {e} outside [0, {E})")
    ids = [int(e)] + [int(j) for j in problem.mesh.neighbors[e] if j >= 0]
    blocks = element_blocks(problem, x, R, strong)
    out = np.zeros(N_FEATURES)
    for k, j in enumerate(ids):
        out[k * BLOCK:(k + 1) * BLOCK] = blocks[j]
    return out


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if np.any(std < EPS_SIGMA) or not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("std entries must be finite and >= the floor")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, n: int = N_FEATURES) -> Normalizer:
        return cls(np.zeros(n), np.ones(n))


def fit_normalizer(X: np.ndarray) -> Normalizer:
    """Column-wise mean and sample standard deviation, std floored at ``EPS_SIGMA``.

    Constant columns keep their exact value as the mean so they normalize to 0.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need a 2-D array with at least 2 samples")
    mean = X.mean(axis=0)
    const = np.all(X == X[0], axis=0)
    mean[const] = X[0, const]
    return Normalizer(mean, np.maximum(X.std(axis=0, ddof=1), EPS_SIGMA))


def normalize(norm: Normalizer, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=float) - norm.mean) / norm.std


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    X: np.ndarray          # (S, 124) raw features
    y: np.ndarray          # (S,) optimal dt (s)
    config_id: np.ndarray  # (S,) str
    iteration: np.ndarray  # (S,) int
    elem: np.ndarray       # (S,) int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, N_FEATURES)
        self.y = np.asarray(self.y, dtype=float)
        self.config_id = np.asarray(self.config_id, dtype=str)
        self.iteration = np.asarray(self.iteration, dtype=int)
        self.elem = np.asarray(self.elem, dtype=int)
        n = len(self.X)
        if not all(len(a) == n for a in (self.y, self.config_id, self.iteration, self.elem)):
            raise ValueError("dataset columns differ in length")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.config_id[idx], self.iteration[idx],
                       self.elem[idx])

    @classmethod
    def concat(cls, parts: list[Dataset]) -> Dataset:
        if not parts:
            return cls(np.zeros((0, N_FEATURES)), [], [], [], [])
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.config_id for p in parts]),
                   np.concatenate([p.iteration for p in parts]),
                   np.concatenate([p.elem for p in parts]))


def write_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(FEATURE_NAMES + ["dt_opt", "config_id", "iter", "elem"])
        for k in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.X[k]]
                       + [repr(float(ds.y[k])), ds.config_id[k], int(ds.iteration[k]), int(ds.elem[k])])


def read_dataset(path: str | Path) -> Dataset:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != FEATURE_NAMES + ["dt_opt", "config_id", "iter", "elem"]:
            raise ValueError(f"{path}: unexpected dataset header")
        rows = list(r)
    if not rows:
        return Dataset.concat([])
    X = np.array([[float(v) for v in row[:N_FEATURES]] for row in rows])
    return Dataset(X, [float(row[N_FEATURES]) for row in rows], [row[N_FEATURES + 1] for row in rows],
                   [int(row[N_FEATURES + 2]) for row in rows], [int(row[N_FEATURES + 3]) for row in rows])
