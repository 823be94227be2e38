"""Ground-truth patient states and noisy pooled outcomes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pooling import PoolingDesign


@dataclass(frozen=True)
class NoiseModel:
    """Single-test error model: ``P(Y=1 | pool positive) = p_tp``, ``P(Y=1 | pool negative) = p_fp``."""

    p_tp: float
    p_fp: float

    def __post_init__(self):
        for name in ("p_tp", "p_fp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def u_w(self, y):
        """Per-test likelihoods of the observed bit under a positive (U) and negative (W) pool."""
        y = np.asarray(y, dtype=float)
        u = self.p_tp * y + (1.0 - self.p_tp) * (1.0 - y)
        w = self.p_fp * y + (1.0 - self.p_fp) * (1.0 - y)
        return u, w


NOISELESS = NoiseModel(1.0, 0.0)


def n_infected(n_patients: int, prevalence: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(n_patients * prevalence + 0.5))


def generate_states(n_patients: int, prevalence: float, seed=None) -> np.ndarray:
    """0/1 vector with exactly ``round(N * prevalence)`` ones at uniform positions."""
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError(f"prevalence={prevalence} outside [0, 1]")
    rng = np.random.default_rng(seed)
    x = np.zeros(n_patients, dtype=np.int8)
    k = n_infected(n_patients, prevalence)
    x[rng.choice(n_patients, size=k, replace=False)] = 1
    return x


def true_pool_states(d: PoolingDesign, x) -> np.ndarray:
    """Logical OR of the members' states for every pool."""
    x = np.asarray(x)
    if x.shape != (d.n_patients,):
        raise ValueError(f"states have shape {x.shape}, design has {d.n_patients} patients")
    return (x[d.patients_of_test] != 0).any(axis=1).astype(np.int8)


def observe(y0, noise: NoiseModel, seed=None) -> np.ndarray:
    """Pass true pool states through the noisy test, one uniform draw per pool in order."""
    y0 = np.asarray(y0)
    u = np.random.default_rng(seed).random(y0.shape[0])
    return np.where(y0 != 0, u < noise.p_tp, u < noise.p_fp).astype(np.int8)


def pool_likelihood(y_mu: int, pool_or: int, noise: NoiseModel) -> float:
    """``P(Y_mu = y_mu | T_mu = pool_or)``."""
    p = noise.p_tp if pool_or else noise.p_fp
    return p if y_mu else 1.0 - p


def write_states(x, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "state"])
        w.writerows((i + 1, int(v)) for i, v in enumerate(x))


def read_states(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = sorted((int(r["patient"]), int(r["state"])) for r in csv.DictReader(fh))
    return np.array([s for _, s in rows], dtype=np.int8)


def write_outcomes(y, path, y0=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test", "y0", "y"])
        for mu, v in enumerate(y):
            w.writerow([mu + 1, "" if y0 is None else int(y0[mu]), int(v)])


def read_outcomes(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(y, y0)``; ``y0`` is ``None`` when the column is blank."""
    with open(Path(path), newline="") as fh:
        rows = sorted(
            (int(r["test"]), r.get("y0", ""), int(r["y"])) for r in csv.DictReader(fh)
        )
    y = np.array([r[2] for r in rows], dtype=np.int8)
    if all(r[1] not in ("", None) for r in rows):
        return y, np.array([int(r[1]) for r in rows], dtype=np.int8)
    return y, None
