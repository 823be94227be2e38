"""Random regular pooling designs.

A design assigns every one of ``M`` tests exactly ``N_G`` distinct patients and
every one of ``N`` patients to exactly ``N_O`` tests, so ``N_O * N == N_G * M``.
Designs produced by bootstrap resampling keep the row degree but lose the
column regularity; they are represented by the same type with ``overlap=None``.

Indices are 0-based in memory and 1-based in the text format handled by
:func:`write_design` / :func:`read_design`.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstructionError, DesignError


@dataclass(frozen=True, eq=False)
class PoolingDesign:
    n_patients: int
    n_tests: int
    group_size: int
    overlap: int | None
    patients_of_test: np.ndarray
    tests_of_patient: tuple

    @classmethod
    def from_pools(cls, pools, n_patients: int, overlap="infer") -> "PoolingDesign":
        """Build a design from an ``(M, N_G)`` array of 0-based patient indices.

        ``overlap="infer"`` sets the column degree when it is uniform and
        ``None`` otherwise.
        """
        pools = np.array(pools, dtype=np.int64, ndmin=2)
        if pools.size == 0:
            raise DesignError("a design needs at least one test")
        n_tests, group_size = pools.shape
        buckets = [[] for _ in range(n_patients)]
        for mu, row in enumerate(pools.tolist()):
            for i in row:
                if 0 <= i < n_patients:
                    buckets[i].append(mu)
        tests_of_patient = []
        for b in buckets:
            arr = np.array(sorted(set(b)), dtype=np.int64)
            arr.flags.writeable = False
            tests_of_patient.append(arr)
        if overlap == "infer":
            degrees = {len(b) for b in buckets}
            overlap = degrees.pop() if len(degrees) == 1 else None
        pools.flags.writeable = False
        return cls(n_patients, n_tests, group_size, overlap, pools, tuple(tests_of_patient))

    @property
    def alpha(self) -> float:
        return self.n_tests / self.n_patients

    @property
    def n_edges(self) -> int:
        return self.n_tests * self.group_size

    def column_degrees(self) -> np.ndarray:
        return np.array([len(t) for t in self.tests_of_patient], dtype=np.int64)

    def incidence(self) -> np.ndarray:
        """Dense ``(M, N)`` 0/1 pooling matrix."""
        f = np.zeros((self.n_tests, self.n_patients), dtype=np.int8)
        rows = np.repeat(np.arange(self.n_tests), self.group_size)
        f[rows, self.patients_of_test.ravel()] = 1
        return f


def check_parameters(n_patients: int, n_tests: int, group_size: int) -> int:
    """Return the overlap implied by the degree constraint or raise ``DesignError``."""
    if min(n_patients, n_tests, group_size) < 1:
        raise DesignError("n_patients, n_tests and group_size must be positive")
    if group_size > n_patients:
        raise DesignError(f"group_size {group_size} exceeds n_patients {n_patients}")
    if (n_tests * group_size) % n_patients:
        raise DesignError(
            f"n_tests * group_size = {n_tests * group_size} is not divisible by "
            f"n_patients = {n_patients}"
        )
    return n_tests * group_size // n_patients


def generate_design(
    n_patients: int,
    n_tests: int,
    group_size: int,
    seed=None,
    *,
    max_restarts: int = 20,
) -> PoolingDesign:
    """Draw a random design by stub matching followed by swap repair.

    Each patient contributes ``N_O`` stubs; the shuffled stubs are cut into
    ``M`` pools of ``N_G``.  Pools that received the same patient twice are
    fixed by swapping the duplicate with a random stub of another pool when the
    swap creates no new duplicate.  If a shuffle cannot be repaired within its
    attempt budget a fresh shuffle is drawn, up to ``max_restarts`` times.
    """
    overlap = check_parameters(n_patients, n_tests, group_size)
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n_patients, dtype=np.int64), overlap)
    for _ in range(max_restarts):
        rng.shuffle(stubs)
        pools = stubs.reshape(n_tests, group_size).tolist()
        if _repair(pools, rng):
            pools = np.sort(np.array(pools, dtype=np.int64), axis=1)
            return PoolingDesign.from_pools(pools, n_patients, overlap=overlap)
    raise ConstructionError(
        f"could not place edges without duplicates for N={n_patients}, M={n_tests}, "
        f"N_G={group_size} after {max_restarts} restarts"
    )


def _repair(pools, rng) -> bool:
    n_tests, group_size = len(pools), len(pools[0])
    counts = [Counter(row) for row in pools]
    bad = []
    for r, row in enumerate(pools):
        seen = set()
        for c, x in enumerate(row):
            if x in seen:
                bad.append((r, c))
            seen.add(x)
    budget = 1000 * (len(bad) + 1)
    while bad and budget > 0:
        r, c = bad[-1]
        x = pools[r][c]
        if counts[r][x] < 2:
            # an earlier swap already moved this copy away
            bad.pop()
            continue
        budget -= 1
        r2 = int(rng.integers(n_tests))
        c2 = int(rng.integers(group_size))
        y = pools[r2][c2]
        if r2 == r or counts[r][y] or counts[r2][x]:
            continue
        pools[r][c], pools[r2][c2] = y, x
        counts[r][x] -= 1
        counts[r][y] += 1
        counts[r2][y] -= 1
        counts[r2][x] += 1
        bad.pop()
    return all(max(cnt.values()) == 1 for cnt in counts)


def validate_design(d: PoolingDesign) -> tuple[bool, str]:
    """Check every design invariant; report the first violation (1-based indices)."""
    pools = np.asarray(d.patients_of_test)
    if pools.shape != (d.n_tests, d.group_size):
        return False, f"shape: expected {(d.n_tests, d.group_size)} pools array, got {pools.shape}"
    if len(d.tests_of_patient) != d.n_patients:
        return False, f"shape: {len(d.tests_of_patient)} patient lists for {d.n_patients} patients"
    if pools.size and (pools.min() < 0 or pools.max() >= d.n_patients):
        return False, "index out of range in patients_of_test"
    for mu, row in enumerate(pools):
        u, counts = np.unique(row, return_counts=True)
        if (counts > 1).any():
            return False, f"duplicate member: patient {u[counts > 1][0] + 1} repeated in test {mu + 1}"
    for i, tests in enumerate(d.tests_of_patient):
        tests = np.asarray(tests)
        if tests.size and (tests.min() < 0 or tests.max() >= d.n_tests):
            return False, f"index out of range in tests_of_patient for patient {i + 1}"
        if len(np.unique(tests)) != len(tests):
            return False, f"duplicate member: patient {i + 1} lists a test twice"
    by_rows = {(mu, int(i)) for mu, row in enumerate(pools) for i in row}
    by_cols = {(int(mu), i) for i, tests in enumerate(d.tests_of_patient) for mu in tests}
    if by_rows != by_cols:
        (mu, i), = sorted(by_rows ^ by_cols)[:1]
        return False, f"edge-set mismatch: (test {mu + 1}, patient {i + 1}) present in one direction only"
    if d.overlap is not None:
        if d.overlap * d.n_patients != d.group_size * d.n_tests:
            return False, "degree-sum: N_O * N != N_G * M"
        degrees = d.column_degrees()
        if (degrees != d.overlap).any():
            i = int(np.flatnonzero(degrees != d.overlap)[0])
            return False, f"column degree: patient {i + 1} is in {degrees[i]} tests, expected {d.overlap}"
    return True, "ok"


def write_design(d: PoolingDesign, path) -> None:
    """Header ``N M NG NO`` then one line of 1-based members per test.

    Irregular designs are written with ``NO = 0``.
    """
    lines = [f"{d.n_patients} {d.n_tests} {d.group_size} {d.overlap or 0}"]
    lines += [" ".join(str(i + 1) for i in row) for row in np.asarray(d.patients_of_test)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_design(path) -> PoolingDesign:
    tokens = [line.split() for line in Path(path).read_text(encoding="ascii").splitlines() if line.strip()]
    if not tokens or len(tokens[0]) != 4:
        raise DesignError(f"{path}: header must be 'N M NG NO'")
    n, m, g, o = (int(t) for t in tokens[0])
    rows = tokens[1:]
    if len(rows) != m or any(len(r) != g for r in rows):
        raise DesignError(f"{path}: expected {m} lines of {g} patient indices")
    pools = np.array([[int(t) - 1 for t in r] for r in rows], dtype=np.int64)
    d = PoolingDesign.from_pools(pools, n, overlap=o if o > 0 else None)
    ok, report = validate_design(d)
    if not ok:
        raise DesignError(f"{path}: {report}")
    return d
