"""
Linear-time risk-set computations for cause-specific Cox models.

Three quantities recur in every E-step, M-step and standard-error computation:

* step-function lookups Λ₀k(T_i) = Σ_{t_kl ≤ T_i} ΔΛ₀k(t_kl) for all subjects,
* risk-set sums Σ_{r: T_r ≥ t_kl} a_r for all event times t_kl,
* generic lookups B(T_i) = Σ_{t_kl ≤ T_i} b_kl of per-event-time values.

Once the observed times are sorted, each of them is one joint pass over subjects and event times.
The naive engine evaluates the same formulas with one full pass per event time (or per subject),
which is quadratic in n. It serves as reference and as benchmark baseline.
"""
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from .errors import UnsortedInputError, ValidityError

if TYPE_CHECKING:
    from .params import BaselineHazard


class OpCounter:
    """Counts elementary scan steps, shared by all engine calls of a fit."""

    def __init__(self):
        self.ops = 0

    def tick(self, n: int = 1) -> None:
        self.ops += int(n)

    def reset(self) -> None:
        self.ops = 0

    def __int__(self):
        return self.ops

    def __repr__(self):
        return f"OpCounter(ops={self.ops})"


def _check_sorted(sorted_times: np.ndarray) -> np.ndarray:
    sorted_times = np.asarray(sorted_times, dtype=float)
    if np.any(np.diff(sorted_times) < 0):
        raise UnsortedInputError("Observed times must be sorted in increasing order")
    return sorted_times


def _check_event_times(event_times: np.ndarray) -> np.ndarray:
    event_times = np.asarray(event_times, dtype=float)
    if np.any(np.diff(event_times) >= 0):
        raise UnsortedInputError("Event times must be distinct and sorted in decreasing order")
    return event_times


class StepLookup:
    """
    For each T_(i) in increasing order, the number of event times ``<= T_(i)``.

    Built in a single joint pass over the sorted observed times and the event times, after which any
    right-continuous step function with jumps at the event times can be evaluated at all T_(i).

    Args:
        event_times (np.ndarray): Distinct event times, decreasing.
        sorted_times (np.ndarray): Observed times T_(1) ≤ … ≤ T_(n).
        counter (OpCounter, optional): Operation counter.

    Raises:
        UnsortedInputError: If either input is not sorted.
    """

    def __init__(self, event_times, sorted_times, counter: OpCounter | None = None):
        self.event_times = _check_event_times(event_times)
        self.sorted_times = _check_sorted(sorted_times)
        self.counter = counter if counter is not None else OpCounter()

        ascending = self.event_times[::-1]
        positions = np.empty(len(self.sorted_times), dtype=int)
        j = 0
        for i, t in enumerate(self.sorted_times):
            while j < len(ascending) and ascending[j] <= t:
                j += 1
            positions[i] = j
        self.positions = positions
        self.counter.tick(len(self.sorted_times) + len(ascending))

    def apply(self, values: np.ndarray) -> np.ndarray:
        """
        Evaluate Σ_{t_kl ≤ T_(i)} values_l for all i.

        Args:
            values (np.ndarray): One entry (scalar, vector or matrix) per event time, in the
                decreasing order of ``event_times``.

        Returns:
            np.ndarray: Lookups in increasing order of T, leading axis n.
        """
        values = np.asarray(values, dtype=float)
        cumulative = np.cumsum(values[::-1], axis=0)
        out = np.zeros((len(self.positions),) + values.shape[1:])
        hit = self.positions > 0
        out[hit] = cumulative[self.positions[hit] - 1]
        self.counter.tick(len(self.positions) + len(values))
        return out


class RiskSetAccumulator:
    """
    Risk sets R(t_kl) = {r: T_r ≥ t_kl} of one cause as boundaries into the sorted observed times.

    Scanning backward in time, each risk set is the previous one plus the subjects with
    T ∈ [t_k(l+1), t_kl), so all boundaries are found in one pass.

    Args:
        event_times (np.ndarray): Distinct event times, decreasing.
        sorted_times (np.ndarray): Observed times T_(1) ≤ … ≤ T_(n).
        counts (np.ndarray, optional): Tie counts d_kl.
        counter (OpCounter, optional): Operation counter.
    """

    def __init__(
        self,
        event_times,
        sorted_times,
        counts: np.ndarray | None = None,
        counter: OpCounter | None = None,
    ):
        self.event_times = _check_event_times(event_times)
        self.sorted_times = _check_sorted(sorted_times)
        self.counts = (
            np.ones(len(self.event_times), dtype=int) if counts is None else np.asarray(counts)
        )
        self.counter = counter if counter is not None else OpCounter()

        n = len(self.sorted_times)
        start = np.empty(len(self.event_times), dtype=int)
        i = n
        for l, t in enumerate(self.event_times):
            while i > 0 and self.sorted_times[i - 1] >= t:
                i -= 1
            start[l] = i
        self.start = start
        self.counter.tick(n + len(self.event_times))

    @property
    def sizes(self) -> np.ndarray:
        return len(self.sorted_times) - self.start

    def sums(self, a: np.ndarray) -> np.ndarray:
        """
        Σ_{r ∈ R(t_kl)} a_r for all event times.

        Args:
            a (np.ndarray): Per-subject quantities in increasing order of T, leading axis n.

        Returns:
            np.ndarray: One aggregate per event time, leading axis q_k.
        """
        a = np.asarray(a, dtype=float)
        n = len(self.sorted_times)
        if a.shape[0] != n:
            raise ValidityError(f"Expected {n} per-subject quantities, got {a.shape[0]}")
        # suffix[m] sums the m + 1 subjects with the largest T
        suffix = np.cumsum(a[::-1], axis=0)
        out = np.zeros((len(self.start),) + a.shape[1:])
        nonempty = self.start < n
        out[nonempty] = suffix[n - self.start[nonempty] - 1]
        self.counter.tick(n + len(self.start))
        return out


def scan_cumhazard(h: "BaselineHazard", sorted_times, counter: OpCounter | None = None) -> np.ndarray:
    """Λ₀k(T_(i)) for all sorted observed times in one pass."""
    return StepLookup(h.times, sorted_times, counter).apply(h.jumps)


def scan_riskset_sums(a, event_times, sorted_times, counter: OpCounter | None = None) -> np.ndarray:
    """Risk-set sums of ``a`` (given in increasing order of T) at all event times."""
    return RiskSetAccumulator(event_times, sorted_times, counter=counter).sums(a)


def scan_B_lookup(b, event_times, sorted_times, counter: OpCounter | None = None) -> np.ndarray:
    """B(T_(i)) = Σ_{t_kl ≤ T_(i)} b_kl for all sorted observed times."""
    return StepLookup(event_times, sorted_times, counter).apply(b)


def naive_B_lookup(b, event_times, times, counter: OpCounter | None = None) -> np.ndarray:
    """Global search of every T_i among all event times. ``times`` need not be sorted."""
    counter = counter if counter is not None else OpCounter()
    b = np.asarray(b, dtype=float)
    ascending = np.asarray(event_times, dtype=float)[::-1]
    cumulative = np.cumsum(b[::-1], axis=0)
    out = np.zeros((len(times),) + b.shape[1:])
    for i, t in enumerate(times):
        below = int(np.count_nonzero(ascending <= t))
        if below:
            out[i] = cumulative[below - 1]
        counter.tick(len(ascending))
    return out


def naive_cumhazard(h: "BaselineHazard", times, counter: OpCounter | None = None) -> np.ndarray:
    return naive_B_lookup(h.jumps, h.times, times, counter)


def naive_riskset_sums(a, event_times, times, counter: OpCounter | None = None) -> np.ndarray:
    """One full pass over all subjects per event time. ``times`` need not be sorted."""
    counter = counter if counter is not None else OpCounter()
    a = np.asarray(a, dtype=float)
    times = np.asarray(times, dtype=float)
    out = np.zeros((len(event_times),) + a.shape[1:])
    for l, t in enumerate(event_times):
        out[l] = a[times >= t].sum(axis=0)
        counter.tick(len(times))
    return out


class Engine:
    """
    Risk-set computations over fixed survival outcomes, with inputs and outputs in subject order.

    Event times per cause are found once at construction. Subclasses implement
    :meth:`riskset_sums` and :meth:`step_values`.

    Args:
        T (np.ndarray): Observed times, subject order.
        D (np.ndarray): Causes, 0 for censored.
        K (int): Number of causes.
        counter (OpCounter, optional): Shared operation counter.
    """

    name = ""

    def __init__(self, T, D, K: int, counter: OpCounter | None = None):
        self.T = np.asarray(T, dtype=float)
        self.D = np.asarray(D, dtype=int)
        self.K = K
        self.n = len(self.T)
        self.counter = counter if counter is not None else OpCounter()
        self.order = np.argsort(self.T, kind="stable")
        self.sorted_times = self.T[self.order]

        self._times, self._counts, self._ranks = [], [], []
        for k in range(K):
            mask = self.D == k + 1
            ascending, inverse, counts = np.unique(
                self.T[mask], return_inverse=True, return_counts=True
            )
            rank = np.full(self.n, -1, dtype=int)
            rank[mask] = len(ascending) - 1 - inverse.ravel()
            self._times.append(ascending[::-1].copy())
            self._counts.append(counts[::-1].copy())
            self._ranks.append(rank)
        logger.debug(
            f"{self.name} engine over {self.n} subjects, event times per cause "
            f"{[len(t) for t in self._times]}"
        )

    def event_times(self, k: int) -> np.ndarray:
        """Distinct cause-k event times, decreasing (``k`` is 0-based)."""
        return self._times[k]

    def event_counts(self, k: int) -> np.ndarray:
        return self._counts[k]

    def event_rank(self, k: int) -> np.ndarray:
        """Position of each subject's own event time among the cause-k event times, -1 if none."""
        return self._ranks[k]

    def at_event(self, k: int, values) -> np.ndarray:
        """Per subject, the entry of ``values`` at its own cause-k event time (zero otherwise)."""
        values = np.asarray(values, dtype=float)
        rank = self._ranks[k]
        out = np.zeros((self.n,) + values.shape[1:])
        hit = rank >= 0
        out[hit] = values[rank[hit]]
        return out

    def riskset_sums(self, k: int, a) -> np.ndarray:
        raise NotImplementedError

    def step_values(self, k: int, values) -> np.ndarray:
        raise NotImplementedError

    def cum_hazard(self, k: int, hazard: "BaselineHazard") -> np.ndarray:
        """Λ₀k(T_i) for every subject, in subject order."""
        if len(hazard) != len(self._times[k]) or not np.array_equal(hazard.times, self._times[k]):
            raise ValidityError(f"Baseline hazard of cause {k + 1} does not match the event times")
        return self.step_values(k, hazard.jumps)


class ScanEngine(Engine):
    name = "scan"

    def __init__(self, T, D, K: int, counter: OpCounter | None = None):
        super().__init__(T, D, K, counter)
        self._lookups = [StepLookup(t, self.sorted_times, self.counter) for t in self._times]
        self._accumulators = [
            RiskSetAccumulator(t, self.sorted_times, c, self.counter)
            for t, c in zip(self._times, self._counts)
        ]

    def riskset_sums(self, k: int, a) -> np.ndarray:
        return self._accumulators[k].sums(np.asarray(a, dtype=float)[self.order])

    def step_values(self, k: int, values) -> np.ndarray:
        sorted_values = self._lookups[k].apply(values)
        out = np.empty_like(sorted_values)
        out[self.order] = sorted_values
        return out


class NaiveEngine(Engine):
    name = "naive"

    def riskset_sums(self, k: int, a) -> np.ndarray:
        return naive_riskset_sums(a, self._times[k], self.T, self.counter)

    def step_values(self, k: int, values) -> np.ndarray:
        return naive_B_lookup(values, self._times[k], self.T, self.counter)


engines = {
    "scan": ScanEngine,
    "naive": NaiveEngine,
}


def make_engine(name: str, T, D, K: int, counter: OpCounter | None = None) -> Engine:
    if name not in engines:
        raise ValidityError(f"Unknown engine {name!r}, choose from {sorted(engines)}")
    return engines[name](T, D, K, counter)
