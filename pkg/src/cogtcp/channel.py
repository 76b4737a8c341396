"""ON/OFF channel processes.

ON and OFF period laws, their phase-type encodings, the CTMC generator over
the combined phase set, and the channel-state transition kernel ``P_t``.

Phase indexing convention: OFF phases come first (``0 .. n_off - 1``), ON
phases follow. In the two-state exponential case index 0 is OFF and index 1
is ON.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

__all__ = [
    "DurationDistribution",
    "PhaseTypeRepresentation",
    "ChannelGenerator",
    "make_phase_type",
    "closed_form_kernel",
    "assemble_generator",
    "uniformized_kernel",
    "kernel_defect",
    "sample_duration",
    "off_fraction",
    "KernelHorizonError",
]

_KINDS = ("exponential", "erlang", "hyperexponential", "deterministic")
_MAX_HORIZON = 1e6


class KernelHorizonError(ValueError):
    pass


@dataclass(frozen=True)
class DurationDistribution:
    """Law of an ON or OFF period.

    Use the constructors :meth:`exponential`, :meth:`erlang`,
    :meth:`hyperexponential` and :meth:`deterministic` rather than building
    instances directly. Rates are in 1/sec, durations in sec.
    """

    kind: str
    rate: float = 0.0
    shape: int = 1
    weights: tuple[float, ...] = ()
    rates: tuple[float, ...] = ()
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind in ("exponential", "erlang"):
            if not (self.rate > 0 and math.isfinite(self.rate)):
                raise ValueError(f"{self.kind} rate must be positive and finite, got {self.rate}")
            if self.kind == "erlang" and (int(self.shape) != self.shape or self.shape < 1):
                raise ValueError(f"erlang shape must be a positive integer, got {self.shape}")
        elif self.kind == "hyperexponential":
            if len(self.weights) == 0 or len(self.weights) != len(self.rates):
                raise ValueError("hyperexponential needs matching, non-empty weights and rates")
            if any(w < 0 for w in self.weights):
                raise ValueError("hyperexponential weights must be non-negative")
            if abs(math.fsum(self.weights) - 1.0) > 1e-12:
                raise ValueError("hyperexponential weights must sum to 1")
            if any(not (r > 0 and math.isfinite(r)) for r in self.rates):
                raise ValueError("hyperexponential rates must be positive and finite")
        elif not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"deterministic value must be positive and finite, got {self.value}")

    @classmethod
    def exponential(cls, rate: float) -> "DurationDistribution":
        return cls("exponential", rate=float(rate))

    @classmethod
    def erlang(cls, shape: int, rate: float) -> "DurationDistribution":
        return cls("erlang", rate=float(rate), shape=int(shape))

    @classmethod
    def hyperexponential(cls, weights: Sequence[float], rates: Sequence[float]) -> "DurationDistribution":
        return cls(
            "hyperexponential",
            weights=tuple(float(w) for w in weights),
            rates=tuple(float(r) for r in rates),
        )

    @classmethod
    def deterministic(cls, value: float) -> "DurationDistribution":
        return cls("deterministic", value=float(value))

    def mean(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.rate
        if self.kind == "erlang":
            return self.shape / self.rate
        if self.kind == "hyperexponential":
            return math.fsum(w / r for w, r in zip(self.weights, self.rates))
        return self.value

    def variance(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.rate**2
        if self.kind == "erlang":
            return self.shape / self.rate**2
        if self.kind == "hyperexponential":
            m2 = math.fsum(2.0 * w / r**2 for w, r in zip(self.weights, self.rates))
            return m2 - self.mean() ** 2
        return 0.0

    def scaled(self, factor: float) -> "DurationDistribution":
        """Same family with every duration multiplied by ``factor``."""
        if self.kind == "deterministic":
            return DurationDistribution.deterministic(self.value * factor)
        if self.kind == "hyperexponential":
            return DurationDistribution.hyperexponential(self.weights, [r / factor for r in self.rates])
        return DurationDistribution(self.kind, rate=self.rate / factor, shape=self.shape)

    @property
    def is_phase_type(self) -> bool:
        return self.kind != "deterministic"


@dataclass(frozen=True, eq=False)
class PhaseTypeRepresentation:
    """Absorption-time law of a transient CTMC.

    Attributes
    ----------
    entry : ndarray
        Initial probability vector over transient phases.
    subgenerator : ndarray
        Rate matrix restricted to the transient phases (1/sec).
    """

    entry: np.ndarray
    subgenerator: np.ndarray

    def __post_init__(self):
        entry = np.array(self.entry, dtype=float).ravel()
        sub = np.array(self.subgenerator, dtype=float)
        n = entry.size
        if sub.shape != (n, n):
            raise ValueError(f"subgenerator must be {n}x{n}, got {sub.shape}")
        if np.any(entry < 0) or abs(entry.sum() - 1.0) > 1e-12:
            raise ValueError("entry must be a probability vector")
        off = sub - np.diag(np.diag(sub))
        if np.any(np.diag(sub) >= 0) or np.any(off < 0):
            raise ValueError("subgenerator needs negative diagonal and non-negative off-diagonal")
        rows = sub.sum(axis=1)
        if np.any(rows > 1e-12) or not np.any(rows < 0):
            raise ValueError("subgenerator rows must sum to <= 0 with absorption reachable")
        entry.setflags(write=False)
        sub.setflags(write=False)
        object.__setattr__(self, "entry", entry)
        object.__setattr__(self, "subgenerator", sub)

    @property
    def size(self) -> int:
        return self.entry.size

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.subgenerator.sum(axis=1)

    def mean(self) -> float:
        # E[T] = entry (-T)^{-1} 1
        return float(self.entry @ np.linalg.solve(-self.subgenerator, np.ones(self.size)))

    def second_moment(self) -> float:
        x = np.linalg.solve(-self.subgenerator, np.ones(self.size))
        return float(2.0 * self.entry @ np.linalg.solve(-self.subgenerator, x))

    def sample_path(self, rng: np.random.Generator) -> tuple[list[int], list[float]]:
        """Sample the visited phases and their sojourn times up to absorption."""
        sub = self.subgenerator
        exit_rates = self.exit_rates
        phases: list[int] = []
        sojourns: list[float] = []
        i = int(rng.choice(self.size, p=self.entry)) if self.size > 1 else 0
        while True:
            total = -sub[i, i]
            phases.append(i)
            sojourns.append(float(rng.exponential(1.0 / total)))
            jump = np.append(np.where(np.arange(self.size) == i, 0.0, sub[i]), exit_rates[i]) / total
            nxt = int(rng.choice(self.size + 1, p=jump))
            if nxt == self.size:
                return phases, sojourns
            i = nxt

    def sample_absorption_time(self, rng: np.random.Generator) -> float:
        return math.fsum(self.sample_path(rng)[1])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` independent absorption times, simulated phase by phase in bulk."""
        n = self.size
        sub = self.subgenerator
        totals = -np.diag(sub)
        jump = np.hstack([sub + np.diag(totals), self.exit_rates[:, None]]) / totals[:, None]
        cum = np.cumsum(jump, axis=1)
        cum[:, -1] = 1.0
        phase = rng.choice(n, size=size, p=self.entry)
        out = np.zeros(size)
        alive = np.arange(size)
        while alive.size:
            ph = phase[alive]
            out[alive] += rng.exponential(1.0, alive.size) / totals[ph]
            u = rng.random(alive.size)
            nxt = (u[:, None] > cum[ph]).sum(axis=1)
            keep = nxt < n
            phase[alive[keep]] = nxt[keep]
            alive = alive[keep]
        return out


def make_phase_type(dist: DurationDistribution) -> PhaseTypeRepresentation:
    """Canonical phase-type encoding of an exponential, Erlang or hyperexponential law."""
    if dist.kind == "exponential":
        return PhaseTypeRepresentation(np.array([1.0]), np.array([[-dist.rate]]))
    if dist.kind == "erlang":
        k = dist.shape
        sub = -dist.rate * np.eye(k) + dist.rate * np.eye(k, k=1)
        entry = np.zeros(k)
        entry[0] = 1.0
        return PhaseTypeRepresentation(entry, sub)
    if dist.kind == "hyperexponential":
        return PhaseTypeRepresentation(np.array(dist.weights), -np.diag(dist.rates))
    raise ValueError("deterministic duration is not phase-type representable")


def closed_form_kernel(lam0: float, lam1: float, t: float) -> np.ndarray:
    """Two-state ON/OFF transition kernel for exponential periods.

    ``lam0`` is the rate of OFF periods (leaving state 0) and ``lam1`` the
    rate of ON periods (leaving state 1). Returns the 2x2 matrix
    ``P_t[i, j] = P(S(t) = j | S(0) = i)``.
    """
    if not (lam0 > 0 and lam1 > 0):
        raise ValueError(f"rates must be positive, got lam0={lam0}, lam1={lam1}")
    if not t >= 0:
        raise ValueError(f"t must be non-negative, got {t}")
    total = lam0 + lam1
    decay = math.exp(-total * t)
    p00 = (lam1 + lam0 * decay) / total
    p11 = (lam0 + lam1 * decay) / total
    return np.array([[p00, 1.0 - p00], [1.0 - p11, p11]])


@dataclass(frozen=True, eq=False)
class ChannelGenerator:
    """CTMC over OFF phases followed by ON phases."""

    rate_matrix: np.ndarray
    off_phases: tuple[int, ...]
    on_phases: tuple[int, ...]
    off_entry: np.ndarray
    on_entry: np.ndarray
    uniformization_rate: float = field(default=0.0)

    def __post_init__(self):
        q = np.array(self.rate_matrix, dtype=float)
        n = q.shape[0]
        if q.shape != (n, n):
            raise ValueError("rate matrix must be square")
        if sorted(self.off_phases + self.on_phases) != list(range(n)):
            raise ValueError("off_phases and on_phases must partition the phase set")
        if not self.off_phases or not self.on_phases:
            raise ValueError("channel must have both ON and OFF phases")
        if np.any(np.abs(q.sum(axis=1)) > 1e-12 * max(1.0, np.abs(q).max())):
            raise ValueError("rate matrix rows must sum to 0")
        if np.any(q - np.diag(np.diag(q)) < 0):
            raise ValueError("rate matrix off-diagonals must be non-negative")
        _check_alternation(q, self.off_phases, self.on_phases)
        q.setflags(write=False)
        object.__setattr__(self, "rate_matrix", q)
        for name in ("off_entry", "on_entry"):
            vec = np.array(getattr(self, name), dtype=float)
            vec.setflags(write=False)
            object.__setattr__(self, name, vec)
        lam = self.uniformization_rate
        min_lam = float(np.max(np.abs(np.diag(q))))
        if lam == 0.0:
            object.__setattr__(self, "uniformization_rate", 1.001 * min_lam)
        elif lam < min_lam:
            raise ValueError("uniformization rate must dominate every exit rate")

    @property
    def size(self) -> int:
        return self.rate_matrix.shape[0]

    @property
    def is_on(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[list(self.on_phases)] = True
        return mask

    def stationary(self) -> np.ndarray:
        """Stationary law of the phase process."""
        n = self.size
        a = np.vstack([self.rate_matrix.T, np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        return pi

    def exponential_rates(self) -> tuple[float, float] | None:
        """``(lam0, lam1)`` when the channel is the two-state exponential one."""
        if self.size != 2:
            return None
        return -self.rate_matrix[0, 0], -self.rate_matrix[1, 1]

    def scaled(self, factor: float) -> "ChannelGenerator":
        """Generator with every duration stretched by ``factor``."""
        return ChannelGenerator(
            self.rate_matrix / factor,
            self.off_phases,
            self.on_phases,
            self.off_entry,
            self.on_entry,
            self.uniformization_rate / factor,
        )


def _check_alternation(q, off_phases, on_phases):
    adj = q > 0
    n = q.shape[0]
    # reachability closure by repeated squaring of the boolean adjacency
    reach = adj | np.eye(n, dtype=bool)
    for _ in range(max(1, int(math.ceil(math.log2(max(n, 2)))) + 1)):
        reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
    off, on = list(off_phases), list(on_phases)
    if not reach[np.ix_(on, off)].any(axis=1).all():
        raise ValueError("some ON phase cannot reach the OFF phases")
    if not reach[np.ix_(off, on)].any(axis=1).all():
        raise ValueError("some OFF phase cannot reach the ON phases")


def assemble_generator(on: PhaseTypeRepresentation, off: PhaseTypeRepresentation) -> ChannelGenerator:
    """Alternating-renewal generator from ON and OFF phase-type laws.

    Absorption out of an ON phase is routed into the OFF phases according to
    ``off.entry`` and vice versa, so every period starts fresh.
    """
    n0, n1 = off.size, on.size
    q = np.zeros((n0 + n1, n0 + n1))
    q[:n0, :n0] = off.subgenerator
    q[n0:, n0:] = on.subgenerator
    q[:n0, n0:] = np.outer(off.exit_rates, on.entry)
    q[n0:, :n0] = np.outer(on.exit_rates, off.entry)
    # exact zero row sums
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return ChannelGenerator(
        q,
        tuple(range(n0)),
        tuple(range(n0, n0 + n1)),
        np.concatenate([off.entry, np.zeros(n1)]),
        np.concatenate([np.zeros(n0), on.entry]),
    )


def uniformized_kernel(g: ChannelGenerator, t: float, tail_tol: float = 1e-12) -> np.ndarray:
    """Transition matrix ``exp(Q t)`` by truncated uniformization.

    The Poisson weights outside the retained window carry at most
    ``tail_tol`` total mass. The result is not renormalised, so row sums fall
    short of 1 by the truncated mass (see :func:`kernel_defect`).
    """
    if not t >= 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if not 0 < tail_tol < 1:
        raise ValueError("tail_tol must lie in (0, 1)")
    n = g.size
    if t == 0:
        return np.eye(n)
    lam = g.uniformization_rate
    mean = lam * t
    if mean > _MAX_HORIZON:
        raise KernelHorizonError("kernel horizon too large; rescale units")
    p = np.eye(n) + g.rate_matrix / lam
    pois = stats.poisson(mean)
    lo = int(pois.ppf(tail_tol / 2)) if mean > 50 else 0
    hi = int(pois.isf(tail_tol / 2)) + 1
    weights = pois.pmf(np.arange(lo, hi + 1))
    # P^lo by repeated squaring, then accumulate the retained terms
    term = np.linalg.matrix_power(p, lo) if lo > 0 else np.eye(n)
    out = np.zeros((n, n))
    for w in weights:
        out += w * term
        term = term @ p
    return out


def kernel_defect(kernel: np.ndarray) -> float:
    """Largest deviation of a row sum from 1."""
    return float(np.max(np.abs(kernel.sum(axis=1) - 1.0)))


def sample_duration(dist: DurationDistribution, rng: np.random.Generator) -> float:
    if dist.kind == "exponential":
        return float(rng.exponential(1.0 / dist.rate))
    if dist.kind == "erlang":
        return float(rng.gamma(dist.shape, 1.0 / dist.rate))
    if dist.kind == "hyperexponential":
        k = int(rng.choice(len(dist.weights), p=dist.weights))
        return float(rng.exponential(1.0 / dist.rates[k]))
    return dist.value


def off_fraction(on: DurationDistribution, off: DurationDistribution) -> float:
    """Long-run fraction of time the channel is OFF."""
    return off.mean() / (on.mean() + off.mean())
