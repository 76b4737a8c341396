"""TCP NewReno window rules and the retransmission-timeout ladder.

Windows and thresholds are integer packet counts. Halving uses floor, with
the window clamped at 1 and the threshold at 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "TcpParams",
    "IntervalLadder",
    "CwndState",
    "ACKED",
    "TIMEOUT",
    "on_success",
    "on_fast_retransmit",
    "on_timeout",
    "next_interval",
    "next_slot",
    "outcome_distribution",
    "effective_rtt",
]

ACKED = "acked"
TIMEOUT = "timeout"

MIN_SSTHRESH = 2


@dataclass(frozen=True)
class IntervalLadder:
    """Inter-attempt durations ``[R, M, 2M, ..., t_max]``.

    Slot 0 is the acknowledged-round interval ``R``; slot ``k >= 1`` is the
    ``k``-th consecutive timeout, lasting ``M * 2**(k-1)``. Slots are the
    identity used everywhere; values are only looked up, never compared.
    """

    rtt: float
    first_rto: float
    levels: int

    @property
    def values(self) -> tuple[float, ...]:
        return (self.rtt,) + tuple(self.first_rto * 2.0**k for k in range(self.levels + 1))

    @property
    def t_max(self) -> float:
        return self.first_rto * 2.0**self.levels

    @property
    def top_slot(self) -> int:
        return self.levels + 1

    def __len__(self) -> int:
        return self.levels + 2

    def distinct_count(self) -> int:
        return self.levels + (2 if self.rtt < self.first_rto else 1)

    def value(self, slot: int) -> float:
        if not 0 <= slot <= self.top_slot:
            raise IndexError(f"slot {slot} outside ladder of {len(self)}")
        return self.rtt if slot == 0 else self.first_rto * 2.0 ** (slot - 1)

    def slot(self, value: float) -> int:
        """Timeout slot holding ``value`` (slot 0 only for a value below ``M``)."""
        for s in range(1, self.top_slot + 1):
            if math.isclose(value, self.value(s), rel_tol=1e-12):
                return s
        if math.isclose(value, self.rtt, rel_tol=1e-12):
            return 0
        raise ValueError(f"{value} is not on the ladder")

    def next_timeout_slot(self, slot: int) -> int:
        return min(slot + 1, self.top_slot)


@dataclass(frozen=True)
class TcpParams:
    """Parameters of one TCP flow.

    Attributes
    ----------
    rtt : float
        Round-trip time ``R`` in sec. In queuing mode this is the base RTT
        used for the first RTO (normally equal to ``prop_delay``).
    t_min, t_max : float
        RTO bounds in sec. ``t_max`` is clamped down to ``M * 2**k``.
    w_max : int
        Receiver window cap in packets.
    packet_error : float
        Independent per-packet loss probability during ON.
    prop_delay : float
        Constant RTT component ``Delta`` in sec (queuing mode).
    link_rate : float
        Bottleneck rate ``mu`` in packets/sec (queuing mode).
    queuing_mode : bool
        Use ``max(Delta, W / mu)`` as the acknowledged-round interval.
    slow_start_clamp : bool
        Cap slow-start doubling at the threshold instead of overshooting.
    """

    rtt: float
    t_min: float = 1.0
    t_max: float = 64.0
    w_max: int = 100
    packet_error: float = 0.0
    prop_delay: float = 0.0
    link_rate: float = math.inf
    queuing_mode: bool = False
    slow_start_clamp: bool = False

    def __post_init__(self):
        if not (self.rtt > 0 and math.isfinite(self.rtt)):
            raise ValueError(f"rtt must be positive, got {self.rtt}")
        if not 0 < self.t_min <= self.t_max:
            raise ValueError("need 0 < t_min <= t_max")
        if self.first_rto > self.t_max:
            raise ValueError(f"first RTO {self.first_rto} exceeds t_max {self.t_max}")
        if int(self.w_max) != self.w_max or self.w_max < 1:
            raise ValueError(f"w_max must be a positive integer, got {self.w_max}")
        object.__setattr__(self, "w_max", int(self.w_max))
        if not 0 <= self.packet_error < 1:
            raise ValueError(f"packet_error must lie in [0, 1), got {self.packet_error}")
        if self.queuing_mode and not (self.prop_delay > 0 and self.link_rate > 0):
            raise ValueError("queuing mode needs prop_delay > 0 and link_rate > 0")

    @property
    def first_rto(self) -> float:
        return max(self.rtt, self.t_min)

    @property
    def ladder(self) -> IntervalLadder:
        m = self.first_rto
        k = 0
        while m * 2.0 ** (k + 1) <= self.t_max * (1 + 1e-12):
            k += 1
        return IntervalLadder(self.rtt, m, k)

    def acked_interval(self, total_window: int) -> float:
        """Interval after an acknowledged round carrying ``total_window`` packets."""
        if self.queuing_mode:
            return effective_rtt(total_window, self.prop_delay, self.link_rate)
        return self.rtt

    def scaled(self, factor: float) -> "TcpParams":
        """Same flow with every time quantity multiplied by ``factor``."""
        from dataclasses import replace

        return replace(
            self,
            rtt=self.rtt * factor,
            t_min=self.t_min * factor,
            t_max=self.t_max * factor,
            prop_delay=self.prop_delay * factor,
            link_rate=self.link_rate / factor,
        )


class CwndState(NamedTuple):
    w: int
    h: int


def effective_rtt(total_window: int, prop_delay: float, link_rate: float) -> float:
    return max(prop_delay, total_window / link_rate)


def on_success(s: CwndState, params: TcpParams) -> CwndState:
    w, h = s
    if w < h:
        w2 = 2 * w
        if params.slow_start_clamp:
            w2 = min(w2, h)
    else:
        w2 = w + 1
    return CwndState(min(w2, params.w_max), h)


def on_fast_retransmit(s: CwndState, params: TcpParams) -> CwndState:
    half = s.w // 2
    return CwndState(max(half, 1), max(half, MIN_SSTHRESH))


def on_timeout(s: CwndState, params: TcpParams) -> CwndState:
    return CwndState(1, max(s.w // 2, MIN_SSTHRESH))


def next_interval(slot: int, outcome: str, params: TcpParams, w_next: int = 1) -> float:
    """Duration until the next attempt.

    ``slot`` is the ladder slot of the interval that just elapsed (0 after
    an acknowledged round). Returns the new interval in sec; use
    :func:`next_slot` for the slot itself.
    """
    ladder = params.ladder
    if outcome == ACKED:
        return params.acked_interval(w_next)
    if outcome == TIMEOUT:
        return ladder.value(next_slot(slot, outcome, params))
    raise ValueError(f"unknown outcome {outcome!r}")


def next_slot(slot: int, outcome: str, params: TcpParams) -> int:
    ladder = params.ladder
    if not 0 <= slot <= ladder.top_slot:
        raise IndexError(f"slot {slot} is not on the ladder")
    if outcome == ACKED:
        return 0
    return ladder.next_timeout_slot(slot)


def outcome_distribution(w: int, p: float) -> dict[str, float]:
    """Probabilities of a clean round and of a fast-retransmit round during ON."""
    if w < 1 or not 0 <= p < 1:
        raise ValueError("need w >= 1 and 0 <= p < 1")
    no_loss = (1.0 - p) ** w
    return {"no_loss": no_loss, "fast_retransmit": 1.0 - no_loss}
