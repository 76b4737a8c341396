"""Embedded Markov chain of TCP over an ON/OFF channel.

A state is observed at each window transmission attempt::

    (phase, slot, w_1, h_1, ..., w_N, h_N)

``phase`` is the channel phase at the attempt, ``slot`` the ladder slot of
the interval until the next attempt (0 after an acknowledged round, ``k``
after the ``k``-th consecutive timeout) and ``(w_i, h_i)`` the window and
threshold of flow ``i`` after the attempt's outcome. A single flow is the
``N = 1`` case.

Transitions: the phase moves by ``P_t`` over the state's interval. Landing
ON, each flow independently loses at least one of its ``w_i`` packets with
probability ``1 - (1 - p_i)**w_i`` (fast retransmit) or grows its window;
landing OFF, every flow times out.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .channel import ChannelGenerator, closed_form_kernel, kernel_defect, uniformized_kernel
from .tcp import CwndState, TcpParams, on_fast_retransmit, on_success, on_timeout

__all__ = [
    "StateSpaceTooLarge",
    "ConvergenceError",
    "NumericalConfigError",
    "KernelCache",
    "MarkovChain",
    "StationaryDistribution",
    "PerfMetrics",
    "enumerate_states",
    "check_shared_link",
    "transition_row",
    "build_chain",
    "build_joint",
    "solve_stationary",
    "prob_timeout",
    "throughput",
    "metrics_per_flow",
    "analyze_flow",
    "analyze_independent",
    "always_on_throughput",
]

MAX_STATES = 20_000_000
KERNEL_TAIL_TOL = 1e-14
ROW_MASS_TOL = 1e-6


class StateSpaceTooLarge(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class NumericalConfigError(RuntimeError):
    pass


class KernelCache:
    """Channel kernels ``P_t`` keyed by interval length.

    ``g=None`` stands for a channel that is always ON (one phase, identity
    kernel). ``method`` is ``"uniformization"`` or ``"closed_form"``; the
    latter needs the two-state exponential generator.
    """

    def __init__(self, g: ChannelGenerator | None, method: str = "uniformization",
                 tail_tol: float = KERNEL_TAIL_TOL):
        if method not in ("uniformization", "closed_form"):
            raise ValueError(f"unknown kernel method {method!r}")
        if method == "closed_form" and (g is None or g.exponential_rates() is None):
            raise ValueError("closed-form kernel needs a two-state exponential channel")
        self.g = g
        self.method = method
        self.tail_tol = tail_tol
        self.max_defect = 0.0
        self._cache: dict[float, np.ndarray] = {}
        if g is None:
            self.size = 1
            self.is_on = np.array([True])
            self.on_entry = np.array([1.0])
        else:
            self.size = g.size
            self.is_on = g.is_on
            self.on_entry = g.on_entry

    def __call__(self, t: float) -> np.ndarray:
        k = self._cache.get(t)
        if k is None:
            if self.g is None:
                k = np.ones((1, 1))
            elif self.method == "closed_form":
                lam0, lam1 = self.g.exponential_rates()
                k = closed_form_kernel(lam0, lam1, t)
            else:
                k = uniformized_kernel(self.g, t, self.tail_tol)
            self.max_defect = max(self.max_defect, kernel_defect(k))
            self._cache[t] = k
        return k


def check_shared_link(flows: Sequence[TcpParams]):
    head = flows[0]
    for f in flows[1:]:
        same = (f.rtt, f.t_min, f.t_max, f.queuing_mode, f.prop_delay, f.link_rate) == (
            head.rtt, head.t_min, head.t_max, head.queuing_mode, head.prop_delay, head.link_rate)
        if not same:
            raise ValueError("flows of a joint chain must share RTT, RTO bounds, delay and link rate")


def state_interval(state: tuple[int, ...], flows: Sequence[TcpParams]) -> float:
    slot = state[1]
    if slot == 0:
        return flows[0].acked_interval(sum(state[2::2]))
    return flows[0].ladder.value(slot)


def transition_row(state: tuple[int, ...], flows: Sequence[TcpParams] | TcpParams,
                   kernels: KernelCache) -> list[tuple[tuple[int, ...], float]]:
    """Successor states of ``state`` with their probabilities.

    Raises :class:`NumericalConfigError` when the row mass departs from 1 by
    more than ``1e-6`` (e.g. a badly truncated kernel).
    """
    if isinstance(flows, TcpParams):
        flows = [flows]
    s, slot = state[0], state[1]
    pairs = [CwndState(state[2 + 2 * i], state[3 + 2 * i]) for i in range(len(flows))]
    kern = kernels(state_interval(state, flows))
    timeout_slot = flows[0].ladder.next_timeout_slot(slot)

    # per-flow ON outcomes, merged when both branches land on the same pair
    on_choices = []
    for cw, f in zip(pairs, flows):
        clean = (1.0 - f.packet_error) ** cw.w
        opts: dict[CwndState, float] = {}
        if clean > 0:
            nxt = on_success(cw, f)
            opts[nxt] = opts.get(nxt, 0.0) + clean
        if clean < 1:
            nxt = on_fast_retransmit(cw, f)
            opts[nxt] = opts.get(nxt, 0.0) + (1.0 - clean)
        on_choices.append(list(opts.items()))
    on_outcomes: list[tuple[tuple[int, ...], float]] = []
    for combo in itertools.product(*on_choices):
        prob = 1.0
        flat: list[int] = []
        for cw, q in combo:
            prob *= q
            flat.extend(cw)
        on_outcomes.append((tuple(flat), prob))
    off_flat: list[int] = []
    for cw, f in zip(pairs, flows):
        off_flat.extend(on_timeout(cw, f))
    off_flat_t = tuple(off_flat)

    row: list[tuple[tuple[int, ...], float]] = []
    for s2 in range(kernels.size):
        k = kern[s, s2]
        if k <= 0.0:
            continue
        if kernels.is_on[s2]:
            for flat, q in on_outcomes:
                if q > 0.0:
                    row.append(((s2, 0) + flat, k * q))
        else:
            row.append(((s2, timeout_slot) + off_flat_t, k))
    mass = math.fsum(q for _, q in row)
    if abs(mass - 1.0) > ROW_MASS_TOL:
        raise NumericalConfigError(f"transition row of {state} has mass {mass}")
    return row


@dataclass
class MarkovChain:
    """Reachable states and the sparse transition matrix between them."""

    flows: tuple[TcpParams, ...]
    kernels: KernelCache
    states: np.ndarray
    matrix: sp.csr_matrix
    interval: np.ndarray
    index: dict

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def is_off(self) -> np.ndarray:
        return ~self.kernels.is_on[self.states[:, 0]]

    def window(self, flow: int = 0) -> np.ndarray:
        return self.states[:, 2 + 2 * flow]

    def threshold(self, flow: int = 0) -> np.ndarray:
        return self.states[:, 3 + 2 * flow]


def initial_states(kernels: KernelCache, n_flows: int) -> list[tuple[int, ...]]:
    """ON entry phases with slot 0, w = 1, h = 2 for every flow."""
    phases = [int(i) for i in np.flatnonzero(kernels.on_entry > 0)]
    return [(i, 0) + (1, 2) * n_flows for i in phases]


def build_chain(flows: Sequence[TcpParams] | TcpParams, g: ChannelGenerator | None, *,
                kernel_method: str = "uniformization", max_states: int = MAX_STATES,
                seeds: Sequence[tuple[int, ...]] | None = None) -> MarkovChain:
    """Breadth-first reachability closure plus transition matrix.

    ``seeds`` overrides the initial states of the search.
    """
    if isinstance(flows, TcpParams):
        flows = [flows]
    flows = tuple(flows)
    if not flows:
        raise ValueError("need at least one flow")
    check_shared_link(flows)
    kernels = KernelCache(g, kernel_method)
    start = list(seeds) if seeds is not None else initial_states(kernels, len(flows))
    index: dict[tuple[int, ...], int] = {}
    order: list[tuple[int, ...]] = []
    queue: deque = deque()
    for st in start:
        if st not in index:
            index[st] = len(order)
            order.append(st)
            queue.append(st)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    while queue:
        st = queue.popleft()
        i = index[st]
        for nxt, q in transition_row(st, flows, kernels):
            j = index.get(nxt)
            if j is None:
                j = len(order)
                if j >= max_states:
                    raise StateSpaceTooLarge("state space too large; reduce W_max or flow count")
                index[nxt] = j
                order.append(nxt)
                queue.append(nxt)
            rows.append(i)
            cols.append(j)
            vals.append(q)
    n = len(order)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    matrix.sum_duplicates()
    states = np.array(order, dtype=np.int64)
    interval = np.array([state_interval(st, flows) for st in order])
    return MarkovChain(flows, kernels, states, matrix, interval, index)


def enumerate_states(params: TcpParams, g: ChannelGenerator | None,
                     max_states: int = MAX_STATES) -> list[tuple[int, ...]]:
    """Reachable single-flow states in breadth-first order."""
    chain = build_chain(params, g, max_states=max_states)
    return [tuple(int(x) for x in row) for row in chain.states]


def build_joint(flows: Sequence[TcpParams], g: ChannelGenerator, n_flows: int | None = None, *,
                max_states: int = MAX_STATES, kernel_method: str = "uniformization") -> MarkovChain:
    """Joint chain of flows sharing one channel and one queuing bottleneck.

    Every flow must run in queuing mode with the same delay and link rate;
    the round interval after an acknowledged attempt is
    ``max(Delta, sum(w_i) / mu)``.
    """
    flows = list(flows)
    if n_flows is not None and n_flows != len(flows):
        if len(flows) != 1:
            raise ValueError("n_flows disagrees with the number of flow parameter sets")
        flows = flows * n_flows
    if not all(f.queuing_mode for f in flows):
        raise ValueError("joint chain needs queuing mode on every flow")
    return build_chain(flows, g, kernel_method=kernel_method, max_states=max_states)


@dataclass
class StationaryDistribution:
    chain: MarkovChain
    probs: np.ndarray
    residual: float
    iterations: int

    @property
    def states(self) -> np.ndarray:
        return self.chain.states


def _residual(pt: sp.csr_matrix, pi: np.ndarray) -> float:
    return float(np.abs(pt @ pi - pi).sum())


def solve_stationary(chain: MarkovChain | sp.spmatrix, tol: float = 1e-12, max_iter: int = 1_000_000,
                     method: str = "power", pi0: np.ndarray | None = None,
                     check_every: int = 10) -> StationaryDistribution:
    """Stationary vector by power iteration ``pi <- pi P``.

    ``method="direct"`` starts the iteration from a sparse LU solution of the
    balance equations, which usually leaves only a few polishing sweeps.
    Convergence is declared when ``||pi P - pi||_1 <= tol``.
    """
    matrix = chain.matrix if isinstance(chain, MarkovChain) else sp.csr_matrix(chain)
    n = matrix.shape[0]
    pt = matrix.T.tocsr()
    if pi0 is not None:
        pi = np.asarray(pi0, dtype=float).copy()
    elif method == "direct":
        pi = _direct_solve(matrix)
    elif method == "power":
        pi = np.full(n, 1.0 / n)
    else:
        raise ValueError(f"unknown solver method {method!r}")
    pi /= pi.sum()
    residual = _residual(pt, pi)
    it = 0
    while residual > tol:
        if it >= max_iter:
            raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {residual:.3e})",
                                   residual)
        for _ in range(check_every):
            pi = pt @ pi
            pi /= pi.sum()
        it += check_every
        residual = _residual(pt, pi)
    np.clip(pi, 0.0, None, out=pi)
    pi /= pi.sum()
    residual = _residual(pt, pi)
    chain_obj = chain if isinstance(chain, MarkovChain) else None
    return StationaryDistribution(chain_obj, pi, residual, it)


def _direct_solve(matrix: sp.csr_matrix) -> np.ndarray:
    n = matrix.shape[0]
    a = (matrix.T - sp.identity(n, format="csr")).tolil()
    a[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[-1] = 1.0
    pi = spla.spsolve(a.tocsc(), b)
    return np.clip(pi, 0.0, None)


@dataclass(frozen=True)
class PerfMetrics:
    p_timeout: float
    throughput: float
    mean_window: float
    mean_interval: float
    off_fraction: float
    goodput: float


def prob_timeout(pi: StationaryDistribution, flow: int = 0) -> float:
    """Timed-out attempts per packet sent: ``E[1{S in X0}] / E[W]``."""
    c = pi.chain
    return float(pi.probs @ c.is_off / (pi.probs @ c.window(flow)))


def throughput(pi: StationaryDistribution, flow: int = 0, goodput: bool = False) -> float:
    """Packets per second: ``E[W 1{S in X1}] / E[J]``.

    With ``goodput=True`` the ON contribution is scaled by ``1 - p``.
    """
    c = pi.chain
    num = pi.probs @ (c.window(flow) * ~c.is_off)
    if goodput:
        num *= 1.0 - c.flows[flow].packet_error
    return float(num / (pi.probs @ c.interval))


def _channel_off_fraction(kernels: KernelCache) -> float:
    if kernels.g is None:
        return 0.0
    st = kernels.g.stationary()
    return float(st[~kernels.is_on].sum())


def metrics_per_flow(pi: StationaryDistribution) -> list[PerfMetrics]:
    c = pi.chain
    alpha = _channel_off_fraction(c.kernels)
    mean_interval = float(pi.probs @ c.interval)
    return [
        PerfMetrics(
            p_timeout=prob_timeout(pi, i),
            throughput=throughput(pi, i),
            mean_window=float(pi.probs @ c.window(i)),
            mean_interval=mean_interval,
            off_fraction=alpha,
            goodput=throughput(pi, i, goodput=True),
        )
        for i in range(c.n_flows)
    ]


@dataclass(frozen=True)
class FlowAnalysis:
    metrics: PerfMetrics
    states: int
    residual: float
    iterations: int


def analyze_flow(params: TcpParams, g: ChannelGenerator | None, *, tol: float = 1e-12,
                 max_iter: int = 1_000_000, method: str = "power",
                 kernel_method: str = "uniformization", max_states: int = MAX_STATES) -> FlowAnalysis:
    chain = build_chain(params, g, kernel_method=kernel_method, max_states=max_states)
    pi = solve_stationary(chain, tol=tol, max_iter=max_iter, method=method)
    return FlowAnalysis(metrics_per_flow(pi)[0], chain.size, pi.residual, pi.iterations)


def analyze_independent(flows: Sequence[TcpParams], g: ChannelGenerator, **kw) -> list[FlowAnalysis]:
    """Flows with negligible queuing: one single-flow chain each."""
    return [analyze_flow(f, g, **kw) for f in flows]


def always_on_throughput(params: TcpParams, **kw) -> float:
    """Throughput of the same flow over a channel that never goes OFF."""
    return analyze_flow(params, None, **kw).metrics.throughput
