"""Auction mechanisms allocating STFS slots to IoT nodes.

All mechanisms return an :class:`AuctionOutcome` whose indicator matrix C
(K x N, binary) satisfies the one-slot-per-node / one-node-per-slot rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import textio
from .errors import DomainError, ShapeError, ValidationError

NO_AUCTION_MESSAGE = "The mSAA cannot be performed due to higher reservation prices"


class Mechanism(str, Enum):
    FPSB = "FPSB"
    SPSB = "SPSB"
    VCG = "VCG"
    MSAA = "mSAA"

    @classmethod
    def parse(cls, name) -> "Mechanism":
        if isinstance(name, Mechanism):
            return name
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ValidationError(f"unknown mechanism {name!r}")

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class AuctionInstance:
    """K nodes, N slots.  ``values[k, n]`` is what node k reports for slot n.

    ``zeta`` records the risk percentage already applied to ``values``.
    """

    values: np.ndarray
    zeta: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError("values must be a nonempty K x N matrix")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LotteryDraw:
    slot: int
    candidates: tuple
    chosen: int


@dataclass
class AuctionOutcome:
    indicator: np.ndarray
    payments: np.ndarray
    surplus: np.ndarray
    revenue: float
    tie_lottery_draws: list = field(default_factory=list)
    message: str | None = None

    @property
    def K(self) -> int:
        return self.indicator.shape[0]

    @property
    def N(self) -> int:
        return self.indicator.shape[1]

    @property
    def allocation(self) -> list:
        ks, ns = np.nonzero(self.indicator)
        return [(int(k), int(n)) for k, n in zip(ks, ns)]

    @property
    def winners(self) -> np.ndarray:
        return np.flatnonzero(self.indicator.any(axis=1))

    def to_text(self) -> str:
        lines = [textio.format_record(
            "outcome", K=self.K, N=self.N, revenue=textio.fmt_float(self.revenue),
            message=self.message)]
        for k, n in self.allocation:
            lines.append(textio.format_record(
                "winner", node=k, slot=n, payment=textio.fmt_float(self.payments[k]),
                surplus=textio.fmt_float(self.surplus[k])))
        for d in self.tie_lottery_draws:
            lines.append(textio.format_record(
                "lottery", slot=d.slot, candidates=textio.fmt_list(d.candidates), chosen=d.chosen))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AuctionOutcome":
        recs = textio.parse_records(text)
        head = next(f for tag, f in recs if tag == "outcome")
        K, N = int(head["K"]), int(head["N"])
        C = np.zeros((K, N), dtype=np.int8)
        pay = np.zeros(K)
        sur = np.zeros(K)
        draws = []
        for tag, f in recs:
            if tag == "winner":
                k = int(f["node"])
                C[k, int(f["slot"])] = 1
                pay[k] = float(f["payment"])
                sur[k] = float(f["surplus"])
            elif tag == "lottery":
                draws.append(LotteryDraw(int(f["slot"]), tuple(textio.parse_ints(f["candidates"])),
                                         int(f["chosen"])))
        return cls(C, pay, sur, float(head["revenue"]), draws, textio.parse_optional(head["message"]))


def _empty_outcome(K: int, N: int, message=None) -> AuctionOutcome:
    return AuctionOutcome(np.zeros((K, N), dtype=np.int8), np.zeros(K), np.zeros(K), 0.0, [], message)


def _finalize(values: np.ndarray, assignment, prices, draws=None, message=None) -> AuctionOutcome:
    """Build an outcome from (node, slot) pairs and per-node payments."""
    K, N = values.shape
    out = _empty_outcome(K, N, message)
    for k, n in assignment:
        out.indicator[k, n] = 1
        out.payments[k] = prices[k]
        out.surplus[k] = values[k, n] - prices[k]
    out.revenue = math.fsum(out.payments)
    out.tie_lottery_draws = list(draws or [])
    return out


def apply_risk(values, zeta: float) -> np.ndarray:
    """Underbid every entry by max(values) * zeta / 100, floored at zero.

    Negative zeta overbids by the same rule.
    """
    v = np.asarray(values, dtype=float)
    if not math.isfinite(zeta):
        raise ValidationError("zeta must be finite")
    if zeta == 0:
        return v.copy()
    return np.maximum(v - v.max() * zeta / 100.0, 0.0)


def _lottery(rng: np.random.Generator, candidates, slot: int, draws: list) -> int:
    if len(candidates) == 1:
        return int(candidates[0])
    chosen = int(candidates[rng.integers(len(candidates))])
    draws.append(LotteryDraw(int(slot), tuple(int(c) for c in candidates), chosen))
    return chosen


def _single_slot(values, bids, slot, rule, rng, participants, draws):
    """Winner and price of one sealed-bid auction among ``participants``."""
    b = bids[participants]
    top = b.max()
    winner = _lottery(rng, participants[b == top], slot, draws)
    if rule is Mechanism.FPSB:
        price = bids[winner]
    elif participants.size > 1:
        price = np.partition(b, b.size - 2)[b.size - 2]
    else:
        price = 0.0
    return winner, float(price)


def _run_single(instance, bids, slot, seed, rule):
    bids = np.asarray(bids, dtype=float)
    if bids.size == 0:
        raise DomainError("empty bid vector")
    if bids.shape != (instance.K,):
        raise ShapeError(f"expected {instance.K} bids, got shape {bids.shape}")
    if np.any(bids < 0) or not np.all(np.isfinite(bids)):
        raise ValidationError("bids must be finite and nonnegative")
    if not 0 <= slot < instance.N:
        raise IndexError(f"slot {slot} out of range")
    rng = np.random.default_rng(seed)
    draws: list = []
    winner, price = _single_slot(instance.values, bids, slot, rule, rng,
                                 np.arange(instance.K), draws)
    prices = np.zeros(instance.K)
    prices[winner] = price
    return _finalize(instance.values, [(winner, slot)], prices, draws)


def run_fpsb(instance: AuctionInstance, bids, slot: int = 0, seed: int = 0) -> AuctionOutcome:
    """First-price sealed bid on one slot: highest bid wins and pays its bid."""
    return _run_single(instance, bids, slot, seed, Mechanism.FPSB)


def run_spsb(instance: AuctionInstance, bids, slot: int = 0, seed: int = 0) -> AuctionOutcome:
    """Second-price sealed bid on one slot: highest bid wins, pays the runner-up bid."""
    return _run_single(instance, bids, slot, seed, Mechanism.SPSB)


def run_sequential(instance: AuctionInstance, rule, bid_fn=None, seed: int = 0) -> AuctionOutcome:
    """Auction the slots one at a time in slot order; winners leave the pool.

    ``bid_fn(slot, nodes, values)`` returns bids for the still-unassigned
    ``nodes`` given their values for ``slot``; the default bids truthfully.
    """
    rule = Mechanism.parse(rule)
    if rule not in (Mechanism.FPSB, Mechanism.SPSB):
        raise ValidationError("sequential auctions use FPSB or SPSB rules")
    V = instance.values
    rng = np.random.default_rng(seed)
    remaining = np.arange(instance.K)
    prices = np.zeros(instance.K)
    assignment = []
    draws: list = []
    bids = np.zeros(instance.K)
    for n in range(instance.N):
        if remaining.size == 0:
            break
        col = V[remaining, n]
        bids[remaining] = col if bid_fn is None else bid_fn(n, remaining, col)
        winner, price = _single_slot(V, bids, n, rule, rng, remaining, draws)
        prices[winner] = price
        assignment.append((winner, n))
        remaining = remaining[remaining != winner]
    return _finalize(V, assignment, prices, draws)


def hungarian(values) -> list:
    """Maximum-value assignment; each row and column used at most once.

    Rectangular inputs behave as if padded with zero-value dummies, and the
    returned pairs are real (row, column) pairs, min(K, N) of them.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise ShapeError("hungarian needs a 2-D matrix")
    if v.size == 0:
        return []
    if not np.all(np.isfinite(v)):
        raise ValidationError("hungarian needs a finite matrix")
    rows, cols = linear_sum_assignment(v, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def assignment_value(values, pairs) -> float:
    v = np.asarray(values, dtype=float)
    return math.fsum(v[k, n] for k, n in pairs)


def vcg_payments(values, assignment) -> np.ndarray:
    """Clarke pivot payments for a given efficient assignment."""
    v = np.asarray(values, dtype=float)
    K = v.shape[0]
    pay = np.zeros(K)
    for k, _ in assignment:
        others = [(j, n) for j, n in assignment if j != k]
        reduced = np.delete(v, k, axis=0)
        without_k = assignment_value(reduced, hungarian(reduced))
        pay[k] = max(without_k - assignment_value(v, others), 0.0)
    return pay


def run_vcg(instance: AuctionInstance) -> AuctionOutcome:
    """VCG: efficient assignment, each winner pays the externality it imposes."""
    v = instance.values
    assignment = hungarian(v)
    return _finalize(v, assignment, vcg_payments(v, assignment))


@dataclass(frozen=True)
class MsaaConfig:
    """Reservation prices, price increment and iteration cap.

    ``reservation`` may be a scalar (broadcast to every slot).  ``epsilon``
    defaults to 1% of the largest reported value and ``max_iterations`` to
    10 * (price range / epsilon).
    """

    reservation: object = 0.0
    epsilon: float | None = None
    max_iterations: int | None = None

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.reservation, dtype=float))
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValidationError("reservation prices must be finite and nonnegative")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")

    def reservation_vector(self, N: int) -> np.ndarray:
        r = np.atleast_1d(np.asarray(self.reservation, dtype=float))
        if r.size == 1:
            return np.full(N, float(r[0]))
        if r.size != N:
            raise ShapeError(f"reservation has {r.size} entries for {N} slots")
        return r.copy()

    def resolve(self, values: np.ndarray):
        """Concrete (reservation, epsilon, iteration cap) for a value matrix."""
        r = self.reservation_vector(values.shape[1])
        top = float(values.max())
        eps = self.epsilon if self.epsilon is not None else (0.01 * top if top > 0 else 1e-3)
        cap = self.max_iterations
        if cap is None:
            cap = default_iteration_cap(values, r, eps)
        return r, float(eps), int(cap)


def default_iteration_cap(values, reservation, epsilon) -> int:
    price_range = max(float(np.max(values)) - float(np.min(reservation)), epsilon)
    return max(1, int(math.ceil(10 * price_range / epsilon)))


@dataclass(frozen=True)
class MsaaIteration:
    iteration: int
    prices: np.ndarray
    holders: np.ndarray
    losers: tuple
    active_losers: tuple
    dropped: tuple

    @property
    def winners(self) -> tuple:
        return tuple(int(k) for k in self.holders if k >= 0)

    def to_text(self) -> str:
        pairs = [(k, n) for n, k in enumerate(self.holders) if k >= 0]
        return textio.format_record(
            "iteration", i=self.iteration, prices=textio.fmt_list(self.prices, textio.fmt_float),
            winners=textio.fmt_pairs(sorted(pairs)), losers=textio.fmt_list(self.losers),
            active=textio.fmt_list(self.active_losers), dropped=textio.fmt_list(self.dropped))


@dataclass
class MsaaTrace:
    records: list = field(default_factory=list)
    terminated_by: str = ""
    iterations: int = 0
    epsilon: float = 0.0
    iteration_cap: int = 0
    transitions: dict = field(default_factory=dict)

    def transition_frequencies(self) -> dict:
        """Empirical probability of each (displaced -> new holder) swap."""
        total = sum(self.transitions.values())
        return {edge: c / total for edge, c in sorted(self.transitions.items())} if total else {}

    def to_text(self) -> str:
        lines = [textio.format_record(
            "trace", iterations=self.iterations, terminated_by=self.terminated_by,
            epsilon=textio.fmt_float(self.epsilon), cap=self.iteration_cap)]
        lines += [rec.to_text() for rec in self.records]
        for (src, dst), count in sorted(self.transitions.items()):
            lines.append(textio.format_record("swap", src=src, dst=dst, count=count))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MsaaTrace":
        recs = textio.parse_records(text)
        head = next(f for tag, f in recs if tag == "trace")
        trace = cls(terminated_by=head["terminated_by"], iterations=int(head["iterations"]),
                    epsilon=float(head["epsilon"]), iteration_cap=int(head["cap"]))
        for tag, f in recs:
            if tag == "iteration":
                prices = textio.parse_floats(f["prices"])
                holders = -np.ones(prices.size, dtype=int)
                for k, n in textio.parse_pairs(f["winners"]):
                    holders[n] = k
                trace.records.append(MsaaIteration(
                    int(f["i"]), prices, holders, tuple(textio.parse_ints(f["losers"])),
                    tuple(textio.parse_ints(f["active"])), tuple(textio.parse_ints(f["dropped"]))))
            elif tag == "swap":
                trace.transitions[(int(f["src"]), int(f["dst"]))] = int(f["count"])
        return trace


def run_msaa(instance: AuctionInstance, config: MsaaConfig | None = None, seed: int = 0,
             record: bool = True):
    """Modified simultaneous ascending auction.

    Each round every unassigned, non-dropped node asks for its best slot at
    the price it would have to pay (standing price, plus epsilon when the
    slot is already held).  Each slot demanded goes to one demander (fair
    lottery on ties) and a held slot's price rises by epsilon when it changes
    hands.  Losers who cannot reach a nonnegative surplus at the next prices
    are dropped for good.  The loop stops once no active loser remains or the
    iteration cap is reached; winners pay their slot's standing price.
    """
    config = config or MsaaConfig()
    V = instance.values
    K, N = V.shape
    r, eps, cap = config.resolve(V)
    trace = MsaaTrace(epsilon=eps, iteration_cap=cap)
    eligible = (V >= r[None, :]).any(axis=1)
    if not eligible.any():
        trace.terminated_by = "no_auction"
        return _empty_outcome(K, N, NO_AUCTION_MESSAGE), trace

    rng = np.random.default_rng(seed)
    draws: list = []
    prices = r + eps
    holder = -np.ones(N, dtype=int)
    dropped = ~eligible
    holding = np.zeros(K, dtype=bool)
    it = 0
    while True:
        it += 1
        ask = prices + eps * (holder >= 0)
        bidders = np.flatnonzero(~dropped & ~holding)
        if bidders.size:
            surplus = V[bidders] - ask[None, :]
            best = np.argmax(surplus, axis=1)
            willing = surplus[np.arange(bidders.size), best] >= 0
            for n in np.unique(best[willing]):
                demanders = bidders[willing & (best == n)]
                chosen = _lottery(rng, demanders, n, draws)
                prev = holder[n]
                if prev >= 0:
                    holding[prev] = False
                    trace.transitions[(int(prev), chosen)] = trace.transitions.get((int(prev), chosen), 0) + 1
                prices[n] = ask[n]
                holder[n] = chosen
                holding[chosen] = True
        losers = np.flatnonzero(~dropped & ~holding)
        next_ask = prices + eps * (holder >= 0)
        if losers.size:
            can_bid = (V[losers] - next_ask[None, :]).max(axis=1) >= 0
            active = losers[can_bid]
            dropped[losers[~can_bid]] = True
        else:
            active = losers
        if record:
            trace.records.append(MsaaIteration(
                it, prices.copy(), holder.copy(), tuple(int(k) for k in losers),
                tuple(int(k) for k in active), tuple(int(k) for k in np.flatnonzero(dropped))))
        if active.size == 0:
            trace.terminated_by = "no_active_losers"
            break
        if it >= cap:
            trace.terminated_by = "iteration_cap"
            break
    trace.iterations = it
    pay = np.zeros(K)
    assignment = []
    for n in range(N):
        if holder[n] >= 0:
            pay[holder[n]] = prices[n]
            assignment.append((int(holder[n]), n))
    return _finalize(V, assignment, pay, draws), trace


def run_mechanism(mechanism, instance: AuctionInstance, seed: int = 0, bid_fn=None,
                  msaa: MsaaConfig | None = None) -> AuctionOutcome:
    """Dispatch one auction over all slots of ``instance``."""
    mech = Mechanism.parse(mechanism)
    if mech is Mechanism.VCG:
        return run_vcg(instance)
    if mech is Mechanism.MSAA:
        return run_msaa(instance, msaa, seed, record=False)[0]
    return run_sequential(instance, mech, bid_fn, seed)


def utilities(outcome: AuctionOutcome, true_values):
    """Surplus per node and gateway revenue, evaluated at ``true_values``."""
    tv = np.asarray(true_values, dtype=float)
    if tv.ndim == 1:
        tv = tv[:, None]
    if tv.shape != outcome.indicator.shape:
        raise ShapeError(f"true values {tv.shape} vs indicator {outcome.indicator.shape}")
    surplus = (outcome.indicator * tv).sum(axis=1) - outcome.payments
    return surplus, math.fsum(outcome.payments)


def is_feasible(indicator) -> bool:
    C = np.asarray(indicator)
    return bool(np.all(C.sum(axis=0) <= 1) and np.all(C.sum(axis=1) <= 1)
                and np.all((C == 0) | (C == 1)))
