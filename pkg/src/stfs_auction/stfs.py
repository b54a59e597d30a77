"""Uplink model on the space-time-frequency slot grid and dispersion tuning.

Each assigned node pre-compensates its uplink with a complex dispersion
element a_k so that z_k = a_k g_k x_k + w_k lands on the reference point
z*_k = c_k s_k of its slot.  Nodes whose residual |z_k - z*_k| stays above
the leakage threshold spill their whole emission into the other slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import textio
from .errors import DomainError, ShapeError, ValidationError

LEAKAGE_THRESHOLD = 1e-3
ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_HALVINGS = 60


def wrap_phase(phi):
    """Map angles onto [-pi, pi)."""
    return np.mod(np.asarray(phi, dtype=float) + np.pi, 2 * np.pi) - np.pi


def _complex_normal(rng: np.random.Generator, size, std: float) -> np.ndarray:
    # E|w|^2 = std^2
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) * (std / math.sqrt(2.0))


@dataclass(frozen=True)
class StfsInstance:
    channels: np.ndarray
    symbols: np.ndarray
    indicator: np.ndarray
    grid: tuple = (1, 1)
    noise_sigma: float = 0.5
    bandwidth: float = 1.0
    thresholds: np.ndarray | None = None
    p_min: float = 0.0
    p_max: float = 1e4
    power_cap: float | None = None
    hw_noise_sigma: float = 0.0
    leakage_threshold: float = LEAKAGE_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.channels, dtype=complex).ravel()
        s = np.asarray(self.symbols, dtype=float).ravel()
        C = np.asarray(self.indicator, dtype=np.int8)
        K = g.size
        n_t, n_f = (int(x) for x in self.grid)
        if s.size != K or C.shape != (K, n_t * n_f):
            raise ShapeError(f"need {K} symbols and a {K}x{n_t * n_f} indicator")
        if not set(np.unique(s)) <= {-1.0, 1.0}:
            raise ValidationError("symbols must be +1 or -1")
        if np.any(C.sum(axis=0) > 1) or np.any(C.sum(axis=1) > 1) or np.any((C != 0) & (C != 1)):
            raise ValidationError("indicator must be binary with row and column sums <= 1")
        if not (self.noise_sigma > 0 and self.bandwidth > 0):
            raise ValidationError("noise_sigma and bandwidth must be positive")
        if not 0 <= self.p_min <= self.p_max:
            raise ValidationError("need 0 <= p_min <= p_max")
        th = np.full(K, 0.5 * self.bandwidth) if self.thresholds is None else \
            np.asarray(self.thresholds, dtype=float).ravel()
        if th.size != K:
            raise ShapeError("one throughput threshold per node")
        cap = K * self.p_max if self.power_cap is None else float(self.power_cap)
        if cap < K * self.p_min:
            raise ValidationError("power cap is below the per-node minimum powers")
        object.__setattr__(self, "channels", g)
        object.__setattr__(self, "symbols", s)
        object.__setattr__(self, "indicator", C)
        object.__setattr__(self, "grid", (n_t, n_f))
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "power_cap", cap)

    @property
    def K(self) -> int:
        return self.channels.size

    @property
    def N(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def assigned(self) -> np.ndarray:
        return self.indicator.any(axis=1)

    def slot_of(self, k: int):
        cols = np.flatnonzero(self.indicator[k])
        return int(cols[0]) if cols.size else None

    @property
    def tx_symbols(self) -> np.ndarray:
        """x_k = c_k s_k: the symbol on the node's own slot, 0 if unassigned."""
        return self.indicator.sum(axis=1) * self.symbols

    @property
    def hardware_noise(self) -> np.ndarray:
        if self.hw_noise_sigma == 0:
            return np.zeros(self.K, dtype=complex)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1,)))
        return _complex_normal(rng, self.K, self.hw_noise_sigma)

    def gateway_noise(self, slot: int) -> complex:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2, int(slot))))
        return complex(_complex_normal(rng, 1, self.noise_sigma)[0])

    def to_text(self) -> str:
        lines = [textio.format_record(
            "stfs", K=self.K, NT=self.grid[0], NF=self.grid[1],
            noise_sigma=textio.fmt_float(self.noise_sigma), bandwidth=textio.fmt_float(self.bandwidth),
            p_min=textio.fmt_float(self.p_min), p_max=textio.fmt_float(self.p_max),
            power_cap=textio.fmt_float(self.power_cap), hw=textio.fmt_float(self.hw_noise_sigma),
            leak=textio.fmt_float(self.leakage_threshold), seed=self.seed)]
        for k in range(self.K):
            lines.append(textio.format_record(
                "node", k=k, g=textio.fmt_complex(self.channels[k]), s=int(self.symbols[k]),
                slot=self.slot_of(k), threshold=textio.fmt_float(self.thresholds[k])))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StfsInstance":
        recs = textio.parse_records(text)
        head = next(f for tag, f in recs if tag == "stfs")
        nodes = [f for tag, f in recs if tag == "node"]
        K, n_t, n_f = int(head["K"]), int(head["NT"]), int(head["NF"])
        C = np.zeros((K, n_t * n_f), dtype=np.int8)
        for f in nodes:
            if f["slot"] != textio.EMPTY:
                C[int(f["k"]), int(f["slot"])] = 1
        return cls(
            channels=np.array([complex(f["g"]) for f in nodes]),
            symbols=np.array([float(f["s"]) for f in nodes]), indicator=C, grid=(n_t, n_f),
            noise_sigma=float(head["noise_sigma"]), bandwidth=float(head["bandwidth"]),
            thresholds=np.array([float(f["threshold"]) for f in nodes]),
            p_min=float(head["p_min"]), p_max=float(head["p_max"]),
            power_cap=float(head["power_cap"]), hw_noise_sigma=float(head["hw"]),
            leakage_threshold=float(head["leak"]), seed=int(head["seed"]))


def random_instance(K: int, grid=None, seed: int = 0, indicator=None, **kwargs) -> StfsInstance:
    """Rayleigh channels (unit variance per component) and random BPSK symbols.

    Without an explicit indicator node k gets slot k for k < min(K, N).
    """
    grid = (K, 1) if grid is None else grid
    N = int(grid[0]) * int(grid[1])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    g = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    s = rng.choice([-1.0, 1.0], size=K)
    if indicator is None:
        indicator = np.zeros((K, N), dtype=np.int8)
        m = min(K, N)
        indicator[np.arange(m), np.arange(m)] = 1
    return StfsInstance(g, s, indicator, grid=grid, seed=seed, **kwargs)


def indicator_from_outcome(outcome, K: int, N: int) -> np.ndarray:
    C = np.asarray(outcome.indicator, dtype=np.int8)
    if C.shape != (K, N):
        raise ShapeError(f"outcome indicator {C.shape} does not match {K}x{N}")
    return C


@dataclass
class DispersionState:
    a: np.ndarray
    targets: np.ndarray
    stream_length: int = 1

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex).ravel()
        self.targets = np.asarray(self.targets, dtype=complex).ravel()
        if self.a.shape != self.targets.shape:
            raise ShapeError("one dispersion element per target")

    @property
    def gains(self) -> np.ndarray:
        return np.abs(self.a)

    @property
    def phases(self) -> np.ndarray:
        return np.angle(self.a)

    @property
    def powers(self) -> np.ndarray:
        return np.abs(self.a) ** 2

    def to_text(self) -> str:
        lines = [textio.format_record("dispersion", K=self.a.size, l=self.stream_length)]
        for k, (a, t) in enumerate(zip(self.a, self.targets)):
            lines.append(textio.format_record("element", k=k, a=textio.fmt_complex(a),
                                              target=textio.fmt_complex(t)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DispersionState":
        recs = textio.parse_records(text)
        head = next(f for tag, f in recs if tag == "dispersion")
        el = [f for tag, f in recs if tag == "element"]
        return cls(np.array([complex(f["a"]) for f in el]),
                   np.array([complex(f["target"]) for f in el]), int(head["l"]))


def targets(instance: StfsInstance) -> np.ndarray:
    """Reference points z*_k = c_k s_k handed out with the slot allocation."""
    return instance.tx_symbols.astype(complex)


def initial_state(instance: StfsInstance, a=None) -> DispersionState:
    """Uncompensated start: unit gain, zero phase for every node."""
    a = np.ones(instance.K, dtype=complex) if a is None else a
    return DispersionState(a, targets(instance))


def uplink(instance: StfsInstance, a) -> np.ndarray:
    """Forward model z_k = a_k g_k x_k + w_k."""
    return np.asarray(a, dtype=complex) * instance.channels * instance.tx_symbols + instance.hardware_noise


def residuals(instance: StfsInstance, a) -> np.ndarray:
    return uplink(instance, a) - targets(instance)


def aggregate_residual(instance: StfsInstance, a) -> float:
    """|sum_k (z_k - z*_k)|, the gateway-side view of joint misalignment."""
    return float(abs(residuals(instance, a).sum()))


def leaking(instance: StfsInstance, a) -> np.ndarray:
    return np.abs(residuals(instance, a)) > instance.leakage_threshold


def _emissions(instance, a):
    return np.asarray(a, dtype=complex) * instance.channels * instance.tx_symbols


def received_signal(instance: StfsInstance, a, slot: int, noise: bool = True) -> complex:
    """Gateway sample on one slot: desired uplink plus leakage plus noise."""
    if not 0 <= slot < instance.N:
        raise IndexError(f"slot {slot} out of range")
    emit = _emissions(instance, a)
    on_slot = instance.indicator[:, slot].astype(bool)
    spill = leaking(instance, a) & ~on_slot
    y = emit[on_slot].sum() + emit[spill].sum()
    return complex(y + (instance.gateway_noise(slot) if noise else 0.0))


def throughput(instance: StfsInstance, a, k: int, slot: int) -> float:
    """Shannon rate of node k on its slot with coherently summed interference."""
    if not instance.indicator[k, slot]:
        raise DomainError(f"node {k} is not assigned to slot {slot}")
    emit = _emissions(instance, a)
    others = leaking(instance, a)
    others[k] = False
    interference = abs(emit[others].sum()) ** 2
    signal = abs(emit[k]) ** 2
    return float(instance.bandwidth * math.log2(1.0 + signal / (interference + instance.noise_sigma**2)))


def throughputs(instance: StfsInstance, a) -> np.ndarray:
    """Rate per node; NaN for nodes without a slot."""
    out = np.full(instance.K, np.nan)
    for k in range(instance.K):
        n = instance.slot_of(k)
        if n is not None:
            out[k] = throughput(instance, a, k, n)
    return out


# --- polar objective -------------------------------------------------------

def _polar_terms(instance: StfsInstance):
    h = instance.channels * instance.tx_symbols
    t = targets(instance) - instance.hardware_noise
    return np.abs(h), np.angle(h), np.abs(t), np.angle(t)


def node_objective(instance: StfsInstance, rho, phi) -> np.ndarray:
    """Per-node |z_k - z*_k|^2 as r^2 + r*^2 - 2 r r* cos(theta - theta*)."""
    mh, ah, mt, at = _polar_terms(instance)
    rho = np.asarray(rho, dtype=float)
    return (rho * mh) ** 2 + mt**2 - 2 * rho * mh * mt * np.cos(np.asarray(phi) + ah - at)


def objective(instance: StfsInstance, rho, phi) -> float:
    return float(node_objective(instance, rho, phi).sum())


def gradient(instance: StfsInstance, rho, phi):
    """Analytic gradient of the objective w.r.t. (gain, phase) of each a_k."""
    mh, ah, mt, at = _polar_terms(instance)
    rho = np.asarray(rho, dtype=float)
    delta = np.asarray(phi) + ah - at
    d_rho = 2 * rho * mh**2 - 2 * mh * mt * np.cos(delta)
    d_phi = 2 * rho * mh * mt * np.sin(delta)
    return d_rho, d_phi


def state_objective(instance: StfsInstance, state: DispersionState) -> float:
    return float(np.sum(np.abs(residuals(instance, state.a)) ** 2))


@dataclass
class DispersionResult:
    state: DispersionState
    objective: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    meets_thresholds: bool = True


def _gain_bounds(instance):
    return math.sqrt(instance.p_min), math.sqrt(instance.p_max)


def _restore_cap(rho_old, rho_new, cap):
    """Largest step toward rho_new along the segment that keeps sum(rho^2) <= cap."""
    if np.sum(rho_new**2) <= cap:
        return rho_new
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.sum((rho_old + mid * (rho_new - rho_old)) ** 2) <= cap:
            lo = mid
        else:
            hi = mid
    return rho_old + lo * (rho_new - rho_old)


def _snap_to_box(a, instance, max_nudges=64):
    """Nudge gains so |a|^2 meets the box and the total cap despite rounding."""
    a = a.copy()
    shrink, grow = 1.0 - 4e-16, 1.0 + 4e-16
    for k in range(a.size):
        for _ in range(max_nudges):
            p = abs(a[k]) ** 2
            if p > instance.p_max:
                a[k] *= shrink
            elif p < instance.p_min and a[k] != 0:
                a[k] *= grow
            else:
                break
    for _ in range(max_nudges):
        if np.sum(np.abs(a) ** 2) <= instance.power_cap:
            break
        a *= shrink
    return a


def _armijo(f_node, x, grad, project, mask):
    """Per-node projected backtracking step; entries outside mask stay put."""
    f0 = f_node(x)
    step = np.ones_like(x)
    new = x.copy()
    todo = mask.copy()
    for _ in range(MAX_HALVINGS):
        if not todo.any():
            break
        cand = project(x - step * grad)
        f1 = f_node(cand)
        ok = f1 <= f0 + ARMIJO_C * grad * (cand - x)
        take = todo & ok
        new[take] = cand[take]
        todo &= ~ok
        step[todo] *= BACKTRACK
    return new


def optimize_dispersion(instance: StfsInstance, initial: DispersionState | None = None,
                        tol: float = 1e-10, max_iterations: int = 10_000,
                        phase_method: str = "closed") -> DispersionResult:
    """Two-stage descent on the polar objective: phase first, then gain.

    ``phase_method="closed"`` sets each phase to its cosine optimum;
    ``"gradient"`` takes projected Armijo steps instead, for when the target
    phase is obscured.  The gain stage is projected gradient descent with
    backtracking (initial step 1, factor 0.5) onto the power box and the
    total power cap.  Every accepted iterate lowers or keeps the objective.
    """
    if phase_method not in ("closed", "gradient"):
        raise ValidationError(f"unknown phase_method {phase_method!r}")
    initial = initial or initial_state(instance)
    if initial.a.size != instance.K:
        raise ShapeError("initial state does not match the instance")
    lo, hi = _gain_bounds(instance)
    cap = instance.power_cap
    mh, ah, mt, at = _polar_terms(instance)
    active = mh > 0

    rho = np.clip(np.abs(initial.a), lo, hi)
    rho = _restore_cap(np.full_like(rho, lo), rho, cap)
    phi = wrap_phase(np.angle(initial.a))

    def f_rho(x):
        return node_objective(instance, x, phi)

    unit = np.ones_like(rho)

    def f_phi(x):
        # the phase optimum does not depend on the gain, so descend at unit
        # gain; this also keeps the step alive when a gain sits at zero
        return node_objective(instance, unit, x)

    history = [objective(instance, rho, phi)]
    converged = history[0] < tol
    it = 0
    while not converged and it < max_iterations:
        it += 1
        phi_prev = phi
        # stage 1: phase at fixed gain
        if phase_method == "closed":
            phi = np.where(active, wrap_phase(at - ah), phi)
        else:
            phi = _armijo(f_phi, phi, gradient(instance, unit, phi)[1], wrap_phase, active)
        # stage 2: gain at the updated phase
        d_rho = gradient(instance, rho, phi)[0]
        cand = _armijo(f_rho, rho, d_rho, lambda x: np.clip(x, lo, hi), active)
        cand = _restore_cap(rho, cand, cap)
        f = objective(instance, cand, phi)
        prev = history[-1]
        if f > prev:
            phi = phi_prev  # coupled slots made the sweep overshoot; keep the last iterate
            break
        rho = cand
        history.append(f)
        if f < tol:
            converged = True
        elif prev - f <= 1e-15 * max(prev, 1e-300):
            break  # stalled on a bound
    a = _snap_to_box(rho * np.exp(1j * phi), instance)
    if it == 0 and np.allclose(a, initial.a, rtol=0, atol=1e-15):
        a = initial.a.copy()  # already optimal and feasible
    state = DispersionState(a, initial.targets, initial.stream_length)
    rates = throughputs(instance, state.a)
    meets = bool(np.all(rates[instance.assigned] >= instance.thresholds[instance.assigned]))
    return DispersionResult(state, history[-1], history, it, converged and meets, meets)


@dataclass
class PowerReport:
    powers: np.ndarray
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def power_check(state: DispersionState, instance: StfsInstance, rtol: float = 1e-12) -> PowerReport:
    """Per-node transmit powers |a_k|^2 and any box or total-cap violations."""
    p = state.powers
    slack = rtol * max(instance.p_max, 1.0)
    viol = []
    for k, pk in enumerate(p):
        if pk < instance.p_min - slack:
            viol.append((k, "p_min"))
        if pk > instance.p_max + slack:
            viol.append((k, "p_max"))
    if p.sum() > instance.power_cap * (1 + rtol):
        viol.append((None, "power_cap"))
    return PowerReport(p, viol)


def constellation_table(instance: StfsInstance, state: DispersionState):
    """Rows of (node, r, theta, objective contribution) for the received points."""
    z = uplink(instance, state.a)
    contrib = np.abs(z - state.targets) ** 2
    return [(k, float(abs(z[k])), float(np.angle(z[k])), float(contrib[k])) for k in range(instance.K)]


def with_indicator(instance: StfsInstance, indicator) -> StfsInstance:
    return replace(instance, indicator=np.asarray(indicator, dtype=np.int8))
