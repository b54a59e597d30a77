"""Seeded experiment sweeps over (K, N, zeta, mechanism) and their exports.

Every replication draws one composite value per node and spreads it over
the slots with a per-(node, slot) affinity factor in (0.5, 1].  All
mechanisms and risk levels in a (K, N) group see the same draws (common
random numbers), so differences between rows are mechanism effects rather
than sampling noise.
"""

from __future__ import annotations

import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import mechanisms, valuation
from .equilibria import BRIDGE_BINS
from .errors import AuctionError, ValidationError
from .mechanisms import AuctionInstance, AuctionOutcome, Mechanism, MsaaConfig
from .valuation import ValuationParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# spawn-key tags for the per-(K, N) substreams
_VALUES, _AFFINITY, _LOTTERY, _CALIBRATION = 0, 1, 2, 3

COLUMNS = (
    "mechanism", "K", "N", "zeta", "replications", "status",
    "S_mean", "S_se", "R_mean", "R_se", "P_G_mean", "P_G_se", "eta_H_mean", "eta_H_se",
    "surplus_raw", "surplus_raw_se", "revenue_raw", "revenue_raw_se",
    "power_proxy", "power_proxy_se", "zero_gain_winners", "error",
)

FIGURES = {
    "fig6a": ("zeta", "K", "S_mean", "S_se"),
    "fig6b": ("zeta", "K", "S_mean", "S_se"),
    "fig7a": ("zeta", "K", "R_mean", "R_se", "S_mean", "S_se"),
    "fig7b": ("zeta", "K", "R_mean", "R_se", "S_mean", "S_se"),
    "fig8": ("zeta", "N", "P_G_mean", "P_G_se"),
    "fig9": ("zeta", "N", "eta_H_mean", "eta_H_se"),
}


@dataclass(frozen=True)
class SweepSpec:
    K_values: tuple = (11, 16, 21, 26, 31, 36, 41)
    N_values: tuple = (10,)
    zeta_values: tuple = (0.0,)
    mechanisms: tuple = ("FPSB", "SPSB", "VCG", "mSAA")
    replications: int = 2000
    valuation: ValuationParams = field(default_factory=ValuationParams)
    msaa: MsaaConfig = field(default_factory=MsaaConfig)
    master_seed: int = 0
    calibration_replications: int = 50_000

    def __post_init__(self):
        for name in ("K_values", "N_values", "zeta_values", "mechanisms"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValidationError(f"{name} must be non-empty")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "K_values", tuple(int(k) for k in self.K_values))
        object.__setattr__(self, "N_values", tuple(int(n) for n in self.N_values))
        object.__setattr__(self, "zeta_values", tuple(float(z) for z in self.zeta_values))
        object.__setattr__(self, "mechanisms",
                           tuple(Mechanism.parse(m) for m in self.mechanisms))
        if self.replications < 1 or self.calibration_replications < 1:
            raise ValidationError("replications must be >= 1")
        if min(self.K_values) < 1 or min(self.N_values) < 1:
            raise ValidationError("K and N must be >= 1")
        if any(not 0 <= z < 100 for z in self.zeta_values):
            raise ValidationError("sweep zeta values must lie in [0, 100)")

    def cells(self):
        for K in self.K_values:
            for N in self.N_values:
                for z in self.zeta_values:
                    for m in self.mechanisms:
                        yield m, K, N, z


@dataclass
class SweepRow:
    mechanism: str
    K: int
    N: int
    zeta: float
    replications: int
    status: str = "ok"
    S_mean: float = math.nan
    S_se: float = math.nan
    R_mean: float = math.nan
    R_se: float = math.nan
    P_G_mean: float = math.nan
    P_G_se: float = math.nan
    eta_H_mean: float = math.nan
    eta_H_se: float = math.nan
    surplus_raw: float = math.nan
    surplus_raw_se: float = math.nan
    revenue_raw: float = math.nan
    revenue_raw_se: float = math.nan
    power_proxy: float = math.nan
    power_proxy_se: float = math.nan
    zero_gain_winners: int = 0
    error: str = ""

    @property
    def key(self):
        return self.mechanism, self.K, self.N, self.zeta


@dataclass
class SweepResult:
    spec: SweepSpec | None
    rows: list = field(default_factory=list)

    def row(self, mechanism, K, N, zeta=0.0) -> SweepRow:
        key = (str(Mechanism.parse(mechanism)), int(K), int(N), float(zeta))
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.status != "ok"]


# --- per-outcome metrics ---------------------------------------------------

def fairness_factor(outcome: AuctionOutcome, v_h) -> float:
    """Winner priority mass over the best achievable mass for as many winners."""
    v_h = np.asarray(v_h, dtype=float).ravel()
    if v_h.size != outcome.K:
        raise ValidationError("one priority per node")
    w = outcome.winners
    if w.size == 0:
        return 1.0
    best = math.fsum(np.sort(v_h)[::-1][: w.size])
    if best <= 0:
        return 1.0
    return float(min(math.fsum(v_h[w]) / best, 1.0))


def power_proxy(outcome: AuctionOutcome, v_g):
    """Mean payment / channel gain over winners; zero-gain winners are skipped.

    Returns (proxy, number of skipped winners).
    """
    v_g = np.asarray(v_g, dtype=float).ravel()
    w = outcome.winners
    ok = w[v_g[w] > 0]
    flagged = int(w.size - ok.size)
    if ok.size == 0:
        return 0.0, flagged
    return float(np.mean(outcome.payments[ok] / v_g[ok])), flagged


def power_gain(outcome: AuctionOutcome, values, v_g, reference: float | None = None) -> float:
    """1 - proxy / reference, where reference is the largest proxy in the cell.

    Without a reference the outcome is normalised against itself.
    """
    if np.shape(values)[0] != outcome.K:
        raise ValidationError("values must have one row per node")
    proxy, _ = power_proxy(outcome, v_g)
    ref = proxy if reference is None else float(reference)
    if ref <= 0:
        return 1.0
    return float(min(max(1.0 - proxy / ref, 0.0), 1.0))


# --- FPSB strategy for sequential multi-slot auctions ----------------------

@dataclass(frozen=True)
class BridgeStrategy:
    """Per-slot bid curves b_n(v) ~ E[second price | winner value = v].

    Under this strategy the sequential FPSB winner pays in expectation what
    the sequential SPSB winner pays, the multi-slot analogue of the
    order-statistic identity behind revenue equivalence.
    """

    knots: tuple
    bids: tuple

    def __call__(self, slot: int, values):
        x, y = self.knots[slot], self.bids[slot]
        v = np.asarray(values, dtype=float)
        if x.size == 0:
            return np.zeros_like(v)
        return np.minimum(np.interp(v, x, y), v)


def _truthful_sequential_pairs(V: np.ndarray):
    """Winner values and second prices slot by slot for truthful SPSB.

    V is K x N x R.  Ties are broken toward the lower node index, which has
    no effect on the continuous draws used here.
    """
    K, N, R = V.shape
    alive = np.ones((K, R), dtype=bool)
    cols = np.arange(R)
    wv, sp = [], []
    for n in range(min(N, K)):
        col = np.where(alive, V[:, n, :], -np.inf)
        order = np.argsort(-col, axis=0, kind="stable")
        top = order[0]
        first = col[top, cols]
        second = col[order[1], cols] if K > 1 else np.full(R, -np.inf)
        wv.append(first)
        sp.append(np.where(np.isfinite(second), second, 0.0))
        alive[top, cols] = False
    return wv, sp


def calibrate_bridge(params: ValuationParams, K: int, N: int, replications: int, seed,
                     bins: int = BRIDGE_BINS) -> BridgeStrategy:
    """Fit the per-slot bid curves from an independent truthful SPSB run."""
    V, _, _ = draw_values(params, K, N, replications, seed)
    knots, bids = [], []
    for x, y in zip(*_truthful_sequential_pairs(V)):
        edges = np.quantile(x, np.linspace(0.0, 1.0, bins + 1))
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
        cnt = np.bincount(idx, minlength=bins)
        keep = cnt > 0
        bx = np.bincount(idx, weights=x, minlength=bins)[keep] / cnt[keep]
        by = np.bincount(idx, weights=y, minlength=bins)[keep] / cnt[keep]
        by = np.maximum.accumulate(np.minimum(by, bx))
        knots.append(bx)
        bids.append(by)
    for _ in range(len(knots), N):
        knots.append(np.array([]))
        bids.append(np.array([]))
    return BridgeStrategy(tuple(knots), tuple(bids))


# --- sweep -----------------------------------------------------------------

def _seed_seq(seed, *key) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.SeedSequence(int(seed), spawn_key=key)


def draw_values(params: ValuationParams, K: int, N: int, replications: int, seed):
    """K x N x R slot values plus the K x R priority and gain factors."""
    ss = _seed_seq(seed, _VALUES)
    seed_int = int(ss.generate_state(1, dtype=np.uint64)[0])
    draws = valuation.sample(params, K, replications, seed_int)
    aff_rng = np.random.default_rng(_seed_seq(seed, _AFFINITY))
    affinity = 1.0 - 0.5 * aff_rng.random((replications, K, N))
    V = draws.v[:, None, :] * np.moveaxis(affinity, 0, -1)
    return V, draws.v_h, draws.v_g


def _stats(x):
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def _run_group(spec: SweepSpec, K: int, N: int):
    """All (mechanism, zeta) cells of one (K, N) pair on shared draws."""
    R = spec.replications
    group = _seed_seq(spec.master_seed, K, N)
    V, v_h, v_g = draw_values(spec.valuation, K, N, R, group)
    lottery = _seed_seq(group, _LOTTERY).generate_state(R, dtype=np.uint32)
    bridge = None
    if Mechanism.FPSB in spec.mechanisms:
        bridge = calibrate_bridge(spec.valuation, K, N, spec.calibration_replications,
                                  _seed_seq(group, _CALIBRATION))
    out = {}
    for z in spec.zeta_values:
        for mech in spec.mechanisms:
            key = (str(mech), K, N, z)
            raw = np.empty((R, 4))
            flagged = 0
            try:
                for r in range(R):
                    truth = V[:, :, r]
                    inst = AuctionInstance(mechanisms.apply_risk(truth, z), zeta=z)
                    bid_fn = None
                    if mech is Mechanism.FPSB:
                        bid_fn = lambda n, nodes, col: bridge(n, col)  # noqa: E731
                    o = mechanisms.run_mechanism(mech, inst, int(lottery[r]), bid_fn, spec.msaa)
                    surplus, revenue = mechanisms.utilities(o, truth)
                    proxy, f = power_proxy(o, v_g[:, r])
                    flagged += f
                    raw[r] = (surplus.sum() / K, revenue / N, proxy,
                              fairness_factor(o, v_h[:, r]))
            except (AuctionError, ValueError, FloatingPointError) as exc:
                out[key] = (None, 0, f"{type(exc).__name__}: {exc}")
                continue
            out[key] = (raw, flagged, "")
    return out


def _normalise(spec: SweepSpec, raw_cells: dict) -> SweepResult:
    ok = {k: v for k, v in raw_cells.items() if v[0] is not None}

    def ref(col, keys):
        vals = [float(ok[k][0][:, col].mean()) for k in keys if k in ok]
        m = max(vals, default=0.0)
        return m if m > 0 else 1.0

    s_ref = ref(0, ok)
    r_ref = ref(1, ok)
    rows = []
    for (mech, K, N, z) in ((str(m), K, N, z) for m, K, N, z in spec.cells()):
        key = (mech, K, N, z)
        raw, flagged, err = raw_cells[key]
        row = SweepRow(mech, K, N, z, spec.replications)
        if raw is None:
            row.status, row.error = "failed", err
            rows.append(row)
            continue
        p_ref = ref(2, [k for k in ok if k[1] == K and k[2] == N])
        s, s_se = _stats(raw[:, 0])
        rv, rv_se = _stats(raw[:, 1])
        pp, pp_se = _stats(raw[:, 2])
        eta, eta_se = _stats(raw[:, 3])
        row.surplus_raw, row.surplus_raw_se = s, s_se
        row.revenue_raw, row.revenue_raw_se = rv, rv_se
        row.power_proxy, row.power_proxy_se = pp, pp_se
        row.S_mean, row.S_se = min(max(s / s_ref, 0.0), 1.0), s_se / s_ref
        row.R_mean, row.R_se = min(max(rv / r_ref, 0.0), 1.0), rv_se / r_ref
        row.P_G_mean, row.P_G_se = min(max(1.0 - pp / p_ref, 0.0), 1.0), pp_se / p_ref
        row.eta_H_mean, row.eta_H_se = eta, eta_se
        row.zero_gain_winners = flagged
        rows.append(row)
    return SweepResult(spec, rows)


def run_sweep(spec: SweepSpec, threads: int = 1) -> SweepResult:
    """Run every cell of a SweepSpec; failing cells are recorded, not raised.

    Surplus and revenue are normalised by their largest cell mean over the
    whole sweep so that trends across K and N stay visible; the power gain
    is normalised within each (K, N) group across mechanisms and risk levels.
    """
    pairs = [(K, N) for K in spec.K_values for N in spec.N_values]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda p: _run_group(spec, *p), pairs))
    else:
        parts = [_run_group(spec, *p) for p in pairs]
    merged = {}
    for part in parts:
        merged.update(part)
    return _normalise(spec, merged)


# --- export / import -------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(x) for x in r])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export(result: SweepResult, path, figures: bool = True) -> list:
    """Write sweep.csv (one row per cell, COLUMNS order) and the figure tables.

    ``path`` is a directory.  Figure tables are long format with a leading
    mechanism column: fig6a/fig7a hold the zeta = 0 rows, fig6b/fig7b the
    risky rows, fig8/fig9 every row.  Returns the written paths.
    """
    os.makedirs(path, exist_ok=True)
    main = os.path.join(path, "sweep.csv")
    _write_csv(main, COLUMNS, ([getattr(r, c) for c in COLUMNS] for r in result.rows))
    written = [main]
    if not figures:
        return written
    for name, cols in FIGURES.items():
        if name in ("fig6a", "fig7a"):
            sel = [r for r in result.rows if r.zeta == 0]
        elif name in ("fig6b", "fig7b"):
            sel = [r for r in result.rows if r.zeta != 0]
        else:
            sel = result.rows
        fp = os.path.join(path, f"{name}.csv")
        _write_csv(fp, ("mechanism",) + cols,
                   ([r.mechanism] + [getattr(r, c) for c in cols] for r in sel))
        written.append(fp)
    return written


_ROW_TYPES = {f.name: f.type for f in fields(SweepRow)}


def read_table(path) -> SweepResult:
    """Parse a sweep.csv back into rows (the SweepSpec is not stored)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name, text in rec.items():
                t = _ROW_TYPES[name]
                kw[name] = int(text) if t == "int" else float(text) if t == "float" else text
            rows.append(SweepRow(**kw))
    return SweepResult(None, rows)


# --- configuration ---------------------------------------------------------

def spec_from_mapping(cfg: dict) -> SweepSpec:
    """Build a SweepSpec from a parsed config.

    Recognised layout::

        master_seed = 1
        replications = 200
        [grid]      K_values, N_values, zeta_values, mechanisms
        [valuation] alpha, beta, a, b, sigma
        [msaa]      reservation, epsilon, max_iterations
    """
    cfg = dict(cfg)
    grid = dict(cfg.pop("grid", {}))
    val = ValuationParams(**cfg.pop("valuation", {}))
    msaa = MsaaConfig(**cfg.pop("msaa", {}))
    known = {f.name for f in fields(SweepSpec)}
    extra = (set(cfg) | set(grid)) - known
    if extra:
        raise ValidationError(f"unknown sweep config keys: {sorted(extra)}")
    try:
        return SweepSpec(valuation=val, msaa=msaa, **grid, **cfg)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc


def spec_to_mapping(spec: SweepSpec) -> dict:
    d = {
        "master_seed": spec.master_seed,
        "replications": spec.replications,
        "calibration_replications": spec.calibration_replications,
        "grid": {"K_values": list(spec.K_values), "N_values": list(spec.N_values),
                 "zeta_values": list(spec.zeta_values),
                 "mechanisms": [str(m) for m in spec.mechanisms]},
        "valuation": asdict(spec.valuation),
    }
    return d


def with_overrides(spec: SweepSpec, **kw) -> SweepSpec:
    return replace(spec, **kw)
