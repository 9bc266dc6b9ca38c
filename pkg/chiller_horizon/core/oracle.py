"""
Brute-force per-step dispatch oracle.

For a fixed building load the cooling split between ON chillers decides every PLR,
power and COP, while the total flow only moves the return temperature. The oracle
therefore grids split fractions on the simplex for each ON/OFF subset and, for each
split, takes the smallest gridded total flow that keeps every chiller inside its flow
limits and the return temperature inside its band. The best grid splits of each
subset are then refined off the lattice by a pattern search whose directions follow
the constraints it runs into.
"""
import concurrent.futures
import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from chiller_horizon.core.config import ChillerSpec, ConstraintTolerances, OracleConfig, PlantConfig
from chiller_horizon.core.errors import InputError
from chiller_horizon.core.plant import (
    ChillerAction,
    ConstraintReport,
    PlantTelemetry,
    check_constraints,
    decode_flows,
    power_curve,
    steady_state_dispatch,
)

logger = logging.getLogger(__name__)

# Candidates kept per subset for the verification pass.
_CANDIDATES_PER_SUBSET = 8
_MAX_REFINE_MOVES = 500


@dataclass(frozen=True)
class DispatchSolution:
    """One step of dispatch; ``feasible`` means every constraint in ``OracleConfig.enforced`` holds."""
    action: ChillerAction
    telemetry: PlantTelemetry
    report: ConstraintReport
    feasible: bool

    @property
    def total_power(self) -> float:
        return self.telemetry.total_power

    @property
    def total_flow(self) -> float:
        return self.action.total_on_flow


@dataclass(frozen=True)
class _Candidate:
    power: float
    total_flow: float
    n_on: int
    subset_rank: int
    split_rank: int
    flows: Tuple[float, ...]

    def key(self) -> Tuple[float, float, int, int, int]:
        return (self.power, self.total_flow, self.n_on, self.subset_rank, self.split_rank)


@lru_cache(maxsize=32)
def simplex_grid(k: int, split_grid: int) -> np.ndarray:
    """
    Split fractions with strictly positive parts on a ``1/(split_grid-1)`` lattice.

    The lattice for ``2*(split_grid-1)+1`` points contains this one; see
    ``OracleConfig.doubled``.
    """
    m = split_grid - 1
    if k == 1:
        grid = np.ones((1, 1))
    elif m < k:
        grid = np.zeros((0, k))
    else:
        rows = []
        for bars in itertools.combinations(range(1, m), k - 1):
            edges = (0,) + bars + (m,)
            rows.append([edges[i + 1] - edges[i] for i in range(k)])
        grid = np.asarray(rows, dtype=float) / m
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=8)
def exchange_directions(k: int) -> np.ndarray:
    """Moves that shift split weight between chillers while keeping the sum at one."""
    dirs = [d for d in itertools.product((-1, 0, 1), repeat=k) if sum(d) == 0 and any(d)]
    out = np.asarray(dirs, dtype=float).reshape(-1, k)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class _SplitProblem:
    """Power and feasibility of one ON subset at a fixed load, as functions of the split."""
    specs: Tuple[ChillerSpec, ...]
    load: float
    lo: float
    hi: float
    plr_lo: float
    plr_hi: float
    check_cop: bool
    cop_tol: float

    @property
    def fmin(self) -> np.ndarray:
        return np.array([s.flow_min for s in self.specs])

    @property
    def fmax(self) -> np.ndarray:
        return np.array([s.flow_max for s in self.specs])

    def power(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Total power per split row and a mask of rows whose PLR/COP limits hold."""
        rated = np.array([s.rated_capacity for s in self.specs])
        cooling = self.load * weights
        plr = cooling / rated
        ok = np.all(weights > 0, axis=1)
        ok &= np.all((plr >= self.plr_lo) & (plr <= self.plr_hi), axis=1)
        power = np.column_stack([power_curve(s, plr[:, j]) for j, s in enumerate(self.specs)])
        if self.check_cop:
            cop_max = np.array([s.cop_max for s in self.specs])
            with np.errstate(divide="ignore", invalid="ignore"):
                cop = np.where(power > 0, cooling / power, np.inf)
            ok &= np.all(cop <= cop_max + self.cop_tol, axis=1)
        return power.sum(axis=1), ok

    def flow_interval(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Smallest and largest total flow keeping every chiller inside its flow limits."""
        with np.errstate(divide="ignore"):
            need_lo = np.maximum(np.max(self.fmin / weights, axis=1), self.lo)
            need_hi = np.minimum(np.min(self.fmax / weights, axis=1), self.hi)
        return need_lo, need_hi

    def gridded_total(self, weights: np.ndarray, flow_grid: int) -> Tuple[np.ndarray, np.ndarray]:
        need_lo, need_hi = self.flow_interval(weights)
        steps = flow_grid - 1
        step = (self.hi - self.lo) / steps
        if step > 0:
            j = np.ceil(np.maximum(need_lo - self.lo, 0.0) / step - 1e-9)
            total = self.lo + j * step
            ok = j <= steps
        else:
            total = np.full(len(weights), self.lo)
            ok = need_lo <= self.lo * (1 + 1e-12)
        ok &= total <= need_hi * (1 + 1e-12)
        return total, ok

    def continuous_total(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        need_lo, need_hi = self.flow_interval(weights)
        return need_lo, need_lo <= need_hi * (1 + 1e-12)

    def linear_constraints(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Feasible splits as ``normals @ w >= offsets``.

        PLR limits and the total-flow band bound each weight; a common total flow
        exists for every chiller only while ``fmin_i * w_j <= fmax_j * w_i``. The COP
        cap is not linear in the split and is left to ``power``.
        """
        k = len(self.specs)
        rated = np.array([s.rated_capacity for s in self.specs])
        fmin, fmax = self.fmin, self.fmax
        lower = np.maximum(self.plr_lo * rated / self.load, fmin / self.hi)
        upper = np.minimum(self.plr_hi * rated / self.load, fmax / self.lo)
        eye = np.eye(k)
        normals = [eye, -eye]
        offsets = [lower, -upper]
        for i, j in itertools.permutations(range(k), 2):
            normals.append((fmax[j] * eye[i] - fmin[i] * eye[j])[None, :])
            offsets.append(np.zeros(1))
        return np.vstack(normals), np.concatenate(offsets)


def _search_directions(normals: np.ndarray, offsets: np.ndarray, weights: np.ndarray, step: float) -> np.ndarray:
    """
    Unit search directions at ``weights`` for a pattern search of size ``step``.

    Besides the plain weight exchanges, these span the faces of every constraint
    within ``step`` of ``weights`` and lead off each of them into the interior.
    """
    k = len(weights)
    lengths = np.linalg.norm(normals, axis=1)
    slack = (normals @ weights - offsets) / lengths
    near = np.flatnonzero(slack <= step)
    # Tightest constraints first, each kept only while independent of the ones before
    # it and of sum(w) = 1.
    rows = np.ones((1, k))
    for c in near[np.argsort(slack[near], kind="stable")]:
        grown = np.vstack([rows, normals[c]])
        if np.linalg.matrix_rank(grown) == len(grown):
            rows = grown
    _, _, vt = np.linalg.svd(rows)
    null = vt[len(rows):]
    dirs = [exchange_directions(k), null, -null]
    if len(rows) > 1:
        dirs.append(np.linalg.pinv(rows)[:, 1:].T)
    out = np.vstack(dirs)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _refine(problem: _SplitProblem, weights: np.ndarray, power: float, step: float, min_step: float) -> Tuple[np.ndarray, float]:
    """Pattern search over the split, halving the step whenever no direction improves."""
    normals, offsets = problem.linear_constraints()
    moves = 0
    while step >= min_step and moves < _MAX_REFINE_MOVES:
        trial = weights + step * _search_directions(normals, offsets, weights, step)
        p, ok = problem.power(trial)
        _, flow_ok = problem.continuous_total(trial)
        p = np.where(ok & flow_ok, p, np.inf)
        best = int(np.argmin(p))
        if p[best] < power - 1e-12:
            weights, power = trial[best], float(p[best])
            moves += 1
        else:
            step /= 2
    return weights, power


@dataclass(frozen=True)
class _SubsetSearch:
    """Grid candidates of one ON subset, best first, and the split problem they came from."""
    subset: Tuple[int, ...]
    subset_rank: int
    problem: Optional[_SplitProblem]
    candidates: Tuple[_Candidate, ...]
    grid_weights: Tuple[np.ndarray, ...] = ()

    @property
    def best_power(self) -> float:
        return self.candidates[0].power if self.candidates else math.inf


def _make_candidate(search: _SubsetSearch, n: int, row: int, w: np.ndarray, power: float, flow: float) -> _Candidate:
    flows = [0.0] * n
    for jj, i in enumerate(search.subset):
        flows[i] = float(w[jj] * flow)
    return _Candidate(power, flow, len(search.subset), search.subset_rank, row, tuple(flows))


def _grid_search(
    config: PlantConfig,
    oracle_cfg: OracleConfig,
    tol: ConstraintTolerances,
    load: float,
    subset: Tuple[int, ...],
    subset_rank: int,
) -> _SubsetSearch:
    n = config.n_chillers
    if not subset:
        idle = (_Candidate(0.0, 0.0, 0, subset_rank, 0, (0.0,) * n),) if load <= tol.energy_kw else ()
        return _SubsetSearch(subset, subset_rank, None, idle)

    # Chiller-id order makes the search independent of the bank's listing order.
    subset = tuple(sorted(subset, key=lambda i: config.chillers[i].id))
    specs = tuple(config.chillers[i] for i in subset)
    empty = _SubsetSearch(subset, subset_rank, None, ())
    # Return-temperature band, widened by the tolerance the verifier accepts,
    # expressed as a total-flow band.
    band = tol.temperature_c * (1 - 1e-9)
    f_lo_t = load / (config.c_w * (config.t_return_max + band - config.t_supply))
    f_hi_t = load / (config.c_w * max(config.t_return_min - band - config.t_supply, 1e-12))
    lo = max(sum(s.flow_min for s in specs), f_lo_t)
    hi = min(sum(s.flow_max for s in specs), f_hi_t)
    if lo > hi:
        return empty

    problem = _SplitProblem(
        specs=specs,
        load=load,
        lo=lo,
        hi=hi,
        plr_lo=config.plr_min - tol.plr if "plr_range" in oracle_cfg.enforced else -np.inf,
        plr_hi=config.plr_max + tol.plr,
        check_cop="cop_cap" in oracle_cfg.enforced,
        cop_tol=tol.cop,
    )
    weights = simplex_grid(len(subset), oracle_cfg.split_grid)
    if len(weights) == 0:
        return empty
    total_power, ok = problem.power(weights)
    total, flow_ok = problem.gridded_total(weights, oracle_cfg.flow_grid)
    idx = np.flatnonzero(ok & flow_ok)
    if idx.size == 0:
        return empty
    order = idx[np.lexsort((idx, total[idx], total_power[idx]))[:_CANDIDATES_PER_SUBSET]]
    search = _SubsetSearch(subset, subset_rank, problem, (), tuple(weights[order]))
    candidates = tuple(
        _make_candidate(search, n, int(r), weights[r], float(total_power[r]), float(total[r])) for r in order
    )
    return _SubsetSearch(subset, subset_rank, problem, candidates, search.grid_weights)


def _refine_search(oracle_cfg: OracleConfig, n: int, search: _SubsetSearch) -> List[_Candidate]:
    """Off-lattice candidates grown from the best grid splits of one subset."""
    out = []
    step = 1.0 / (oracle_cfg.split_grid - 1)
    for cand, w0 in list(zip(search.candidates, search.grid_weights))[: oracle_cfg.refine_starts]:
        w, power = _refine(search.problem, w0.copy(), cand.power, step, oracle_cfg.refine_min_step)
        if power < cand.power:
            flow = float(search.problem.continuous_total(w[None, :])[0][0])
            out.append(_make_candidate(search, n, cand.split_rank, w, power, flow))
    return out


def _subsets(n: int) -> List[Tuple[int, ...]]:
    out: List[Tuple[int, ...]] = []
    for k in range(n + 1):
        out.extend(itertools.combinations(range(n), k))
    return out


def _best_violation(config: PlantConfig, tol: ConstraintTolerances, load: float) -> DispatchSolution:
    """Least-violating full-flow dispatch, reported when nothing is feasible."""
    best: Optional[Tuple[Tuple[float, ...], DispatchSolution]] = None
    for subset in _subsets(config.n_chillers):
        flows = [config.chillers[i].flow_max if i in subset else 0.0 for i in range(config.n_chillers)]
        action = decode_flows(config, flows)
        telemetry = steady_state_dispatch(config, action, load)
        report = check_constraints(config, telemetry, action, tol)
        score = (
            report["energy_balance"].violation_magnitude,
            report["t_return_range"].violation_magnitude,
            sum(e.violation_magnitude for e in report.entries.values()),
            telemetry.total_power,
        )
        if best is None or score < best[0]:
            best = (score, DispatchSolution(action, telemetry, report, False))
    assert best is not None
    return best[1]


def _map(oracle_cfg: OracleConfig, fn, items):
    if oracle_cfg.workers > 1 and len(items) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=oracle_cfg.workers) as executor:
            return list(executor.map(fn, items))
    return [fn(item) for item in items]


def optimal_dispatch(
    config: PlantConfig,
    oracle_cfg: Optional[OracleConfig] = None,
    building_load: float = 0.0,
    tolerances: Optional[ConstraintTolerances] = None,
) -> DispatchSolution:
    """Minimum-power feasible dispatch for one step, or the least-violating one."""
    oracle_cfg = oracle_cfg or OracleConfig()
    tol = tolerances or ConstraintTolerances()
    load = float(building_load)
    if math.isnan(load) or math.isinf(load) or load < 0:
        raise InputError(f"building load must be finite and non-negative, got {building_load}")

    n = config.n_chillers
    args = [(config, oracle_cfg, tol, load, s, r) for r, s in enumerate(_subsets(n))]
    searches = _map(oracle_cfg, lambda a: _grid_search(*a), args)
    candidates = [c for s in searches for c in s.candidates]

    if oracle_cfg.refine_starts and candidates:
        ceiling = min(s.best_power for s in searches) * (1 + oracle_cfg.refine_margin)
        promising = [s for s in searches if len(s.subset) > 1 and s.best_power <= ceiling]
        for group in _map(oracle_cfg, lambda s: _refine_search(oracle_cfg, n, s), promising):
            candidates.extend(group)

    for cand in sorted(candidates, key=_Candidate.key):
        action = decode_flows(config, cand.flows)
        telemetry = steady_state_dispatch(config, action, load)
        report = check_constraints(config, telemetry, action, tol)
        if all(report[cid].satisfied for cid in oracle_cfg.enforced):
            return DispatchSolution(action, telemetry, report, True)
        logger.debug("oracle candidate rejected on verification: %s", report.violated())

    logger.warning("no feasible dispatch for load %.1f kW", load)
    return _best_violation(config, tol, load)


def lower_bound_trajectory(
    config: PlantConfig,
    oracle_cfg: Optional[OracleConfig],
    loads: Sequence[float],
    tolerances: Optional[ConstraintTolerances] = None,
) -> List[DispatchSolution]:
    """Independent per-step optimal dispatch over a load trace."""
    values = np.asarray(loads, dtype=float)
    if values.size and (not np.all(np.isfinite(values)) or np.any(values < 0)):
        raise InputError("loads must be finite and non-negative")
    solutions: List[DispatchSolution] = []
    cache = {}
    for load in values:
        key = float(load)
        if key not in cache:
            cache[key] = optimal_dispatch(config, oracle_cfg, key, tolerances)
        solutions.append(cache[key])
    infeasible = sum(1 for s in solutions if not s.feasible)
    if infeasible:
        logger.warning("%d of %d oracle steps infeasible", infeasible, len(solutions))
    return solutions


def trajectory_energy(solutions: Sequence[DispatchSolution], dt_hours: float) -> float:
    """kWh drawn by a dispatch trajectory."""
    return float(sum(s.total_power for s in solutions) * dt_hours)
