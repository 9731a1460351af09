"""Backward induction for plain and penalized equations on the tree.

The driver integral is treated implicitly (solve y = e + f(t, y) dt) and so
is the penalty term n (y - L)^- dt: the piecewise-linear equation is solved
exactly by case analysis, with fixed-point refinement only for non-affine
drivers.  Explicit penalties would blow up along the level schedule.

Upper-side modes are solved by negation duality of the lower-side code:
(Y, M, K, A) solves the upper problem iff (-Y, -M, A, K) solves the lower
problem for the negated data.  This makes the duality identities exact in
floating point.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .bundles import SolutionBundle, lu4_residual, skorokhod_residual
from .drivers import Driver
from .errors import (
    InvalidInstanceError,
    NumericalError,
    PreconditionError,
    SchemeMonotonicityError,
    StabilityError,
)
from .lattice import AdaptedField, EdgeField, expect_children, sup_distance
from .regulated import (
    BarrierPair,
    ProblemInstance,
    RegulatedField,
    jump_exhaustion_schedule,
    validate_instance,
)

FIXED_POINT_TOL = 1e-13
FIXED_POINT_MAX_ITER = 200
MONOTONICITY_TOL = 1e-10
DEFAULT_MAX_PENALTY = 2 ** 20


class PenalizationMode(enum.Enum):
    PURE_LOWER = "pure-lower"
    PURE_UPPER = "pure-upper"
    LOWER_PENALTY_UPPER_REFLECT = "lower-penalty-upper-reflect"
    UPPER_PENALTY_LOWER_REFLECT = "upper-penalty-lower-reflect"

    @property
    def penalizes_lower(self) -> bool:
        return self in (
            PenalizationMode.PURE_LOWER,
            PenalizationMode.LOWER_PENALTY_UPPER_REFLECT,
        )

    @property
    def increasing(self) -> bool:
        """Whether the scheme approaches its limit from below."""
        return self.penalizes_lower

    @property
    def reflects(self) -> bool:
        return self in (
            PenalizationMode.LOWER_PENALTY_UPPER_REFLECT,
            PenalizationMode.UPPER_PENALTY_LOWER_REFLECT,
        )

    @property
    def dual(self) -> "PenalizationMode":
        return {
            PenalizationMode.PURE_LOWER: PenalizationMode.PURE_UPPER,
            PenalizationMode.PURE_UPPER: PenalizationMode.PURE_LOWER,
            PenalizationMode.LOWER_PENALTY_UPPER_REFLECT: PenalizationMode.UPPER_PENALTY_LOWER_REFLECT,
            PenalizationMode.UPPER_PENALTY_LOWER_REFLECT: PenalizationMode.LOWER_PENALTY_UPPER_REFLECT,
        }[self]


@dataclass
class PenalizedSolution(SolutionBundle):
    """Solution of one penalized backward sweep at a fixed penalty level."""


def _check_stability(driver: Driver, dt: float) -> None:
    if not driver.mu * dt < 0.5:
        raise StabilityError(
            f"mu * dt = {driver.mu * dt} is not < 1/2; refusing the implicit step"
        )


def implicit_step(e: float, t: float, dt: float, driver: Driver) -> float:
    """The unique y with y = e + f(t, y) dt.

    Affine drivers are solved in closed form; general Lipschitz drivers by
    fixed-point iteration to 1e-13, a guaranteed contraction while
    mu * dt < 1/2.
    """
    _check_stability(driver, dt)
    if driver.affine:
        a, b = driver.coefficients(t)
        return (e + a * dt) / (1.0 - b * dt)
    z = e
    for _ in range(FIXED_POINT_MAX_ITER):
        z_next = e + driver(t, z) * dt
        if abs(z_next - z) <= FIXED_POINT_TOL:
            return z_next
        z = z_next
    raise NumericalError(
        f"implicit step failed to converge: e={e!r}, t={t!r}, dt={dt!r}, "
        f"last iterate {z!r}"
    )


def _pl_lower(c: float, scale: float, n: int, dt: float, lower: float) -> tuple[float, float]:
    """Exact solve of scale*y = c + n dt (lower - y)^+ by case analysis.

    Returns (y, dk_star).  ``scale`` is 1 - b*dt for affine drivers, 1 else.
    """
    if c >= lower * scale:
        return c / scale, 0.0
    y = (c + n * dt * lower) / (scale + n * dt)
    return y, n * dt * max(lower - y, 0.0)


def _pl_upper(c: float, scale: float, n: int, dt: float, upper: float) -> tuple[float, float]:
    if c <= upper * scale:
        return c / scale, 0.0
    y = (c + n * dt * upper) / (scale + n * dt)
    return y, n * dt * max(y - upper, 0.0)


def _flow_unclamped(
    e: float, t: float, dt: float, n: int, driver: Driver, penalty_side: str, barrier: float
) -> tuple[float, float]:
    """Implicit flow value over one interval with the one-sided penalty."""
    pl = _pl_lower if penalty_side == "lower" else _pl_upper
    if driver.affine:
        a, b = driver.coefficients(t)
        return pl(e + a * dt, 1.0 - b * dt, n, dt, barrier)
    z = e
    for _ in range(FIXED_POINT_MAX_ITER):
        y, pen = pl(e + driver(t, z) * dt, 1.0, n, dt, barrier)
        if abs(y - z) <= FIXED_POINT_TOL:
            return y, pen
        z = y
    raise NumericalError(
        f"penalized step failed to converge: e={e!r}, t={t!r}, dt={dt!r}, n={n}"
    )


def penalized_step(
    e: float,
    t: float,
    dt: float,
    n: int,
    mode: PenalizationMode,
    lower: float | None,
    upper: float | None,
    driver: Driver,
) -> tuple[float, float, float]:
    """One implicit interval step with penalty and (in reflect modes) a clamp.

    Returns (y, dk_star, da_star).  In reflect modes the opposing barrier
    clamps the interval value; the recorded clamp increment re-solves the
    budget at the barrier exactly, so the one-step identity holds to
    round-off.  Pass ``None`` for the clamp barrier at nodes where a declared
    right jump takes over (the value correction then books the excess).
    """
    _check_stability(driver, dt)
    if mode.penalizes_lower:
        if lower is None:
            raise PreconditionError(f"mode {mode.value} needs the lower barrier")
        y, dk = _flow_unclamped(e, t, dt, n, driver, "lower", lower)
        if mode.reflects and upper is not None and y > upper:
            dk = n * dt * max(lower - upper, 0.0)
            da = max((e + driver(t, upper) * dt + dk) - upper, 0.0)
            return upper, dk, da
        return y, dk, 0.0
    if upper is None:
        raise PreconditionError(f"mode {mode.value} needs the upper barrier")
    y, da = _flow_unclamped(e, t, dt, n, driver, "upper", upper)
    if mode.reflects and lower is not None and y < lower:
        da = n * dt * max(lower - upper, 0.0)
        dk = max(lower - (e + driver(t, lower) * dt - da), 0.0)
        return lower, dk, da
    return y, 0.0, da


def right_jump_correction(
    y_plus: float,
    mode: PenalizationMode,
    lower: float | None,
    upper: float | None,
    *,
    lower_scheduled: bool = False,
    upper_scheduled: bool = False,
    lower_declared: bool = False,
    upper_declared: bool = False,
) -> tuple[float, float, float]:
    """Value-at-the-instant correction from the right-limit value.

    On the penalized side only nodes scheduled at the current penalty level
    receive the correction (full absorption to the barrier); on the reflected
    side every node with a declared barrier jump does.  Identity elsewhere.
    Returns (y, jump_k, jump_a).
    """
    y = y_plus
    jump_k = 0.0
    jump_a = 0.0
    if mode.penalizes_lower:
        if lower_scheduled and lower is not None and y < lower:
            jump_k = lower - y
            y = lower
        if mode.reflects and upper_declared and upper is not None and y > upper:
            jump_a = y - upper
            y = upper
    else:
        if upper_scheduled and upper is not None and y > upper:
            jump_a = y - upper
            y = upper
        if mode.reflects and lower_declared and lower is not None and y < lower:
            jump_k = lower - y
            y = lower
    return y, jump_k, jump_a


def _jump_mask(barrier: RegulatedField | None, tree) -> list[np.ndarray]:
    if barrier is None:
        return [np.zeros(tree.level_size(k), dtype=bool) for k in range(tree.levels)]
    return [barrier.jump_levels(k) != 0.0 for k in range(tree.levels)]


def _require_valid(instance: ProblemInstance) -> None:
    report = validate_instance(instance)
    if not report.ok:
        heads = "; ".join(f"{v.kind} at {v.location}" for v in report.violations[:4])
        raise InvalidInstanceError(f"instance fails validation: {heads}")


def solve_penalized(instance: ProblemInstance, n: int, mode: PenalizationMode) -> PenalizedSolution:
    """Full backward sweep of one penalization scheme at level n.

    Lower-side modes run directly; upper-side modes run on the negated
    problem and swap (K, A) back, which realizes the duality exactly.
    """
    if n < 1:
        raise PreconditionError("penalty level must be >= 1")
    _require_valid(instance)
    if not mode.penalizes_lower:
        from .solvers import negation_dual

        dual = solve_penalized(negation_dual(instance), n, mode.dual)
        flipped = dual.negate_swap()
        return PenalizedSolution(
            tree=flipped.tree,
            grid=flipped.grid,
            y=flipped.y,
            dm=flipped.dm,
            dk_star=flipped.dk_star,
            jump_k=flipped.jump_k,
            da_star=flipped.da_star,
            jump_a=flipped.jump_a,
            method=mode.value,
            n=n,
        )

    tree, grid, driver = instance.tree, instance.grid, instance.driver
    lower = instance.lower
    if lower is None:
        raise PreconditionError(f"mode {mode.value} needs the lower barrier")
    upper = instance.upper
    if mode.reflects and upper is None:
        raise PreconditionError(f"mode {mode.value} needs the upper barrier to reflect on")

    sched = jump_exhaustion_schedule(lower, n, side="lower").mask(tree)
    upper_jumps = _jump_mask(upper, tree)

    depth = tree.depth
    y_levels: list[np.ndarray] = [np.empty(0)] * (depth + 1)
    y_levels[depth] = np.array(instance.terminal, dtype=float)
    dk_levels = [np.zeros(tree.level_size(k)) for k in range(depth + 1)]
    jk_levels = [np.zeros(tree.level_size(k)) for k in range(depth + 1)]
    da_levels = [np.zeros(tree.level_size(k)) for k in range(depth + 1)]
    ja_levels = [np.zeros(tree.level_size(k)) for k in range(depth + 1)]
    dm_levels: list[list[np.ndarray]] = []

    for k in range(depth - 1, -1, -1):
        t = float(grid.instants[k])
        dt = grid.dt(k)
        y_next = y_levels[k + 1]
        width = tree.level_size(k)
        y_here = np.empty(width)
        dm_row = []
        lo_vals = lower.value.level(k)
        up_vals = None if upper is None else upper.value.level(k)
        for j in range(width):
            e = expect_children(tree, k, y_next, j)
            cs = tree.children[k][j]
            dm_row.append(np.asarray([float(y_next[c]) - e for c in cs]))
            lo = float(lo_vals[j])
            if mode.reflects and up_vals is not None and not upper_jumps[k][j]:
                clamp_upper = float(up_vals[j])
            else:
                clamp_upper = None
            y_plus, dk, da = penalized_step(e, t, dt, n, mode, lo, clamp_upper, driver)
            y, jk, ja = right_jump_correction(
                y_plus,
                mode,
                lo,
                None if up_vals is None else float(up_vals[j]),
                lower_scheduled=bool(sched[k][j]),
                upper_declared=mode.reflects and bool(upper_jumps[k][j]),
            )
            y_here[j] = y
            dk_levels[k][j] = dk
            jk_levels[k][j] = jk
            da_levels[k][j] = da
            ja_levels[k][j] = ja
        y_levels[k] = y_here
        dm_levels.append(dm_row)
    dm_levels.reverse()

    value = AdaptedField(tree, y_levels)
    jump_k = AdaptedField(tree, jk_levels)
    jump_a = AdaptedField(tree, ja_levels)
    right = AdaptedField(
        tree,
        [(value.level(k) - jump_k.level(k)) + jump_a.level(k) for k in range(depth + 1)],
    )
    return PenalizedSolution(
        tree=tree,
        grid=grid,
        y=RegulatedField(value, right),
        dm=EdgeField(tree, dm_levels),
        dk_star=AdaptedField(tree, dk_levels),
        jump_k=jump_k,
        da_star=AdaptedField(tree, da_levels),
        jump_a=jump_a,
        method=mode.value,
        n=n,
    )


@dataclass
class TraceRow:
    n: int
    sup_distance: float
    lower_skorokhod_residual: float | None = None
    upper_skorokhod_residual: float | None = None
    lu4_residual: float | None = None


@dataclass
class SweepResult:
    mode: PenalizationMode
    eps: float
    converged: bool
    levels: list[int]
    final: PenalizedSolution
    trace: list[TraceRow]
    monotone_violation: float

    @property
    def y(self) -> RegulatedField:
        return self.final.y


def default_levels(n_max: int = DEFAULT_MAX_PENALTY) -> list[int]:
    """Doubling penalty schedule 1, 2, 4, ... up to n_max."""
    out = [1]
    while out[-1] * 2 <= n_max:
        out.append(out[-1] * 2)
    return out


def penalization_sweep(
    instance: ProblemInstance,
    mode: PenalizationMode,
    levels: list[int] | None = None,
    eps: float = 1e-5,
    compute_residuals: bool = False,
) -> SweepResult:
    """Run one penalization scheme along an increasing level schedule.

    Stops once consecutive solutions are eps-close in sup norm; asserts the
    monotonicity the comparison argument dictates (nondecreasing for the
    lower-penalty modes, nonincreasing for the upper-penalty modes) and
    raises when it fails beyond 1e-10.  Non-convergence within the schedule
    is reported in the result, not raised.
    """
    if levels is None:
        levels = default_levels()
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise PreconditionError("penalty levels must be strictly increasing")
    prev: PenalizedSolution | None = None
    trace: list[TraceRow] = []
    ran: list[int] = []
    worst_mono = 0.0
    converged = False
    sol: PenalizedSolution | None = None
    for n in levels:
        sol = solve_penalized(instance, n, mode)
        ran.append(n)
        if prev is not None:
            dist = sup_distance(sol.y.value, prev.y.value)
            for k in range(instance.tree.levels):
                diff = sol.y.value.level(k) - prev.y.value.level(k)
                viol = float(np.max(-diff)) if mode.increasing else float(np.max(diff))
                worst_mono = max(worst_mono, viol)
            row = TraceRow(n, dist)
            if compute_residuals:
                rep = skorokhod_residual(sol, instance.barriers)
                row.lower_skorokhod_residual = rep.lower_residual
                row.upper_skorokhod_residual = rep.upper_residual
                row.lu4_residual = lu4_residual(sol, instance)
            trace.append(row)
            if worst_mono > MONOTONICITY_TOL:
                raise SchemeMonotonicityError(
                    f"{mode.value} sweep lost monotonicity by {worst_mono} at level {n}"
                )
            if dist < eps:
                converged = True
                break
        prev = sol
    assert sol is not None
    sol.method = (
        "increasing-penalization" if mode.increasing else "decreasing-penalization"
    )
    return SweepResult(
        mode=mode,
        eps=eps,
        converged=converged,
        levels=ran,
        final=sol,
        trace=trace,
        monotone_violation=worst_mono,
    )
