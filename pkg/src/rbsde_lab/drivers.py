"""Driver (generator) families.

Affine drivers f(t, y) = a + b*y are solved in closed form inside the
implicit steps; arbitrary Lipschitz callables fall back to fixed-point
iteration.  Negation wrapping supports the duality (Y, M, K, A) ->
(-Y, -M, A, K) between lower- and upper-reflected problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import InvalidInstanceError


@dataclass(frozen=True)
class Driver:
    """Evaluation rule f(t, y) with Lipschitz constant mu in y.

    ``intercept``/``slope`` describe the affine case; ``fn`` overrides them
    for custom rules (then ``affine`` is False and mu must be supplied).
    """

    family: str
    intercept: float = 0.0
    slope: float = 0.0
    mu: float = 0.0
    y_independent: bool = True
    fn: Callable[[float, float], float] | None = None

    def __call__(self, t: float, y: float) -> float:
        if self.fn is not None:
            return self.fn(t, y)
        return self.intercept + self.slope * y

    @property
    def affine(self) -> bool:
        return self.fn is None

    def coefficients(self, t: float) -> tuple[float, float]:
        if not self.affine:
            raise InvalidInstanceError("driver is not affine")
        return self.intercept, self.slope


def zero_driver() -> Driver:
    return Driver("zero")


def constant_driver(rate: float) -> Driver:
    return Driver("constant", intercept=float(rate))


def linear_driver(intercept: float, slope: float) -> Driver:
    return Driver(
        "linear",
        intercept=float(intercept),
        slope=float(slope),
        mu=abs(float(slope)),
        y_independent=(slope == 0.0),
    )


def custom_driver(fn: Callable[[float, float], float], mu: float, y_independent: bool = False) -> Driver:
    if mu < 0.0:
        raise InvalidInstanceError("Lipschitz constant must be nonnegative")
    return Driver("custom", mu=float(mu), y_independent=y_independent, fn=fn)


class _NegatedRule:
    """g(t, y) = -f(t, -y); keeps a handle on the base rule for unwrapping."""

    def __init__(self, base: Driver):
        self.base = base

    def __call__(self, t: float, y: float) -> float:
        return -self.base(t, -y)


def negate_driver(driver: Driver) -> Driver:
    """The driver of the negated problem; an exact involution."""
    if isinstance(driver.fn, _NegatedRule):
        return driver.fn.base
    if driver.affine:
        # -(a + b * (-y)) = -a + b * y
        return Driver(
            driver.family,
            intercept=-driver.intercept,
            slope=driver.slope,
            mu=driver.mu,
            y_independent=driver.y_independent,
        )
    return Driver(
        "negated",
        mu=driver.mu,
        y_independent=driver.y_independent,
        fn=_NegatedRule(driver),
    )
