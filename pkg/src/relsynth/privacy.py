"""Analytic Gaussian mechanism, privacy-cost ledger, noise streams and budget planning.

Noise scales are standard deviations throughout.  A Gaussian query with L2
sensitivity Δ and scale σ costs (Δ/σ)²; a run is (ε, δ)-DP when the summed
cost stays at or below γ², where γ solves

    Φ(γ/2 − ε/γ) − e^ε Φ(−γ/2 − ε/γ) = δ.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import BudgetOverdraw, ConfigError, NumericError

log = logging.getLogger(__name__)

Z95 = 1.96


def _lhs(gamma: float, eps: float) -> float:
    a = gamma / 2 - eps / gamma
    b = -gamma / 2 - eps / gamma
    return float(ndtr(a) - math.exp(eps + log_ndtr(b)))


def solve_gamma(epsilon: float, delta: float, tol: float = 1e-12) -> float:
    """Largest γ with Φ(γ/2 − ε/γ) − e^ε Φ(−γ/2 − ε/γ) ≤ δ (bisection)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while _lhs(hi, epsilon) < delta:
        lo, hi = hi, hi * 2
        if hi > 1e9:
            raise NumericError(f"cannot bracket gamma for eps={epsilon}, delta={delta}")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _lhs(mid, epsilon) <= delta:
            lo = mid
        else:
            hi = mid
    gamma = lo if lo > 0 else hi
    if abs(_lhs(gamma, epsilon) - delta) > tol:
        raise NumericError(f"gamma residual {abs(_lhs(gamma, epsilon) - delta):.3e} above {tol}")
    return gamma


def gamma_residual(gamma: float, epsilon: float, delta: float) -> float:
    return abs(_lhs(gamma, epsilon) - delta)


def classical_sigma(epsilon: float, delta: float, sensitivity: float = 1.0) -> float:
    return sensitivity * math.sqrt(2 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float
    gamma: float

    @classmethod
    def from_eps_delta(cls, epsilon: float, delta: float) -> "PrivacyParams":
        return cls(epsilon, delta, solve_gamma(epsilon, delta))

    @property
    def budget(self) -> float:
        return self.gamma ** 2


@dataclass
class Charge:
    label: str
    sensitivity: float
    sigma: float
    cost: float
    group: str | None = None


class Ledger:
    """Append-only log of Gaussian charges against a γ² budget.

    Inside :meth:`parallel`, charges are grouped into branches that act on
    disjoint data; the group costs the maximum branch total.
    """

    def __init__(self, budget: float, rel_tol: float = 1e-9):
        self.budget = float(budget)
        self.rel_tol = rel_tol
        self.charges: list[Charge] = []
        self._committed = 0.0
        self._group: dict | None = None

    @property
    def total(self) -> float:
        if self._group is None:
            return self._committed
        return self._committed + max(self._group["branches"].values(), default=0.0)

    @property
    def remaining(self) -> float:
        return self.budget - self.total

    def charge(self, label: str, sensitivity: float, sigma: float) -> Charge:
        if not sigma > 0:
            raise ValueError(f"{label}: noise scale must be positive, got {sigma}")
        cost = (sensitivity / sigma) ** 2
        g = self._group
        if g is None:
            new_total = self._committed + cost
        else:
            b = g["current"]
            branches = dict(g["branches"])
            branches[b] = branches.get(b, 0.0) + cost
            new_total = self._committed + max(branches.values())
        if new_total > self.budget * (1 + self.rel_tol) + 1e-15:
            raise BudgetOverdraw(
                f"{label}: cost {cost:.6g} would bring the total to {new_total:.6g} > budget {self.budget:.6g}"
            )
        c = Charge(label, float(sensitivity), float(sigma), cost, None if g is None else f"{g['label']}/{g['current']}")
        if g is not None:
            g["branches"][g["current"]] = g["branches"].get(g["current"], 0.0) + cost
        else:
            self._committed += cost
        self.charges.append(c)
        return c

    @contextmanager
    def parallel(self, label: str) -> Iterator["_Branches"]:
        if self._group is not None:
            raise RuntimeError("nested parallel groups are not supported")
        self._group = {"label": label, "branches": {}, "current": None}
        try:
            yield _Branches(self._group)
        finally:
            self._committed += max(self._group["branches"].values(), default=0.0)
            self._group = None

    def to_json(self) -> list[dict]:
        return [{"label": c.label, "delta_sensitivity": c.sensitivity, "sigma": _finite(c.sigma),
                 "cost": c.cost, "group": c.group} for c in self.charges]


class _Branches:
    def __init__(self, group: dict):
        self._g = group

    @contextmanager
    def branch(self, key) -> Iterator[None]:
        self._g["current"] = str(key)
        self._g["branches"].setdefault(str(key), 0.0)
        try:
            yield
        finally:
            self._g["current"] = None


# ------------------------------------------------------------------ streams

def _label_key(label) -> tuple[int, ...]:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class Streams:
    """Named, independent random substreams derived from one seed.

    A substream depends only on (seed, label), never on call order, so work
    can be reordered or run on threads without changing any draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *label) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_label_key(label))
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, label: tuple, size, scale: float = 1.0) -> np.ndarray:
        """Gaussian draws by inverse CDF of open-interval uniforms."""
        g = self.generator("normal", *label)
        u = g.random(size) + 2.0 ** -54
        return scale * ndtri(u)


def _finite(obj):
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def charge_and_noise(ledger: Ledger, streams: Streams, label: str, sensitivity: float, sigma: float,
                     values, key: tuple | None = None) -> np.ndarray:
    """Record the charge, then add N(0, σ²) noise to every entry of ``values``.

    A zero sensitivity (public data) costs nothing and adds no noise.
    """
    values = np.asarray(values, dtype=np.float64)
    if sensitivity == 0:
        ledger.charge(label, 0.0, sigma if sigma > 0 else math.inf)
        return values.copy()
    ledger.charge(label, sensitivity, sigma)
    noise = streams.normal(key if key is not None else (label,), values.shape, sigma)
    return values + noise


# ------------------------------------------------------------- cost formulas

def r_score_query_count(n_h: int, n_i: int) -> int:
    return (n_h * n_h + 2 * n_h * n_i + 2 * n_i * n_i - n_h) // 2


def cost_one_fk(n_h: int, n_i: int, tau: float, sigma_r: float, sigma_n: float, sigma_h: float,
                sigma_m: float, t2: int, N: int, k: int) -> float:
    """Privacy cost of one foreign-key pipeline without the store initialization.

    The second term uses the group-count scale σ_n.
    """
    if tau == 0:
        return 0.0
    t = tau * tau
    first = 2 * t * (n_h * n_h + 2 * n_h * n_i + 2 * n_i * n_i - n_h) / sigma_r ** 2
    second = t / sigma_n ** 2
    third = t * t2 * N * n_i * (k / sigma_h ** 2 + 1 / sigma_m ** 2)
    return first + second + third


def cost_mrf(tau: float, k: int, t2: int, sigma_h: float, sigma_m: float) -> float:
    """Privacy cost of one model-construction call (k·T₂ h-scores, T₂ NPM queries)."""
    return tau * tau * k * t2 / sigma_h ** 2 + tau * tau * t2 / sigma_m ** 2


# ------------------------------------------------------------------ planning

@dataclass
class SinglePlan:
    """Budget for one single-relation synthesis (also used inside initialization)."""
    relation: str
    tau: int
    cost: float


@dataclass
class InitPlan:
    cost: float
    parts: dict[str, float]
    sigma_inter: float | None
    sigma_intra: float | None
    n_inter: int
    n_intra: int


@dataclass
class FKPlan:
    referencing: str
    fk_column: str
    referenced: str
    tau: int
    n_h: int
    n_i: int
    N: int
    share: float
    sigma_r: float
    sigma_n: float
    sigma_h: float
    sigma_m: float
    init: InitPlan
    o: int
    k: int
    t2: int

    @property
    def stage(self) -> str:
        return f"{self.referencing}.{self.fk_column}"

    @property
    def main_cost(self) -> float:
        """Scores, group sizes and MRFs; the init stage is charged separately."""
        return cost_one_fk(self.n_h, self.n_i, self.tau, self.sigma_r, self.sigma_n, self.sigma_h,
                           self.sigma_m, self.t2, self.N, self.k)


@dataclass
class BudgetPlan:
    epsilon: float
    delta: float
    gamma: float
    singles: dict[str, SinglePlan] = field(default_factory=dict)
    fks: dict[str, FKPlan] = field(default_factory=dict)

    @property
    def budget(self) -> float:
        return self.gamma ** 2

    @property
    def total(self) -> float:
        return sum(p.cost for p in self.singles.values()) + sum(p.share for p in self.fks.values())

    def to_json(self) -> dict:
        return _finite(dict(asdict(self), total=self.total))


@dataclass
class FKShape:
    """What the planner needs to know about one foreign-key stage."""
    referencing: str
    fk_column: str
    referenced: str
    tau: int
    n_h: int          # household attributes, size attribute excluded
    n_i: int
    N: int
    referenced_private: bool


def init_parts(n_h: int, n_i: int, N: int, o: int, referenced_private: bool) -> list[str]:
    """Which of the four initialization quarters are meaningful for this shape."""
    parts = []
    if referenced_private and n_h > 0:
        parts.append("household")
    if n_i > 0:
        parts.append("individual")
    if n_h > 0 and n_i > 0:
        parts.append("inter")
    if min(o, N) >= 2 and n_i > 0:
        parts.append("intra")
    return parts


def plan_fk(shape: FKShape, share: float, o: int, k: int, t2: int, init_mode: str = "full") -> FKPlan:
    """Split one stage's share B: C_init = B/2, the rest 1:1:8 across the three cost terms."""
    if share <= 0:
        raise ConfigError(f"stage {shape.referencing}.{shape.fk_column} has no budget")
    tau, n_h, n_i, N = shape.tau, shape.n_h, shape.n_i, shape.N
    parts = init_parts(n_h, n_i, N, o, shape.referenced_private) if init_mode == "full" else []
    c_init = share / 2 if parts else 0.0
    rest = share - c_init
    n_r = r_score_query_count(n_h, n_i)
    terms = {"r": 1.0 if n_r else 0.0, "n": 1.0, "mrf": 8.0 if n_i else 0.0}
    z = sum(terms.values())
    b_r, b_n, b_mrf = (rest * terms[t] / z for t in ("r", "n", "mrf"))
    sigma_r = math.sqrt(4 * tau * tau * n_r / b_r) if n_r else math.inf
    sigma_n = math.sqrt(tau * tau / b_n)
    if n_i:
        x = b_mrf / (tau * tau * t2 * N * n_i)
        sigma_h = math.sqrt(k / (0.1 * x))
        sigma_m = math.sqrt(1 / (0.9 * x))
    else:
        sigma_h = sigma_m = math.inf
    quarter = {p: c_init / len(parts) for p in parts} if parts else {}
    n_inter = n_h + n_i if "inter" in quarter else 0
    n_intra = (min(o, N) - 1) * n_i if "intra" in quarter else 0
    sigma_inter = math.sqrt(n_inter * tau * tau / quarter["inter"]) if n_inter else None
    sigma_intra = math.sqrt(n_intra * tau * tau / quarter["intra"]) if n_intra else None
    init = InitPlan(c_init, quarter, sigma_inter, sigma_intra, n_inter, n_intra)
    return FKPlan(shape.referencing, shape.fk_column, shape.referenced, tau, n_h, n_i, N, share,
                  sigma_r, sigma_n, sigma_h, sigma_m, init, o, k, t2)


def plan_budget(params: PrivacyParams, singles: dict[str, tuple[int, int]], fks: Sequence[FKShape],
                weights: dict[str, float] | None = None, o: int = 3, k: int = 4, t2: int = 1,
                init_mode: str = "full") -> BudgetPlan:
    """Split γ² across synthesis stages.

    ``singles`` maps relation name -> (τ, attribute count) for relations
    synthesized on their own; FK stages are named ``referencing.fk_column``.
    Default weights are proportional to the attribute count of the relation
    being synthesized.
    """
    stages = list(singles) + [f"{f.referencing}.{f.fk_column}" for f in fks]
    if not stages:
        return BudgetPlan(params.epsilon, params.delta, params.gamma)   # nothing private: nothing to spend
    if weights is None:
        weights = {name: float(max(cnt, 1)) for name, (_, cnt) in singles.items()}
        for f in fks:
            weights[f"{f.referencing}.{f.fk_column}"] = float(max(f.n_i, 1))
    missing = [s for s in stages if s not in weights]
    if missing:
        raise ConfigError(f"stage weights missing for {missing}")
    extra = [s for s in weights if s not in stages]
    if extra:
        raise ConfigError(f"stage weights given for unknown stages {extra}")
    if any(weights[s] < 0 for s in stages) or sum(weights[s] for s in stages) <= 0:
        raise ConfigError("stage weights must be non-negative with a positive sum")
    z = sum(weights[s] for s in stages)
    plan = BudgetPlan(params.epsilon, params.delta, params.gamma)
    for name, (tau, _) in singles.items():
        plan.singles[name] = SinglePlan(name, tau, params.budget * weights[name] / z)
    for f in fks:
        stage = f"{f.referencing}.{f.fk_column}"
        plan.fks[stage] = plan_fk(f, params.budget * weights[stage] / z, o, k, t2, init_mode)
    return plan


def ci_width_demo(M: float, epsilon: float, delta: float) -> tuple[float, float, float]:
    """95% interval widths for releasing a maximum with sensitivity M vs. 1.

    Returns (width with Δ = M, width with Δ = 1, their ratio).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    gamma = solve_gamma(epsilon, delta)
    sigma_one = 1.0 / gamma
    width_one = 2 * Z95 * sigma_one
    width_all = 2 * Z95 * (M / gamma)
    return width_all, width_one, float(M)
