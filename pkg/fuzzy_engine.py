"""
Fuzzy Engine Module
===================
Mamdani inference over normalized feature vectors: fuzzify, fire rules,
clip/scale consequents, aggregate by max and defuzzify by centroid into a
compromise score in [0, 1], then threshold and band it.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
import skfuzzy as fuzz

from semantic_model import FeatureVector

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 1001
DEFAULT_THETA = 0.5
DEFAULT_BANDS = (1.0 / 3.0, 2.0 / 3.0)


class FuzzyConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class Shape(str, Enum):
    TRIANGULAR = "triangular"
    TRAPEZOIDAL = "trapezoidal"
    RAMP_UP = "ramp_up"
    RAMP_DOWN = "ramp_down"


ARITY = {Shape.TRIANGULAR: 3, Shape.TRAPEZOIDAL: 4, Shape.RAMP_UP: 2, Shape.RAMP_DOWN: 2}


class Band(str, Enum):
    LOW = "low"
    MED = "med"
    HIGH = "high"


@dataclass(frozen=True)
class MembershipFunction:
    shape: Shape
    params: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.params) != ARITY[self.shape]:
            raise FuzzyConfigError(f"{self.shape.value} needs {ARITY[self.shape]} breakpoints, got {len(self.params)}")
        if any(b < a for a, b in zip(self.params, self.params[1:])):
            raise FuzzyConfigError(f"{self.shape.value} breakpoints must be non-decreasing: {self.params}")

    def degrees(self, v: Union[float, np.ndarray]) -> np.ndarray:
        raw = np.asarray(v, dtype=float)
        x = np.atleast_1d(raw).ravel()
        p = self.params
        if self.shape is Shape.TRIANGULAR:
            y = fuzz.trimf(x, list(p))
        elif self.shape is Shape.TRAPEZOIDAL:
            y = fuzz.trapmf(x, list(p))
        elif self.shape is Shape.RAMP_UP:
            # shoulder held open up to the largest sample
            top = max(p[1], float(x.max()))
            y = fuzz.trapmf(x, [p[0], p[1], top, top])
        else:
            bottom = min(p[0], float(x.min()))
            y = fuzz.trapmf(x, [bottom, bottom, p[0], p[1]])
        return y.reshape(raw.shape)

    def __call__(self, v: float) -> float:
        return float(self.degrees(v))

    @classmethod
    def triangular(cls, a: float, b: float, c: float) -> "MembershipFunction":
        return cls(Shape.TRIANGULAR, (a, b, c))

    @classmethod
    def trapezoidal(cls, a: float, b: float, c: float, d: float) -> "MembershipFunction":
        return cls(Shape.TRAPEZOIDAL, (a, b, c, d))

    @classmethod
    def ramp_up(cls, a: float, b: float) -> "MembershipFunction":
        return cls(Shape.RAMP_UP, (a, b))

    @classmethod
    def ramp_down(cls, a: float, b: float) -> "MembershipFunction":
        return cls(Shape.RAMP_DOWN, (a, b))


def membership(mf: MembershipFunction, v: float) -> float:
    return mf(v)


@dataclass(frozen=True)
class LinguisticVariable:
    name: str
    lo: float
    hi: float
    terms: Mapping[str, MembershipFunction]

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise FuzzyConfigError(f"variable '{self.name}': universe lo must be < hi")
        if not self.terms:
            raise FuzzyConfigError(f"variable '{self.name}' has no terms")

    def fuzzify(self, v: float) -> Dict[str, float]:
        clamped = min(self.hi, max(self.lo, float(v)))
        return {term: mf(clamped) for term, mf in self.terms.items()}


class TNorm(str, Enum):
    MIN = "min"
    PRODUCT = "product"


@dataclass(frozen=True)
class FuzzyRule:
    antecedents: Tuple[Tuple[str, str], ...]
    consequent: Tuple[str, str]
    op: str = "and"
    weight: float = 1.0
    ttp: Optional[str] = None


@dataclass(frozen=True)
class FuzzyConfig:
    inputs: Tuple[LinguisticVariable, ...]
    output: LinguisticVariable
    rules: Tuple[FuzzyRule, ...]
    t_norm: TNorm = TNorm.MIN
    implication: TNorm = TNorm.MIN
    resolution: int = DEFAULT_RESOLUTION
    theta: float = DEFAULT_THETA
    bands: Tuple[float, float] = DEFAULT_BANDS
    alert_term: Optional[str] = None
    default_ttp: Optional[str] = None
    features: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.theta < 1.0:
            raise FuzzyConfigError(f"theta must be in (0, 1), got {self.theta}")
        b1, b2 = self.bands
        if not 0.0 < b1 < b2 < 1.0:
            raise FuzzyConfigError(f"bands must satisfy 0 < b1 < b2 < 1, got {self.bands}")
        if (self.output.lo, self.output.hi) != (0.0, 1.0):
            raise FuzzyConfigError("output universe must be exactly [0, 1]")
        if self.resolution < 2:
            raise FuzzyConfigError(f"resolution must be >= 2, got {self.resolution}")
        names = {v.name: v for v in self.inputs}
        for idx, rule in enumerate(self.rules):
            if not rule.antecedents:
                raise FuzzyConfigError(f"fuzzy rule {idx}: no antecedents")
            if rule.op not in ("and", "or"):
                raise FuzzyConfigError(f"fuzzy rule {idx}: op must be 'and' or 'or'")
            if not 0.0 < rule.weight <= 1.0:
                raise FuzzyConfigError(f"fuzzy rule {idx}: weight must be in (0, 1]")
            for var, term in rule.antecedents:
                if var not in names or term not in names[var].terms:
                    raise FuzzyConfigError(f"fuzzy rule {idx}: unknown antecedent {var}.{term}")
            out_var, out_term = rule.consequent
            if out_var != self.output.name or out_term not in self.output.terms:
                raise FuzzyConfigError(f"fuzzy rule {idx}: unknown consequent {out_var}.{out_term}")

    @property
    def dimension(self) -> int:
        return len(self.inputs)

    @property
    def top_term(self) -> str:
        return self.alert_term or list(self.output.terms)[-1]


@dataclass(frozen=True)
class FuzzyOutcome:
    mu: float
    strengths: Tuple[float, ...]
    degrees: Dict[str, Dict[str, float]]
    ttp: Optional[str] = None

    def fired(self) -> List[Tuple[int, float]]:
        return [(i, s) for i, s in enumerate(self.strengths) if s > 0.0]


def _combine(values: Sequence[float], norm: TNorm) -> float:
    if norm is TNorm.PRODUCT:
        return float(np.prod(values))
    return float(min(values))


def _vector(x: Union[FeatureVector, Sequence[float]]) -> Tuple[float, ...]:
    return tuple(x.values) if isinstance(x, FeatureVector) else tuple(float(v) for v in x)


def evaluate(cfg: FuzzyConfig, x: Union[FeatureVector, Sequence[float]]) -> FuzzyOutcome:
    values = _vector(x)
    if len(values) != cfg.dimension:
        raise DimensionError(f"expected {cfg.dimension} inputs, got {len(values)}")
    degrees = {var.name: var.fuzzify(v) for var, v in zip(cfg.inputs, values)}

    strengths = []
    for rule in cfg.rules:
        ante = [degrees[var][term] for var, term in rule.antecedents]
        s = _combine(ante, cfg.t_norm) if rule.op == "and" else max(ante)
        strengths.append(s * rule.weight)

    u = np.linspace(0.0, 1.0, cfg.resolution)
    aggregated = np.zeros_like(u)
    for rule, s in zip(cfg.rules, strengths):
        if s <= 0.0:
            continue
        consequent = cfg.output.terms[rule.consequent[1]].degrees(u)
        clipped = np.fmin(consequent, s) if cfg.implication is TNorm.MIN else consequent * s
        aggregated = np.fmax(aggregated, clipped)
    # skfuzzy refuses a zero-area aggregate
    mu = float(fuzz.defuzz(u, aggregated, "centroid")) if aggregated.any() else 0.0
    mu = min(1.0, max(0.0, mu))

    ttp = _strongest_ttp(cfg, strengths)
    return FuzzyOutcome(mu, tuple(strengths), degrees, ttp)


def _strongest_ttp(cfg: FuzzyConfig, strengths: Sequence[float]) -> Optional[str]:
    best: Optional[Tuple[float, int]] = None
    top = cfg.top_term
    for idx, (rule, s) in enumerate(zip(cfg.rules, strengths)):
        if s <= 0.0 or rule.consequent[1] != top or not rule.ttp:
            continue
        if best is None or s > best[0]:
            best = (s, idx)
    return cfg.rules[best[1]].ttp if best else cfg.default_ttp


def infer(cfg: FuzzyConfig, x: Union[FeatureVector, Sequence[float]]) -> float:
    return evaluate(cfg, x).mu


def classify(mu: float, theta: float = DEFAULT_THETA) -> int:
    if not 0.0 < theta < 1.0:
        raise FuzzyConfigError(f"theta must be in (0, 1), got {theta}")
    return 1 if mu >= theta else 0


def band(mu: float, boundaries: Tuple[float, float] = DEFAULT_BANDS) -> Band:
    b1, b2 = boundaries
    if not 0.0 < b1 < b2 < 1.0:
        raise FuzzyConfigError(f"bands must satisfy 0 < b1 < b2 < 1, got {boundaries}")
    if mu < b1:
        return Band.LOW
    if mu < b2:
        return Band.MED
    return Band.HIGH


# --- config loading ----------------------------------------------------------

class TermDict(TypedDict):
    shape: str
    params: List[float]


class VariableDict(TypedDict, total=False):
    name: str
    feature: str
    universe: List[float]
    terms: Dict[str, TermDict]


class FuzzyRuleDict(TypedDict, total=False):
    op: str
    weight: float
    ttp: str


def _variable(raw: VariableDict) -> LinguisticVariable:
    try:
        lo, hi = raw.get("universe", [0.0, 1.0])
        terms = {
            name: MembershipFunction(Shape(t["shape"]), tuple(float(p) for p in t["params"]))
            for name, t in raw["terms"].items()
        }
        return LinguisticVariable(raw["name"], float(lo), float(hi), terms)
    except (KeyError, ValueError, TypeError) as e:
        if isinstance(e, FuzzyConfigError):
            raise
        raise FuzzyConfigError(f"invalid variable {raw.get('name')!r}: {e}") from e


def config_from_dict(raw: Mapping[str, Any]) -> FuzzyConfig:
    try:
        inputs = tuple(_variable(v) for v in raw["inputs"])
        output = _variable(raw["output"])
        rules = tuple(
            FuzzyRule(
                antecedents=tuple((a[0], a[1]) for a in r["if"]),
                consequent=(r["then"][0], r["then"][1]),
                op=r.get("op", "and"),
                weight=float(r.get("weight", 1.0)),
                ttp=r.get("ttp"),
            )
            for r in raw["rules"]
        )
    except (KeyError, IndexError, TypeError) as e:
        raise FuzzyConfigError(f"malformed fuzzy config: {e}") from e
    defuzz = raw.get("defuzzifier", {})
    if isinstance(defuzz, str):
        defuzz = {"method": defuzz}
    if defuzz.get("method", "centroid") != "centroid":
        raise FuzzyConfigError(f"unsupported defuzzifier {defuzz.get('method')!r}")
    try:
        t_norm = TNorm(raw.get("t_norm", "min"))
        implication = TNorm(raw.get("implication", "min"))
    except ValueError as e:
        raise FuzzyConfigError(str(e)) from e
    bands = tuple(raw.get("bands", DEFAULT_BANDS))
    return FuzzyConfig(
        inputs=inputs,
        output=output,
        rules=rules,
        t_norm=t_norm,
        implication=implication,
        resolution=int(defuzz.get("resolution", DEFAULT_RESOLUTION)),
        theta=float(raw.get("theta", DEFAULT_THETA)),
        bands=(float(bands[0]), float(bands[1])),
        alert_term=raw.get("alert_term"),
        default_ttp=raw.get("default_ttp"),
        features=tuple(v.get("feature", v["name"]) for v in raw["inputs"]),
    )


def load_fuzzy_config(path: str) -> FuzzyConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))
