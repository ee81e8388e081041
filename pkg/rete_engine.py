"""
Rete Engine Module
==================
Deterministic forward-chaining reasoner. Crisp rules compile into a shared
alpha network and per-rule beta chains; facts are added and retracted
incrementally and complete matches fire through a salience/FIFO agenda.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, TypedDict, Union

from semantic_model import FactBase, Scalar, SemanticFact, is_scalar, same_value

logger = logging.getLogger(__name__)

CHANGED_SUFFIX = ".changed"

Token = Tuple[int, ...]
Bindings = Dict[str, str]


class RuleCompileError(ValueError):
    pass


class Op(str, Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"
    CHANGED = "changed"
    ABSENT = "absent"


ORDERING_OPS = (Op.LT, Op.LE, Op.GT, Op.GE)
VALUE_OPS = (Op.EQ, Op.NE) + ORDERING_OPS


class Severity(str, Enum):
    INFO = "info"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"
    ERROR = "error"


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _value_key(value: Optional[Scalar]) -> Tuple[str, Any]:
    if value is None:
        return ("none", None)
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, str):
        return ("str", value)
    return ("num", float(value))


@dataclass(frozen=True)
class Condition:
    predicate: str
    op: Op
    value: Optional[Scalar] = None
    binding: Optional[str] = None
    thing_id: Optional[str] = None

    @property
    def positive(self) -> bool:
        return self.op is not Op.ABSENT

    @property
    def fact_predicate(self) -> str:
        return self.predicate + CHANGED_SUFFIX if self.op is Op.CHANGED else self.predicate

    def alpha_key(self) -> Tuple[Any, ...]:
        if self.op is Op.ABSENT:
            return ("exists", self.predicate, self.thing_id)
        return ("test", self.fact_predicate, self.op.value, _value_key(self.value), self.thing_id)

    def test(self, fact: SemanticFact) -> bool:
        """Single-fact (alpha) test; bindings are checked by the joins."""
        if fact.predicate != self.fact_predicate:
            return False
        if self.thing_id is not None and fact.thing_id != self.thing_id:
            return False
        if self.op in (Op.CHANGED, Op.ABSENT):
            return True
        v, ref = fact.value, self.value
        if self.op is Op.EQ:
            return same_value(v, ref)
        if self.op is Op.NE:
            return not same_value(v, ref)
        if not (_is_number(v) and _is_number(ref)):
            return False
        if self.op is Op.LT:
            return v < ref
        if self.op is Op.LE:
            return v <= ref
        if self.op is Op.GT:
            return v > ref
        return v >= ref


class AlertTemplateDict(TypedDict, total=False):
    ttp: str
    csf: str
    severity: str
    message: str


@dataclass(frozen=True)
class AlertTemplate:
    ttp: str
    csf_tag: Optional[str] = None
    severity: Severity = Severity.HIGH
    message: str = ""


@dataclass(frozen=True)
class CrispRule:
    rule_id: str
    conditions: Tuple[Condition, ...]
    action: AlertTemplate
    salience: int = 0

    @property
    def positives(self) -> Tuple[Condition, ...]:
        return tuple(c for c in self.conditions if c.positive)

    @property
    def negatives(self) -> Tuple[Condition, ...]:
        return tuple(c for c in self.conditions if not c.positive)


class ConditionDict(TypedDict, total=False):
    thing: str
    thing_id: str
    predicate: str
    op: str
    value: Scalar


class RuleDict(TypedDict, total=False):
    id: str
    salience: int
    when: List[ConditionDict]
    then: AlertTemplateDict


def validate_rule(rule: CrispRule) -> None:
    if not rule.conditions:
        raise RuleCompileError(f"rule '{rule.rule_id}': at least one condition is required")
    bound: Set[str] = set()
    for idx, cond in enumerate(rule.conditions):
        where = f"rule '{rule.rule_id}' condition {idx}"
        if not cond.predicate:
            raise RuleCompileError(f"{where}: empty predicate")
        if cond.op in VALUE_OPS and (cond.value is None or not is_scalar(cond.value)):
            raise RuleCompileError(f"{where}: op '{cond.op.value}' needs a scalar value")
        if cond.op in ORDERING_OPS and not _is_number(cond.value):
            raise RuleCompileError(f"{where}: op '{cond.op.value}' needs a numeric value, got {cond.value!r}")
        if cond.positive and cond.binding:
            bound.add(cond.binding)
    if not rule.positives:
        raise RuleCompileError(f"rule '{rule.rule_id}': needs at least one positive condition")
    for idx, cond in enumerate(rule.conditions):
        if not cond.positive and cond.binding and cond.binding not in bound:
            raise RuleCompileError(
                f"rule '{rule.rule_id}' condition {idx}: variable '{cond.binding}' is not bound by a positive condition")


def rule_from_dict(raw: RuleDict) -> CrispRule:
    rule_id = raw.get("id")
    if not rule_id:
        raise RuleCompileError(f"rule without id: {raw!r}")
    conditions = []
    for idx, c in enumerate(raw.get("when", [])):
        try:
            op = Op(c["op"])
        except (KeyError, ValueError):
            raise RuleCompileError(f"rule '{rule_id}' condition {idx}: unknown op {c.get('op')!r}") from None
        thing = c.get("thing", "*")
        binding = None if thing in ("*", "", None) else thing.lstrip("?")
        conditions.append(Condition(c.get("predicate", ""), op, c.get("value"), binding, c.get("thing_id")))
    then = raw.get("then", {})
    try:
        severity = Severity(then.get("severity", "high"))
    except ValueError:
        raise RuleCompileError(f"rule '{rule_id}': unknown severity {then.get('severity')!r}") from None
    action = AlertTemplate(then.get("ttp", ""), then.get("csf"), severity, then.get("message", ""))
    rule = CrispRule(rule_id, tuple(conditions), action, int(raw.get("salience", 0)))
    validate_rule(rule)
    return rule


def load_rules(path: str) -> List[CrispRule]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [rule_from_dict(r) for r in raw]


# --- network -----------------------------------------------------------------

@dataclass(frozen=True)
class Firing:
    rule_id: str
    facts: Tuple[SemanticFact, ...]
    bindings: Tuple[Tuple[str, str], ...]
    action: AlertTemplate

    @property
    def fact_ids(self) -> Token:
        return tuple(f.fact_id for f in self.facts)


@dataclass(frozen=True)
class RetractedFiring:
    rule_id: str
    fact_ids: Token
    fired: bool


@dataclass
class AlphaMemory:
    key: Tuple[Any, ...]
    condition: Condition
    facts: Dict[int, SemanticFact] = field(default_factory=dict)
    # (rule index, position among the rule's positive conditions)
    successors: List[Tuple[int, int]] = field(default_factory=list)
    negated_in: List[int] = field(default_factory=list)


@dataclass
class _Activation:
    salience: int
    seq: int
    rule_index: int
    token: Token


class _RuleNode:
    """Beta chain of one rule: token memory per positive level, production on top."""

    def __init__(self, rule: CrispRule, alphas: List[AlphaMemory], negative_alphas: List[AlphaMemory]):
        self.rule = rule
        self.positives = rule.positives
        self.negatives = rule.negatives
        self.alphas = alphas
        self.negative_alphas = negative_alphas
        self.levels: List[Dict[Token, Bindings]] = [dict() for _ in self.positives]
        self.satisfied: Dict[Token, Bindings] = {}

    @property
    def complete(self) -> Dict[Token, Bindings]:
        return self.levels[-1]


def _join(bindings: Bindings, cond: Condition, fact: SemanticFact) -> Optional[Bindings]:
    if cond.binding is None:
        return bindings
    bound = bindings.get(cond.binding)
    if bound is None:
        extended = dict(bindings)
        extended[cond.binding] = fact.thing_id
        return extended
    return bindings if bound == fact.thing_id else None


class ReteNetwork:
    def __init__(self, rules: Sequence[CrispRule] = ()):
        self.alpha: Dict[Tuple[Any, ...], AlphaMemory] = {}
        self.by_predicate: Dict[str, List[AlphaMemory]] = {}
        self.nodes: List[_RuleNode] = []
        self.wm: Dict[int, SemanticFact] = {}
        self.agenda: List[_Activation] = []
        self.refractory: Set[Tuple[int, Token]] = set()
        self._seq = itertools.count()
        seen: Set[str] = set()
        for rule in rules:
            validate_rule(rule)
            if rule.rule_id in seen:
                raise RuleCompileError(f"duplicate rule id '{rule.rule_id}'")
            seen.add(rule.rule_id)
            self._compile_rule(rule)

    def _memory(self, cond: Condition) -> AlphaMemory:
        key = cond.alpha_key()
        mem = self.alpha.get(key)
        if mem is None:
            mem = self.alpha[key] = AlphaMemory(key, cond)
            self.by_predicate.setdefault(cond.fact_predicate, []).append(mem)
        return mem

    def _compile_rule(self, rule: CrispRule) -> None:
        index = len(self.nodes)
        alphas = []
        for pos, cond in enumerate(rule.positives):
            mem = self._memory(cond)
            mem.successors.append((index, pos))
            alphas.append(mem)
        negative_alphas = []
        for cond in rule.negatives:
            mem = self._memory(cond)
            mem.negated_in.append(index)
            negative_alphas.append(mem)
        self.nodes.append(_RuleNode(rule, alphas, negative_alphas))

    # -- introspection --

    @property
    def rules(self) -> List[CrispRule]:
        return [n.rule for n in self.nodes]

    def node_counts(self) -> Dict[str, int]:
        return {
            "alpha": len(self.alpha),
            "beta": sum(len(n.rule.conditions) - 1 for n in self.nodes),
            "production": len(self.nodes),
        }

    def active(self) -> Set[str]:
        return {n.rule.rule_id for n in self.nodes if n.satisfied}

    def matches(self, rule_id: str) -> List[Token]:
        for node in self.nodes:
            if node.rule.rule_id == rule_id:
                return list(node.satisfied)
        return []

    def __contains__(self, fact_id: int) -> bool:
        return fact_id in self.wm

    # -- matching --

    def _blocked(self, node: _RuleNode, bindings: Bindings) -> bool:
        for cond, mem in zip(node.negatives, node.negative_alphas):
            thing = bindings.get(cond.binding) if cond.binding else None
            for fact in mem.facts.values():
                if thing is None or fact.thing_id == thing:
                    return True
        return False

    def _extend(self, node: _RuleNode, level: int, token: Token, bindings: Bindings) -> None:
        memory = node.levels[level]
        if token in memory:
            return
        memory[token] = bindings
        nxt = level + 1
        if nxt == len(node.positives):
            return
        cond = node.positives[nxt]
        for fact in list(node.alphas[nxt].facts.values()):
            joined = _join(bindings, cond, fact)
            if joined is not None:
                self._extend(node, nxt, token + (fact.fact_id,), joined)

    def _refresh(self, index: int) -> List[RetractedFiring]:
        node = self.nodes[index]
        now = {t: b for t, b in node.complete.items() if not self._blocked(node, b)}
        lost: List[RetractedFiring] = []
        for token in node.satisfied:
            if token not in now:
                lost.append(self._cancel(index, token))
        for token in now:
            if token not in node.satisfied and (index, token) not in self.refractory:
                self.agenda.append(_Activation(node.rule.salience, next(self._seq), index, token))
        node.satisfied = now
        return lost

    def _cancel(self, index: int, token: Token) -> RetractedFiring:
        pending = [a for a in self.agenda if a.rule_index == index and a.token == token]
        for act in pending:
            self.agenda.remove(act)
        return RetractedFiring(self.nodes[index].rule.rule_id, token, fired=(index, token) in self.refractory)

    def add(self, fact: SemanticFact) -> None:
        if fact.fact_id in self.wm:
            logger.warning("fact %d already in working memory; ignoring", fact.fact_id)
            return
        self.wm[fact.fact_id] = fact
        touched: Set[int] = set()
        hits: List[Tuple[int, int]] = []
        for mem in self.by_predicate.get(fact.predicate, []):
            if mem.condition.test(fact):
                mem.facts[fact.fact_id] = fact
                hits.extend(mem.successors)
                touched.update(mem.negated_in)
        for index, pos in sorted(hits):
            node = self.nodes[index]
            cond = node.positives[pos]
            parents = node.levels[pos - 1].items() if pos else [((), {})]
            for token, bindings in list(parents):
                joined = _join(bindings, cond, fact)
                if joined is not None:
                    self._extend(node, pos, token + (fact.fact_id,), joined)
            touched.add(index)
        for index in sorted(touched):
            self._refresh(index)

    def remove(self, fact_id: int) -> List[RetractedFiring]:
        fact = self.wm.pop(fact_id, None)
        if fact is None:
            logger.warning("retract of unknown fact id %d ignored", fact_id)
            return []
        touched: Set[int] = set()
        for mem in self.by_predicate.get(fact.predicate, []):
            if mem.facts.pop(fact_id, None) is not None:
                touched.update(i for i, _ in mem.successors)
                touched.update(mem.negated_in)
        lost: List[RetractedFiring] = []
        for index in sorted(touched):
            node = self.nodes[index]
            for level in node.levels:
                for token in [t for t in level if fact_id in t]:
                    del level[token]
            lost.extend(self._refresh(index))
            self.refractory = {(i, t) for i, t in self.refractory if i != index or fact_id not in t}
        return lost

    def fire(self) -> List[Firing]:
        ordered = sorted(self.agenda, key=lambda a: (-a.salience, a.seq))
        self.agenda = []
        firings = []
        for act in ordered:
            node = self.nodes[act.rule_index]
            bindings = node.satisfied.get(act.token)
            if bindings is None:
                continue
            self.refractory.add((act.rule_index, act.token))
            facts = tuple(self.wm[fid] for fid in act.token)
            firings.append(Firing(node.rule.rule_id, facts, tuple(sorted(bindings.items())), node.rule.action))
        return firings

    def insert(self, fact: SemanticFact) -> List[Firing]:
        self.add(fact)
        return self.fire()

    def retract(self, fact_id: int) -> List[RetractedFiring]:
        return self.remove(fact_id)


def compile(rules: Sequence[CrispRule]) -> ReteNetwork:
    net = ReteNetwork(rules)
    counts = net.node_counts()
    logger.info("compiled %d rules: %d alpha, %d beta, %d production nodes",
                len(net.nodes), counts["alpha"], counts["beta"], counts["production"])
    return net


def insert(net: ReteNetwork, fact: SemanticFact) -> List[Firing]:
    return net.insert(fact)


def retract(net: ReteNetwork, fact_id: int) -> List[RetractedFiring]:
    return net.retract(fact_id)


# --- batch oracle ------------------------------------------------------------

def batch_matches(facts: Iterable[SemanticFact], rule: CrispRule) -> Iterator[Tuple[Token, Bindings]]:
    """Naive conjunction evaluation by backtracking over the whole fact set."""
    pool = list(facts)
    positives, negatives = rule.positives, rule.negatives
    candidates = [[f for f in pool if c.test(f)] for c in positives]
    absent_pools = [[f for f in pool if c.test(f)] for c in negatives]

    def search(level: int, token: Token, bindings: Bindings) -> Iterator[Tuple[Token, Bindings]]:
        if level == len(positives):
            for cond, present in zip(negatives, absent_pools):
                thing = bindings.get(cond.binding) if cond.binding else None
                if any(thing is None or f.thing_id == thing for f in present):
                    return
            yield token, bindings
            return
        for fact in candidates[level]:
            joined = _join(bindings, positives[level], fact)
            if joined is not None:
                yield from search(level + 1, token + (fact.fact_id,), joined)

    return search(0, (), {})


def evaluate_batch(facts: Union[FactBase, Iterable[SemanticFact]], rules: Sequence[CrispRule]) -> Dict[str, int]:
    pool = list(facts)
    result: Dict[str, int] = {}
    for rule in rules:
        result[rule.rule_id] = 1 if next(batch_matches(pool, rule), None) is not None else 0
    return result
