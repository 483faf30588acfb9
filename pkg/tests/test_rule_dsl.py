import random

import pytest

from ctxflow.errors import MissingContext, RuleSyntaxError, RuleTypeError
from ctxflow.rule_dsl import (
    And,
    BreakRollback,
    Comparison,
    Continue,
    Fresh,
    Not,
    Num,
    Or,
    Ref,
    SelectVariant,
    StartCompensation,
    Str,
    evaluate_condition,
    parse_rule,
    pretty_print,
)

DELIVERY_SLA = """RULE Delivery SLA
WHEN executionTimeConstraint < estimatedDeliveryTime
    AND maxSLAFineAmount < estimatedSLAFine
THEN start process.compensation.deliveryVariant
END"""


def test_delivery_sla_parses_to_expected_ast():
    rule = parse_rule(DELIVERY_SLA)
    assert rule.name == "Delivery SLA"
    assert rule.condition == And((
        Comparison(Ref("executionTimeConstraint"), "<", Ref("estimatedDeliveryTime")),
        Comparison(Ref("maxSLAFineAmount"), "<", Ref("estimatedSLAFine")),
    ))
    assert rule.action == StartCompensation("process.compensation.deliveryVariant")
    assert rule.referenced_categories == (
        "estimatedDeliveryTime",
        "estimatedSLAFine",
        "executionTimeConstraint",
        "maxSLAFineAmount",
    )


def test_delivery_sla_roundtrips():
    rule = parse_rule(DELIVERY_SLA)
    assert parse_rule(pretty_print(rule)) == rule


def test_single_line_constant_rule():
    rule = parse_rule("RULE T WHEN 1 < 2 THEN continue END")
    assert rule.name == "T"
    assert rule.condition == Comparison(Num(1), "<", Num(2))
    assert rule.action == Continue()
    assert evaluate_condition(rule.condition, {}, now=0) is True


def test_actions_parse():
    assert parse_rule("RULE a WHEN 1 < 2 THEN selectVariant(shipping, truck) END").action == \
        SelectVariant("shipping", "truck")
    assert parse_rule("RULE a WHEN 1 < 2 THEN break END").action == BreakRollback(None)
    assert parse_rule("RULE a WHEN 1 < 2 THEN rollback(start) END").action == \
        BreakRollback("start")
    assert parse_rule("RULE a WHEN 1 < 2 THEN rollback(shipping) END").action == \
        BreakRollback("shipping")


def test_fresh_and_boolean_structure():
    rule = parse_rule(
        'RULE guard\n'
        'WHEN NOT weather == "clear" AND (x < 3 OR fresh(weather, 10))\n'
        'THEN break\nEND'
    )
    assert rule.condition == And((
        Not(Comparison(Ref("weather"), "==", Str("clear"))),
        Or((
            Comparison(Ref("x"), "<", Num(3)),
            Fresh("weather", 10),
        )),
    ))
    assert "weather" in rule.referenced_categories
    assert "x" in rule.referenced_categories


def test_syntax_error_carries_position():
    with pytest.raises(RuleSyntaxError) as err:
        parse_rule("RULE bad\nWHEN a <\nTHEN continue\nEND")
    assert err.value.line == 3


def test_missing_name_rejected():
    with pytest.raises(RuleSyntaxError):
        parse_rule("RULE\nWHEN 1 < 2\nTHEN continue\nEND")


def test_type_errors_rejected_at_parse():
    with pytest.raises(RuleTypeError):
        parse_rule('RULE t WHEN "a" < 5 THEN continue END')
    with pytest.raises(RuleTypeError):
        parse_rule('RULE t WHEN "a" < "b" THEN continue END')
    # text equality is fine
    parse_rule('RULE t WHEN "a" == "b" THEN continue END')


def test_trailing_garbage_rejected():
    with pytest.raises(RuleSyntaxError):
        parse_rule("RULE t WHEN 1 < 2 THEN continue END END")


def test_evaluation_against_environment():
    rule = parse_rule(DELIVERY_SLA)
    env = {
        "executionTimeConstraint": (48, 0),
        "estimatedDeliveryTime": (72, 5),
        "maxSLAFineAmount": (10000, 0),
        "estimatedSLAFine": (25000, 5),
    }
    assert evaluate_condition(rule.condition, env, now=6) is True
    env["estimatedDeliveryTime"] = (40, 5)
    assert evaluate_condition(rule.condition, env, now=6) is False


def test_evaluation_fresh_predicate():
    cond = parse_rule("RULE t WHEN fresh(weather, 5) THEN continue END").condition
    assert evaluate_condition(cond, {"weather": ("clear", 10)}, now=12) is True
    assert evaluate_condition(cond, {"weather": ("clear", 10)}, now=16) is False


def test_evaluation_missing_reference():
    cond = parse_rule("RULE t WHEN eta < 5 THEN continue END").condition
    with pytest.raises(MissingContext):
        evaluate_condition(cond, {}, now=0)


def test_runtime_kind_mismatch():
    cond = parse_rule("RULE t WHEN eta < 5 THEN continue END").condition
    with pytest.raises(RuleTypeError):
        evaluate_condition(cond, {"eta": ("soon", 0)}, now=0)


# --- generated round-trip ----------------------------------------------------


def random_operand(rng):
    roll = rng.random()
    if roll < 0.5:
        return Ref(rng.choice(["weather", "eta", "fine", "load", "speedLimit"]))
    if roll < 0.8:
        if rng.random() < 0.5:
            return Num(rng.randint(-50, 50))
        return Num(round(rng.uniform(-10, 10), 3))
    return Str(rng.choice(["clear", "storm", "eco premium", 'quo"ted']))


def random_comparison(rng):
    left = random_operand(rng)
    right = random_operand(rng)
    texty = isinstance(left, Str) or isinstance(right, Str)
    if texty:
        # keep literal pairs type-consistent and equality-only
        if isinstance(left, Num):
            left = Ref("label")
        if isinstance(right, Num):
            right = Ref("label")
        op = rng.choice(["==", "!="])
    else:
        op = rng.choice(["<", "<=", ">", ">=", "==", "!="])
    return Comparison(left, op, right)


def random_atom(rng, depth):
    roll = rng.random()
    if depth > 2 or roll < 0.55:
        return random_comparison(rng)
    if roll < 0.65:
        return Fresh(rng.choice(["weather", "eta"]), rng.randint(0, 99))
    if roll < 0.8:
        return Not(random_atom(rng, depth + 1))
    return random_cond(rng, depth + 1)


def random_conj(rng, depth):
    terms = [random_atom(rng, depth) for _ in range(rng.randint(1, 3))]
    return terms[0] if len(terms) == 1 else And(tuple(terms))


def random_cond(rng, depth=0):
    terms = [random_conj(rng, depth) for _ in range(rng.randint(1, 3))]
    return terms[0] if len(terms) == 1 else Or(tuple(terms))


def random_action(rng):
    return rng.choice([
        Continue(),
        SelectVariant("shipping", "truck"),
        BreakRollback(None),
        BreakRollback("start"),
        BreakRollback("packaging"),
        StartCompensation("process.compensation.deliveryVariant"),
        StartCompensation("redo"),
    ])


def test_two_hundred_generated_rules_roundtrip():
    rng = random.Random(7)
    from ctxflow.rule_dsl import Rule, referenced_categories

    for i in range(200):
        condition = random_cond(rng)
        rule = Rule(
            rule_id=f"r{i}",
            name=f"r{i}",
            condition=condition,
            action=random_action(rng),
            referenced_categories=referenced_categories(condition),
        )
        reparsed = parse_rule(pretty_print(rule), rule_id=rule.rule_id)
        assert reparsed == rule, pretty_print(rule)
