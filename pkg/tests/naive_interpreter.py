"""Independent reference interpreter for reasoning-chain semantics.

Written directly from the documented stack semantics, on purpose not
sharing any execution code with the package: records are plain tuples,
the pool is rebuilt functionally, and extremum ties resolve to the first
occurrence via list.index. Used as the second opinion in equivalence
tests.
"""

from __future__ import annotations


def interpret(
    key: str,
    records: list[tuple[str, str, int]],
    entity: str,
    filter_attr: str | None = None,
) -> str:
    """Answer for a chain key over (entity, attribute, value) records."""
    ops = key.split("->")
    pool = [(attr, value) for (ent, attr, value) in records if ent == entity]
    if not pool:
        raise ValueError(f"entity {entity!r} absent")
    acc: list[int] = []
    answer: int | None = None
    for i, op in enumerate(ops):
        final = i == len(ops) - 1
        if op == "select":
            continue
        if op == "filter_eq":
            pool = [(attr, value) for (attr, value) in pool if attr == filter_attr]
        elif op in ("maximum", "minimum"):
            if not pool:
                raise ValueError(f"{op} on empty pool")
            values = [value for (_, value) in pool]
            picked = max(values) if op == "maximum" else min(values)
            j = values.index(picked)
            pool = pool[:j] + pool[j + 1 :]
            acc.append(picked)
            if final:
                answer = picked
        elif op == "list":
            continue
        elif op == "sum":
            answer = sum(acc)
        elif op == "count":
            answer = len(pool)
        elif op == "difference":
            answer = acc[0] - acc[1]
        else:
            raise ValueError(f"unknown op {op!r}")
    if answer is None:
        raise ValueError("chain produced no answer")
    return str(answer)
