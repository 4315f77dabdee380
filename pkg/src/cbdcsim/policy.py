"""Vintage remuneration engine: value schedules, latest-vintage rule,
exchange terms, and the tax/subsidy split on vintage conversion.

All schedule arithmetic is exact rational; conversion to minor units floors
and the remainder moves through the treasury delta, so face value is
conserved on every exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .core import VintageTerms, check_amount, face_value

ZERO = Fraction(0)
ONE = Fraction(1)


def value_of(terms: VintageTerms, t: int) -> Fraction:
    """Unit value of a token of this vintage during period t.

    Every vintage trades at par through its issue period and the one after.
    Decay compounds (1-r) per period from T+2 through T+n and the token is
    worthless afterwards. Reward compounds (1+r) over the same span, holds
    that value through a grace window, then expires. Special vintages stay
    at par while spendable, convert at (1-penalty) during grace, then expire.
    """
    T = terms.vintage
    if t < T:
        raise ValueError(f"period {t} precedes vintage {T}")
    n, g = terms.horizon, terms.grace
    if terms.mode == "neutral":
        return ONE if t <= T + n else ZERO
    if terms.mode == "decay":
        if t <= T + 1:
            return ONE
        if t <= T + n:
            return (ONE - terms.rate) ** (t - (T + 1))
        return ZERO
    if terms.mode == "reward":
        if t <= T + 1:
            return ONE
        if t <= T + n:
            return (ONE + terms.rate) ** (t - (T + 1))
        if t <= T + n + g:
            return (ONE + terms.rate) ** (n - 1)
        return ZERO
    # special
    if t < T + n:
        return ONE
    if t < T + n + g:
        return ONE - terms.penalty
    return ZERO


def latest_vintage(tick: int, ticks_per_period: int) -> int:
    if ticks_per_period <= 0:
        raise ValueError("ticks_per_period must be positive")
    return tick // ticks_per_period


@dataclass(frozen=True)
class ExchangeResult:
    new_tokens_value: int
    treasury_delta: int  # positive flows to the treasury as tax, negative is subsidy

    @property
    def face_total(self) -> int:
        return self.new_tokens_value + self.treasury_delta


def discounted_value(counts: dict[int, int] | tuple[tuple[int, int], ...], terms: VintageTerms, t: int) -> int:
    """Floor of the summed discounted face value of a token multiset."""
    pairs = counts.items() if isinstance(counts, dict) else counts
    total = sum(Fraction(face_value(exp)) * count for exp, count in pairs) * value_of(terms, t)
    return int(total)  # Fraction truncates toward zero; values are non-negative


def exchange_terms(terms: VintageTerms, counts: dict[int, int] | tuple[tuple[int, int], ...], t: int) -> ExchangeResult:
    """Value of exchanging old-vintage tokens for latest-vintage quota at t.

    The treasury absorbs the rounding remainder and the decay surplus, or
    funds the reward shortfall; new value plus delta equals face exactly.
    """
    pairs = list(counts.items()) if isinstance(counts, dict) else list(counts)
    face = sum(face_value(exp) * count for exp, count in pairs)
    check_amount(face, "exchange face value")
    new_value = discounted_value(pairs, terms, t)
    return ExchangeResult(new_value, face - new_value)


CONVERSION_PURPOSES = ("deposit", "cash_out")


def may_convert(terms: VintageTerms, t: int, purpose: str) -> bool:
    """Whether tokens of this vintage may be redeemed for the given purpose at t.

    Special vintages cannot be converted to deposits or cash while still
    spendable; during their grace window only conversion (at the penalty
    value) is allowed. Everything else follows the value schedule: a
    worthless token converts to nothing.
    """
    if t < terms.vintage:
        return False
    if terms.mode == "special":
        boundary = terms.vintage + terms.horizon
        if t < boundary:
            return purpose not in CONVERSION_PURPOSES
        if t < boundary + terms.grace:
            return purpose in CONVERSION_PURPOSES
        return False
    return value_of(terms, t) > 0
