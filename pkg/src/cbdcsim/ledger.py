"""Committed-log application: the deterministic state machine every
validator, the regulator mirror, and the export verifier all replay.

A block is an ordered list of atomic groups. Application walks groups in
order and applies each one entirely or rejects it entirely; rejection is a
pure function of the committed prefix plus block data (notably the block's
proposal tick, which fixes the vintage period used for value arithmetic),
so every honest replica makes identical decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import policy
from .core import (
    Group,
    IssueBatch,
    LedgerEntry,
    RedeemBatch,
    StimulusClaim,
    VintageExchange,
    VintageTerms,
    face_value,
    group_bytes,
)
from .crypto import tagged_hash

GENESIS_STATE_HASH = tagged_hash("state", b"genesis")


def group_digest(group: Group) -> bytes:
    cached = getattr(group, "_digest", None)
    if cached is None:
        cached = tagged_hash("group", group_bytes(group))
        object.__setattr__(group, "_digest", cached)
    return cached


@dataclass(frozen=True)
class Block:
    """Consensus unit: a height, the leader's proposal tick, and the groups."""

    height: int
    tick: int
    groups: tuple[Group, ...]

    def digest(self) -> bytes:
        cached = getattr(self, "_digest", None)
        if cached is None:
            parts = [self.height.to_bytes(8, "big"), self.tick.to_bytes(8, "big")]
            parts.extend(group_digest(g) for g in self.groups)
            cached = tagged_hash("block", *parts)
            object.__setattr__(self, "_digest", cached)
        return cached

    @property
    def entry_count(self) -> int:
        return sum(len(g.entries) for g in self.groups)


@dataclass(frozen=True)
class Rejection:
    atom: int
    rule: str
    detail: str


@dataclass(frozen=True)
class AppliedBlock:
    block: Block
    applied: tuple[tuple[int, Group], ...]  # (atom index, group with heights assigned)
    rejected: tuple[Rejection, ...]
    credited: tuple["CreditRecord", ...]


@dataclass(frozen=True)
class CreditRecord:
    """Value credited by an applied RedeemBatch, for flow analytics."""

    height: int
    tick: int
    msb: str
    purpose: str
    destination: Optional[str]
    credited: int
    face: int


class LedgerState:
    """Applied state over a committed prefix."""

    def __init__(
        self,
        terms_table: dict[int, VintageTerms],
        ticks_per_period: int,
        stimulus_registry: Optional[dict[bytes, int]] = None,
        track_credits: bool = True,
    ) -> None:
        self.terms = dict(terms_table)
        self.ticks_per_period = ticks_per_period
        self.registry = dict(stimulus_registry or {})
        self.track_credits = track_credits
        self.nullifiers: set[bytes] = set()
        self.applied_groups: set[bytes] = set()
        self.issued: dict[tuple[str, int, int], int] = {}  # (msb, vintage, exp) -> count
        self.redeemed: dict[tuple[str, int, int], int] = {}
        self.swept: dict[tuple[str, int, int], int] = {}
        self.issued_global: dict[tuple[int, int], int] = {}  # (vintage, exp) -> count
        self.redeemed_global: dict[tuple[int, int], int] = {}
        self.claims: dict[bytes, int] = {}  # claim_id -> entry height
        self.tax_total = 0
        self.subsidy_total = 0
        self.stimulus_disbursed = 0
        self.exchange_value_granted = 0
        self.exchange_face_retired = 0
        self.credits: list[CreditRecord] = []
        self.blocks: list[AppliedBlock] = []
        self.next_entry_height = 0
        self.state_hashes: list[bytes] = [GENESIS_STATE_HASH]

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def state_hash(self) -> bytes:
        return self.state_hashes[-1]

    def period_of(self, tick: int) -> int:
        return policy.latest_vintage(tick, self.ticks_per_period)

    # -- validation -------------------------------------------------------

    def _check_group(self, group: Group, period: int, seen_nullifiers: set[bytes]) -> Optional[tuple[str, str]]:
        mediated_out = sum(
            1 for e in group.entries if isinstance(e.body, RedeemBatch) and e.body.purpose == "mediated_out"
        )
        mediated_in = sum(
            1 for e in group.entries if isinstance(e.body, IssueBatch) and e.body.purpose == "mediated_in"
        )
        if (mediated_out or mediated_in) and (mediated_out != 1 or mediated_in != 1):
            return "mediated-atomic", "mediated transfer must pair one redeem with one issue"
        for entry in group.entries:
            body = entry.body
            if isinstance(body, IssueBatch):
                if body.vintage not in self.terms:
                    return "vintage-unknown", f"issue for undeclared vintage {body.vintage}"
            elif isinstance(body, RedeemBatch):
                pending: dict[tuple[int, int], int] = {}
                for s in body.spends:
                    if s.nullifier in self.nullifiers or s.nullifier in seen_nullifiers:
                        return "nullifier-spent", s.nullifier.hex()
                    if s.vintage not in self.terms:
                        return "vintage-unknown", f"redeem for undeclared vintage {s.vintage}"
                    key = (s.vintage, s.exponent)
                    pending[key] = pending.get(key, 0) + 1
                for key, count in pending.items():
                    if self.redeemed_global.get(key, 0) + count > self.issued_global.get(key, 0):
                        return "redeem-unbacked", f"vintage {key[0]} denom {key[1]}"
            elif isinstance(body, VintageExchange):
                terms = self.terms.get(body.old_vintage)
                if terms is None:
                    return "vintage-unknown", f"exchange for undeclared vintage {body.old_vintage}"
                for exp, count in body.counts:
                    key = (entry.msb, body.old_vintage, exp)
                    available = self.redeemed.get(key, 0) - self.swept.get(key, 0)
                    if count > available:
                        return "exchange-overclaim", f"{entry.msb} vintage {body.old_vintage} denom {exp}"
                expect = policy.exchange_terms(terms, body.counts, period)
                if (body.value_granted, body.treasury_delta) != (
                    expect.new_tokens_value,
                    expect.treasury_delta,
                ):
                    return "exchange-value", (
                        f"declared {body.value_granted}/{body.treasury_delta}, "
                        f"expected {expect.new_tokens_value}/{expect.treasury_delta} at period {period}"
                    )
            elif isinstance(body, StimulusClaim):
                if body.claim_id not in self.registry:
                    return "stimulus-unknown", body.claim_id.hex()
                if self.registry[body.claim_id] != body.amount:
                    return "stimulus-amount", body.claim_id.hex()
                if body.claim_id in self.claims:
                    return "stimulus-claimed", body.claim_id.hex()
        return None

    # -- application ------------------------------------------------------

    def _apply_group(self, group: Group, block: Block, period: int) -> tuple[Group, list[CreditRecord]]:
        entries: list[LedgerEntry] = []
        credits: list[CreditRecord] = []
        for entry in group.entries:
            placed = entry.with_height(self.next_entry_height)
            self.next_entry_height += 1
            entries.append(placed)
            body = entry.body
            if isinstance(body, IssueBatch):
                for exp, count in body.counts:
                    key = (entry.msb, body.vintage, exp)
                    self.issued[key] = self.issued.get(key, 0) + count
                    gkey = (body.vintage, exp)
                    self.issued_global[gkey] = self.issued_global.get(gkey, 0) + count
            elif isinstance(body, RedeemBatch):
                for s in body.spends:
                    self.nullifiers.add(s.nullifier)
                    key = (entry.msb, s.vintage, s.exponent)
                    self.redeemed[key] = self.redeemed.get(key, 0) + 1
                    gkey = (s.vintage, s.exponent)
                    self.redeemed_global[gkey] = self.redeemed_global.get(gkey, 0) + 1
                if self.track_credits:
                    credits.append(
                        CreditRecord(
                            placed.height,
                            block.tick,
                            entry.msb,
                            body.purpose,
                            body.destination,
                            self._credit_value(body, period),
                            body.face_total,
                        )
                    )
            elif isinstance(body, VintageExchange):
                for exp, count in body.counts:
                    key = (entry.msb, body.old_vintage, exp)
                    self.swept[key] = self.swept.get(key, 0) + count
                if body.treasury_delta >= 0:
                    self.tax_total += body.treasury_delta
                else:
                    self.subsidy_total += -body.treasury_delta
                self.exchange_value_granted += body.value_granted
                self.exchange_face_retired += body.face_total
            elif isinstance(body, StimulusClaim):
                self.claims[body.claim_id] = placed.height
                self.stimulus_disbursed += body.amount
        return Group(tuple(entries)), credits

    def _credit_value(self, body: RedeemBatch, period: int) -> int:
        from fractions import Fraction

        total = Fraction(0)
        par = 0
        for s in body.spends:
            value = policy.value_of(self.terms[s.vintage], period)
            if value == 1:
                par += face_value(s.exponent)
            else:
                total += face_value(s.exponent) * value
        return par + int(total)

    def apply_block(self, block: Block) -> AppliedBlock:
        if block.height != self.height:
            raise ValueError(f"block height {block.height} applied at ledger height {self.height}")
        period = self.period_of(block.tick)
        applied: list[tuple[int, Group]] = []
        rejected: list[Rejection] = []
        credits: list[CreditRecord] = []
        seen: set[bytes] = set()
        flags = bytearray()
        for atom, group in enumerate(block.groups):
            digest = group_digest(group)
            if digest in self.applied_groups:
                flags.append(2)  # duplicate resubmission, idempotent skip
                continue
            problem = self._check_group(group, period, seen)
            if problem is not None:
                rejected.append(Rejection(atom, problem[0], problem[1]))
                flags.append(0)
                continue
            for entry in group.entries:
                if isinstance(entry.body, RedeemBatch):
                    seen.update(s.nullifier for s in entry.body.spends)
            placed, group_credits = self._apply_group(group, block, period)
            credits.extend(group_credits)
            self.applied_groups.add(digest)
            applied.append((atom, placed))
            flags.append(1)
        self.credits.extend(credits)
        result = AppliedBlock(block, tuple(applied), tuple(rejected), tuple(credits))
        self.blocks.append(result)
        self.state_hashes.append(tagged_hash("state", self.state_hash, block.digest(), bytes(flags)))
        return result

    # -- reports ------------------------------------------------------------

    def outstanding_counts(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = {}
        for key, count in self.issued_global.items():
            remaining = count - self.redeemed_global.get(key, 0)
            if remaining:
                out[key] = remaining
        return out

    def outstanding_face(self) -> int:
        return sum(face_value(exp) * c for (_, exp), c in self.outstanding_counts().items())

    def outstanding_by_vintage(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (vintage, exp), count in self.outstanding_counts().items():
            out[vintage] = out.get(vintage, 0) + face_value(exp) * count
        return out

    def holdings(self, msb: Optional[str] = None) -> dict[tuple[str, int, int], int]:
        """Redeemed-but-unswept counts per (msb, vintage, exponent)."""
        out: dict[tuple[str, int, int], int] = {}
        for key, count in self.redeemed.items():
            if msb is not None and key[0] != msb:
                continue
            remaining = count - self.swept.get(key, 0)
            if remaining:
                out[key] = remaining
        return out

    def holdings_face(self) -> int:
        return sum(face_value(exp) * c for (_, _, exp), c in self.holdings().items())
