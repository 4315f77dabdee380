"""Authority observer: mirrors the committed ledger from validator
broadcasts, re-verifies every certificate itself, and runs supply, flow,
and anomaly analytics.

The mirror sees everything on the ledger and every MSB attribution, but no
field it holds can resolve a private-wallet counterparty; spends from
wallets appear only as nullifiers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from . import policy
from .core import IssueBatch, RedeemBatch, VintageTerms, face_value
from .consensus import CommitAnnounce, ValidatorSet, verify_certificate
from .ledger import LedgerState

logger = logging.getLogger(__name__)

ANOMALY_KINDS = (
    "double_spend_attempt",
    "invalid_certificate",
    "over_claim",
    "invalid_destination",
    "quota_breach",
)

# application rejection rule -> anomaly classification
_RULE_KINDS = {
    "nullifier-spent": "double_spend_attempt",
}


@dataclass(frozen=True)
class Anomaly:
    kind: str
    height: Optional[int]
    msb: Optional[str]
    detail: str


@dataclass(frozen=True)
class AnomalyReport:
    """MSB-side rejection forwarded to the authority."""

    kind: str
    msb: str
    detail: str
    attempt_id: str


@dataclass(frozen=True)
class GrantNotice:
    """Issuer-side quota grant, so the observer can bound MSB issuance."""

    msb: str
    vintage: int
    exponent: int
    count_delta: int
    seq: int


class Regulator:
    def __init__(
        self,
        name: str,
        vset: ValidatorSet,
        terms_table: dict[int, VintageTerms],
        ticks_per_period: int,
        stimulus_registry: Optional[dict[bytes, int]] = None,
    ) -> None:
        self.name = name
        self.vset = vset
        self.mirror = LedgerState(terms_table, ticks_per_period, stimulus_registry)
        self.anomalies: list[Anomaly] = []
        self.granted: dict[tuple[str, int, int], int] = {}
        self.accounts: set[str] = set()
        self.merchants: set[str] = set()
        self._buffer: dict[int, CommitAnnounce] = {}
        self._seen_reports: set[str] = set()
        self._bad_cert_heights: set[int] = set()
        self._breach_reported: set[tuple[str, int, int]] = set()

    def register_account(self, account_id: str, merchant: bool = False) -> None:
        self.accounts.add(account_id)
        if merchant:
            self.merchants.add(account_id)

    # -- ingestion -----------------------------------------------------------

    def on_message(self, src: str, payload, now: int) -> None:
        if isinstance(payload, CommitAnnounce):
            self.ingest(payload)
        elif isinstance(payload, AnomalyReport):
            if payload.attempt_id not in self._seen_reports:
                self._seen_reports.add(payload.attempt_id)
                self.anomalies.append(Anomaly(payload.kind, None, payload.msb, payload.detail))
        elif isinstance(payload, GrantNotice):
            key = (payload.msb, payload.vintage, payload.exponent)
            self.granted[key] = self.granted.get(key, 0) + payload.count_delta

    def on_tick(self, now: int) -> None:
        pass

    def ingest(self, announce: CommitAnnounce) -> None:
        """Certificate-checked, height-ordered ingestion with gap buffering."""
        height = announce.cert.height
        if height < self.mirror.height or height in self._buffer:
            return
        self._buffer[height] = announce
        while self.mirror.height in self._buffer:
            ann = self._buffer.pop(self.mirror.height)
            if ann.block.digest() != ann.cert.digest or not verify_certificate(ann.cert, self.vset):
                if ann.cert.height not in self._bad_cert_heights:
                    self._bad_cert_heights.add(ann.cert.height)
                    self.anomalies.append(
                        Anomaly("invalid_certificate", ann.cert.height, None, "quarantined block")
                    )
                return  # quarantined; a valid announce for this height may still arrive
            self._apply(ann)

    def _apply(self, ann: CommitAnnounce) -> None:
        applied = self.mirror.apply_block(ann.block)
        for rej in applied.rejected:
            group = ann.block.groups[rej.atom]
            kind = _RULE_KINDS.get(rej.rule, "over_claim")
            self.anomalies.append(
                Anomaly(kind, ann.block.height, group.entries[0].msb, f"{rej.rule}: {rej.detail}")
            )
        for _, group in applied.applied:
            for entry in group.entries:
                body = entry.body
                if isinstance(body, RedeemBatch) and body.purpose in ("deposit", "merchant"):
                    if body.destination is None or body.destination not in self.accounts:
                        self.anomalies.append(
                            Anomaly(
                                "invalid_destination",
                                ann.block.height,
                                entry.msb,
                                f"unregistered destination {body.destination!r}",
                            )
                        )

    # -- analytics -------------------------------------------------------------

    def supply_report(self, height: Optional[int] = None) -> dict[int, tuple[int, int]]:
        """Outstanding face and discounted value per vintage at a height."""
        if height is None:
            height = self.mirror.height
        if height > self.mirror.height:
            raise ValueError(f"height {height} not committed yet")
        issued: dict[tuple[int, int], int] = {}
        redeemed: dict[tuple[int, int], int] = {}
        last_tick = 0
        for applied in self.mirror.blocks[:height]:
            last_tick = applied.block.tick
            for _, group in applied.applied:
                for entry in group.entries:
                    body = entry.body
                    if isinstance(body, IssueBatch):
                        for exp, count in body.counts:
                            key = (body.vintage, exp)
                            issued[key] = issued.get(key, 0) + count
                    elif isinstance(body, RedeemBatch):
                        for s in body.spends:
                            key = (s.vintage, s.exponent)
                            redeemed[key] = redeemed.get(key, 0) + 1
        period = self.mirror.period_of(last_tick)
        report: dict[int, tuple[int, int]] = {}
        for (vintage, exp), count in issued.items():
            remaining = count - redeemed.get((vintage, exp), 0)
            face, value = report.get(vintage, (0, Fraction(0)))
            face += face_value(exp) * remaining
            value += (
                Fraction(face_value(exp) * remaining)
                * policy.value_of(self.mirror.terms[vintage], max(period, vintage))
            )
            report[vintage] = (face, value)
        return {v: (face, int(value)) for v, (face, value) in sorted(report.items())}

    def anomaly_scan(self, window: Optional[tuple[int, int]] = None) -> list[Anomaly]:
        """Anomalies in a height window, plus a quota-bound sweep."""
        for key, count in self.mirror.issued.items():
            if count > self.granted.get(key, 0) and key not in self._breach_reported:
                self._breach_reported.add(key)
                self.anomalies.append(
                    Anomaly(
                        "quota_breach",
                        None,
                        key[0],
                        f"issued {count} > granted {self.granted.get(key, 0)} "
                        f"at vintage {key[1]} denom {key[2]}",
                    )
                )
        if window is None:
            return list(self.anomalies)
        lo, hi = window
        return [a for a in self.anomalies if a.height is None or lo <= a.height < hi]

    def tax_aggregate(self, account: str, tick_range: Optional[tuple[int, int]] = None) -> int:
        if account not in self.merchants:
            raise ValueError(f"{account!r} is not a registered merchant account")
        total = 0
        for credit in self.mirror.credits:
            if credit.purpose != "merchant" or credit.destination != account:
                continue
            if tick_range is not None and not (tick_range[0] <= credit.tick < tick_range[1]):
                continue
            total += credit.credited
        return total

    def state_hash_at(self, height: int) -> bytes:
        return self.mirror.state_hashes[height]
