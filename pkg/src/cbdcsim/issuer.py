"""Issuing authority: reserve-for-quota swaps, blinded signing under quota,
vintage exchange grants, the stimulus registry, and treasury accounting.

The issuer never validates consensus; it observes committed blocks with
their certificates and moves quota and treasury balances only on committed
evidence. It signs blinded requests, so its transcript holds no serial of
any token it ever created.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from . import crypto, policy, simnet
from .core import (
    Group,
    IssueBatch,
    LedgerEntry,
    StimulusClaim,
    VintageExchange,
    VintageTerms,
    check_amount,
    counts_from_exponents,
    decompose,
    face_value,
)
from .consensus import CommitAnnounce, ValidatorSet, verify_certificate
from .crypto import BlindedRequest, IssuerKeyPair, PublicKey
from .ledger import LedgerState
from .ledger import group_digest as ledger_group_digest
from .policy import ExchangeResult

logger = logging.getLogger(__name__)


class QuotaExceeded(Exception):
    """Signing refused; the MSB must swap reserves for quota first."""


class IssuerError(Exception):
    pass


@dataclass
class QuotaAccount:
    msb: str
    reserves_balance: int
    remaining: dict[tuple[int, int], int] = field(default_factory=dict)  # (vintage, exp) -> count
    reserved: dict[tuple[int, int], int] = field(default_factory=dict)
    consumed: dict[tuple[int, int], int] = field(default_factory=dict)

    def remaining_face(self) -> int:
        return sum(face_value(e) * c for (_, e), c in self.remaining.items())

    def reserved_face(self) -> int:
        return sum(face_value(e) * c for (_, e), c in self.reserved.items())


@dataclass
class EligibilityRecord:
    claim_id: bytes
    amount: int
    status: str = "unclaimed"  # unclaimed | claimed
    ledger_height: Optional[int] = None


def claim_id_for(taxpayer_id: str) -> bytes:
    return crypto.tagged_hash("claim", taxpayer_id.encode("utf-8"))


class Issuer(simnet.Node):
    def __init__(
        self,
        name: str,
        vset: ValidatorSet,
        terms_table: dict[int, VintageTerms],
        ticks_per_period: int,
        key_seed: int,
        msb_names: list[str],
        reserves_per_msb: int,
        max_exponent: int,
        rsa_bits: int = crypto.DEFAULT_RSA_BITS,
        stimulus_registry: Optional[dict[bytes, int]] = None,
    ) -> None:
        self.name = name
        self.vset = vset
        self.terms = dict(terms_table)
        self.ticks_per_period = ticks_per_period
        self.max_exponent = max_exponent
        self.token_keys: dict[tuple[int, int], IssuerKeyPair] = {}
        for vintage in sorted(self.terms):
            for exp in range(max_exponent + 1):
                self.token_keys[(vintage, exp)] = crypto.issuer_keypair(vintage, exp, key_seed, rsa_bits)
        self.quota: dict[str, QuotaAccount] = {
            m: QuotaAccount(m, reserves_per_msb) for m in msb_names
        }
        self.registry: dict[bytes, EligibilityRecord] = {}
        self.stimulus_allotted = 0
        self.stimulus_reserved = 0
        self.stimulus_disbursed = 0
        self.swaps_in = 0
        self.swaps_out = 0
        self.transcript: dict[tuple[int, int], list[bytes]] = {}
        self.mirror = LedgerState(self.terms, ticks_per_period, stimulus_registry, track_credits=False)
        self._buffer: dict[int, CommitAnnounce] = {}
        self._released: set[bytes] = set()
        self.version = 0  # bumped on any treasury-visible mutation
        self.net: Optional[simnet.Network] = None
        self.regulator_name: Optional[str] = None
        self._notice_seq = 0
        if stimulus_registry:
            self.load_stimulus_registry(list(stimulus_registry.items()))

    def attach_network(self, net: simnet.Network, regulator_name: str) -> None:
        self.net = net
        self.regulator_name = regulator_name

    def _notify_grant(self, msb: str, vintage: int, exponent: int, count_delta: int) -> None:
        if self.net is None or self.regulator_name is None:
            return
        from .regulator import GrantNotice

        self._notice_seq += 1
        self.net.send(
            self.name, self.regulator_name, GrantNotice(msb, vintage, exponent, count_delta, self._notice_seq)
        )

    # -- public parameters -------------------------------------------------

    def verification_keys(self) -> dict[tuple[int, int], PublicKey]:
        return {k: pair.public() for k, pair in self.token_keys.items()}

    def latest_vintage(self, now: int) -> int:
        return policy.latest_vintage(now, self.ticks_per_period)

    # -- reserve swaps -------------------------------------------------------

    def swap_reserves_for_quota(self, msb: str, amount: int, vintage: int, now: int) -> dict[int, int]:
        check_amount(amount)
        account = self._account(msb)
        if vintage != self.latest_vintage(now):
            raise IssuerError(f"quota is granted in the latest vintage only, not {vintage}")
        if vintage not in self.terms:
            raise IssuerError(f"vintage {vintage} has no declared terms")
        if amount > account.reserves_balance:
            raise IssuerError(f"{msb} has insufficient reserves for swap of {amount}")
        counts = counts_from_exponents(decompose(amount, self.max_exponent))
        account.reserves_balance -= amount
        for exp, count in counts.items():
            key = (vintage, exp)
            account.remaining[key] = account.remaining.get(key, 0) + count
            self._notify_grant(msb, vintage, exp, count)
        self.swaps_in += amount
        self.version += 1
        return counts

    def swap_quota_for_reserves(self, msb: str, amount: int, vintage: int, now: int) -> None:
        """The symmetric vice-versa swap: unused quota back into reserves."""
        check_amount(amount)
        account = self._account(msb)
        counts = counts_from_exponents(decompose(amount, self.max_exponent))
        for exp, count in counts.items():
            key = (vintage, exp)
            if account.remaining.get(key, 0) < count:
                raise IssuerError(f"{msb} lacks quota to return at vintage {vintage} denom {exp}")
        for exp, count in counts.items():
            key = (vintage, exp)
            account.remaining[key] -= count
            self._notify_grant(msb, vintage, exp, -count)
        account.reserves_balance += amount
        self.swaps_out += amount
        self.version += 1

    def _account(self, msb: str) -> QuotaAccount:
        account = self.quota.get(msb)
        if account is None:
            raise IssuerError(f"{msb} is not a registered MSB")
        return account

    # -- blinded signing ------------------------------------------------------

    def sign_for(self, msb: str, requests: list[BlindedRequest]) -> list[bytes]:
        """Sign blinded requests against the MSB's quota. All or nothing."""
        account = self._account(msb)
        needed: dict[tuple[int, int], int] = {}
        for req in requests:
            key = (req.vintage, req.exponent)
            needed[key] = needed.get(key, 0) + 1
        for key, count in needed.items():
            if account.remaining.get(key, 0) < count:
                raise QuotaExceeded(
                    f"{msb} quota exhausted for vintage {key[0]} denom {key[1]}; swap reserves first"
                )
        for key, count in needed.items():
            account.remaining[key] -= count
            account.reserved[key] = account.reserved.get(key, 0) + count
        return self._sign_requests(requests)

    def _sign_requests(self, requests: list[BlindedRequest]) -> list[bytes]:
        sigs = []
        for req in requests:
            pair = self.token_keys.get((req.vintage, req.exponent))
            if pair is None:
                raise IssuerError(f"no key for vintage {req.vintage} denom {req.exponent}")
            self.transcript.setdefault((req.vintage, req.exponent), []).append(req.blinded)
            sigs.append(crypto.sign_blinded(pair, req))
        return sigs

    # -- vintage exchange ------------------------------------------------------

    def process_vintage_exchange(self, msb: str, old_vintage: int, counts: dict[int, int], now: int) -> ExchangeResult:
        """Validate a sweep against the committed ledger and price it.

        The quota grant and treasury posting land when the VintageExchange
        entry commits; this call only cross-checks and quotes the terms.
        """
        self._account(msb)
        terms = self.terms.get(old_vintage)
        if terms is None:
            raise IssuerError(f"vintage {old_vintage} has no declared terms")
        holdings = self.mirror.holdings(msb)
        for exp, count in counts.items():
            if count > holdings.get((msb, old_vintage, exp), 0):
                raise IssuerError(
                    f"{msb} over-claims vintage {old_vintage} denom {exp}: "
                    f"{count} > ledger-verifiable holdings"
                )
        return policy.exchange_terms(terms, counts, self.latest_vintage(now))

    # -- stimulus ---------------------------------------------------------------

    def load_stimulus_registry(self, records: list[tuple[bytes, int]]) -> None:
        ids = [cid for cid, _ in records]
        if len(set(ids)) != len(ids):
            raise IssuerError("duplicate claim_id in stimulus registry load")
        for cid, amount in records:
            if cid in self.registry:
                raise IssuerError("duplicate claim_id in stimulus registry load")
        for cid, amount in records:
            self.registry[cid] = EligibilityRecord(cid, check_amount(amount))
            self.stimulus_allotted += amount

    def authorize_claim(self, msb: str, claim_id: bytes, requests: list[BlindedRequest], now: int) -> list[bytes]:
        """Sign a stimulus disbursement out of the allotment, not MSB reserves.

        Concurrent authorizations for one claim are allowed; the ledger
        arbitrates and exactly one StimulusClaim can ever apply.
        """
        self._account(msb)
        record = self.registry.get(claim_id)
        if record is None:
            raise IssuerError("unknown claim_id")
        if claim_id in self.mirror.claims or record.status == "claimed":
            raise IssuerError("claim already committed")
        latest = self.latest_vintage(now)
        expect = counts_from_exponents(decompose(record.amount, self.max_exponent))
        got: dict[int, int] = {}
        for req in requests:
            if req.vintage != latest:
                raise IssuerError("stimulus tokens must be of the latest vintage")
            got[req.exponent] = got.get(req.exponent, 0) + 1
        if got != expect:
            raise IssuerError("requests do not decompose the claim amount")
        self.stimulus_reserved += record.amount
        for exp, count in got.items():
            self._notify_grant(msb, latest, exp, count)
        return self._sign_requests(requests)

    # -- committed-block observation ---------------------------------------------

    def on_message(self, src: str, payload, now: int) -> None:
        if isinstance(payload, CommitAnnounce):
            self._buffer.setdefault(payload.cert.height, payload)
            self._drain_buffer()

    def _drain_buffer(self) -> None:
        while self.mirror.height in self._buffer:
            ann = self._buffer.pop(self.mirror.height)
            if ann.block.digest() != ann.cert.digest or not verify_certificate(ann.cert, self.vset):
                logger.warning("issuer dropped block %d with bad certificate", ann.cert.height)
                return
            applied = self.mirror.apply_block(ann.block)
            self.version += 1
            period = self.mirror.period_of(ann.block.tick)
            for _, group in applied.applied:
                for entry in group.entries:
                    self._settle_entry(entry, period)
            for rej in applied.rejected:
                group = ann.block.groups[rej.atom]
                self._release_group(ledger_group_digest(group), group)

    def _settle_entry(self, entry: LedgerEntry, period: int) -> None:
        body = entry.body
        account = self.quota.get(entry.msb)
        if isinstance(body, IssueBatch):
            if body.purpose == "stimulus":
                self.stimulus_reserved = max(0, self.stimulus_reserved - body.face_total)
                self.stimulus_disbursed += body.face_total
            elif account is not None:
                for exp, count in body.counts:
                    key = (body.vintage, exp)
                    take = min(count, account.reserved.get(key, 0))
                    account.reserved[key] = account.reserved.get(key, 0) - take
                    account.consumed[key] = account.consumed.get(key, 0) + count
        elif isinstance(body, VintageExchange):
            if account is not None and body.value_granted > 0:
                vintage = period if period in self.terms else max(self.terms)
                for exp in decompose(body.value_granted, self.max_exponent):
                    key = (vintage, exp)
                    account.remaining[key] = account.remaining.get(key, 0) + 1
                    self._notify_grant(entry.msb, vintage, exp, 1)
        elif isinstance(body, StimulusClaim):
            record = self.registry.get(body.claim_id)
            if record is not None:
                record.status = "claimed"
                record.ledger_height = self.mirror.claims.get(body.claim_id)

    def release_for_group(self, digest: bytes, group: Group) -> None:
        """Release reservations for a group invalidated before committing."""
        self._release_group(digest, group)

    def _release_group(self, digest: bytes, group: Group) -> None:
        """Return reservations held for a group that will never apply."""
        if digest in self._released:
            return
        self._released.add(digest)
        for entry in group.entries:
            body = entry.body
            if not isinstance(body, IssueBatch):
                continue
            if body.purpose == "stimulus":
                self.stimulus_reserved = max(0, self.stimulus_reserved - body.face_total)
                continue
            account = self.quota.get(entry.msb)
            if account is None:
                continue
            for exp, count in body.counts:
                key = (body.vintage, exp)
                take = min(count, account.reserved.get(key, 0))
                account.reserved[key] = account.reserved.get(key, 0) - take
                account.remaining[key] = account.remaining.get(key, 0) + take

    # -- reports ---------------------------------------------------------------

    def treasury(self) -> dict[str, int]:
        return {
            "tax_total": self.mirror.tax_total,
            "subsidy_total": self.mirror.subsidy_total,
            "stimulus_allotted": self.stimulus_allotted,
            "stimulus_disbursed": self.stimulus_disbursed,
            "reserves_swapped_in": self.swaps_in,
            "reserves_swapped_out": self.swaps_out,
        }

    def conservation_report(self) -> dict[str, int]:
        """Both sides of the global conservation identity, in minor units.

        Everything the issuer ever backed (net reserve swaps, exchange
        grants, stimulus) must equal everything accounted for downstream:
        tokens outstanding, redeemed value held by MSBs awaiting sweep, face
        retired through exchanges, and quota not yet used.
        """
        granted = (
            self.swaps_in
            - self.swaps_out
            + self.mirror.exchange_value_granted
            + self.stimulus_disbursed
        )
        quota_remaining = sum(a.remaining_face() for a in self.quota.values())
        quota_reserved = sum(a.reserved_face() for a in self.quota.values())
        accounted = (
            self.mirror.outstanding_face()
            + self.mirror.holdings_face()
            + self.mirror.exchange_face_retired
            + quota_remaining
            + quota_reserved
            + self.stimulus_reserved
        )
        return {
            "granted": granted,
            "accounted": accounted,
            "outstanding": self.mirror.outstanding_face(),
            "holdings": self.mirror.holdings_face(),
            "retired": self.mirror.exchange_face_retired,
            "quota_remaining": quota_remaining,
            "quota_reserved": quota_reserved,
            "stimulus_reserved": self.stimulus_reserved,
        }

    def conserved(self) -> bool:
        report = self.conservation_report()
        return report["granted"] == report["accounted"]

    def treasury_reconciles(self) -> bool:
        m = self.mirror
        return m.subsidy_total - m.tax_total == m.exchange_value_granted - m.exchange_face_retired
