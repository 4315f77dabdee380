"""Money services business: customer accounts, limit enforcement, and every
regulated token flow (withdraw, deposit, merchant receipt, mediated
transfer, cash exchange, vintage sweep, stimulus claim), plus the records
an authority may query.

Each MSB is co-located with its consensus validator. Effects that matter
to anyone else happen only at commit: blind signatures are released to
wallets, accounts are credited, and fees are earned strictly after the
corresponding batch has a certificate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto, policy
from .core import (
    Group,
    IssueBatch,
    LedgerEntry,
    RedeemBatch,
    StimulusClaim,
    TokenSpend,
    VintageExchange,
    VintageTerms,
    check_amount,
    counts_from_exponents,
    decompose,
    face_value,
)
from .consensus import ValidatorNode, sign_entry
from .crypto import BlindedRequest, KeyPair
from .issuer import Issuer, IssuerError, QuotaExceeded
from .ledger import AppliedBlock, Block, group_digest
from .regulator import AnomalyReport
from .wallet import TokenProof

logger = logging.getLogger(__name__)


class MsbError(Exception):
    def __init__(self, message: str, retry_after: Optional[int] = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


@dataclass
class LimitPolicy:
    withdrawal_cap: int = 10**9  # per window
    deposit_soft_cap: int = 10**9  # per window; beyond this deposits are flagged, not blocked
    cash_origin_threshold: int = 10**9
    window_ticks: int = 1000
    mediation_fee: int = 0


@dataclass
class Account:
    id: str
    customer_ref: str
    kyc: bool
    balance: int
    merchant: bool = False
    window_index: int = -1
    withdrawal_used: int = 0
    deposit_used: int = 0


@dataclass
class MsbRecord:
    tick: int
    kind: str
    amount: int
    account: str  # account id, or "private wallet" for wallet-side counterparties
    entry_ref: str  # group digest hex
    flags: tuple[str, ...] = ()
    entry_height: Optional[int] = None


@dataclass
class _Pending:
    kind: str
    data: dict = field(default_factory=dict)
    record: Optional[MsbRecord] = None


class Msb:
    def __init__(
        self,
        name: str,
        validator: ValidatorNode,
        issuer: Issuer,
        entry_key: KeyPair,
        terms: dict[int, VintageTerms],
        ticks_per_period: int,
        limits: LimitPolicy,
        max_exponent: int,
        regulator: str = "regulator",
        authority_credential: str = "authority",
        lax_destinations: bool = False,
    ) -> None:
        self.name = name
        self.validator = validator
        self.issuer = issuer
        self.key = entry_key
        self.terms = terms
        self.ticks_per_period = ticks_per_period
        self.limits = limits
        self.max_exponent = max_exponent
        self.regulator = regulator
        self.authority_credential = authority_credential
        self.lax_destinations = lax_destinations
        self._vks = issuer.verification_keys()

        self.accounts: dict[str, Account] = {}
        self.records: list[MsbRecord] = []
        self.pending: dict[bytes, _Pending] = {}
        self.local_nullifiers: set[bytes] = set()
        self.pending_sweeps: dict[tuple[int, int], int] = {}
        self.fee_account = self.open_account(f"{name}:fees", customer_ref=name, kyc=True).id
        self._attempt_seq = 0
        self._entry_seq = 0

        validator.commit_hooks.append(self._on_block)
        validator.rejection_hooks.append(self._on_committed_rejection)
        validator.prune_hooks.append(self._on_pruned)

    # -- accounts ---------------------------------------------------------

    def open_account(self, account_id: str, customer_ref: str, kyc: bool, balance: int = 0, merchant: bool = False) -> Account:
        if account_id in self.accounts:
            raise MsbError(f"account {account_id} already exists")
        account = Account(account_id, customer_ref, kyc, check_amount(balance), merchant)
        self.accounts[account_id] = account
        return account

    def pay_account(self, account_id: str, amount: int) -> None:
        """Ordinary account credit (payroll-style); not a token operation."""
        self._account(account_id).balance += check_amount(amount)

    def _account(self, account_id: str) -> Account:
        account = self.accounts.get(account_id)
        if account is None:
            raise MsbError(f"unknown account {account_id}")
        return account

    def _roll_window(self, account: Account, now: int) -> None:
        idx = now // self.limits.window_ticks
        if idx != account.window_index:
            account.window_index = idx
            account.withdrawal_used = 0
            account.deposit_used = 0

    def _window_end(self, now: int) -> int:
        return (now // self.limits.window_ticks + 1) * self.limits.window_ticks

    def _period(self, now: int) -> int:
        return policy.latest_vintage(now, self.ticks_per_period)

    # -- quota plumbing ------------------------------------------------------

    def _ensure_quota(self, requests: list[BlindedRequest], now: int) -> list[bytes]:
        try:
            return self.issuer.sign_for(self.name, requests)
        except QuotaExceeded:
            pass
        needed: dict[tuple[int, int], int] = {}
        for req in requests:
            key = (req.vintage, req.exponent)
            needed[key] = needed.get(key, 0) + 1
        account = self.issuer.quota[self.name]
        for (vintage, exp), count in needed.items():
            shortfall = count - account.remaining.get((vintage, exp), 0)
            for _ in range(max(0, shortfall)):
                self.issuer.swap_reserves_for_quota(self.name, face_value(exp), vintage, now)
        return self.issuer.sign_for(self.name, requests)

    # -- submission plumbing ----------------------------------------------------

    def _submit(self, bodies: list, kind: str, data: dict, record: MsbRecord, now: int) -> bytes:
        entries = []
        for body in bodies:
            self._entry_seq += 1
            entries.append(
                LedgerEntry(
                    self.name,
                    body,
                    sign_entry(self.key, self.name, body, self._entry_seq),
                    seq=self._entry_seq,
                )
            )
        entries = tuple(entries)
        group = Group(entries)
        digest = self.validator.submit(group, now)
        self.pending[digest] = _Pending(kind, data, record)
        record.entry_ref = digest.hex()
        self.records.append(record)
        return digest

    def _report_anomaly(self, kind: str, detail: str) -> None:
        self._attempt_seq += 1
        report = AnomalyReport(kind, self.name, detail, f"{self.name}:{self._attempt_seq}")
        self.validator.net.send(self.validator.name, self.regulator, report)

    # -- regulated operations -------------------------------------------------------

    def withdraw(
        self,
        account_id: str,
        amount: int,
        requests: list[BlindedRequest],
        now: int,
        on_tokens: Callable[[list[bytes]], None],
    ) -> bytes:
        """Debit an account and mint blind-signed tokens of the latest vintage."""
        account = self._account(account_id)
        if not account.kyc:
            raise MsbError(f"account {account_id} fails client identification")
        check_amount(amount)
        if amount == 0:
            raise MsbError("withdrawal must be positive")
        if amount > account.balance:
            raise MsbError(f"insufficient balance: {account.balance} < {amount}")
        self._roll_window(account, now)
        if account.withdrawal_used + amount > self.limits.withdrawal_cap:
            raise MsbError(
                f"withdrawal cap {self.limits.withdrawal_cap} exceeded in this window",
                retry_after=self._window_end(now),
            )
        latest = self._period(now)
        for req in requests:
            if req.vintage != latest:
                raise MsbError(f"tokens must be of the latest vintage {latest}, not {req.vintage}")
        expect = counts_from_exponents(decompose(amount, self.max_exponent))
        got = counts_from_exponents([r.exponent for r in requests])
        if got != expect:
            raise MsbError("blinded requests do not match the amount's denominations")
        sigs = self._ensure_quota(requests, now)
        account.balance -= amount
        account.withdrawal_used += amount
        body = IssueBatch(latest, tuple(sorted(expect.items())), "withdrawal")
        record = MsbRecord(now, "withdraw", amount, account_id, "")
        return self._submit(
            [body], "issue", {"sigs": sigs, "on_tokens": on_tokens, "refund": (account_id, amount)}, record, now
        )

    def _validate_proofs(self, proofs: list[TokenProof], purpose: str, now: int) -> None:
        period = self._period(now)
        seen: set[bytes] = set()
        for proof in proofs:
            pk = self._vks.get((proof.vintage, proof.exponent))
            if pk is None:
                raise MsbError(f"no issuer key for vintage {proof.vintage} denom {proof.exponent}")
            if not crypto.verify_token(pk, proof.serial, proof.signature):
                raise MsbError("token signature verification failed")
            null = crypto.nullifier(proof.serial)
            if null in seen:
                raise MsbError("duplicate token in one spend")
            seen.add(null)
            if null in self.validator.app.nullifiers or null in self.local_nullifiers:
                self._report_anomaly("double_spend_attempt", f"nullifier {null.hex()}")
                raise MsbError("token already spent")
            terms = self.terms.get(proof.vintage)
            if terms is None:
                raise MsbError(f"unknown vintage {proof.vintage}")
            if not policy.may_convert(terms, period, purpose):
                raise MsbError(
                    f"vintage {proof.vintage} tokens cannot be redeemed for {purpose} at period {period}"
                )

    def _spends(self, proofs: list[TokenProof]) -> tuple[TokenSpend, ...]:
        return tuple(
            TokenSpend(crypto.nullifier(p.serial), p.exponent, p.vintage) for p in proofs
        )

    def _preview_value(self, proofs: list[TokenProof], now: int) -> int:
        period = self._period(now)
        counts: dict[tuple[int, int], int] = {}
        for p in proofs:
            counts[(p.vintage, p.exponent)] = counts.get((p.vintage, p.exponent), 0) + 1
        from fractions import Fraction

        total = Fraction(0)
        par = 0
        for (vintage, exp), count in counts.items():
            value = policy.value_of(self.terms[vintage], period)
            if value == 1:
                par += face_value(exp) * count
            else:
                total += face_value(exp) * count * value
        return par + int(total)

    def receive_spend(
        self,
        proofs: list[TokenProof],
        destination: Optional[str],
        purpose: str,
        now: int,
        on_credit: Optional[Callable[[int], None]] = None,
        skip_account_check: bool = False,
    ) -> bytes:
        """Accept tokens from a private wallet and credit the destination account."""
        if purpose not in ("deposit", "merchant", "cash_out"):
            raise MsbError(f"receive_spend does not handle purpose {purpose!r}")
        if not proofs:
            raise MsbError("no tokens presented")
        flags: list[str] = []
        account: Optional[Account] = None
        if purpose in ("deposit", "merchant"):
            if destination is None:
                raise MsbError("deposit and merchant flows need a destination account")
            if not (skip_account_check or self.lax_destinations):
                account = self._account(destination)
        self._validate_proofs(proofs, purpose, now)
        value = self._preview_value(proofs, now)
        if purpose == "deposit" and account is not None:
            self._roll_window(account, now)
            if account.deposit_used + value > self.limits.deposit_soft_cap:
                flags.append("deposit-soft-cap")  # additional-checks record, not a block
            account.deposit_used += value
        spends = self._spends(proofs)
        self.local_nullifiers.update(s.nullifier for s in spends)
        body = RedeemBatch(spends, purpose, destination)
        record = MsbRecord(now, purpose, value, destination or "private wallet", "", tuple(flags))
        return self._submit(
            [body],
            "redeem",
            {"destination": destination, "purpose": purpose, "on_credit": on_credit, "spends": spends},
            record,
            now,
        )

    def mediate_transfer(
        self,
        sender_proofs: list[TokenProof],
        recipient_requests: list[BlindedRequest],
        now: int,
        on_recipient_tokens: Callable[[list[bytes]], None],
    ) -> bytes:
        """Wallet-to-wallet transfer via this institution, atomic on the ledger."""
        if not sender_proofs:
            raise MsbError("no tokens presented")
        self._validate_proofs(sender_proofs, "mediated_out", now)
        value = self._preview_value(sender_proofs, now)
        fee = self.limits.mediation_fee
        if value <= fee:
            raise MsbError(f"transfer value {value} does not cover the fee {fee}")
        latest = self._period(now)
        for req in recipient_requests:
            if req.vintage != latest:
                raise MsbError(f"recipient tokens must be of the latest vintage {latest}")
        offered = sum(face_value(r.exponent) for r in recipient_requests)
        if offered != value - fee:
            raise MsbError(f"recipient requests {offered} do not match transfer value {value - fee}")
        sigs = self._ensure_quota(recipient_requests, now)
        spends = self._spends(sender_proofs)
        self.local_nullifiers.update(s.nullifier for s in spends)
        redeem = RedeemBatch(spends, "mediated_out", None)
        issue = IssueBatch(
            latest,
            tuple(sorted(counts_from_exponents([r.exponent for r in recipient_requests]).items())),
            "mediated_in",
        )
        record = MsbRecord(now, "mediate", value, "private wallet", "")
        return self._submit(
            [redeem, issue],
            "mediate",
            {"sigs": sigs, "on_tokens": on_recipient_tokens, "fee": fee, "spends": spends},
            record,
            now,
        )

    def cash_exchange_in(
        self,
        amount: int,
        requests: list[BlindedRequest],
        now: int,
        on_tokens: Callable[[list[bytes]], None],
        origin_record: Optional[str] = None,
    ) -> bytes:
        """Physical cash into tokens; large amounts need a cash-origin record."""
        check_amount(amount)
        flags: list[str] = []
        if amount > self.limits.cash_origin_threshold:
            if origin_record is None:
                raise MsbError(
                    f"cash-in above {self.limits.cash_origin_threshold} requires an origin record"
                )
            flags.append(f"cash-origin:{origin_record}")
        latest = self._period(now)
        for req in requests:
            if req.vintage != latest:
                raise MsbError(f"tokens must be of the latest vintage {latest}")
        expect = counts_from_exponents(decompose(amount, self.max_exponent))
        if counts_from_exponents([r.exponent for r in requests]) != expect:
            raise MsbError("blinded requests do not match the amount's denominations")
        sigs = self._ensure_quota(requests, now)
        body = IssueBatch(latest, tuple(sorted(expect.items())), "cash_in")
        record = MsbRecord(now, "cash_in", amount, "private wallet", "", tuple(flags))
        return self._submit([body], "issue", {"sigs": sigs, "on_tokens": on_tokens}, record, now)

    def cash_exchange_out(self, proofs: list[TokenProof], now: int) -> bytes:
        """Tokens back into physical cash at their current vintage value."""
        if not proofs:
            raise MsbError("no tokens presented")
        self._validate_proofs(proofs, "cash_out", now)
        value = self._preview_value(proofs, now)
        spends = self._spends(proofs)
        self.local_nullifiers.update(s.nullifier for s in spends)
        body = RedeemBatch(spends, "cash_out", None)
        record = MsbRecord(now, "cash_out", value, "private wallet", "")
        return self._submit([body], "redeem", {"destination": None, "purpose": "cash_out", "on_credit": None, "spends": spends}, record, now)

    def claim_stimulus(
        self,
        claim_id: bytes,
        requests: list[BlindedRequest],
        now: int,
        on_tokens: Callable[[list[bytes]], None],
        identity_ok: bool = True,
    ) -> bytes:
        """Compliance-check a claimant and disburse their allotment to a wallet."""
        if not identity_ok:
            raise MsbError("claimant failed identification")
        record_entry = self.issuer.registry.get(claim_id)
        if record_entry is None:
            raise MsbError("unknown claim")
        sigs = self.issuer.authorize_claim(self.name, claim_id, requests, now)
        latest = self._period(now)
        claim = StimulusClaim(claim_id, record_entry.amount)
        issue = IssueBatch(
            latest,
            tuple(sorted(counts_from_exponents([r.exponent for r in requests]).items())),
            "stimulus",
        )
        record = MsbRecord(now, "stimulus", record_entry.amount, "private wallet", "")
        return self._submit(
            [claim, issue], "stimulus", {"sigs": sigs, "on_tokens": on_tokens}, record, now
        )

    def vintage_exchange_sweep(self, now: int) -> list[bytes]:
        """Convert non-latest redeemed value into latest-vintage quota."""
        latest = self._period(now)
        holdings = self.validator.app.holdings(self.name)
        by_vintage: dict[int, dict[int, int]] = {}
        for (_, vintage, exp), count in holdings.items():
            if vintage == latest:
                continue
            free = count - self.pending_sweeps.get((vintage, exp), 0)
            if free > 0:
                by_vintage.setdefault(vintage, {})[exp] = free
        digests = []
        for vintage in sorted(by_vintage):
            counts = by_vintage[vintage]
            result = self.issuer.process_vintage_exchange(self.name, vintage, counts, now)
            body = VintageExchange(
                vintage,
                tuple(sorted(counts.items())),
                result.new_tokens_value,
                result.treasury_delta,
            )
            for exp, count in counts.items():
                key = (vintage, exp)
                self.pending_sweeps[key] = self.pending_sweeps.get(key, 0) + count
            record = MsbRecord(now, "sweep", body.face_total, "issuer", "")
            digests.append(
                self._submit([body], "sweep", {"counts": dict(counts), "vintage": vintage}, record, now)
            )
        return digests

    # -- authority access ---------------------------------------------------------

    def records_query(
        self,
        credential: str,
        tick_range: Optional[tuple[int, int]] = None,
        kind: Optional[str] = None,
        account: Optional[str] = None,
    ) -> list[MsbRecord]:
        if credential != self.authority_credential:
            raise MsbError("records access refused: invalid authority credential")
        out = []
        for record in self.records:
            if tick_range is not None and not (tick_range[0] <= record.tick < tick_range[1]):
                continue
            if kind is not None and record.kind != kind:
                continue
            if account is not None and record.account != account:
                continue
            out.append(record)
        return out

    # -- commit plumbing ---------------------------------------------------------

    def _on_block(self, block: Block, cert, applied: AppliedBlock) -> None:
        period = self.validator.app.period_of(block.tick)
        for atom, group in applied.applied:
            digest = group_digest(block.groups[atom])
            pending = self.pending.pop(digest, None)
            if pending is None:
                continue
            if pending.record is not None:
                pending.record.entry_height = group.entries[0].height
            self._settle(pending, group, period)

    def _settle(self, pending: _Pending, group: Group, period: int) -> None:
        data = pending.data
        if pending.kind in ("issue", "stimulus"):
            data["on_tokens"](data["sigs"])
        elif pending.kind == "redeem":
            self.local_nullifiers.difference_update(s.nullifier for s in data["spends"])
            credited = 0
            for entry in group.entries:
                if isinstance(entry.body, RedeemBatch):
                    credited = self._credit_at(entry.body, period)
            destination = data["destination"]
            if destination is not None and destination in self.accounts:
                self.accounts[destination].balance += credited
            if data["on_credit"] is not None:
                data["on_credit"](credited)
        elif pending.kind == "mediate":
            self.local_nullifiers.difference_update(s.nullifier for s in data["spends"])
            self.accounts[self.fee_account].balance += data["fee"]
            data["on_tokens"](data["sigs"])
        elif pending.kind == "sweep":
            for exp, count in data["counts"].items():
                key = (data["vintage"], exp)
                self.pending_sweeps[key] = self.pending_sweeps.get(key, 0) - count
                if self.pending_sweeps[key] <= 0:
                    del self.pending_sweeps[key]

    def _credit_at(self, body: RedeemBatch, period: int) -> int:
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

    def _cleanup_failed(self, digest: bytes) -> Optional[_Pending]:
        pending = self.pending.pop(digest, None)
        if pending is None:
            return None
        data = pending.data
        if "spends" in data:
            self.local_nullifiers.difference_update(s.nullifier for s in data["spends"])
        if "refund" in data:
            account_id, amount = data["refund"]
            self.accounts[account_id].balance += amount
        if pending.kind == "sweep":
            for exp, count in data["counts"].items():
                key = (data["vintage"], exp)
                self.pending_sweeps[key] = self.pending_sweeps.get(key, 0) - count
                if self.pending_sweeps[key] <= 0:
                    del self.pending_sweeps[key]
        if pending.record is not None:
            pending.record.flags += ("rejected",)
        return pending

    def _on_committed_rejection(self, group: Group, rule: str, detail: str) -> None:
        # the issuer observes committed rejections itself and releases quota
        self._cleanup_failed(group_digest(group))

    def _on_pruned(self, group: Group, rule: str, detail: str) -> None:
        # never committed, so the issuer must be told to release reservations
        digest = group_digest(group)
        if self._cleanup_failed(digest) is not None:
            self.issuer.release_for_group(digest, group)
