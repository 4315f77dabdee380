"""Retail private wallet: serial generation, blinding, custody, payment
selection, and value display under vintage terms.

A wallet never appears on the ledger. Its serials and blinding factors
live only here; everything it shows an MSB at spend time is the token
proof (serial, denomination, vintage, issuer signature).
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from . import crypto, policy
from .core import VintageTerms, check_amount, decompose, face_value
from .crypto import BlindedRequest, PublicKey


class WalletError(Exception):
    pass


class InsufficientValue(WalletError):
    def __init__(self, due: int, available: int) -> None:
        super().__init__(f"need {due}, wallet holds {available}")
        self.shortfall = due - available


@dataclass(frozen=True)
class TokenSecret:
    """A bearer token at rest: the wallet-held secret plus issuer signature."""

    serial: bytes
    blinding: int
    exponent: int
    vintage: int
    signature: bytes


@dataclass(frozen=True)
class TokenProof:
    """What a wallet presents to an MSB when spending."""

    serial: bytes
    exponent: int
    vintage: int
    signature: bytes


@dataclass
class PendingWithdrawal:
    secrets: list[TokenSecret]  # signature empty until finalized
    finalized: bool = False


# exhaustive subset search is worth it below this token count
_EXACT_SEARCH_LIMIT = 14


class Wallet:
    def __init__(self, name: str, rng: random.Random, vks: dict[tuple[int, int], PublicKey]) -> None:
        self.name = name
        self.rng = rng
        self.vks = vks
        self.tokens: dict[bytes, TokenSecret] = {}
        self.sessions: dict[str, PendingWithdrawal] = {}

    # -- withdrawal ---------------------------------------------------------

    def prepare_withdrawal(self, amount: int, vintage: int, max_exponent: int = 20) -> tuple[str, list[BlindedRequest]]:
        """Fresh serials and blinded requests covering the amount."""
        check_amount(amount)
        if amount == 0:
            raise WalletError("withdrawal amount must be positive")
        session = self.rng.getrandbits(64).to_bytes(8, "big").hex()
        requests = []
        secrets = []
        for exp in decompose(amount, max_exponent):
            serial = self.rng.getrandbits(256).to_bytes(32, "big")
            pk = self.vks[(vintage, exp)]
            request, blinding = crypto.blind(serial, pk, vintage, exp, self.rng)
            requests.append(request)
            secrets.append(TokenSecret(serial, blinding, exp, vintage, b""))
        self.sessions[session] = PendingWithdrawal(secrets)
        return session, requests

    def finalize_withdrawal(self, session: str, blinded_signatures: list[bytes]) -> tuple[int, list[int]]:
        """Unblind, verify and store. Returns (stored count, failed indices)."""
        pending = self.sessions.get(session)
        if pending is None:
            raise WalletError("unknown withdrawal session")
        if pending.finalized:
            return 0, []
        if len(blinded_signatures) != len(pending.secrets):
            raise WalletError("signature count does not match the pending request")
        stored = 0
        failed: list[int] = []
        for i, (secret, blind_sig) in enumerate(zip(pending.secrets, blinded_signatures)):
            pk = self.vks[(secret.vintage, secret.exponent)]
            signature = crypto.unblind(blind_sig, secret.blinding, pk)
            if not crypto.verify_token(pk, secret.serial, signature):
                failed.append(i)  # signals MSB misbehavior; the token is unusable
                continue
            if secret.serial not in self.tokens:
                self.tokens[secret.serial] = TokenSecret(
                    secret.serial, secret.blinding, secret.exponent, secret.vintage, signature
                )
                stored += 1
        pending.finalized = True
        return stored, failed

    # -- custody ----------------------------------------------------------------

    def store_value(self, now_period: int, terms: dict[int, VintageTerms]) -> Fraction:
        total = Fraction(0)
        for t in self.tokens.values():
            total += Fraction(face_value(t.exponent)) * policy.value_of(terms[t.vintage], now_period)
        return total

    def balance(self, now_period: int, terms: dict[int, VintageTerms]) -> int:
        return int(self.store_value(now_period, terms))

    def expired_tokens(self, now_period: int, terms: dict[int, VintageTerms]) -> list[TokenSecret]:
        return [
            t
            for t in self.tokens.values()
            if policy.value_of(terms[t.vintage], now_period) == 0
        ]

    def proofs(self, tokens: list[TokenSecret]) -> list[TokenProof]:
        out = []
        for t in tokens:
            if t.serial not in self.tokens:
                raise WalletError("token already spent or unknown")
            out.append(TokenProof(t.serial, t.exponent, t.vintage, t.signature))
        return out

    def mark_spent(self, tokens: list[TokenSecret]) -> None:
        for t in tokens:
            if t.serial not in self.tokens:
                raise WalletError("token already spent or unknown")
        for t in tokens:
            del self.tokens[t.serial]

    def restore(self, tokens: list[TokenSecret]) -> None:
        """Put tokens back after a rejected spend; serials never duplicate."""
        for t in tokens:
            self.tokens.setdefault(t.serial, t)

    # -- payment selection ---------------------------------------------------------

    def select_for_payment(
        self, due: int, now_period: int, terms: dict[int, VintageTerms]
    ) -> tuple[list[TokenSecret], int, int]:
        """Choose tokens worth at least ``due`` at current vintage values.

        Oldest vintages spend first. Small stores get an exhaustive search
        for an exact (or minimal-overshoot) cover; larger ones fall back to
        greedy selection. Returns (tokens, credited value, change owed back),
        where change is settled by a mediated self-transfer.
        """
        check_amount(due, "amount due")
        candidates = [
            t
            for t in self.tokens.values()
            if policy.value_of(terms[t.vintage], now_period) > 0
        ]
        candidates.sort(key=lambda t: (t.vintage, -t.exponent))
        values = [
            Fraction(face_value(t.exponent)) * policy.value_of(terms[t.vintage], now_period)
            for t in candidates
        ]
        available = int(sum(values, Fraction(0)))
        if available < due:
            raise InsufficientValue(due, available)
        if due == 0:
            return [], 0, 0

        if len(candidates) <= _EXACT_SEARCH_LIMIT:
            chosen = self._exhaustive_pick(candidates, values, due)
        else:
            chosen = self._greedy_pick(values, due)
        credited = int(sum((values[i] for i in chosen), Fraction(0)))
        tokens = [candidates[i] for i in chosen]
        return tokens, credited, credited - due

    def _greedy_pick(self, values: list[Fraction], due: int) -> list[int]:
        chosen: list[int] = []
        total = Fraction(0)
        for i, v in enumerate(values):
            chosen.append(i)
            total += v
            if int(total) >= due:
                break
        return chosen

    def _exhaustive_pick(self, candidates: list[TokenSecret], values: list[Fraction], due: int) -> list[int]:
        best: Optional[tuple[int, int, tuple[int, ...]]] = None
        n = len(candidates)
        for size in range(1, n + 1):
            for combo in itertools.combinations(range(n), size):
                credited = int(sum((values[i] for i in combo), Fraction(0)))
                if credited < due:
                    continue
                key = (credited, size, combo)
                if best is None or key < best:
                    best = key
            if best is not None and best[0] == due and best[1] <= size:
                break  # exact cover found at minimal size
        assert best is not None  # guarded by the available >= due check
        return list(best[2])
