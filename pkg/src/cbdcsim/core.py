"""Shared domain types: amounts, denominations, vintages, ledger entries,
and the canonical byte codec used for digests and audit export.

Money is always an int count of minor units. Token faces are powers of two
so that identically denominated tokens are indistinguishable on the ledger.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

BASE = 2
MAX_EXPONENT = 20

ISSUE_PURPOSES = ("withdrawal", "mediated_in", "stimulus", "cash_in")
REDEEM_PURPOSES = ("deposit", "merchant", "mediated_out", "cash_out", "vintage_exchange")

MODES = ("neutral", "decay", "reward", "special")

# horizon used for neutral vintages unless a scenario overrides it
NEUTRAL_HORIZON = 10**9


class CodecError(ValueError):
    """Raised when canonical bytes cannot be decoded."""


def face_value(exponent: int) -> int:
    """Face value in minor units of one token of the given denomination."""
    if exponent < 0:
        raise ValueError(f"negative denomination exponent {exponent}")
    return BASE**exponent


def check_amount(amount: int, what: str = "amount") -> int:
    if not isinstance(amount, int) or isinstance(amount, bool):
        raise TypeError(f"{what} must be an int of minor units, got {type(amount).__name__}")
    if amount < 0:
        raise ValueError(f"{what} must be non-negative, got {amount}")
    return amount


def decompose(amount: int, max_exponent: int = MAX_EXPONENT) -> list[int]:
    """Greedy binary decomposition of an amount into denomination exponents.

    Returns exponents in descending order; faces sum exactly to ``amount``.
    The top denomination repeats when the amount exceeds its face.
    """
    check_amount(amount)
    out: list[int] = []
    top = face_value(max_exponent)
    while amount >= top:
        out.append(max_exponent)
        amount -= top
    for exp in range(max_exponent - 1, -1, -1):
        if amount & (1 << exp):
            out.append(exp)
    return out


def counts_from_exponents(exponents: list[int]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for e in sorted(exponents):
        counts[e] = counts.get(e, 0) + 1
    return counts


def counts_face(counts: dict[int, int]) -> int:
    return sum(face_value(e) * c for e, c in counts.items())


@dataclass(frozen=True)
class VintageTerms:
    """Legal terms of one vintage, fixed at issuance.

    ``vintage`` is the period index T of issue. ``rate`` applies from period
    T+2 under decay/reward modes; ``horizon`` is n; special vintages carry a
    conversion ``penalty`` during the grace window.
    """

    vintage: int
    mode: str
    rate: Fraction = Fraction(0)
    horizon: int = NEUTRAL_HORIZON
    grace: int = 0
    penalty: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown vintage mode {self.mode!r}")
        if self.vintage < 0:
            raise ValueError("vintage period index must be non-negative")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 periods")
        if self.grace < 0:
            raise ValueError("grace must be non-negative")
        if not (0 <= self.rate < 1):
            raise ValueError("rate must lie in [0, 1)")
        if not (0 <= self.penalty < 1):
            raise ValueError("penalty must lie in [0, 1)")
        if self.mode in ("decay", "reward") and self.rate == 0:
            raise ValueError(f"{self.mode} vintage requires a positive rate")


@dataclass(frozen=True)
class IssueBatch:
    """New tokens entering circulation, counted per denomination exponent."""

    vintage: int
    counts: tuple[tuple[int, int], ...]  # (exponent, count), sorted by exponent
    purpose: str

    def __post_init__(self) -> None:
        if self.purpose not in ISSUE_PURPOSES:
            raise ValueError(f"bad issue purpose {self.purpose!r}")
        if not self.counts:
            raise ValueError("empty issue batch")
        prev = -1
        for exp, count in self.counts:
            if exp <= prev:
                raise ValueError("counts must be sorted by exponent, no duplicates")
            if count <= 0:
                raise ValueError("counts must be positive")
            prev = exp

    @property
    def face_total(self) -> int:
        return sum(face_value(e) * c for e, c in self.counts)


@dataclass(frozen=True)
class TokenSpend:
    nullifier: bytes
    exponent: int
    vintage: int

    def __post_init__(self) -> None:
        if len(self.nullifier) != 32:
            raise ValueError("nullifier must be 32 bytes")


@dataclass(frozen=True)
class RedeemBatch:
    """Tokens leaving circulation, identified only by their nullifiers."""

    spends: tuple[TokenSpend, ...]
    purpose: str
    destination: Optional[str] = None  # opaque account ref, absent for wallet-bound flows

    def __post_init__(self) -> None:
        if self.purpose not in REDEEM_PURPOSES:
            raise ValueError(f"bad redeem purpose {self.purpose!r}")
        if not self.spends:
            raise ValueError("empty redeem batch")
        nulls = {s.nullifier for s in self.spends}
        if len(nulls) != len(self.spends):
            raise ValueError("duplicate nullifier within one batch")

    @property
    def face_total(self) -> int:
        return sum(face_value(s.exponent) for s in self.spends)


@dataclass(frozen=True)
class VintageExchange:
    """Old-vintage redeemed value converted into latest-vintage quota."""

    old_vintage: int
    counts: tuple[tuple[int, int], ...]
    value_granted: int
    treasury_delta: int  # positive: tax to treasury; negative: subsidy paid out

    def __post_init__(self) -> None:
        if not self.counts:
            raise ValueError("empty vintage exchange")
        check_amount(self.value_granted, "value_granted")

    @property
    def face_total(self) -> int:
        return sum(face_value(e) * c for e, c in self.counts)


@dataclass(frozen=True)
class StimulusClaim:
    claim_id: bytes  # hash of a taxpayer identification number
    amount: int

    def __post_init__(self) -> None:
        if len(self.claim_id) != 32:
            raise ValueError("claim_id must be a 32-byte hash")
        check_amount(self.amount)


EntryBody = Union[IssueBatch, RedeemBatch, VintageExchange, StimulusClaim]

_BODY_TAGS: dict[type, int] = {IssueBatch: 1, RedeemBatch: 2, VintageExchange: 3, StimulusClaim: 4}
BODY_TYPE_NAMES: dict[type, str] = {
    IssueBatch: "issue",
    RedeemBatch: "redeem",
    VintageExchange: "vintage_exchange",
    StimulusClaim: "stimulus_claim",
}


@dataclass(frozen=True)
class LedgerEntry:
    """One committed ledger event, attributed to the MSB that submitted it.

    ``seq`` is the submitter's own monotone counter; it keeps otherwise
    identical operations (two equal withdrawals on one day) distinct on the
    ledger. ``height`` is the global applied sequence number; entries that
    were committed inside a block but rejected at application keep height
    None. No field here can resolve to a retail identity.
    """

    msb: str
    body: EntryBody
    signature: bytes
    height: Optional[int] = None
    seq: int = 0

    def with_height(self, height: Optional[int]) -> "LedgerEntry":
        return LedgerEntry(self.msb, self.body, self.signature, height, self.seq)

    @property
    def body_type(self) -> str:
        return BODY_TYPE_NAMES[type(self.body)]


@dataclass(frozen=True)
class Group:
    """Atomic application unit: all entries apply together or not at all.

    A mediated transfer is one group holding its RedeemBatch and IssueBatch.
    """

    entries: tuple[LedgerEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("empty group")


# --- canonical byte codec ------------------------------------------------
#
# Fixed-width big-endian integers, length-prefixed bytes/strings, bodies
# tagged by a single byte. The encoding is injective and decodable; digests
# are computed over these bytes, never over the JSON export form.


def _u8(v: int) -> bytes:
    return struct.pack(">B", v)


def _u32(v: int) -> bytes:
    return struct.pack(">I", v)


def _u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _i64(v: int) -> bytes:
    return struct.pack(">q", v)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def _text(s: str) -> bytes:
    return _blob(s.encode("utf-8"))


def _counts_bytes(counts: tuple[tuple[int, int], ...]) -> bytes:
    out = [_u32(len(counts))]
    for exp, count in counts:
        out.append(_u8(exp))
        out.append(_u32(count))
    return b"".join(out)


def body_bytes(body: EntryBody) -> bytes:
    tag = _BODY_TAGS[type(body)]
    if isinstance(body, IssueBatch):
        payload = _u64(body.vintage) + _counts_bytes(body.counts) + _text(body.purpose)
    elif isinstance(body, RedeemBatch):
        parts = [_u32(len(body.spends))]
        for s in body.spends:
            parts.append(s.nullifier + _u8(s.exponent) + _u64(s.vintage))
        dest = body.destination
        parts.append(_u8(1) + _text(dest) if dest is not None else _u8(0))
        payload = b"".join(parts) + _text(body.purpose)
    elif isinstance(body, VintageExchange):
        payload = (
            _u64(body.old_vintage)
            + _counts_bytes(body.counts)
            + _u64(body.value_granted)
            + _i64(body.treasury_delta)
        )
    elif isinstance(body, StimulusClaim):
        payload = body.claim_id + _u64(body.amount)
    else:  # pragma: no cover - exhaustive over EntryBody
        raise TypeError(f"unknown body type {type(body)!r}")
    return _u8(tag) + payload


def submission_bytes(entry: LedgerEntry) -> bytes:
    """Bytes covered by the MSB signature: attribution, sequence, body. The
    height is assigned after commit and stays outside the signature."""
    cached = getattr(entry, "_submission_bytes", None)
    if cached is None:
        cached = _text(entry.msb) + _u64(entry.seq) + body_bytes(entry.body)
        object.__setattr__(entry, "_submission_bytes", cached)
    return cached


def canonical_bytes(entry: LedgerEntry) -> bytes:
    """Full deterministic encoding of a ledger entry, height included."""
    if entry.height is None:
        head = _u8(0)
    else:
        head = _u8(1) + _u64(entry.height)
    return head + submission_bytes(entry) + _blob(entry.signature)


def group_bytes(group: Group) -> bytes:
    parts = [_u32(len(group.entries))]
    for entry in group.entries:
        parts.append(_blob(submission_bytes(entry) + _blob(entry.signature)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CodecError("truncated input")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_counts(r: _Reader) -> tuple[tuple[int, int], ...]:
    n = r.u32()
    return tuple((r.u8(), r.u32()) for _ in range(n))


def _read_body(r: _Reader) -> EntryBody:
    tag = r.u8()
    if tag == 1:
        vintage = r.u64()
        counts = _read_counts(r)
        return IssueBatch(vintage, counts, r.text())
    if tag == 2:
        n = r.u32()
        spends = tuple(TokenSpend(r.take(32), r.u8(), r.u64()) for _ in range(n))
        dest = r.text() if r.u8() else None
        return RedeemBatch(spends, r.text(), dest)
    if tag == 3:
        return VintageExchange(r.u64(), _read_counts(r), r.u64(), r.i64())
    if tag == 4:
        return StimulusClaim(r.take(32), r.u64())
    raise CodecError(f"unknown body tag {tag}")


def decode_entry(buf: bytes) -> LedgerEntry:
    r = _Reader(buf)
    try:
        height = r.u64() if r.u8() else None
        msb = r.text()
        seq = r.u64()
        body = _read_body(r)
        signature = r.blob()
    except (ValueError, struct.error) as exc:
        raise CodecError(str(exc)) from exc
    if not r.done():
        raise CodecError("trailing bytes after entry")
    return LedgerEntry(msb, body, signature, height, seq)


# --- JSON export form -----------------------------------------------------


def body_to_json(body: EntryBody) -> dict:
    if isinstance(body, IssueBatch):
        return {
            "vintage": body.vintage,
            "counts": {str(e): c for e, c in body.counts},
            "purpose": body.purpose,
        }
    if isinstance(body, RedeemBatch):
        return {
            "spends": [[s.nullifier.hex(), s.exponent, s.vintage] for s in body.spends],
            "purpose": body.purpose,
            "destination": body.destination,
        }
    if isinstance(body, VintageExchange):
        return {
            "old_vintage": body.old_vintage,
            "counts": {str(e): c for e, c in body.counts},
            "value_granted": body.value_granted,
            "treasury_delta": body.treasury_delta,
        }
    if isinstance(body, StimulusClaim):
        return {"claim_id": body.claim_id.hex(), "amount": body.amount}
    raise TypeError(f"unknown body type {type(body)!r}")


def _counts_from_json(obj: dict) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((int(e), int(c)) for e, c in obj.items()))


def body_from_json(body_type: str, obj: dict) -> EntryBody:
    if body_type == "issue":
        return IssueBatch(int(obj["vintage"]), _counts_from_json(obj["counts"]), obj["purpose"])
    if body_type == "redeem":
        spends = tuple(
            TokenSpend(bytes.fromhex(n), int(e), int(v)) for n, e, v in obj["spends"]
        )
        return RedeemBatch(spends, obj["purpose"], obj.get("destination"))
    if body_type == "vintage_exchange":
        return VintageExchange(
            int(obj["old_vintage"]),
            _counts_from_json(obj["counts"]),
            int(obj["value_granted"]),
            int(obj["treasury_delta"]),
        )
    if body_type == "stimulus_claim":
        return StimulusClaim(bytes.fromhex(obj["claim_id"]), int(obj["amount"]))
    raise CodecError(f"unknown body_type {body_type!r}")
