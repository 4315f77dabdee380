"""Ledger export and independent re-verification.

The export is line-oriented JSON: a genesis record, then per block a header
carrying the commit certificate followed by one self-describing line per
entry. Hashes are computed over canonical bytes, never over the JSON text,
so the verifier rebuilds every digest from decoded content.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

from . import policy
from .core import (
    Group,
    IssueBatch,
    LedgerEntry,
    RedeemBatch,
    VintageTerms,
    body_from_json,
    body_to_json,
    face_value,
)
from .consensus import CommitCertificate, ValidatorSet, verify_certificate, verify_entry
from .crypto import PublicKey, nullifier
from .ledger import Block, LedgerState

FORMAT = "cbdcsim-ledger-v1"


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- genesis ------------------------------------------------------------------


def genesis_record(runner) -> dict:
    cfg = runner.cfg
    terms = []
    for t in sorted(cfg.vintages, key=lambda t: t.vintage):
        terms.append(
            {
                "vintage": t.vintage,
                "mode": t.mode,
                "rate": str(t.rate),
                "horizon": t.horizon,
                "grace": t.grace,
                "penalty": str(t.penalty),
            }
        )
    token_keys: dict[str, dict[str, dict]] = {}
    for (vintage, exp), pk in sorted(runner.issuer.verification_keys().items()):
        token_keys.setdefault(str(vintage), {})[str(exp)] = pk.to_json()
    return {
        "format": FORMAT,
        "scenario": cfg.name,
        "seed": cfg.seed,
        "validators": list(runner.vset.names),
        "quorum": runner.vset.quorum,
        "vote_keys": {n: pk.to_json() for n, pk in runner.vset.vote_keys.items()},
        "entry_keys": {n: pk.to_json() for n, pk in runner.vset.entry_keys.items()},
        "token_keys": token_keys,
        "vintage_terms": terms,
        "ticks_per_vintage_period": cfg.ticks_per_vintage_period,
        "max_exponent": cfg.max_exponent,
        "stimulus": {cid.hex(): amount for cid, amount in sorted(runner.registry.items())},
        "limits": {
            "withdrawal_cap": cfg.limits.withdrawal_cap,
            "deposit_soft_cap": cfg.limits.deposit_soft_cap,
            "cash_origin_threshold": cfg.limits.cash_origin_threshold,
            "window_ticks": cfg.limits.window_ticks,
            "mediation_fee": cfg.limits.mediation_fee,
        },
    }


def _terms_from_genesis(g: dict) -> dict[int, VintageTerms]:
    table = {}
    for item in g["vintage_terms"]:
        t = VintageTerms(
            item["vintage"],
            item["mode"],
            Fraction(item["rate"]),
            item["horizon"],
            item["grace"],
            Fraction(item["penalty"]),
        )
        table[t.vintage] = t
    return table


# -- export ----------------------------------------------------------------------


def export_lines(runner) -> list[str]:
    genesis = genesis_record(runner)
    lines = [_dump({"type": "genesis", **genesis})]
    validator = runner.reference_validator()
    app = validator.app
    for (block, cert), applied in zip(validator.committed, app.blocks):
        commits = sorted((name, sig.hex()) for name, sig in cert.sigs)
        lines.append(
            _dump(
                {
                    "type": "block",
                    "height": block.height,
                    "view": cert.view,
                    "tick": block.tick,
                    "digest": block.digest().hex(),
                    "commits": [list(c) for c in commits],
                }
            )
        )
        heights: dict[int, tuple] = {atom: group for atom, group in applied.applied}
        for atom, group in enumerate(block.groups):
            placed = heights.get(atom)
            for i, entry in enumerate(group.entries):
                height = placed.entries[i].height if placed is not None else None
                lines.append(
                    _dump(
                        {
                            "type": "entry",
                            "height": height,
                            "block": block.height,
                            "atom": atom,
                            "applied": placed is not None,
                            "seq": entry.seq,
                            "msb": entry.msb,
                            "body_type": entry.body_type,
                            "body": body_to_json(entry.body),
                            "msb_signature_hex": entry.signature.hex(),
                        }
                    )
                )
    return lines


def write_artifacts(runner, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    genesis = genesis_record(runner)
    paths["genesis"] = out / "genesis.json"
    paths["genesis"].write_text(_dump(genesis) + "\n")

    paths["ledger"] = out / "ledger.jsonl"
    paths["ledger"].write_text("\n".join(export_lines(runner)) + "\n")

    paths["treasury"] = out / "treasury.csv"
    _write_treasury_csv(runner, paths["treasury"])

    paths["regulator"] = out / "regulator.csv"
    _write_regulator_csv(runner, paths["regulator"])

    m = runner.metrics
    paths["metrics"] = out / "metrics.json"
    paths["metrics"].write_text(
        json.dumps(
            {
                "final_tick": m.final_tick,
                "blocks": m.blocks,
                "entries_applied": m.entries_applied,
                "issues": m.issues,
                "redeems": m.redeems,
                "exchanges": m.exchanges,
                "claims": m.claims,
                "token_transactions": m.token_transactions,
                "rejected_groups": m.rejected_groups,
                "anomalies": m.anomalies,
                "op_errors": m.op_errors,
                # timing section: wall-clock values, excluded from determinism checks
                "wall_seconds": round(m.wall_seconds, 6),
                "throughput_tx_per_sec": round(m.throughput(), 3),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return paths


def _write_treasury_csv(runner, path: Path) -> None:
    vintages = sorted(runner.cfg.terms_table)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["tick", "reserves_in", "reserves_out", "stimulus_disbursed", "tax", "subsidy", "outstanding_face"]
            + [f"quota_v{v}" for v in vintages]
        )
        for row in runner.treasury_rows:
            writer.writerow(row)


def _write_regulator_csv(runner, path: Path) -> None:
    mirror = runner.regulator.mirror
    terms = mirror.terms
    vintages = sorted(terms)
    issued: dict[tuple[int, int], int] = {}
    redeemed: dict[tuple[int, int], int] = {}
    issued_face = 0
    redeemed_face = 0
    anomaly_heights = [a.height for a in runner.regulator.anomalies if a.height is not None]
    floating = sum(1 for a in runner.regulator.anomalies if a.height is None)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["height", "tick", "issued_face", "redeemed_face", "outstanding_face", "discounted_value", "anomalies"]
            + [f"outstanding_v{v}" for v in vintages]
        )
        for applied in mirror.blocks:
            block = applied.block
            for _, group in applied.applied:
                for entry in group.entries:
                    body = entry.body
                    if isinstance(body, IssueBatch):
                        for exp, count in body.counts:
                            issued[(body.vintage, exp)] = issued.get((body.vintage, exp), 0) + count
                            issued_face += face_value(exp) * count
                    elif isinstance(body, RedeemBatch):
                        for s in body.spends:
                            key = (s.vintage, s.exponent)
                            redeemed[key] = redeemed.get(key, 0) + 1
                            redeemed_face += face_value(s.exponent)
            period = mirror.period_of(block.tick)
            by_vintage = {v: 0 for v in vintages}
            discounted = Fraction(0)
            for (vintage, exp), count in issued.items():
                remaining = count - redeemed.get((vintage, exp), 0)
                face = face_value(exp) * remaining
                by_vintage[vintage] += face
                discounted += Fraction(face) * policy.value_of(terms[vintage], max(period, vintage))
            anom = floating + sum(1 for h in anomaly_heights if h <= block.height)
            writer.writerow(
                [
                    block.height,
                    block.tick,
                    issued_face,
                    redeemed_face,
                    issued_face - redeemed_face,
                    int(discounted),
                    anom,
                ]
                + [by_vintage[v] for v in vintages]
            )


# -- verification -------------------------------------------------------------------


@dataclass
class VerifyResult:
    ok: bool
    height: Optional[int] = None
    rule: Optional[str] = None
    detail: str = ""

    def message(self) -> str:
        if self.ok:
            return "ledger export verified"
        where = f" at height {self.height}" if self.height is not None else ""
        return f"verification failed{where}: rule {self.rule}: {self.detail}"


_RULE_ALIASES = {"nullifier-spent": "nullifier-unique"}


def verify_export(ledger_path: str | Path, genesis_path: str | Path) -> VerifyResult:
    try:
        genesis = json.loads(Path(genesis_path).read_text())
        lines = Path(ledger_path).read_text().splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        return VerifyResult(False, None, "format", str(exc))
    if not lines:
        return VerifyResult(False, None, "format", "empty ledger export")

    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        return VerifyResult(False, None, "format", f"genesis line: {exc}")
    if head.get("type") != "genesis" or {k: v for k, v in head.items() if k != "type"} != genesis:
        return VerifyResult(False, None, "genesis-mismatch", "ledger genesis differs from genesis.json")
    if genesis.get("format") != FORMAT:
        return VerifyResult(False, None, "format", f"unknown format {genesis.get('format')!r}")

    vset = ValidatorSet(
        tuple(genesis["validators"]),
        {n: PublicKey.from_json(k) for n, k in genesis["vote_keys"].items()},
        {n: PublicKey.from_json(k) for n, k in genesis["entry_keys"].items()},
    )
    terms = _terms_from_genesis(genesis)
    registry = {bytes.fromhex(cid): amount for cid, amount in genesis["stimulus"].items()}

    # parse blocks and their entries
    blocks: list[dict] = []
    try:
        for line in lines[1:]:
            obj = json.loads(line)
            if obj["type"] == "block":
                blocks.append({"header": obj, "atoms": {}})
            elif obj["type"] == "entry":
                if not blocks:
                    return VerifyResult(False, None, "format", "entry before any block header")
                entry = LedgerEntry(
                    obj["msb"],
                    body_from_json(obj["body_type"], obj["body"]),
                    bytes.fromhex(obj["msb_signature_hex"]),
                    obj["height"],
                    obj["seq"],
                )
                blocks[-1]["atoms"].setdefault(obj["atom"], []).append((entry, obj["applied"]))
            else:
                return VerifyResult(False, None, "format", f"unknown line type {obj['type']!r}")
    except (KeyError, ValueError) as exc:
        return VerifyResult(False, None, "format", f"malformed line: {exc}")

    # an upfront uniqueness scan so a duplicated redeem line names the right rule
    seen_nullifiers: set[str] = set()
    for b in blocks:
        for atoms in b["atoms"].values():
            for entry, applied in atoms:
                if applied and isinstance(entry.body, RedeemBatch):
                    for s in entry.body.spends:
                        hexn = s.nullifier.hex()
                        if hexn in seen_nullifiers:
                            return VerifyResult(
                                False, b["header"]["height"], "nullifier-unique", hexn
                            )
                        seen_nullifiers.add(hexn)

    state = LedgerState(terms, genesis["ticks_per_vintage_period"], registry)
    for index, b in enumerate(blocks):
        header = b["header"]
        height = header["height"]
        if height != index:
            return VerifyResult(False, height, "height-order", f"expected block height {index}")
        groups = []
        flags = []
        for atom in sorted(b["atoms"]):
            entries = [e for e, _ in b["atoms"][atom]]
            applied_flags = {a for _, a in b["atoms"][atom]}
            if len(applied_flags) != 1:
                return VerifyResult(False, height, "applied-flag", "mixed flags within one atom")
            groups.append(Group(tuple(e.with_height(None) for e in entries)))
            flags.append(applied_flags.pop())
        block = Block(height, header["tick"], tuple(groups))
        if block.digest().hex() != header["digest"]:
            return VerifyResult(False, height, "block-digest", "digest does not match content")
        cert = CommitCertificate(
            height,
            header["view"],
            bytes.fromhex(header["digest"]),
            tuple((name, bytes.fromhex(sig)) for name, sig in header["commits"]),
        )
        if not verify_certificate(cert, vset):
            return VerifyResult(False, height, "certificate", "missing or invalid commit quorum")
        for group in groups:
            for entry in group.entries:
                pk = vset.entry_keys.get(entry.msb)
                if pk is None or not verify_entry(pk, entry):
                    return VerifyResult(False, height, "entry-signature", f"entry by {entry.msb}")
        applied = state.apply_block(block)
        applied_atoms = {atom for atom, _ in applied.applied}
        for atom, flag in enumerate(flags):
            if flag != (atom in applied_atoms):
                rejection = next((r for r in applied.rejected if r.atom == atom), None)
                rule = _RULE_ALIASES.get(rejection.rule, rejection.rule) if rejection else "applied-flag"
                detail = rejection.detail if rejection else "replay disagrees with export flag"
                return VerifyResult(False, height, rule, detail)
        # exported heights must match replay order
        for atom, group in applied.applied:
            exported = [e.height for e, _ in b["atoms"][atom]]
            replayed = [e.height for e in group.entries]
            if exported != replayed:
                return VerifyResult(False, height, "entry-height", f"atom {atom}")
    return VerifyResult(True)
