"""Leader-based BFT replication among MSB validators.

Simplified PBFT over sequential single-slot instances: round-robin leader
per view, prepare and commit quorums of 2f+1, view changes carrying the
highest prepared certificate, and certificate-backed state sync so healed
or lagging nodes catch up from any peer. No checkpointing; logs are
desk-scale. Each node is a deterministic state machine driven entirely by
simnet deliveries and ticks.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import simnet
from .core import Group, IssueBatch, LedgerEntry, RedeemBatch, submission_bytes
from .crypto import KeyPair, PublicKey, sign, tagged_hash, verify
from .ledger import AppliedBlock, Block, LedgerState, group_digest

logger = logging.getLogger(__name__)

VOTE_TAG = "vote"
ENTRY_TAG = "entry"


def sign_entry(key: KeyPair, msb: str, body, seq: int = 0) -> bytes:
    return sign(key, ENTRY_TAG, submission_bytes(LedgerEntry(msb, body, b"", seq=seq)))


def verify_entry(pk: PublicKey, entry: LedgerEntry) -> bool:
    return verify(pk, ENTRY_TAG, submission_bytes(entry), entry.signature)


@dataclass(frozen=True)
class ValidatorSet:
    names: tuple[str, ...]
    vote_keys: dict[str, PublicKey]
    entry_keys: dict[str, PublicKey]

    def __post_init__(self) -> None:
        if len(self.names) < 4:
            raise ValueError("fault-tolerant operation needs at least 4 validators")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def leader(self, view: int) -> str:
        return self.names[view % self.n]


def _vote_payload(kind: str, view: int, height: int, digest: bytes) -> bytes:
    return kind.encode() + struct.pack(">QQ", view, height) + digest


@dataclass(frozen=True)
class PrePrepare:
    view: int
    height: int
    block: Block
    sender: str
    sig: bytes

    def payload(self) -> bytes:
        return _vote_payload("preprepare", self.view, self.height, self.block.digest())


@dataclass(frozen=True)
class Prepare:
    view: int
    height: int
    digest: bytes
    sender: str
    sig: bytes

    def payload(self) -> bytes:
        return _vote_payload("prepare", self.view, self.height, self.digest)


@dataclass(frozen=True)
class Commit:
    view: int
    height: int
    digest: bytes
    sender: str
    sig: bytes

    def payload(self) -> bytes:
        return _vote_payload("commit", self.view, self.height, self.digest)


@dataclass(frozen=True)
class PreparedCert:
    """Proof that a block reached a prepare quorum in some view."""

    view: int
    height: int
    digest: bytes
    block: Block
    sigs: tuple[tuple[str, bytes], ...]

    def verify(self, vset: ValidatorSet) -> bool:
        if self.block.digest() != self.digest:
            return False
        seen = set()
        ok = 0
        for sender, sig in self.sigs:
            if sender in seen or sender not in vset.vote_keys:
                continue
            seen.add(sender)
            payload = _vote_payload("prepare", self.view, self.height, self.digest)
            if verify(vset.vote_keys[sender], VOTE_TAG, payload, sig):
                ok += 1
        return ok >= vset.quorum


@dataclass(frozen=True)
class CommitCertificate:
    """2f+1 commit signatures; verifiable offline by any observer."""

    height: int
    view: int
    digest: bytes
    sigs: tuple[tuple[str, bytes], ...]


def verify_certificate(cert: CommitCertificate, vset: ValidatorSet) -> bool:
    seen = set()
    ok = 0
    for sender, sig in cert.sigs:
        if sender in seen or sender not in vset.vote_keys:
            continue
        seen.add(sender)
        payload = _vote_payload("commit", cert.view, cert.height, cert.digest)
        if verify(vset.vote_keys[sender], VOTE_TAG, payload, sig):
            ok += 1
    return ok >= vset.quorum


@dataclass(frozen=True)
class ViewChange:
    target_view: int
    height: int  # next height this node wants to commit
    prepared: Optional[PreparedCert]
    sender: str
    sig: bytes

    def payload(self) -> bytes:
        pd = self.prepared.digest if self.prepared else b""
        pv = self.prepared.view if self.prepared else 0
        return b"viewchange" + struct.pack(">QQQ", self.target_view, self.height, pv) + pd


@dataclass(frozen=True)
class NewView:
    view: int
    height: int
    viewchanges: tuple[ViewChange, ...]
    proposal: Optional[Block]
    sender: str
    sig: bytes

    def payload(self) -> bytes:
        vc_digest = tagged_hash("newview-vcs", *[vc.sig for vc in self.viewchanges])
        pd = self.proposal.digest() if self.proposal else b""
        return b"newview" + struct.pack(">QQ", self.view, self.height) + vc_digest + pd


@dataclass(frozen=True)
class Submission:
    group: Group


@dataclass(frozen=True)
class CommitAnnounce:
    """Committed block plus its certificate, broadcast to observers."""

    block: Block
    cert: CommitCertificate


@dataclass(frozen=True)
class SyncReq:
    from_height: int


@dataclass(frozen=True)
class SyncResp:
    blocks: tuple[tuple[Block, CommitCertificate], ...]
    view: int


class Behavior:
    """Deterministic fault script hooks; the default is honest behavior."""

    def on_propose(self, node: "ValidatorNode", block: Block) -> list[tuple[list[str], Block]]:
        return [(list(node.vset.names), block)]

    def filter_send(self, node: "ValidatorNode", dst: str, payload) -> Optional[int]:
        """Return extra delay in ticks, or None to drop the message."""
        return 0


class SilentBehavior(Behavior):
    def on_propose(self, node, block):
        return []

    def filter_send(self, node, dst, payload):
        return None


class DelayBehavior(Behavior):
    def __init__(self, delay: int) -> None:
        self.delay = delay

    def filter_send(self, node, dst, payload):
        return self.delay


class EquivocateBehavior(Behavior):
    """Leader sends conflicting proposals to the two halves of the network."""

    def on_propose(self, node, block):
        if len(block.groups) > 1:
            alt = Block(block.height, block.tick, tuple(reversed(block.groups)))
        else:
            alt = Block(block.height, block.tick + 1, block.groups)
        names = list(node.vset.names)
        half = len(names) // 2
        return [(names[:half], block), (names[half:], alt)]


class _Slot:
    """Vote bookkeeping for the in-flight (view, height) instance."""

    def __init__(self) -> None:
        self.proposal: Optional[Block] = None
        self.digest: bytes = b""
        self.prepares: dict[bytes, dict[str, bytes]] = {}
        self.prepare_voted: set[str] = set()
        self.commits: dict[bytes, dict[str, bytes]] = {}
        self.commit_voted: set[str] = set()
        self.sent_prepare = False
        self.sent_commit = False


CommitHook = Callable[[Block, CommitCertificate, AppliedBlock], None]


class ValidatorNode(simnet.Node):
    def __init__(
        self,
        name: str,
        vset: ValidatorSet,
        key: KeyPair,
        net: simnet.Network,
        app: LedgerState,
        view_timeout: int = 50,
        max_block_entries: int = 4096,
        behavior: Optional[Behavior] = None,
    ) -> None:
        self.name = name
        self.vset = vset
        self.key = key
        self.net = net
        self.app = app
        self.view_timeout = view_timeout
        self.max_block_entries = max_block_entries
        self.behavior = behavior or Behavior()
        self.refresh_interval = max(2, view_timeout // 2)

        self.view = 0
        self.announced_view = 0
        self.committed: list[tuple[Block, CommitCertificate]] = []
        self.slot = _Slot()
        self.locked: Optional[PreparedCert] = None
        self.pending: dict[bytes, tuple[Group, int]] = {}  # digest -> (group, added tick)
        self._validated: set[bytes] = set()  # group digests with checked entry signatures
        self.vc_pool: dict[int, dict[str, ViewChange]] = {}
        self.last_progress = 0
        self._last_sync = -10
        self.commit_hooks: list[CommitHook] = []
        self.rejection_hooks: list[Callable[[Group, str, str], None]] = []  # committed, rejected at application
        self.prune_hooks: list[Callable[[Group, str, str], None]] = []  # invalidated before ever committing
        self.anomalies = 0  # invalid signatures and malformed messages seen

    # -- identity helpers ---------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.committed)

    def is_leader(self, view: Optional[int] = None) -> bool:
        return self.vset.leader(self.view if view is None else view) == self.name

    def _sign_vote(self, payload: bytes) -> bytes:
        return sign(self.key, VOTE_TAG, payload)

    def _send(self, dst: str, payload) -> None:
        if dst == self.name:
            return
        extra = self.behavior.filter_send(self, dst, payload)
        if extra is None:
            return
        self.net.send(self.name, dst, payload, extra_delay=extra)

    def _broadcast(self, payload) -> None:
        for dst in self.vset.names:
            self._send(dst, payload)

    # -- submissions ----------------------------------------------------------

    def validate_group(self, group: Group) -> bool:
        digest = group_digest(group)
        if digest in self._validated:
            return True
        for entry in group.entries:
            pk = self.vset.entry_keys.get(entry.msb)
            if pk is None or not verify_entry(pk, entry):
                return False
        self._validated.add(digest)
        return True

    def submit(self, group: Group, now: int) -> bytes:
        """Accept a locally injected group and gossip it to the other validators."""
        digest = self._admit(group, now)
        if digest is not None:
            self._broadcast(Submission(group))
            return digest
        raise ValueError("group failed validation")

    def _admit(self, group: Group, now: int) -> Optional[bytes]:
        digest = group_digest(group)
        if digest in self.pending or digest in self.app.applied_groups:
            return digest
        if not self.validate_group(group):
            self.anomalies += 1
            return None
        self.pending[digest] = (group, now)
        return digest

    # -- proposing ------------------------------------------------------------

    def propose(self, now: int) -> None:
        """Assemble and broadcast a proposal. Leaders only."""
        if not self.is_leader():
            raise RuntimeError(f"{self.name} is not the leader of view {self.view}")
        if self.slot.proposal is not None:
            return
        if self.locked is not None and self.locked.height == self.height:
            block = self.locked.block
        else:
            groups = self._assemble(now)
            if not groups:
                return
            block = Block(self.height, now, tuple(groups))
        for dsts, variant in self.behavior.on_propose(self, block):
            msg = PrePrepare(
                self.view,
                self.height,
                variant,
                self.name,
                self._sign_vote(_vote_payload("preprepare", self.view, self.height, variant.digest())),
            )
            for dst in dsts:
                self._send(dst, msg)
        # an honest leader adopts its own proposal; equivocators follow the first
        self._accept_proposal(block, now)

    def _assemble(self, now: int) -> list[Group]:
        groups: list[Group] = []
        entries = 0
        stale: list[bytes] = []
        for digest, (group, _) in self.pending.items():
            if digest in self.app.applied_groups or self._conflicts_committed(group):
                stale.append(digest)
                continue
            count = len(group.entries)
            if entries + count > self.max_block_entries:
                break
            groups.append(group)
            entries += count
        for digest in stale:
            del self.pending[digest]
        return groups

    def _conflicts_committed(self, group: Group) -> bool:
        for entry in group.entries:
            if isinstance(entry.body, RedeemBatch):
                for s in entry.body.spends:
                    if s.nullifier in self.app.nullifiers:
                        return True
        return False

    # -- message handling -------------------------------------------------------

    def on_message(self, src: str, payload, now: int) -> None:
        if isinstance(payload, Submission):
            self._admit(payload.group, now)
            return
        if isinstance(payload, SyncReq):
            self._handle_sync_req(src, payload)
            return
        if isinstance(payload, SyncResp):
            self._handle_sync_resp(payload, now)
            return
        if isinstance(payload, (PrePrepare, Prepare, Commit, ViewChange, NewView)):
            if payload.sender not in self.vset.vote_keys or not verify(
                self.vset.vote_keys[payload.sender], VOTE_TAG, payload.payload(), payload.sig
            ):
                self.anomalies += 1
                return
            if isinstance(payload, PrePrepare):
                self._handle_preprepare(payload, now)
            elif isinstance(payload, Prepare):
                self._handle_prepare(payload, now)
            elif isinstance(payload, Commit):
                self._handle_commit(payload, now)
            elif isinstance(payload, ViewChange):
                self._handle_viewchange(payload, now)
            else:
                self._handle_newview(payload, now)

    def _behind(self, msg_height: int, src: str, now: int) -> bool:
        if msg_height > self.height:
            self._sync_request(src, now)
            return True
        return False

    def _defected(self) -> bool:
        # a node that announced a view change abandons its current view:
        # it must not lock or vote there, or its broadcast ViewChange would
        # misreport its prepared state and let commits fork across views
        return self.announced_view > self.view

    def _handle_preprepare(self, msg: PrePrepare, now: int) -> None:
        if self._behind(msg.height, msg.sender, now):
            return
        if msg.view != self.view or msg.height != self.height or self._defected():
            return
        if msg.sender != self.vset.leader(self.view):
            self.anomalies += 1
            return
        if self.slot.proposal is not None:
            return  # first proposal wins; an equivocating second is ignored
        block = msg.block
        if block.height != self.height or not block.groups:
            return
        if not all(self.validate_group(g) for g in block.groups):
            self.anomalies += 1
            return
        self._accept_proposal(block, now)

    def _accept_proposal(self, block: Block, now: int) -> None:
        self.slot.proposal = block
        self.slot.digest = block.digest()
        if not self.slot.sent_prepare:
            self.slot.sent_prepare = True
            payload = _vote_payload("prepare", self.view, self.height, self.slot.digest)
            sig = self._sign_vote(payload)
            self._record_prepare(self.name, self.slot.digest, sig)
            self._broadcast(Prepare(self.view, self.height, self.slot.digest, self.name, sig))
        self._check_quorums(now)

    def _record_prepare(self, sender: str, digest: bytes, sig: bytes) -> None:
        if sender in self.slot.prepare_voted:
            return
        self.slot.prepare_voted.add(sender)
        self.slot.prepares.setdefault(digest, {})[sender] = sig

    def _handle_prepare(self, msg: Prepare, now: int) -> None:
        if self._behind(msg.height, msg.sender, now):
            return
        if msg.view != self.view or msg.height != self.height or self._defected():
            return
        self._record_prepare(msg.sender, msg.digest, msg.sig)
        self._check_quorums(now)

    def _handle_commit(self, msg: Commit, now: int) -> None:
        if self._behind(msg.height, msg.sender, now):
            return
        if msg.view != self.view or msg.height != self.height or self._defected():
            return
        if msg.sender not in self.slot.commit_voted:
            self.slot.commit_voted.add(msg.sender)
            self.slot.commits.setdefault(msg.digest, {})[msg.sender] = msg.sig
        self._check_quorums(now)

    def _check_quorums(self, now: int) -> None:
        slot = self.slot
        if slot.proposal is None:
            return
        votes = slot.prepares.get(slot.digest, {})
        if not slot.sent_commit and len(votes) >= self.vset.quorum:
            slot.sent_commit = True
            self.locked = PreparedCert(
                self.view, self.height, slot.digest, slot.proposal, tuple(votes.items())
            )
            payload = _vote_payload("commit", self.view, self.height, slot.digest)
            sig = self._sign_vote(payload)
            if self.name not in slot.commit_voted:
                self.slot.commit_voted.add(self.name)
                slot.commits.setdefault(slot.digest, {})[self.name] = sig
            self._broadcast(Commit(self.view, self.height, slot.digest, self.name, sig))
        commit_votes = slot.commits.get(slot.digest, {})
        if len(commit_votes) >= self.vset.quorum:
            cert = CommitCertificate(self.height, self.view, slot.digest, tuple(commit_votes.items()))
            self._do_commit(slot.proposal, cert, now)

    def _do_commit(self, block: Block, cert: CommitCertificate, now: int) -> None:
        self.committed.append((block, cert))
        applied = self.app.apply_block(block)
        self._prune_pending(applied)
        self.slot = _Slot()
        self.locked = None
        self.last_progress = now
        self.announced_view = self.view
        for hook in self.commit_hooks:
            hook(block, cert, applied)

    def _prune_pending(self, applied: AppliedBlock) -> None:
        for rej in applied.rejected:
            group = applied.block.groups[rej.atom]
            for hook in self.rejection_hooks:
                hook(group, rej.rule, rej.detail)
        stale = [
            d
            for d, (group, _) in self.pending.items()
            if d in self.app.applied_groups or self._conflicts_committed(group)
        ]
        for d in stale:
            group, _ = self.pending.pop(d)
            if d not in self.app.applied_groups:
                for hook in self.prune_hooks:
                    hook(group, "nullifier-spent", "pending group invalidated by committed block")

    # -- view changes --------------------------------------------------------

    def _announce_viewchange(self, target: int, now: int) -> None:
        self.announced_view = target
        prepared = self.locked if self.locked and self.locked.height == self.height else None
        vc = ViewChange(target, self.height, prepared, self.name, b"")
        vc = ViewChange(target, self.height, prepared, self.name, self._sign_vote(vc.payload()))
        self.vc_pool.setdefault(target, {})[self.name] = vc
        self._broadcast(vc)
        self.last_progress = now
        self._maybe_newview(target, now)

    def _handle_viewchange(self, msg: ViewChange, now: int) -> None:
        if msg.target_view <= self.view:
            return
        if msg.height > self.height:
            self._sync_request(msg.sender, now)
        pool = self.vc_pool.setdefault(msg.target_view, {})
        pool.setdefault(msg.sender, msg)
        # join a view change once f+1 peers want it, even if our timer is quiet
        if len(pool) >= self.vset.f + 1 and self.announced_view < msg.target_view:
            self._announce_viewchange(msg.target_view, now)
        self._maybe_newview(msg.target_view, now)

    def _maybe_newview(self, target: int, now: int) -> None:
        if target <= self.view or self.vset.leader(target) != self.name:
            return
        pool = self.vc_pool.get(target, {})
        usable = [vc for vc in pool.values() if vc.height == self.height]
        if len(usable) < self.vset.quorum:
            return
        usable = usable[: self.vset.quorum]
        proposal = self._choose_proposal(usable, now)
        nv = NewView(target, self.height, tuple(usable), proposal, self.name, b"")
        nv = NewView(target, self.height, tuple(usable), proposal, self.name, self._sign_vote(nv.payload()))
        self._enter_view(target, now)
        self._broadcast(nv)
        if proposal is not None:
            self._accept_proposal(proposal, now)

    def _choose_proposal(self, vcs: list[ViewChange], now: int) -> Optional[Block]:
        best: Optional[PreparedCert] = None
        for vc in vcs:
            cert = vc.prepared
            if cert is None or cert.height != self.height:
                continue
            if not cert.verify(self.vset):
                continue
            if best is None or cert.view > best.view:
                best = cert
        if best is not None:
            self.locked = best
            return best.block
        groups = self._assemble(now)
        return Block(self.height, now, tuple(groups)) if groups else None

    def _enter_view(self, view: int, now: int) -> None:
        self.view = view
        self.announced_view = max(self.announced_view, view)
        self.slot = _Slot()
        self.last_progress = now
        self.vc_pool = {t: p for t, p in self.vc_pool.items() if t > view}

    def _handle_newview(self, msg: NewView, now: int) -> None:
        if msg.view <= self.view or msg.view < self.announced_view:
            return
        if msg.sender != self.vset.leader(msg.view):
            return
        valid: dict[str, ViewChange] = {}
        for vc in msg.viewchanges:
            if vc.target_view != msg.view or vc.sender in valid:
                continue
            if vc.sender not in self.vset.vote_keys:
                continue
            if verify(self.vset.vote_keys[vc.sender], VOTE_TAG, vc.payload(), vc.sig):
                valid[vc.sender] = vc
        if len(valid) < self.vset.quorum:
            self.anomalies += 1
            return
        if msg.height > self.height:
            self._sync_request(msg.sender, now)
            self._enter_view(msg.view, now)
            return
        if msg.height < self.height:
            self._enter_view(msg.view, now)
            return
        # the leader must re-propose the highest prepared block, if any
        best: Optional[PreparedCert] = None
        for vc in valid.values():
            cert = vc.prepared
            if cert is not None and cert.height == self.height and cert.verify(self.vset):
                if best is None or cert.view > best.view:
                    best = cert
        if best is not None:
            if msg.proposal is None or msg.proposal.digest() != best.digest:
                self.anomalies += 1
                return
        self._enter_view(msg.view, now)
        if msg.proposal is not None and msg.proposal.height == self.height and msg.proposal.groups:
            if all(self.validate_group(g) for g in msg.proposal.groups):
                self._accept_proposal(msg.proposal, now)

    # -- state sync -----------------------------------------------------------

    def _sync_request(self, dst: str, now: int) -> None:
        if now - self._last_sync < 2:
            return
        self._last_sync = now
        self._send(dst, SyncReq(self.height))

    def _handle_sync_req(self, src: str, msg: SyncReq) -> None:
        if msg.from_height >= self.height:
            return
        blocks = tuple(self.committed[msg.from_height : msg.from_height + 64])
        self._send(src, SyncResp(blocks, self.view))

    def _handle_sync_resp(self, msg: SyncResp, now: int) -> None:
        for block, cert in msg.blocks:
            if cert.height != self.height or block.digest() != cert.digest:
                continue
            if not verify_certificate(cert, self.vset):
                self.anomalies += 1
                return
            self._do_commit(block, cert, now)
        if msg.view > self.view:
            self._enter_view(msg.view, now)

    # -- clock ------------------------------------------------------------------

    def on_tick(self, now: int) -> None:
        # the view-change timer runs only while there is work to commit
        busy = bool(self.pending) or self.slot.proposal is not None or self.locked is not None
        if busy and now - self.last_progress >= self.view_timeout:
            self._announce_viewchange(max(self.view, self.announced_view) + 1, now)
        if self.is_leader() and self.slot.proposal is None and not self._defected():
            self.propose(now)
        if self.pending and now % self.refresh_interval == 0:
            leader = self.vset.leader(self.view)
            if leader != self.name:
                for digest, (group, added) in self.pending.items():
                    if now - added >= self.refresh_interval:
                        self._send(leader, Submission(group))
        # low-rate catch-up probe so a node that missed the last commits
        # (healed partition, dropped messages) converges even when quiet
        if now % (2 * self.view_timeout) == 0:
            peer = self.vset.names[(now // (2 * self.view_timeout)) % self.vset.n]
            if peer != self.name:
                self._send(peer, SyncReq(self.height))
