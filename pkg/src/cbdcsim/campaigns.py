"""Measurement harnesses: seeded consensus fault campaigns, the
unlinkability adversary game, and the sustained-throughput driver.

These back both the acceptance suite and the runnable scripts. Every
campaign is a pure function of its seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import gmpy2
from gmpy2 import mpz

from . import consensus, crypto, policy
from .consensus import (
    Behavior,
    CommitAnnounce,
    CommitCertificate,
    DelayBehavior,
    EquivocateBehavior,
    SilentBehavior,
    ValidatorNode,
    ValidatorSet,
    sign_entry,
)
from .core import Group, IssueBatch, LedgerEntry, RedeemBatch, TokenSpend, VintageTerms
from .crypto import rng_stream
from .ledger import Block, LedgerState
from .regulator import Regulator
from .simnet import NetConfig, Network, Partition

# one fixed key seed so identity keys are generated once and cached
CAMPAIGN_KEY_SEED = 0xC0FFEE
_NEUTRAL_TERMS = {0: VintageTerms(0, "neutral")}

_BEHAVIOR_CYCLE = ("equivocate", "silent", "delay")


def _make_behavior(kind: str, rng) -> Behavior:
    if kind == "equivocate":
        return EquivocateBehavior()
    if kind == "silent":
        return SilentBehavior()
    return DelayBehavior(rng.randint(3, 12))


@dataclass
class ConsensusHarness:
    """A consensus-only system: validators, synthetic signed batches, no banks."""

    n: int
    net: Network
    vset: ValidatorSet
    nodes: list[ValidatorNode]
    byzantine: set[str]
    entry_keys: dict
    seq: int = 0
    submitted: list[bytes] = field(default_factory=list)

    def submit_batch(self, node_index: int, now: int, exponent: int = 2) -> Optional[bytes]:
        """Inject one synthetic issue batch at a validator."""
        self.seq += 1
        name = self.vset.names[node_index]
        body = IssueBatch(0, ((exponent, 1),), "withdrawal")
        entry = LedgerEntry(name, body, sign_entry(self.entry_keys[name], name, body, self.seq), seq=self.seq)
        group = Group((entry,))
        try:
            digest = self.nodes[node_index].submit(group, now)
        except ValueError:
            return None
        self.submitted.append(digest)
        return digest

    def honest(self) -> list[ValidatorNode]:
        return [node for node in self.nodes if node.name not in self.byzantine]

    def safety_holds(self) -> bool:
        """No two honest nodes committed different digests at one height."""
        per_height: dict[int, set[bytes]] = {}
        for node in self.honest():
            for h, (block, _) in enumerate(node.committed):
                per_height.setdefault(h, set()).add(block.digest())
        return all(len(d) == 1 for d in per_height.values())

    def committed_digests(self) -> set[bytes]:
        out: set[bytes] = set()
        for node in self.honest():
            out.update(node.app.applied_groups)
        return out


def build_consensus_harness(
    seed: int,
    n: int,
    byzantine: dict[int, str],
    view_timeout: int = 30,
    delay: tuple[int, int] = (1, 2),
    drop: float = 0.0,
    partitions: Optional[list[Partition]] = None,
    rsa_bits: int = 512,
) -> ConsensusHarness:
    names = [f"msb-{i}" for i in range(n)]
    vote_keys = {m: crypto.generate_keypair(f"vote/{m}", CAMPAIGN_KEY_SEED, rsa_bits) for m in names}
    entry_keys = {m: crypto.generate_keypair(f"entry/{m}", CAMPAIGN_KEY_SEED, rsa_bits) for m in names}
    vset = ValidatorSet(
        tuple(names),
        {m: k.public() for m, k in vote_keys.items()},
        {m: k.public() for m, k in entry_keys.items()},
    )
    net = Network(
        NetConfig(
            seed=seed,
            delay_min=delay[0],
            delay_max=delay[1],
            drop_probability=drop,
            partitions=list(partitions or []),
        )
    )
    rng = rng_stream(seed, "campaign/behaviors")
    nodes = []
    byz_names = set()
    for i, name in enumerate(names):
        behavior = None
        if i in byzantine:
            behavior = _make_behavior(byzantine[i], rng)
            byz_names.add(name)
        node = ValidatorNode(
            name,
            vset,
            vote_keys[name],
            net,
            LedgerState(_NEUTRAL_TERMS, 10**9, track_credits=False),
            view_timeout=view_timeout,
            behavior=behavior,
        )
        net.register(node)
        nodes.append(node)
    return ConsensusHarness(n, net, vset, nodes, byz_names, entry_keys)


@dataclass
class CampaignResult:
    seed: int
    n: int
    safe: bool
    committed: int
    submitted: int
    all_committed: bool
    detail: str = ""


def safety_run(seed: int, n: Optional[int] = None, ticks: int = 260) -> CampaignResult:
    """One seeded adversarial run: f Byzantine nodes with scripted faults."""
    rng = rng_stream(seed, "campaign/safety")
    if n is None:
        n = (4, 5, 7)[seed % 3]
    f = (n - 1) // 3
    indices = rng.sample(range(n), f)
    byzantine = {
        idx: _BEHAVIOR_CYCLE[(seed + j) % len(_BEHAVIOR_CYCLE)] for j, idx in enumerate(indices)
    }
    harness = build_consensus_harness(
        seed, n, byzantine, view_timeout=25, delay=(1, 3), drop=0.02 if seed % 2 else 0.0
    )
    honest_indices = [i for i in range(n) if i not in byzantine]
    batches = rng.randint(4, 8)
    ticks_of_batches = sorted(rng.randint(2, ticks // 2) for _ in range(batches))
    queue = list(ticks_of_batches)
    for _ in range(ticks):
        harness.net.step()
        now = harness.net.now
        while queue and queue[0] <= now:
            queue.pop(0)
            harness.submit_batch(rng.choice(honest_indices), now)
    safe = harness.safety_holds()
    heights = [node.height for node in harness.honest()]
    committed = max(heights) if heights else 0
    return CampaignResult(seed, n, safe, committed, len(harness.submitted), False)


def liveness_run(seed: int, view_timeout: int = 30) -> CampaignResult:
    """Partition-then-heal: every batch pending at heal commits in bound time."""
    rng = rng_stream(seed, "campaign/liveness")
    n = 5
    heal = 200
    cut = rng.randint(1, 2)
    members = [f"msb-{i}" for i in range(n)]
    side_a = frozenset(rng.sample(members, cut))
    side_b = frozenset(m for m in members if m not in side_a)
    partition = Partition(60, heal, side_a, side_b)
    harness = build_consensus_harness(seed, n, {}, view_timeout=view_timeout, partitions=[partition])
    deadline = heal + 10 * view_timeout
    submit_ticks = sorted(rng.randint(5, heal - 10) for _ in range(6))
    queue = list(submit_ticks)
    for _ in range(deadline):
        harness.net.step()
        now = harness.net.now
        while queue and queue[0] <= now:
            queue.pop(0)
            harness.submit_batch(rng.randrange(n), now)
    # all submitted batches must be applied by every node within the bound
    done = True
    for node in harness.nodes:
        applied = node.app.applied_groups
        if any(d not in applied for d in harness.submitted):
            done = False
    return CampaignResult(
        seed, n, harness.safety_holds(), max(v.height for v in harness.nodes), len(harness.submitted), done
    )


# -- unlinkability game ------------------------------------------------------------


@dataclass
class TrialSystem:
    """One withdrawal/spend round with a real ledger and regulator mirror."""

    transcript: list[bytes]
    serials_in_spend_order: list[bytes]
    ledger: LedgerState
    regulator: Regulator
    modulus: int
    target_position: int  # where withdrawal 0's serial landed in the spend order


_VINTAGE = 0
_EXPONENT = 4


def _certify(block: Block, vote_keys: dict, vset: ValidatorSet, view: int = 0) -> CommitCertificate:
    digest = block.digest()
    sigs = []
    for name in vset.names[: vset.quorum]:
        payload = consensus._vote_payload("commit", view, block.height, digest)
        sigs.append((name, crypto.sign(vote_keys[name], consensus.VOTE_TAG, payload)))
    return CommitCertificate(block.height, view, digest, tuple(sigs))


def unlinkability_trial(trial_seed: int, k: int = 16, rsa_bits: int = 512) -> TrialSystem:
    """Issue k identical-looking tokens, spend them shuffled, keep all evidence."""
    from .issuer import Issuer

    names = [f"msb-{i}" for i in range(4)]
    vote_keys = {m: crypto.generate_keypair(f"vote/{m}", CAMPAIGN_KEY_SEED, rsa_bits) for m in names}
    entry_keys = {m: crypto.generate_keypair(f"entry/{m}", CAMPAIGN_KEY_SEED, rsa_bits) for m in names}
    vset = ValidatorSet(
        tuple(names),
        {m: k_.public() for m, k_ in vote_keys.items()},
        {m: k_.public() for m, k_ in entry_keys.items()},
    )
    terms = {_VINTAGE: VintageTerms(_VINTAGE, "neutral")}
    issuer = Issuer(
        "issuer", vset, terms, 10**9, CAMPAIGN_KEY_SEED, names, 10**9, _EXPONENT, rsa_bits
    )
    regulator = Regulator("regulator", vset, terms, 10**9)
    ledger = LedgerState(terms, 10**9)
    rng = rng_stream(trial_seed, "unlink/wallet")
    msb = names[0]
    issuer.swap_reserves_for_quota(msb, k * (2**_EXPONENT), _VINTAGE, 0)

    pk = issuer.verification_keys()[(_VINTAGE, _EXPONENT)]
    secrets = []
    groups = []
    seq = 0
    for i in range(k):
        serial = rng.getrandbits(256).to_bytes(32, "big")
        request, blinding = crypto.blind(serial, pk, _VINTAGE, _EXPONENT, rng)
        (blind_sig,) = issuer.sign_for(msb, [request])
        signature = crypto.unblind(blind_sig, blinding, pk)
        assert crypto.verify_token(pk, serial, signature)
        secrets.append(serial)
        seq += 1
        body = IssueBatch(_VINTAGE, ((_EXPONENT, 1),), "withdrawal")
        groups.append(
            Group((LedgerEntry(msb, body, sign_entry(entry_keys[msb], msb, body, seq), seq=seq),))
        )
    issue_block = Block(0, 1, tuple(groups))
    cert0 = _certify(issue_block, vote_keys, vset)
    ledger.apply_block(issue_block)
    regulator.ingest(CommitAnnounce(issue_block, cert0))

    order = list(range(k))
    rng.shuffle(order)
    spend_groups = []
    for j in order:
        seq += 1
        body = RedeemBatch(
            (TokenSpend(crypto.nullifier(secrets[j]), _EXPONENT, _VINTAGE),), "cash_out", None
        )
        spend_groups.append(
            Group((LedgerEntry(msb, body, sign_entry(entry_keys[msb], msb, body, seq), seq=seq),))
        )
    spend_block = Block(1, 2, tuple(spend_groups))
    cert1 = _certify(spend_block, vote_keys, vset)
    ledger.apply_block(spend_block)
    regulator.ingest(CommitAnnounce(spend_block, cert1))

    transcript = list(issuer.transcript[(_VINTAGE, _EXPONENT)])
    serials = [secrets[j] for j in order]
    return TrialSystem(transcript, serials, ledger, regulator, int(pk.n), order.index(0))


def correlation_adversary(trial: TrialSystem) -> int:
    """Best-effort content correlation between the signing transcript and the
    revealed spends; timing is stripped by construction.

    Scores every candidate serial against withdrawal 0's blinded message
    using modular ratio structure and shared-byte statistics, then picks the
    argmax. Blinding makes the transcript independent of the serials, so no
    scoring beats chance; this documents the strongest attempt.
    """
    n = mpz(trial.modulus)
    blinded = mpz(int.from_bytes(trial.transcript[0], "big"))
    best_j = 0
    best_score = None
    for j, serial in enumerate(trial.serials_in_spend_order):
        m = crypto._fdh(crypto.TOKEN_TAG, serial, n)
        try:
            ratio = (blinded * gmpy2.invert(m, n)) % n
        except ZeroDivisionError:
            ratio = mpz(0)
        ratio_bytes = int(ratio).to_bytes((trial.modulus.bit_length() + 7) // 8, "big")
        # overlap statistics between the blinded message and candidate artifacts
        null = crypto.nullifier(serial)
        score = (
            sum(a == b for a, b in zip(ratio_bytes, trial.transcript[0])),
            sum(a == b for a, b in zip(null, trial.transcript[0])),
            -int(gmpy2.hamdist(ratio, blinded)),
            -j,
        )
        if best_score is None or score > best_score:
            best_score = score
            best_j = j
    return best_j


def unlinkability_campaign(trials: int = 1000, k: int = 16, seed: int = 1, rsa_bits: int = 512) -> int:
    """Number of correct withdrawal-to-spend guesses across all trials."""
    correct = 0
    for t in range(trials):
        trial = unlinkability_trial(seed * 1_000_003 + t, k=k, rsa_bits=rsa_bits)
        if correlation_adversary(trial) == trial.target_position:
            correct += 1
    return correct


# -- sustained throughput ----------------------------------------------------------


@dataclass
class ThroughputResult:
    elapsed: float
    committed_tx: int
    ticks: int

    @property
    def tx_per_second(self) -> float:
        return self.committed_tx / self.elapsed if self.elapsed > 0 else 0.0


def throughput_run(
    min_seconds: float = 60.0,
    customers: int = 192,
    validators: int = 5,
    rsa_bits: int = 1024,
    seed: int = 2024,
) -> ThroughputResult:
    """Drive continuous withdraw/spend traffic through the full stack and
    measure committed issuances plus redemptions per wall-clock second."""
    from .runner import Runner
    from .scenario import AccountSpec, ScenarioConfig

    amount_exp = 4
    amount = 2**amount_exp
    accounts = [
        AccountSpec(f"c-{i}", i % validators, f"cust-{i}", 10**9) for i in range(customers)
    ]
    accounts += [AccountSpec(f"shop-{m}", m, f"merchant-{m}", 0, merchant=True) for m in range(validators)]
    cfg = ScenarioConfig(
        name="throughput",
        seed=seed,
        ticks=1,
        ticks_per_vintage_period=10**9,
        validators=validators,
        rsa_bits=rsa_bits,
        max_exponent=amount_exp,
        delay_min=1,
        delay_max=1,
        accounts=accounts,
        wallets=[f"w-{i}" for i in range(customers)],
    )
    runner = Runner(cfg)
    import gc

    old_thresholds = gc.get_threshold()
    gc.set_threshold(200_000, 100, 100)  # collections dominate tick cost otherwise
    start = time.perf_counter()
    idle: list[int] = list(range(customers))  # customers ready to withdraw
    spendable: list[int] = []
    elapsed = 0.0
    while elapsed < min_seconds:
        now = runner.net.now + 1
        for i in idle:
            runner.inject(
                {"op": "withdraw", "tick": now, "wallet": f"w-{i}", "account": f"c-{i}", "amount": amount},
                tick=now,
            )
        idle.clear()
        spent = []
        for i in spendable:
            wallet = runner.wallets[f"w-{i}"]
            if wallet.tokens:
                runner.inject(
                    {
                        "op": "spend",
                        "tick": now,
                        "wallet": f"w-{i}",
                        "to": f"shop-{i % validators}",
                        "msb": i % validators,
                        "amount": amount,
                        "purpose": "merchant",
                    },
                    tick=now,
                )
                spent.append(i)
                idle.append(i)
        spendable = [i for i in spendable if i not in spent]
        runner.step_tick()
        # customers whose withdrawal finalized can spend next tick
        for i in list(range(customers)):
            if i not in idle and i not in spendable and runner.wallets[f"w-{i}"].tokens:
                spendable.append(i)
        elapsed = time.perf_counter() - start
    runner.drain()
    elapsed = time.perf_counter() - start
    gc.set_threshold(*old_thresholds)
    runner._collect_metrics()
    return ThroughputResult(elapsed, runner.metrics.token_transactions, runner.net.now)
