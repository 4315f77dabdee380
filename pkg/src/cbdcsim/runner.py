"""Scenario execution: wires wallets, MSBs, validators, issuer, and the
regulator onto one deterministic simnet and drives the scripted operations.

Client calls (wallet to MSB, MSB to issuer) are in-process; everything
between MSBs, and from validators to the observers, rides the simulated
network. One run is a pure function of the scenario and its seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import consensus, crypto, policy
from .consensus import (
    Behavior,
    CommitAnnounce,
    DelayBehavior,
    EquivocateBehavior,
    SilentBehavior,
    ValidatorNode,
    ValidatorSet,
)
from .issuer import Issuer, claim_id_for
from .ledger import AppliedBlock, Block
from .msb import Msb, MsbError
from .regulator import Regulator
from .scenario import ScenarioConfig
from .simnet import NetConfig, Network
from .wallet import Wallet

logger = logging.getLogger(__name__)

_BEHAVIORS: dict[str, Callable[[int], Behavior]] = {
    "silent": lambda d: SilentBehavior(),
    "delay": lambda d: DelayBehavior(d),
    "equivocate": lambda d: EquivocateBehavior(),
}


class InvariantBreach(Exception):
    def __init__(self, invariant: str, detail: str = "") -> None:
        super().__init__(f"invariant breached: {invariant}" + (f" ({detail})" if detail else ""))
        self.invariant = invariant


@dataclass
class RunMetrics:
    final_tick: int = 0
    blocks: int = 0
    entries_applied: int = 0
    issues: int = 0
    redeems: int = 0
    exchanges: int = 0
    claims: int = 0
    rejected_groups: int = 0
    anomalies: int = 0
    replay_rejections: int = 0
    op_errors: int = 0
    wall_seconds: float = 0.0

    @property
    def token_transactions(self) -> int:
        return self.issues + self.redeems

    def throughput(self) -> float:
        return self.token_transactions / self.wall_seconds if self.wall_seconds > 0 else 0.0


class Runner:
    def __init__(self, cfg: ScenarioConfig, trace: Optional[Callable[[str], None]] = None) -> None:
        self.cfg = cfg
        self.metrics = RunMetrics()
        key_seed = cfg.effective_key_seed
        names = [f"msb-{i}" for i in range(cfg.validators)]
        self.names = names

        vote_keys = {n: crypto.generate_keypair(f"vote/{n}", key_seed, cfg.rsa_bits) for n in names}
        entry_keys = {n: crypto.generate_keypair(f"entry/{n}", key_seed, cfg.rsa_bits) for n in names}
        self.vset = ValidatorSet(
            tuple(names),
            {n: k.public() for n, k in vote_keys.items()},
            {n: k.public() for n, k in entry_keys.items()},
        )

        self.net = Network(
            NetConfig(
                seed=cfg.seed,
                delay_min=cfg.delay_min,
                delay_max=cfg.delay_max,
                drop_probability=cfg.drop_probability,
                partitions=list(cfg.partitions),
            ),
            trace=trace,
        )

        terms = cfg.terms_table
        registry = {claim_id_for(t): amount for t, amount in cfg.stimulus}
        self.registry = registry

        behaviors: dict[str, Behavior] = {}
        self.byzantine: set[str] = set()
        for spec in cfg.byzantine:
            name = f"msb-{spec.node}"
            behaviors[name] = _BEHAVIORS[spec.behavior](spec.delay)
            self.byzantine.add(name)

        self.issuer = Issuer(
            "issuer",
            self.vset,
            terms,
            cfg.ticks_per_vintage_period,
            key_seed,
            names,
            cfg.reserves_per_msb,
            cfg.max_exponent,
            cfg.rsa_bits,
            registry,
        )
        self.regulator = Regulator(
            "regulator", self.vset, terms, cfg.ticks_per_vintage_period, registry
        )

        self.validators: dict[str, ValidatorNode] = {}
        self.msbs: dict[str, Msb] = {}
        from .ledger import LedgerState

        for name in names:
            app = LedgerState(terms, cfg.ticks_per_vintage_period, registry, track_credits=False)
            node = ValidatorNode(
                name,
                self.vset,
                vote_keys[name],
                self.net,
                app,
                view_timeout=cfg.view_timeout,
                max_block_entries=cfg.max_block_entries,
                behavior=behaviors.get(name),
            )
            self.net.register(node)
            self.validators[name] = node
            node.commit_hooks.append(self._announce_hook(name))
            self.msbs[name] = Msb(
                name,
                node,
                self.issuer,
                entry_keys[name],
                terms,
                cfg.ticks_per_vintage_period,
                cfg.limits,
                cfg.max_exponent,
            )
        self.net.register(self.issuer)
        self.net.register(self.regulator)
        self.issuer.attach_network(self.net, "regulator")

        vks = self.issuer.verification_keys()
        self.wallets: dict[str, Wallet] = {}
        for wname in cfg.wallets:
            self.wallets[wname] = self._make_wallet(wname, vks)

        self.account_home: dict[str, str] = {}
        for spec in cfg.accounts:
            self._open_account(spec.id, spec.msb, spec.customer, spec.balance, spec.kyc, spec.merchant)
        for name in names:
            self.regulator.register_account(self.msbs[name].fee_account)

        self._schedule: dict[int, list[dict]] = {}
        for op in cfg.ops:
            self._schedule.setdefault(op["tick"], []).append(op)
        if cfg.workload:
            self._expand_workload(cfg.workload, vks)
        self._spent_proofs: dict[str, list] = {}
        self.treasury_rows: list[list[int]] = []
        self._issuer_version = -1

    # -- construction helpers ------------------------------------------------

    def _make_wallet(self, wname: str, vks) -> Wallet:
        rng = crypto.rng_stream(self.cfg.seed, f"wallet/{wname}/salt{self.cfg.wallet_salt}")
        return Wallet(wname, rng, vks)

    def _open_account(self, account_id: str, msb_index: int, customer: str, balance: int, kyc: bool, merchant: bool) -> None:
        name = f"msb-{msb_index % self.cfg.validators}"
        self.msbs[name].open_account(account_id, customer, kyc, balance, merchant)
        self.account_home[account_id] = name
        self.regulator.register_account(account_id, merchant)

    def _announce_hook(self, name: str):
        def hook(block: Block, cert, applied: AppliedBlock) -> None:
            announce = CommitAnnounce(block, cert)
            self.net.send(name, "issuer", announce)
            self.net.send(name, "regulator", announce)

        return hook

    def _expand_workload(self, wl: dict, vks) -> None:
        kind = wl.get("kind", "payment_cycle")
        if kind != "payment_cycle":
            raise ValueError(f"unknown workload kind {kind!r}")
        customers = wl.get("customers", 8)
        count = wl.get("count", 1000)
        exp = wl.get("amount_exponent", 4)
        start = wl.get("start_tick", 10)
        per_tick = wl.get("ops_per_tick", 20)
        lag = wl.get("spend_lag", 12)
        amount = 2**exp
        n = self.cfg.validators
        for m in range(n):
            self._open_account(f"wl-shop-{m}", m, f"merchant-{m}", 0, True, True)
        for c in range(customers):
            wname = f"wl-w-{c}"
            self.wallets[wname] = self._make_wallet(wname, vks)
            self._open_account(f"wl-acct-{c}", c % n, f"customer-{c}", amount * (count // customers + 1), True, False)
        for j in range(count):
            c = j % customers
            tick = start + j // per_tick
            self._schedule.setdefault(tick, []).append(
                {"op": "withdraw", "tick": tick, "wallet": f"wl-w-{c}", "account": f"wl-acct-{c}", "amount": amount}
            )
            spend_tick = tick + lag
            self._schedule.setdefault(spend_tick, []).append(
                {
                    "op": "spend",
                    "tick": spend_tick,
                    "wallet": f"wl-w-{c}",
                    "to": f"wl-shop-{j % n}",
                    "msb": j % n,
                    "amount": amount,
                    "purpose": "merchant",
                }
            )

    # -- op engine ----------------------------------------------------------------

    def inject(self, op: dict, tick: Optional[int] = None) -> None:
        when = tick if tick is not None else self.net.now + 1
        self._schedule.setdefault(when, []).append(op)

    def _wallet(self, name: str) -> Wallet:
        if name not in self.wallets:
            raise MsbError(f"unknown wallet {name}")
        return self.wallets[name]

    def _msb_for(self, op: dict) -> Msb:
        if "msb" in op:
            return self.msbs[f"msb-{op['msb'] % self.cfg.validators}"]
        if "account" in op:
            return self.msbs[self.account_home[op["account"]]]
        if "to" in op and op["to"] in self.account_home:
            return self.msbs[self.account_home[op["to"]]]
        return self.msbs[self.names[0]]

    def _latest(self, now: int) -> int:
        return policy.latest_vintage(now, self.cfg.ticks_per_vintage_period)

    def _execute(self, op: dict, now: int) -> None:
        kind = op["op"]
        if kind == "pay_account":
            self.msbs[self.account_home[op["to"]]].pay_account(op["to"], op["amount"])
        elif kind == "withdraw":
            self._op_withdraw(op, now)
        elif kind in ("spend", "deposit", "cash_out"):
            self._op_spend(op, now)
        elif kind == "mediate":
            self._op_mediate(op, now)
        elif kind == "cash_in":
            self._op_cash_in(op, now)
        elif kind == "claim_stimulus":
            self._op_claim(op, now)
        elif kind == "sweep":
            self._msb_for(op).vintage_exchange_sweep(now)
        elif kind == "swap":
            msb = self._msb_for(op)
            self.issuer.swap_reserves_for_quota(msb.name, op["amount"], self._latest(now), now)
        elif kind == "replay_spend":
            self._op_replay(op, now)
        else:
            raise ValueError(f"unknown op {kind!r}")

    def _op_withdraw(self, op: dict, now: int) -> None:
        wallet = self._wallet(op["wallet"])
        msb = self._msb_for(op)
        session, requests = wallet.prepare_withdrawal(op["amount"], self._latest(now), self.cfg.max_exponent)
        msb.withdraw(
            op["account"],
            op["amount"],
            requests,
            now,
            on_tokens=lambda sigs: wallet.finalize_withdrawal(session, sigs),
        )

    def _op_spend(self, op: dict, now: int) -> None:
        kind = op["op"]
        wallet = self._wallet(op["wallet"])
        msb = self._msb_for(op)
        purpose = {"spend": op.get("purpose", "merchant"), "deposit": "deposit", "cash_out": "cash_out"}[kind]
        amount = op["amount"]
        period = self._latest(now)
        tokens, credited, change = wallet.select_for_payment(amount, period, self.cfg.terms_table)
        if change > 0:
            self._change_split(wallet, msb, tokens, credited, amount, op, now)
            return
        proofs = wallet.proofs(tokens)
        wallet.mark_spent(tokens)
        self._spent_proofs.setdefault(wallet.name, []).extend(proofs)
        if purpose == "cash_out":
            msb.cash_exchange_out(proofs, now)
        else:
            msb.receive_spend(proofs, op.get("to"), purpose, now, skip_account_check=op.get("skip_account_check", False))

    def _change_split(self, wallet: Wallet, msb: Msb, tokens, credited: int, amount: int, op: dict, now: int) -> None:
        """No exact cover: mediate a self-transfer for exact denominations,
        then retry the payment once the fresh tokens land."""
        fee = self.cfg.limits.mediation_fee
        net_value = credited - fee
        if net_value < amount:
            raise MsbError(f"value {credited} after fee {fee} cannot cover {amount}")
        latest = self._latest(now)
        session_pay, req_pay = wallet.prepare_withdrawal(amount, latest, self.cfg.max_exponent)
        sessions = [(session_pay, len(req_pay))]
        requests = list(req_pay)
        if net_value - amount > 0:
            session_rest, req_rest = wallet.prepare_withdrawal(net_value - amount, latest, self.cfg.max_exponent)
            sessions.append((session_rest, len(req_rest)))
            requests.extend(req_rest)
        proofs = wallet.proofs(tokens)
        wallet.mark_spent(tokens)
        self._spent_proofs.setdefault(wallet.name, []).extend(proofs)

        def deliver(sigs: list[bytes]) -> None:
            offset = 0
            for session, count in sessions:
                wallet.finalize_withdrawal(session, sigs[offset : offset + count])
                offset += count
            self.inject(dict(op))  # retry; exact cover now exists

        msb.mediate_transfer(proofs, requests, now, on_recipient_tokens=deliver)

    def _op_mediate(self, op: dict, now: int) -> None:
        sender = self._wallet(op["wallet"])
        recipient = self._wallet(op["to_wallet"])
        msb = self._msb_for(op)
        amount = op["amount"]
        fee = self.cfg.limits.mediation_fee
        period = self._latest(now)
        tokens, credited, _ = sender.select_for_payment(amount + fee, period, self.cfg.terms_table)
        net_value = credited - fee
        session_b, req_b = recipient.prepare_withdrawal(amount, period, self.cfg.max_exponent)
        sessions = [(recipient, session_b, len(req_b))]
        requests = list(req_b)
        if net_value - amount > 0:
            session_a, req_a = sender.prepare_withdrawal(net_value - amount, period, self.cfg.max_exponent)
            sessions.append((sender, session_a, len(req_a)))
            requests.extend(req_a)
        proofs = sender.proofs(tokens)
        sender.mark_spent(tokens)
        self._spent_proofs.setdefault(sender.name, []).extend(proofs)

        def deliver(sigs: list[bytes]) -> None:
            offset = 0
            for w, session, count in sessions:
                w.finalize_withdrawal(session, sigs[offset : offset + count])
                offset += count

        msb.mediate_transfer(proofs, requests, now, on_recipient_tokens=deliver)

    def _op_cash_in(self, op: dict, now: int) -> None:
        wallet = self._wallet(op["wallet"])
        msb = self._msb_for(op)
        session, requests = wallet.prepare_withdrawal(op["amount"], self._latest(now), self.cfg.max_exponent)
        msb.cash_exchange_in(
            op["amount"],
            requests,
            now,
            on_tokens=lambda sigs: wallet.finalize_withdrawal(session, sigs),
            origin_record=op.get("origin"),
        )

    def _op_claim(self, op: dict, now: int) -> None:
        wallet = self._wallet(op["wallet"])
        msb = self._msb_for(op)
        claim_id = claim_id_for(op["taxpayer"])
        amount = self.issuer.registry[claim_id].amount
        session, requests = wallet.prepare_withdrawal(amount, self._latest(now), self.cfg.max_exponent)
        msb.claim_stimulus(
            claim_id,
            requests,
            now,
            on_tokens=lambda sigs: wallet.finalize_withdrawal(session, sigs),
            identity_ok=op.get("identity_ok", True),
        )

    def _op_replay(self, op: dict, now: int) -> None:
        proofs = self._spent_proofs.get(op["wallet"], [])
        if not proofs:
            raise MsbError("nothing spent yet to replay")
        index = op.get("index", 0) % len(proofs)
        msb = self._msb_for(op)
        purpose = op.get("purpose", "cash_out")
        try:
            if purpose == "cash_out":
                msb.cash_exchange_out([proofs[index]], now)
            else:
                msb.receive_spend([proofs[index]], op.get("to"), purpose, now)
        except MsbError:
            self.metrics.replay_rejections += 1
        else:
            raise InvariantBreach("double-spend-rejection", "replayed token was accepted")

    # -- main loop ---------------------------------------------------------------

    def step_tick(self) -> None:
        self.net.step()
        now = self.net.now
        for op in self._schedule.pop(now, []):
            try:
                self._execute(op, now)
            except MsbError as exc:
                if op.get("expect_reject"):
                    self.metrics.op_errors += 1
                    logger.debug("op %s rejected as scripted: %s", op["op"], exc)
                elif op["op"] == "replay_spend":
                    pass  # counted by _op_replay
                else:
                    self.metrics.op_errors += 1
                    logger.warning("op %s failed at tick %d: %s", op["op"], now, exc)
        self._sample_treasury(now)

    def _sample_treasury(self, tick: int) -> None:
        if self.issuer.version == self._issuer_version:
            return
        self._issuer_version = self.issuer.version
        from .core import face_value

        vintages = sorted(self.cfg.terms_table)
        quota = {v: 0 for v in vintages}
        for account in self.issuer.quota.values():
            for (vintage, exp), count in account.remaining.items():
                quota[vintage] += face_value(exp) * count
        mirror = self.issuer.mirror
        self.treasury_rows.append(
            [
                tick,
                self.issuer.swaps_in,
                self.issuer.swaps_out,
                self.issuer.stimulus_disbursed,
                mirror.tax_total,
                mirror.subsidy_total,
                mirror.outstanding_face(),
            ]
            + [quota[v] for v in vintages]
        )

    def honest_validators(self) -> list[ValidatorNode]:
        return [v for n, v in self.validators.items() if n not in self.byzantine]

    def quiescent(self) -> bool:
        honest = self.honest_validators()
        heights = {v.height for v in honest}
        if len(heights) != 1:
            return False
        height = heights.pop()
        if self.regulator.mirror.height != height or self.issuer.mirror.height != height:
            return False
        if any(v.pending for v in honest):
            return False
        if any(m.pending for m in self.msbs.values() if m.name not in self.byzantine):
            return False
        return not self._schedule

    def drain(self, budget: Optional[int] = None) -> None:
        budget = budget if budget is not None else 40 * self.cfg.view_timeout
        for _ in range(budget):
            if self.quiescent():
                # a couple of extra ticks so in-flight observer traffic lands
                self.step_tick()
                self.step_tick()
                if self.quiescent():
                    return
                continue
            self.step_tick()
        if not self.quiescent():
            logger.warning("drain budget exhausted before quiescence")

    def run(self, check_invariants: bool = True) -> RunMetrics:
        start = time.perf_counter()
        for _ in range(self.cfg.ticks):
            self.step_tick()
        self.drain()
        self.metrics.wall_seconds = time.perf_counter() - start
        self._collect_metrics()
        if check_invariants:
            self.check_invariants()
        return self.metrics

    def _collect_metrics(self) -> None:
        app = self.reference_app()
        m = self.metrics
        m.final_tick = self.net.now
        m.blocks = app.height
        for applied in app.blocks:
            m.rejected_groups += len(applied.rejected)
            for _, group in applied.applied:
                for entry in group.entries:
                    m.entries_applied += 1
                    bt = entry.body_type
                    if bt == "issue":
                        m.issues += 1
                    elif bt == "redeem":
                        m.redeems += 1
                    elif bt == "vintage_exchange":
                        m.exchanges += 1
                    else:
                        m.claims += 1
        m.anomalies = len(self.regulator.anomalies)

    def reference_validator(self) -> ValidatorNode:
        honest = self.honest_validators()
        return max(honest, key=lambda v: (v.height, -self.names.index(v.name)))

    def reference_app(self):
        return self.reference_validator().app

    def check_invariants(self) -> None:
        if not self.issuer.conserved():
            raise InvariantBreach("issuer-conservation", str(self.issuer.conservation_report()))
        if not self.issuer.treasury_reconciles():
            raise InvariantBreach("treasury-reconciliation")
        reference = self.reference_app()
        for v in self.honest_validators():
            n = v.app.height
            if v.app.state_hashes[: n + 1] != reference.state_hashes[: n + 1]:
                raise InvariantBreach("validator-divergence", v.name)
        n = self.regulator.mirror.height
        if self.regulator.mirror.state_hashes[: n + 1] != reference.state_hashes[: n + 1]:
            raise InvariantBreach("mirror-equivalence")


def run_scenario(cfg: ScenarioConfig, trace: Optional[Callable[[str], None]] = None) -> Runner:
    runner = Runner(cfg, trace=trace)
    runner.run()
    return runner
