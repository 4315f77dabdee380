"""Declarative scenario files: load, validate, and expose the bundled ones.

Scenarios are TOML with a versioned schema. Validation failures raise
``SchemaError`` carrying the offending field path so the CLI can print a
usable diagnostic and exit with the documented code.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import MAX_EXPONENT, VintageTerms
from .msb import LimitPolicy
from .simnet import Partition

SCHEMA_VERSION = 1

OP_KINDS = (
    "pay_account",
    "withdraw",
    "spend",
    "deposit",
    "mediate",
    "cash_in",
    "cash_out",
    "claim_stimulus",
    "sweep",
    "swap",
    "replay_spend",
)


class SchemaError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path
        self.detail = message


@dataclass
class AccountSpec:
    id: str
    msb: int
    customer: str
    balance: int = 0
    kyc: bool = True
    merchant: bool = False


@dataclass
class ByzantineSpec:
    node: int
    behavior: str  # equivocate | silent | delay
    delay: int = 5


@dataclass
class ScenarioConfig:
    name: str = "unnamed"
    seed: int = 1
    ticks: int = 500
    ticks_per_vintage_period: int = 1000
    delay_min: int = 1
    delay_max: int = 1
    drop_probability: float = 0.0
    partitions: list[Partition] = field(default_factory=list)
    validators: int = 5
    view_timeout: int = 50
    max_block_entries: int = 4096
    byzantine: list[ByzantineSpec] = field(default_factory=list)
    rsa_bits: int = 1024
    max_exponent: int = MAX_EXPONENT
    key_seed: int = 0  # 0 means: derive from the scenario seed
    wallet_salt: int = 0  # re-randomizes wallet serial streams only
    limits: LimitPolicy = field(default_factory=LimitPolicy)
    vintages: list[VintageTerms] = field(default_factory=list)
    reserves_per_msb: int = 10**9
    stimulus: list[tuple[str, int]] = field(default_factory=list)
    accounts: list[AccountSpec] = field(default_factory=list)
    wallets: list[str] = field(default_factory=list)
    ops: list[dict] = field(default_factory=list)
    workload: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.validators < 4:
            raise SchemaError("consensus.validators", "at least 4 validators are required")
        if not self.vintages:
            last = self.ticks // self.ticks_per_vintage_period
            self.vintages = [VintageTerms(v, "neutral") for v in range(last + 1)]
        self._check_vintage_cover()

    def _check_vintage_cover(self) -> None:
        declared = {t.vintage for t in self.vintages}
        last = self.ticks // self.ticks_per_vintage_period
        missing = [v for v in range(last + 1) if v not in declared]
        if missing:
            raise SchemaError(
                "vintages",
                f"run spans periods 0..{last} but periods {missing} have no declared terms",
            )

    @property
    def terms_table(self) -> dict[int, VintageTerms]:
        return {t.vintage: t for t in self.vintages}

    @property
    def effective_key_seed(self) -> int:
        return self.key_seed if self.key_seed else self.seed


def _expect(table: dict, path: str, key: str, kind, default=None, required: bool = False):
    if key not in table:
        if required:
            raise SchemaError(f"{path}.{key}", "required field is missing")
        return default
    value = table[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    if kind is int and isinstance(value, bool):
        raise SchemaError(f"{path}.{key}", "expected int, got bool")
    return value


def _fraction(table: dict, path: str, key: str, default: str = "0") -> Fraction:
    raw = table.get(key, default)
    if isinstance(raw, int):
        raw = str(raw)
    if not isinstance(raw, str):
        raise SchemaError(f"{path}.{key}", "rates are exact strings like \"0.05\" or \"1/20\"")
    try:
        return Fraction(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise SchemaError(f"{path}.{key}", f"not a rational: {exc}") from exc


def parse_scenario(data: dict[str, Any], name_hint: str = "unnamed") -> ScenarioConfig:
    version = _expect(data, "", "version", int, required=True)
    if version != SCHEMA_VERSION:
        raise SchemaError("version", f"unsupported schema version {version}")
    sim = _expect(data, "", "sim", dict, {})
    net = _expect(data, "", "net", dict, {})
    cons = _expect(data, "", "consensus", dict, {})
    cry = _expect(data, "", "crypto", dict, {})
    lim = _expect(data, "", "limits", dict, {})
    iss = _expect(data, "", "issuer", dict, {})

    partitions = []
    for i, item in enumerate(_expect(net, "net", "partitions", list, [])):
        path = f"net.partitions[{i}]"
        side_a = frozenset(f"msb-{n}" for n in _expect(item, path, "side_a", list, required=True))
        side_b = frozenset(f"msb-{n}" for n in _expect(item, path, "side_b", list, required=True))
        partitions.append(
            Partition(
                _expect(item, path, "start", int, required=True),
                _expect(item, path, "end", int, required=True),
                side_a,
                side_b,
            )
        )

    byzantine = []
    for i, item in enumerate(_expect(cons, "consensus", "byzantine", list, [])):
        path = f"consensus.byzantine[{i}]"
        behavior = _expect(item, path, "behavior", str, required=True)
        if behavior not in ("equivocate", "silent", "delay"):
            raise SchemaError(f"{path}.behavior", f"unknown behavior {behavior!r}")
        byzantine.append(
            ByzantineSpec(
                _expect(item, path, "node", int, required=True),
                behavior,
                _expect(item, path, "delay", int, 5),
            )
        )

    vintages = []
    for i, item in enumerate(_expect(data, "", "vintages", list, [])):
        path = f"vintages[{i}]"
        mode = _expect(item, path, "mode", str, "neutral")
        kwargs = dict(
            vintage=_expect(item, path, "period", int, required=True),
            mode=mode,
            rate=_fraction(item, path, "rate"),
            grace=_expect(item, path, "grace", int, 0),
            penalty=_fraction(item, path, "penalty"),
        )
        horizon = _expect(item, path, "horizon", int, None)
        if horizon is not None:
            kwargs["horizon"] = horizon
        try:
            vintages.append(VintageTerms(**kwargs))
        except ValueError as exc:
            raise SchemaError(path, str(exc)) from exc

    stimulus = []
    for i, item in enumerate(_expect(data, "", "stimulus", list, [])):
        path = f"stimulus[{i}]"
        stimulus.append(
            (
                _expect(item, path, "taxpayer", str, required=True),
                _expect(item, path, "amount", int, required=True),
            )
        )

    accounts = []
    for i, item in enumerate(_expect(data, "", "accounts", list, [])):
        path = f"accounts[{i}]"
        accounts.append(
            AccountSpec(
                id=_expect(item, path, "id", str, required=True),
                msb=_expect(item, path, "msb", int, required=True),
                customer=_expect(item, path, "customer", str, "anon"),
                balance=_expect(item, path, "balance", int, 0),
                kyc=_expect(item, path, "kyc", bool, True),
                merchant=_expect(item, path, "merchant", bool, False),
            )
        )

    wallets = []
    for i, item in enumerate(_expect(data, "", "wallets", list, [])):
        wallets.append(_expect(item, f"wallets[{i}]", "name", str, required=True))

    ops = []
    for i, item in enumerate(_expect(data, "", "ops", list, [])):
        path = f"ops[{i}]"
        kind = _expect(item, path, "op", str, required=True)
        if kind not in OP_KINDS:
            raise SchemaError(f"{path}.op", f"unknown op {kind!r}")
        _expect(item, path, "tick", int, required=True)
        ops.append(dict(item))

    limits = LimitPolicy(
        withdrawal_cap=_expect(lim, "limits", "withdrawal_cap", int, 10**9),
        deposit_soft_cap=_expect(lim, "limits", "deposit_soft_cap", int, 10**9),
        cash_origin_threshold=_expect(lim, "limits", "cash_origin_threshold", int, 10**9),
        window_ticks=_expect(lim, "limits", "window_ticks", int, 1000),
        mediation_fee=_expect(lim, "limits", "mediation_fee", int, 0),
    )

    try:
        return ScenarioConfig(
            name=_expect(data, "", "name", str, name_hint),
            seed=_expect(sim, "sim", "seed", int, 1),
            ticks=_expect(sim, "sim", "ticks", int, 500),
            ticks_per_vintage_period=_expect(sim, "sim", "ticks_per_vintage_period", int, 1000),
            delay_min=_expect(net, "net", "delay_min", int, 1),
            delay_max=_expect(net, "net", "delay_max", int, 1),
            drop_probability=_expect(net, "net", "drop_probability", float, 0.0),
            partitions=partitions,
            validators=_expect(cons, "consensus", "validators", int, 5),
            view_timeout=_expect(cons, "consensus", "view_timeout", int, 50),
            max_block_entries=_expect(cons, "consensus", "max_block_entries", int, 4096),
            byzantine=byzantine,
            rsa_bits=_expect(cry, "crypto", "rsa_bits", int, 1024),
            max_exponent=_expect(cry, "crypto", "max_exponent", int, MAX_EXPONENT),
            key_seed=_expect(cry, "crypto", "key_seed", int, 0),
            wallet_salt=_expect(sim, "sim", "wallet_salt", int, 0),
            limits=limits,
            vintages=vintages,
            reserves_per_msb=_expect(iss, "issuer", "reserves_per_msb", int, 10**9),
            stimulus=stimulus,
            accounts=accounts,
            wallets=wallets,
            ops=ops,
            workload=_expect(data, "", "workload", dict, None),
        )
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError("", str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(str(path), f"TOML parse error: {exc}") from exc
    return parse_scenario(data, name_hint=path.stem)


def bundled_scenario_names() -> list[str]:
    root = resources.files("cbdcsim") / "scenarios"
    return sorted(p.name[: -len(".toml")] for p in root.iterdir() if p.name.endswith(".toml"))


def load_bundled(name: str) -> ScenarioConfig:
    root = resources.files("cbdcsim") / "scenarios"
    blob = (root / f"{name}.toml").read_bytes()
    return parse_scenario(tomllib.loads(blob.decode("utf-8")), name_hint=name)
