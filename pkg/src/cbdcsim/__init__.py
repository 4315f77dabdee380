"""Deterministic desk-scale simulator for an institutionally mediated
digital currency: a permissioned BFT token ledger with blind issuance,
vintage-based remuneration, regulated transaction flows, and an authority
observer."""

__version__ = "0.1.0"
