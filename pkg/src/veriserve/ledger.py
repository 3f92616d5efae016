"""Simulated settlement ledger: accounts, contracts, events, and a logical clock.

The ledger is the single source of on-chain truth for the rest of the stack.
It is deliberately small: integer token accounts, a generic contract store
keyed by id, an append-only event log, and tick-driven expiry timers that fire
in a fixed order so every run replays identically.  Transfers are atomic and
conserve tokens exactly; contracts report the tokens they hold so the global
supply can be checked after every tick.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable


class LedgerError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass
class Account:
    balance: int
    pubkey: bytes | None = None


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    tick: int
    kind: str
    contract: str
    payload: dict


@dataclass(frozen=True)
class Transaction:
    """Generic posted transaction; ``kind`` selects a registered handler."""

    kind: str
    payload: dict


@dataclass(frozen=True)
class Receipt:
    ok: bool
    events: tuple


@dataclass
class _Timer:
    tick: int
    contract_id: str
    kind: str
    payload: dict
    order: int  # insertion order, tie-break after (tick, contract_id)


class Ledger:
    """Deterministic in-memory chain state with a logical tick clock."""

    def __init__(self):
        self.accounts: dict = {}
        self.contracts: dict = {}
        self.events: list = []
        self.clock: int = 0
        self._timers: list = []
        self._timer_order = 0
        self._expiry_handlers: dict = {}
        self._tx_handlers: dict = {}

    # --- accounts ---

    def create_account(self, account_id: str, balance: int = 0, pubkey: bytes | None = None) -> None:
        if account_id in self.accounts:
            raise LedgerError("duplicate-account", account_id)
        if balance < 0:
            raise LedgerError("invalid-transaction", "negative opening balance")
        self.accounts[account_id] = Account(balance=balance, pubkey=pubkey)

    def balance(self, account_id: str) -> int:
        acct = self.accounts.get(account_id)
        if acct is None:
            raise LedgerError("unknown-account", account_id)
        return acct.balance

    def pubkey_of(self, account_id: str) -> bytes | None:
        acct = self.accounts.get(account_id)
        if acct is None:
            raise LedgerError("unknown-account", account_id)
        return acct.pubkey

    def transfer(self, src: str, dst: str, amount: int) -> None:
        """Move tokens atomically; rejects overdrafts and negative amounts."""
        if amount < 0:
            raise LedgerError("invalid-transaction", "negative amount")
        a, b = self.accounts.get(src), self.accounts.get(dst)
        if a is None or b is None:
            raise LedgerError("unknown-account", src if a is None else dst)
        if a.balance < amount:
            raise LedgerError("invalid-transaction", f"{src} holds {a.balance} < {amount}")
        a.balance -= amount
        b.balance += amount

    def deposit_to_contract(self, src: str, contract_id: str, amount: int) -> None:
        """Debit an account into a contract's held funds (contract tracks them)."""
        if amount < 0:
            raise LedgerError("invalid-transaction", "negative amount")
        acct = self.accounts.get(src)
        if acct is None:
            raise LedgerError("unknown-account", src)
        if acct.balance < amount:
            raise LedgerError("invalid-transaction", f"{src} holds {acct.balance} < {amount}")
        acct.balance -= amount

    def release_from_contract(self, dst: str, amount: int) -> None:
        """Credit contract-held funds back to an account; caller adjusts the contract."""
        if amount < 0:
            raise LedgerError("invalid-transaction", "negative amount")
        acct = self.accounts.get(dst)
        if acct is None:
            raise LedgerError("unknown-account", dst)
        acct.balance += amount

    # --- events ---

    def emit(self, kind: str, contract: str, payload: dict) -> LedgerEvent:
        ev = LedgerEvent(seq=len(self.events), tick=self.clock, kind=kind, contract=contract, payload=payload)
        self.events.append(ev)
        return ev

    def read_events(self, kind: str | None = None, from_tick: int = 0, from_seq: int = 0) -> list:
        """Filtered view of the log; reading never mutates anything."""
        return [
            ev
            for ev in self.events
            if ev.seq >= from_seq and ev.tick >= from_tick and (kind is None or ev.kind == kind)
        ]

    # --- posted transactions ---

    def register_tx_handler(self, kind: str, handler: Callable) -> None:
        self._tx_handlers[kind] = handler

    def post(self, tx: Transaction) -> Receipt:
        """Apply one transaction atomically; unknown or bad ones change nothing."""
        before = len(self.events)
        if tx.kind == "transfer":
            try:
                self.transfer(tx.payload["src"], tx.payload["dst"], int(tx.payload["amount"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise LedgerError("invalid-transaction", str(exc)) from exc
            self.emit("transfer", "", dict(tx.payload))
            return Receipt(ok=True, events=tuple(self.events[before:]))
        handler = self._tx_handlers.get(tx.kind)
        if handler is None:
            raise LedgerError("invalid-transaction", f"unknown kind {tx.kind}")
        snapshot_accounts = {k: v.balance for k, v in self.accounts.items()}
        try:
            handler(self, tx.payload)
        except LedgerError:
            # restore balances so a failed post has no partial effect
            for k, bal in snapshot_accounts.items():
                self.accounts[k].balance = bal
            del self.events[before:]
            raise
        return Receipt(ok=True, events=tuple(self.events[before:]))

    # --- clock and expiries ---

    def register_expiry_handler(self, kind: str, handler: Callable) -> None:
        self._expiry_handlers[kind] = handler

    def schedule(self, at_tick: int, contract_id: str, kind: str, payload: dict | None = None) -> None:
        if at_tick <= self.clock:
            raise LedgerError("invalid-transaction", f"cannot schedule at past tick {at_tick}")
        self._timers.append(_Timer(at_tick, contract_id, kind, payload or {}, self._timer_order))
        self._timer_order += 1

    def advance(self, ticks: int) -> None:
        """Move the clock forward, firing due timers in ascending contract id order."""
        if ticks < 1:
            raise LedgerError("invalid-transaction", "advance requires ticks >= 1")
        for _ in range(ticks):
            self.clock += 1
            due = [t for t in self._timers if t.tick <= self.clock]
            self._timers = [t for t in self._timers if t.tick > self.clock]
            for timer in sorted(due, key=lambda t: (t.contract_id, t.order)):
                handler = self._expiry_handlers.get(timer.kind)
                if handler is not None:
                    handler(self, timer.contract_id, timer.payload)

    # --- conservation and snapshots ---

    def total_supply(self) -> int:
        total = sum(a.balance for a in self.accounts.values())
        for contract in self.contracts.values():
            held = getattr(contract, "held_tokens", None)
            if callable(held):
                total += held()
        return total

    def snapshot(self) -> str:
        """Canonical JSON of the full ledger state, for replay comparisons."""

        def default(obj):
            if isinstance(obj, bytes):
                return {"__bytes__": obj.hex()}
            if hasattr(obj, "__dataclass_fields__"):
                return {f: getattr(obj, f) for f in obj.__dataclass_fields__}
            if hasattr(obj, "value") and obj.__class__.__module__ != "builtins":
                return obj.value
            raise TypeError(f"not snapshotable: {type(obj)}")

        state = {
            "clock": self.clock,
            "accounts": {k: {"balance": v.balance, "pubkey": v.pubkey.hex() if v.pubkey else None}
                         for k, v in sorted(self.accounts.items())},
            "contracts": {k: self.contracts[k] for k in sorted(self.contracts)},
            "events": self.events,
            "timers": sorted(
                [
                    {"tick": t.tick, "contract": t.contract_id, "kind": t.kind, "payload": t.payload}
                    for t in self._timers
                ],
                key=lambda d: (d["tick"], d["contract"], d["kind"]),
            ),
        }
        return json.dumps(state, sort_keys=True, separators=(",", ":"), default=default)
