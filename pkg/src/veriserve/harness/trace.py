"""Canonical run traces: ordered JSON lines, a digest, and a first-diff tool.

Every record the runner emits is serialized as compact JSON with sorted keys,
so the byte stream — and therefore the trace digest — is a pure function of
the run.  Two runs agree iff their digests agree; when they do not,
:func:`diff_traces` points at the first differing line.
"""
from __future__ import annotations

import hashlib
import json


class TraceError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


def canonical_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True, separators=(",", ":"))


class TraceLog:
    def __init__(self):
        self.entries: list = []

    def append(self, tick: int, kind: str, **payload) -> dict:
        entry = {"seq": len(self.entries), "tick": tick, "kind": kind}
        entry.update(payload)
        self.entries.append(entry)
        return entry

    def digest(self) -> str:
        h = hashlib.sha256()
        for entry in self.entries:
            h.update(canonical_line(entry).encode())
            h.update(b"\n")
        return h.hexdigest()

    def lines(self) -> list:
        return [canonical_line(e) for e in self.entries]

    def write_jsonl(self, path: str) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                for line in self.lines():
                    fh.write(line + "\n")
        except OSError as exc:
            raise TraceError("io-error", str(exc)) from exc


def load_lines(path: str) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]
    except OSError as exc:
        raise TraceError("io-error", str(exc)) from exc


def diff_traces(path_a: str, path_b: str) -> dict | None:
    """Return None when the traces match, else the first divergence."""
    a, b = load_lines(path_a), load_lines(path_b)
    for i, (la, lb) in enumerate(zip(a, b)):
        if la != lb:
            return {"line": i, "a": la, "b": lb}
    if len(a) != len(b):
        i = min(len(a), len(b))
        return {
            "line": i,
            "a": a[i] if i < len(a) else "<end of trace>",
            "b": b[i] if i < len(b) else "<end of trace>",
        }
    return None
