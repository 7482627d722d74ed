"""Rule/exemplar memory banks with paired-utility evidence and UCB retirement.

A bank accumulates per-entry evidence (paired utility of interventions that
retrieved the entry, relative to the baseline answer) during the fit stage
only. An entry is retired when the Hoeffding upper confidence bound on its
mean utility drops below zero. Retirement is permanent: active -> retired,
never back, and never during the test stage.

On-disk formats:
  bank file       one json object per line: {id, bank_kind, payload,
                  embedding (fixed-width decimals), status}
  snapshot manifest  {"bank_kind": ..., "active_entry_ids": [...],
                      "content_hash": ...}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolViolation
from .util import format_float, sha256_hex

BANK_KINDS = ("rule", "exemplar")
STAGE_FIT = "fit"
STAGE_TEST = "test"

EMBED_PLACES = 8  # fixed-width decimals in bank files and content hashes


@dataclass
class EvidenceRecord:
    episode_id: int
    utility: float  # paired delta vs baseline, must lie in [-1, 1]
    iteration: int = 0


@dataclass
class MemoryEntry:
    id: str
    bank_kind: str
    payload: str
    embedding: np.ndarray
    status: str = "active"
    evidence: list[EvidenceRecord] = field(default_factory=list)

    @property
    def evidence_count(self) -> int:
        return len(self.evidence)

    @property
    def evidence_mean(self) -> float:
        if not self.evidence:
            raise ValueError(f"entry {self.id} has no evidence")
        return sum(r.utility for r in self.evidence) / len(self.evidence)


def hoeffding_ucb(mean: float, n: int, delta: float) -> float:
    """mean + sqrt(ln(2/delta) / (2 n)), the retirement test statistic.

    Valid for utility observations bounded in [-1, 1]; for a true mean >= 0
    the chance this falls below zero is at most delta.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return mean + math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def _hash_lines(entries) -> str:
    # Covers active ids, payloads, and embeddings only; evidence is excluded
    # on purpose so appending records never changes a frozen snapshot hash.
    lines = []
    for e in entries:
        vec = " ".join(format_float(x, EMBED_PLACES) for x in e.embedding)
        lines.append(f"{json.dumps(e.id)}\t{json.dumps(e.payload)}\t{vec}")
    return sha256_hex("\n".join(lines).encode("utf-8"))


@dataclass(frozen=True)
class BankSnapshot:
    """Immutable view of a bank's active entries, with a content hash."""

    bank_kind: str
    entry_ids: tuple[str, ...]
    payloads: tuple[str, ...]
    embeddings: np.ndarray  # (n_active, dim), row i belongs to entry_ids[i]
    content_hash: str

    @staticmethod
    def build(bank_kind: str, entries) -> "BankSnapshot":
        entries = sorted(entries, key=lambda e: e.id)
        ids = tuple(e.id for e in entries)
        payloads = tuple(e.payload for e in entries)
        if entries:
            emb = np.stack([np.asarray(e.embedding, np.float64) for e in entries])
        else:
            emb = np.zeros((0, 0))
        emb.setflags(write=False)
        return BankSnapshot(bank_kind, ids, payloads, emb, _hash_lines(entries))

    def index_of(self, entry_id: str) -> int:
        try:
            return self.entry_ids.index(entry_id)
        except ValueError:
            raise KeyError(f"entry {entry_id!r} not in snapshot") from None

    def manifest(self) -> dict:
        return {
            "bank_kind": self.bank_kind,
            "active_entry_ids": list(self.entry_ids),
            "content_hash": self.content_hash,
        }

    def with_payloads(self, payloads: tuple[str, ...]) -> "BankSnapshot":
        rows = [
            MemoryEntry(i, self.bank_kind, p, self.embeddings[k])
            for k, (i, p) in enumerate(zip(self.entry_ids, payloads))
        ]
        return BankSnapshot(
            self.bank_kind, self.entry_ids, payloads, self.embeddings, _hash_lines(rows)
        )


class MemoryBank:
    """Mutable (fit-stage) collection of entries of one kind."""

    def __init__(self, bank_kind: str, entries: list[MemoryEntry] | None = None):
        if bank_kind not in BANK_KINDS:
            raise ValueError(f"bank_kind must be one of {BANK_KINDS}, got {bank_kind!r}")
        self.bank_kind = bank_kind
        self.stage = STAGE_FIT
        self._entries: dict[str, MemoryEntry] = {}
        for e in entries or []:
            self.add_entry(e)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def entry(self, entry_id: str) -> MemoryEntry:
        try:
            return self._entries[entry_id]
        except KeyError:
            raise KeyError(f"unknown entry {entry_id!r}") from None

    def entries(self) -> list[MemoryEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def active_entries(self) -> list[MemoryEntry]:
        return [e for e in self.entries() if e.status == "active"]

    def add_entry(self, entry: MemoryEntry) -> None:
        self._check_fit_stage("add_entry")
        if entry.id in self._entries:
            raise ValueError(f"duplicate entry id {entry.id!r}")
        if entry.bank_kind != self.bank_kind:
            raise ValueError(
                f"entry {entry.id!r} is {entry.bank_kind!r}, bank is {self.bank_kind!r}"
            )
        if self._entries:
            dim = len(next(iter(self._entries.values())).embedding)
            if len(entry.embedding) != dim:
                raise ValueError(
                    f"embedding length {len(entry.embedding)} != bank dimension {dim}"
                )
        self._entries[entry.id] = entry

    def _check_fit_stage(self, op: str) -> None:
        if self.stage != STAGE_FIT:
            raise ProtocolViolation(
                f"{op} is a fit-stage operation; bank {self.bank_kind!r} is frozen for test"
            )

    def append_evidence(self, entry_id: str, record: EvidenceRecord) -> int:
        """Attach one paired-utility observation; returns the new count."""
        self._check_fit_stage("append_evidence")
        entry = self.entry(entry_id)
        if entry.status != "active":
            raise ValueError(f"entry {entry_id!r} is retired; evidence rejected")
        if not (-1.0 <= record.utility <= 1.0):
            raise ValueError(f"utility {record.utility} outside [-1, 1]")
        entry.evidence.append(record)
        return len(entry.evidence)

    def retirement_sweep(self, delta: float = 0.05) -> list[str]:
        """Retire every active entry whose UCB on mean utility is below zero.

        Entries with no evidence are never touched (UCB undefined at n=0).
        """
        self._check_fit_stage("retirement_sweep")
        retired = []
        for entry in self.active_entries():
            n = entry.evidence_count
            if n == 0:
                continue
            if hoeffding_ucb(entry.evidence_mean, n, delta) < 0.0:
                entry.status = "retired"
                retired.append(entry.id)
        return retired

    def freeze(self) -> BankSnapshot:
        return BankSnapshot.build(self.bank_kind, self.active_entries())

    # -- persistence --------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries():
                fh.write(
                    json.dumps(
                        {
                            "id": e.id,
                            "bank_kind": e.bank_kind,
                            "payload": e.payload,
                            "embedding": [format_float(x, EMBED_PLACES) for x in e.embedding],
                            "status": e.status,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @staticmethod
    def load(path: str) -> "MemoryBank":
        entries = []
        kind = None
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec["bank_kind"]
                entries.append(
                    MemoryEntry(
                        id=rec["id"],
                        bank_kind=rec["bank_kind"],
                        payload=rec["payload"],
                        embedding=np.array([float(x) for x in rec["embedding"]]),
                        status=rec.get("status", "active"),
                    )
                )
        if kind is None:
            raise ValueError(f"empty bank file: {path}")
        bank = MemoryBank(kind)
        for e in entries:
            # load() reconstructs retired entries too; bypass add-time status checks
            bank._entries[e.id] = e
        return bank


def save_snapshot_manifest(snapshot: BankSnapshot, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(snapshot.manifest(), fh, sort_keys=True, indent=2)
        fh.write("\n")
