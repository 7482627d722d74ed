"""Deterministic similarity retrieval, frozen-identity replay, and content edits.

Retrieval is a pure function of (query, snapshot, threshold, k_max): cosine
similarity over the snapshot's active entries, strictly above the threshold,
sorted by descending similarity with ties broken by ascending entry id. The
tie-break makes replay exact.

Embeddings come from a hash-seeded stub: a per-key unit vector blended with a
per-topic unit vector, so similarity structure is scriptable (same topic =>
high cosine) without any learned model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bank import BankSnapshot
from .util import derive_seed

EDIT_KINDS = ("repair", "corrupt")


@dataclass(frozen=True)
class Query:
    id: int
    embedding: np.ndarray
    text: str | None = None


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    retrieved_ids: tuple[str, ...]
    similarities: tuple[float, ...]


@dataclass(frozen=True)
class ContentEdit:
    entry_id: str
    new_payload: str
    edit_kind: str  # repair | corrupt

    def __post_init__(self):
        if self.edit_kind not in EDIT_KINDS:
            raise ValueError(f"edit_kind must be one of {EDIT_KINDS}, got {self.edit_kind!r}")


def unit_vector(key, dim: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed("embed", key))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def embed_key(key, dim: int, topic: int | None = None, topic_weight: float = 0.9) -> np.ndarray:
    """Hash-seeded unit embedding with an optional shared topic component."""
    base = unit_vector(key, dim)
    if topic is None:
        return base
    tvec = unit_vector(("topic", topic), dim)
    v = (1.0 - topic_weight) * base + topic_weight * tvec
    return v / np.linalg.norm(v)


def retrieve(
    query: Query, snapshot: BankSnapshot, threshold: float = 0.6, k_max: int = 2
) -> RetrievalResult:
    """Up to k_max entries with cosine similarity strictly above threshold."""
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if len(snapshot.entry_ids) == 0:
        return RetrievalResult(query.id, (), ())
    q = np.asarray(query.embedding, np.float64)
    if q.shape[0] != snapshot.embeddings.shape[1]:
        raise ValueError(
            f"query dimension {q.shape[0]} != bank dimension {snapshot.embeddings.shape[1]}"
        )
    qn = np.linalg.norm(q)
    en = np.linalg.norm(snapshot.embeddings, axis=1)
    sims = snapshot.embeddings @ q / (en * qn)
    above = np.flatnonzero(sims > threshold)
    ranked = sorted(above, key=lambda i: (-sims[i], snapshot.entry_ids[i]))[:k_max]
    return RetrievalResult(
        query.id,
        tuple(snapshot.entry_ids[i] for i in ranked),
        tuple(float(sims[i]) for i in ranked),
    )


def freeze_identities(traces) -> dict[int, tuple[str, ...]]:
    """Map query_id -> retrieved_ids for every routed step of a completed run.

    Non-routed queries are absent. Duplicate query ids must agree.
    """
    frozen: dict[int, tuple[str, ...]] = {}
    for trace in traces:
        for step in trace.steps:
            if not step.routed or step.retrieved is None:
                continue
            qid = step.retrieved.query_id
            ids = tuple(step.retrieved.retrieved_ids)
            if qid in frozen and frozen[qid] != ids:
                raise ValueError(f"conflicting retrieved identities for query {qid}")
            frozen[qid] = ids
    return frozen


def lookup_frozen(frozen_map: dict[int, tuple[str, ...]], query_id: int) -> tuple[str, ...]:
    try:
        return frozen_map[query_id]
    except KeyError:
        raise KeyError(f"query {query_id} was not routed in the original run") from None


def apply_edits(snapshot: BankSnapshot, edits: list[ContentEdit]) -> BankSnapshot:
    """Replace payloads in place; membership, ids, and embeddings unchanged."""
    payloads = list(snapshot.payloads)
    for edit in edits:
        payloads[snapshot.index_of(edit.entry_id)] = edit.new_payload
    return snapshot.with_payloads(tuple(payloads))


def target_hit_partition(
    frozen_map: dict[int, tuple[str, ...]], edited_ids
) -> tuple[list[int], list[int]]:
    """Split routed queries by whether their frozen retrieved set hits an edit."""
    if not frozen_map:
        raise ValueError("frozen map is empty")
    edited = set(edited_ids)
    hit, non_hit = [], []
    for qid in sorted(frozen_map):
        (hit if edited.intersection(frozen_map[qid]) else non_hit).append(qid)
    return hit, non_hit


# -- file formats -----------------------------------------------------------

def save_frozen_map(frozen_map: dict[int, tuple[str, ...]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({str(k): list(v) for k, v in sorted(frozen_map.items())}, fh, indent=2)
        fh.write("\n")


def load_frozen_map(path: str) -> dict[int, tuple[str, ...]]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {int(k): tuple(v) for k, v in raw.items()}


def save_edits(edits: list[ContentEdit], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in edits:
            fh.write(
                json.dumps(
                    {"entry_id": e.entry_id, "edit_kind": e.edit_kind, "new_payload": e.new_payload},
                    sort_keys=True,
                )
                + "\n"
            )


def load_edits(path: str) -> list[ContentEdit]:
    edits = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            edits.append(ContentEdit(rec["entry_id"], rec["new_payload"], rec["edit_kind"]))
    return edits
