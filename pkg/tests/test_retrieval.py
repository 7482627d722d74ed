"""Retrieval: cosine ranking, frozen identities, edits, hit partition."""

import numpy as np
import pytest

from gatedmem.bank import BankSnapshot, MemoryEntry
from gatedmem.controller import EpisodeTrace, StepRecord
from gatedmem.retrieval import (
    ContentEdit,
    Query,
    RetrievalResult,
    apply_edits,
    embed_key,
    freeze_identities,
    load_edits,
    load_frozen_map,
    lookup_frozen,
    retrieve,
    save_edits,
    save_frozen_map,
    target_hit_partition,
)


def snap_from(vectors, kind="rule", prefix="R"):
    entries = [
        MemoryEntry(f"{prefix}{i:03d}", kind, f"payload {i}", np.asarray(v, float))
        for i, v in enumerate(vectors)
    ]
    return BankSnapshot.build(kind, entries)


def toy_snapshot():
    # hand-enumerable cosines against query (1, 0): 1.0, 0.8, 0.8, 0.6
    return snap_from([[1, 0], [0.8, 0.6], [0.8, 0.6], [0.6, 0.8]])


# ---------------------------------------------------------------------------
# retrieve
# ---------------------------------------------------------------------------

def test_self_similarity_first():
    snap = toy_snapshot()
    result = retrieve(Query(0, np.array([1.0, 0.0])), snap, threshold=0.6, k_max=4)
    assert result.retrieved_ids[0] == "R000"
    assert result.similarities[0] == pytest.approx(1.0)


def test_orthogonal_query_empty():
    snap = snap_from([[1, 0], [1, 0]])
    result = retrieve(Query(0, np.array([0.0, 1.0])), snap, threshold=0.6)
    assert result.retrieved_ids == ()


def test_topk_with_tie_broken_by_ascending_id():
    # 3 entries above threshold 0.7 (sims 1.0, 0.8, 0.8); tie at rank 2
    snap = toy_snapshot()
    result = retrieve(Query(0, np.array([1.0, 0.0])), snap, threshold=0.7, k_max=2)
    assert result.retrieved_ids == ("R000", "R001")
    assert result.similarities == pytest.approx((1.0, 0.8))


def test_threshold_is_strict():
    snap = snap_from([[0.6, 0.8]])
    result = retrieve(Query(0, np.array([1.0, 0.0])), snap, threshold=0.6, k_max=1)
    assert result.retrieved_ids == ()  # similarity exactly 0.6 is not > 0.6


def test_similarities_sorted_descending():
    snap = toy_snapshot()
    result = retrieve(Query(0, np.array([1.0, 0.0])), snap, threshold=0.5, k_max=4)
    assert list(result.similarities) == sorted(result.similarities, reverse=True)


def test_dimension_mismatch():
    snap = toy_snapshot()
    with pytest.raises(ValueError):
        retrieve(Query(0, np.array([1.0, 0.0, 0.0])), snap)


def test_retrieve_deterministic():
    snap = snap_from([embed_key(("e", i), 16, topic=i % 3) for i in range(9)])
    q = Query(5, embed_key("q", 16, topic=2))
    r1 = retrieve(q, snap, 0.5, 3)
    r2 = retrieve(q, snap, 0.5, 3)
    assert r1 == r2


def test_empty_snapshot():
    snap = BankSnapshot.build("rule", [])
    assert retrieve(Query(0, np.array([1.0])), snap).retrieved_ids == ()


# ---------------------------------------------------------------------------
# embedding stub
# ---------------------------------------------------------------------------

def test_embed_key_unit_norm_and_deterministic():
    v1 = embed_key("abc", 32, topic=3)
    v2 = embed_key("abc", 32, topic=3)
    assert np.allclose(v1, v2)
    assert np.linalg.norm(v1) == pytest.approx(1.0)


def test_embed_topic_structure():
    a = embed_key("x1", 64, topic=0)
    b = embed_key("x2", 64, topic=0)
    c = embed_key("x3", 64, topic=1)
    assert float(a @ b) > 0.6  # same topic: high cosine
    assert float(a @ c) < 0.6  # cross topic: low cosine


# ---------------------------------------------------------------------------
# freeze_identities
# ---------------------------------------------------------------------------

def _trace_with(qid_ids_pairs, episode_id=0):
    steps = []
    for i, (qid, ids) in enumerate(qid_ids_pairs):
        routed = ids is not None
        steps.append(
            StepRecord(
                step_index=i,
                example_id=qid,
                baseline_action="a",
                baseline_confidence=0.4,
                routed=routed,
                retrieved=RetrievalResult(qid, tuple(ids), ()) if routed else None,
                second_action="b" if routed else None,
                second_confidence=0.5 if routed else None,
                guard_results={},
                accepted=False,
                final_action="a",
                calls_used=2 if routed else 1,
            )
        )
    return EpisodeTrace.from_steps(episode_id, steps, 0.0)


def test_freeze_identities_routed_only():
    trace = _trace_with([(0, ("R001",)), (1, None), (2, ("R002", "R003"))])
    frozen = freeze_identities([trace])
    assert frozen == {0: ("R001",), 2: ("R002", "R003")}


def test_freeze_identities_conflict():
    t1 = _trace_with([(0, ("R001",))], episode_id=0)
    t2 = _trace_with([(0, ("R002",))], episode_id=1)
    with pytest.raises(ValueError):
        freeze_identities([t1, t2])


def test_lookup_frozen_missing_query():
    frozen = freeze_identities([_trace_with([(0, ("R001",))])])
    assert lookup_frozen(frozen, 0) == ("R001",)
    with pytest.raises(KeyError):
        lookup_frozen(frozen, 99)


def test_frozen_map_roundtrip(tmp_path):
    frozen = {3: ("R001", "R002"), 1: ("E000",)}
    path = tmp_path / "frozen.json"
    save_frozen_map(frozen, str(path))
    assert load_frozen_map(str(path)) == frozen


# ---------------------------------------------------------------------------
# apply_edits
# ---------------------------------------------------------------------------

def test_apply_edits_empty_is_identity():
    snap = toy_snapshot()
    assert apply_edits(snap, []).content_hash == snap.content_hash


def test_apply_edits_changes_hash_not_membership():
    snap = toy_snapshot()
    edited = apply_edits(snap, [ContentEdit("R001", "fixed text", "repair")])
    assert edited.content_hash != snap.content_hash
    assert edited.entry_ids == snap.entry_ids
    assert np.array_equal(edited.embeddings, snap.embeddings)
    assert edited.payloads[1] == "fixed text"


def test_apply_edits_four_entry_pattern():
    # repair and corrupt versions of the same 4 entries differ only there
    snap = snap_from([[1, 0]] * 8)
    targets = ["R001", "R003", "R004", "R007"]
    repair = apply_edits(snap, [ContentEdit(t, f"repair {t}", "repair") for t in targets])
    corrupt = apply_edits(snap, [ContentEdit(t, f"corrupt {t}", "corrupt") for t in targets])
    for i, eid in enumerate(snap.entry_ids):
        if eid in targets:
            assert repair.payloads[i] != corrupt.payloads[i]
        else:
            assert repair.payloads[i] == corrupt.payloads[i] == snap.payloads[i]


def test_apply_edits_unknown_entry():
    with pytest.raises(KeyError):
        apply_edits(toy_snapshot(), [ContentEdit("R999", "x", "repair")])


def test_edit_kind_validated():
    with pytest.raises(ValueError):
        ContentEdit("R000", "x", "delete")


def test_edits_file_roundtrip(tmp_path):
    edits = [ContentEdit("R001", "better", "repair"), ContentEdit("E002", "worse", "corrupt")]
    path = tmp_path / "edits.jsonl"
    save_edits(edits, str(path))
    assert load_edits(str(path)) == edits


# ---------------------------------------------------------------------------
# target_hit_partition
# ---------------------------------------------------------------------------

def test_partition_no_hits():
    frozen = {i: (f"R{i:03d}",) for i in range(5)}
    hit, non_hit = target_hit_partition(frozen, ["E000"])
    assert hit == [] and non_hit == [0, 1, 2, 3, 4]


def test_partition_all_hits():
    frozen = {i: ("E000", f"R{i:03d}") for i in range(4)}
    hit, non_hit = target_hit_partition(frozen, ["E000"])
    assert non_hit == [] and hit == [0, 1, 2, 3]


def test_partition_paper_scale_sizes():
    # 800 routed rows of which exactly 105 retrieve an edited entry
    edited = ["E003", "E023", "E042", "E058"]
    frozen = {}
    for q in range(800):
        if q < 105:
            frozen[q] = (edited[q % 4], "E900")
        else:
            frozen[q] = (f"E{100 + (q % 50):03d}",)
    hit, non_hit = target_hit_partition(frozen, edited)
    assert len(hit) == 105
    assert len(non_hit) == 695
    assert sorted(hit + non_hit) == list(range(800))
    assert set(hit) & set(non_hit) == set()


def test_partition_empty_map_errors():
    with pytest.raises(ValueError):
        target_hit_partition({}, ["E000"])
