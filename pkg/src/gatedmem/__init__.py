"""Training-free applicability control for prompt memory, with a locked
fit/test evaluation harness over a deterministic synthetic task world."""

from .bank import BankSnapshot, EvidenceRecord, MemoryBank, MemoryEntry, hoeffding_ucb
from .controller import (
    EpisodeTrace,
    PolicyConfig,
    StepRecord,
    accept_decision,
    compose_bank_policy,
    oracle_policy,
    route_decision,
    run_episode,
    run_step,
    select_threshold_percentile,
)
from .errors import FreezeMismatch, ProtocolViolation, SignalUndefined
from .protocol import (
    CounterfactualRow,
    FreezeManifest,
    LedgerRow,
    ledger_check,
    run_counterfactual,
    run_fit_stage,
    run_governance_loop,
    run_test_stage,
    split_indices,
)
from .retrieval import (
    ContentEdit,
    Query,
    RetrievalResult,
    apply_edits,
    freeze_identities,
    retrieve,
    target_hit_partition,
)
from .stats import (
    CalibrationSet,
    PairedComparison,
    bootstrap_ci,
    calibration_metrics,
    mcnemar_exact,
    platt_fit,
    randomization_interaction_test,
    roc_auc,
)
from .worldsim import ConfidenceModel, World, WorldSpec, generate_world

__version__ = "0.1.0"
