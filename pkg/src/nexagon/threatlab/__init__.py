"""Threat scenarios, adversary models and mitigation ablations."""

from .adversaries import (
    LinkagePrediction,
    LinkageScore,
    TrackerPrediction,
    TrackerScore,
    linkage_adversary,
    score_linkage,
    score_tracker,
    sparse_tracker,
)
from .scenario import TOGGLES, AdversaryObservation, ScenarioConfig, ScenarioResult, generate_traces, run_scenario
from .suite import ATTACKS, MITIGATION_OF, SuiteReport, spoof_and_replay_suite
from .traces import MovementTrace, Road, read_traces, write_traces

__all__ = [
    "ATTACKS",
    "AdversaryObservation",
    "LinkagePrediction",
    "LinkageScore",
    "MITIGATION_OF",
    "MovementTrace",
    "Road",
    "ScenarioConfig",
    "ScenarioResult",
    "SuiteReport",
    "TOGGLES",
    "TrackerPrediction",
    "TrackerScore",
    "generate_traces",
    "linkage_adversary",
    "read_traces",
    "run_scenario",
    "score_linkage",
    "score_tracker",
    "sparse_tracker",
    "spoof_and_replay_suite",
    "write_traces",
]
