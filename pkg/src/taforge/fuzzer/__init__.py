"""Stateful coverage-guided fuzzing over prepared TA sessions."""

from .campaign import (Campaign, CampaignConfig, CampaignIOError, CampaignState, CaseResult,
                       CorpusEntry, Stats, campaign, parse_stats)
from .coverage import MAP_SIZE, CoverageBitmap, edge_hash, hit_class, update_coverage
from .harness import DIRECT_TRAP, MODES, REWRITTEN, RunResult, Session
from .inputs import (MAX_PAYLOAD, FuzzInput, InputFormatError, Request, decode_input, encode_input,
                     request)
from .mutate import Mutator, mutate
from .schedule import EPSILON, CommandCoverage, Scheduler, schedule
from .triage import CrashReport, StoredCrash, build_report, dedup_key, parse_crash, replay

__all__ = ["Campaign", "CampaignConfig", "CampaignIOError", "CampaignState", "CaseResult",
           "CorpusEntry", "Stats", "campaign", "parse_stats", "MAP_SIZE", "CoverageBitmap",
           "edge_hash", "hit_class", "update_coverage", "DIRECT_TRAP", "MODES", "REWRITTEN",
           "RunResult", "Session", "MAX_PAYLOAD", "FuzzInput", "InputFormatError", "Request",
           "decode_input", "encode_input", "request", "Mutator", "mutate", "EPSILON",
           "CommandCoverage", "Scheduler", "schedule", "CrashReport", "StoredCrash",
           "build_report", "dedup_key", "parse_crash", "replay"]
