"""Static analysis of TA images: CFG, command ids, dependencies, branch mix."""

from .cfg import ANALYSIS_INCOMPLETE, Block, Cfg, JumpTable, recover_cfg
from .commands import CommandId, CommandIdSet, arm_blocks, enumerate_command_ids
from .complexity import COMPLEX, SIMPLE, BranchComplexity, classify_branches
from .deps import (CONTEXT_MEMORY, DEVICE_FD, ContextField, DependencyGraph, analyze_dependencies,
                   analyze_device_dependencies, analyze_memory_dependencies)
from .report import Analysis, analyze, format_report
from .state_model import StateModel, build_state_model, format_state_model, parse_state_model

__all__ = ["ANALYSIS_INCOMPLETE", "Block", "Cfg", "JumpTable", "recover_cfg", "CommandId",
           "CommandIdSet", "arm_blocks", "enumerate_command_ids", "SIMPLE", "COMPLEX",
           "BranchComplexity", "classify_branches", "DEVICE_FD", "CONTEXT_MEMORY", "ContextField",
           "DependencyGraph", "analyze_dependencies", "analyze_device_dependencies",
           "analyze_memory_dependencies", "Analysis", "analyze", "format_report", "StateModel",
           "build_state_model", "format_state_model", "parse_state_model"]
