"""Synthetic TA generator with ground-truth manifests."""

from .asm import COMPLEX, SIMPLE, Asm
from .fixtures import HDCP_IDS, guarded_overflow_spec, hdcp_spec, random_corpus, random_spec
from .gen import Generated, generate, generate_stubs
from .manifest import Manifest, format_manifest, parse_manifest
from .spec import (IF_ELSE_CHAIN, JUMP_TABLE, VULN_KINDS, Command, FieldDecl, Op, TaSpec,
                   format_spec, parse_spec, plant_vulnerability, validate)

__all__ = ["Asm", "SIMPLE", "COMPLEX", "HDCP_IDS", "hdcp_spec", "guarded_overflow_spec",
           "random_spec", "random_corpus", "Generated", "generate", "generate_stubs", "Manifest",
           "format_manifest", "parse_manifest", "IF_ELSE_CHAIN", "JUMP_TABLE", "VULN_KINDS",
           "Command", "FieldDecl", "Op", "TaSpec", "format_spec", "parse_spec",
           "plant_vulnerability", "validate"]
