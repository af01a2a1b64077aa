"""flowcall: workflow orchestration driven by an LLM function-calling loop."""

from .registry import (
    FunctionDescriptor,
    Registry,
    TaskDefinition,
    derive_descriptors,
    load_manifest,
    load_manifest_file,
    validate_arguments,
)
from .engine import Engine, FutureTable
from .backend import LiveBackend, ScriptedBackend, load_script, load_script_file
from .conversation import estimate_tokens, new_conversation, run_instruction, step

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "FunctionDescriptor",
    "FutureTable",
    "LiveBackend",
    "Registry",
    "ScriptedBackend",
    "TaskDefinition",
    "derive_descriptors",
    "estimate_tokens",
    "load_manifest",
    "load_manifest_file",
    "load_script",
    "load_script_file",
    "new_conversation",
    "run_instruction",
    "step",
    "validate_arguments",
]
