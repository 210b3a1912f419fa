"""cem: contract evolution toolkit for microservice modules.

Modules carry type and function definitions identified by immutable keys;
services run them behind adapters that absorb renames, field additions, and
unused removals. This package provides the static compatibility preflight,
a deterministic simulator of the proxy handshake, and an analyzer that
classifies interface changes by how safely they deploy.
"""

__version__ = "0.1.0"

from .model import (
    Arrow,
    BaseType,
    CemError,
    Expr,
    INT,
    Module,
    RecordType,
    RecordVal,
    Service,
    Signature,
    STRING,
    System,
    Type,
    Value,
    consumer_keys,
    producer_keys,
    signature_of,
)
from .parser import parse_expr, parse_module, parse_modules, parse_system, render_module
from .wire import decode_value, encode_value, wire_bytes
from .typecheck import check_module, check_service, check_system, infer_thread_env, type_of_expr
from .compat import disconnected, module_compatibility_check, type_compatible, used_keys
from .adapt import convert, default_value, gen_proxies
from .runtime import (
    RoundRobin,
    SeededRandom,
    deploy,
    run_to_quiescence,
    start,
    step_expr,
    step_system,
    undeploy,
)
from .manager import Registry
from .analyzer import (
    ChangeKind,
    classify_deployment,
    diff_signatures,
    aggregate_log,
)

__all__ = [
    "Arrow",
    "BaseType",
    "CemError",
    "ChangeKind",
    "Expr",
    "INT",
    "Module",
    "RecordType",
    "RecordVal",
    "Registry",
    "RoundRobin",
    "SeededRandom",
    "Service",
    "Signature",
    "STRING",
    "System",
    "Type",
    "Value",
    "aggregate_log",
    "check_module",
    "check_service",
    "check_system",
    "classify_deployment",
    "consumer_keys",
    "convert",
    "decode_value",
    "default_value",
    "deploy",
    "diff_signatures",
    "disconnected",
    "encode_value",
    "gen_proxies",
    "infer_thread_env",
    "module_compatibility_check",
    "parse_expr",
    "parse_module",
    "parse_modules",
    "parse_system",
    "producer_keys",
    "render_module",
    "run_to_quiescence",
    "signature_of",
    "start",
    "step_expr",
    "step_system",
    "type_compatible",
    "type_of_expr",
    "undeploy",
    "used_keys",
    "wire_bytes",
]
