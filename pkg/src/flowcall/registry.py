"""Task manifests and the function-calling descriptors derived from them.

A manifest is a JSON document with a top-level ``tasks`` list. Each task
declares its input parameters, a shell command template with ``${param}``
placeholders, the outputs it produces (literal filenames or globs, each
under a role name), outcome checks, and optionally the upstream slots it
can be fed from when chained after other tasks.

From every task two function-calling descriptors are derived: a
``fcall_<task>_from_files`` variant whose arguments are paths to physical
files, and a ``fcall_<task>_from_futures`` variant whose arguments are the
IDs of already-scheduled futures. See docs/manifest.md for the full format.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

IDENTIFIER_RE = re.compile(r"^[a-z][a-z0-9_]*$")
PLACEHOLDER_RE = re.compile(r"\$\{([a-z][a-z0-9_]*)\}")
FUNCTION_NAME_RE = re.compile(r"^fcall_([a-z][a-z0-9_]*)_(from_files|from_futures)$")

PARAM_KINDS = ("file-path", "string-literal")
PREDICATE_KINDS = ("exit-code-zero", "output-exists", "glob-nonempty", "stderr-empty")
# Predicate kinds that point at a declared output role via `target`.
TARGETED_PREDICATES = ("output-exists", "glob-nonempty")

FROM_FILES = "from_files"
FROM_FUTURES = "from_futures"


class ManifestError(ValueError):
    """A manifest failed to parse or violated a task invariant."""


class ArgumentError(ValueError):
    """A raw argument payload does not satisfy a function descriptor."""


class UnknownFunctionError(KeyError):
    """A function name does not resolve to any registered descriptor."""

    def __str__(self) -> str:  # KeyError quotes its arg; keep the message plain
        return self.args[0] if self.args else ""


@dataclass(frozen=True)
class ParameterSpec:
    """One declared task input."""

    name: str
    description: str = ""
    kind: str = "file-path"


@dataclass(frozen=True)
class OutputSpec:
    """One declared task output: a literal filename or a glob, under a role."""

    role: str
    path: str | None = None
    glob: str | None = None


@dataclass(frozen=True)
class OutcomePredicate:
    """Declarative post-execution check evaluated against an execution record."""

    kind: str
    target: str | None = None

    def key(self) -> str:
        return f"{self.kind}:{self.target}" if self.target else self.kind


@dataclass(frozen=True)
class SlotWire:
    """Maps one upstream output role onto one of this task's file params."""

    output: str
    param: str


@dataclass(frozen=True)
class UpstreamSlot:
    """A named dependency slot accepting an upstream future ID."""

    slot: str
    description: str = ""
    wiring: tuple[SlotWire, ...] = ()


@dataclass(frozen=True)
class ResourceHints:
    memory_bytes: int = 0
    storage_bytes: int = 0
    server_class: str = ""


@dataclass(frozen=True)
class TaskDefinition:
    """A validated task entry from a manifest."""

    name: str
    description: str
    file_params: tuple[ParameterSpec, ...]
    command_template: str
    declared_outputs: tuple[OutputSpec, ...]
    outcome_checks: tuple[OutcomePredicate, ...] = ()
    upstream_slots: tuple[UpstreamSlot, ...] = ()
    futures_description: str = ""
    resource_hints: ResourceHints | None = None

    def param(self, name: str) -> ParameterSpec:
        for p in self.file_params:
            if p.name == name:
                return p
        raise KeyError(name)

    def output(self, role: str) -> OutputSpec:
        for o in self.declared_outputs:
            if o.role == role:
                return o
        raise KeyError(role)


@dataclass(frozen=True)
class FunctionDescriptor:
    """One advertised callable function, serializable to the wire schema."""

    name: str
    description: str
    properties: tuple[tuple[str, str], ...]  # (property name, description) pairs
    required: tuple[str, ...]

    def to_wire(self) -> dict:
        """Wire shape: name, description, parameters{type, properties, required}."""
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": {
                    prop: {"type": "string", "description": desc}
                    for prop, desc in self.properties
                },
                "required": list(self.required),
            },
        }

    def serialize(self) -> str:
        return json.dumps(self.to_wire(), separators=(", ", ": "))


def parse_function_name(name: str) -> tuple[str, str]:
    """Split a descriptor name into (task name, variant).

    The variant suffix is stripped greedily from the right, so task names
    themselves may contain ``_from`` segments.
    """
    m = FUNCTION_NAME_RE.match(name)
    if not m:
        raise UnknownFunctionError(f"not a recognized function name: {name!r}")
    return m.group(1), m.group(2)


def derive_descriptors(
    task: TaskDefinition, upstream_slots: list[str] | None = None
) -> tuple[FunctionDescriptor, FunctionDescriptor]:
    """Derive the (from_files, from_futures) descriptor pair for a task.

    ``upstream_slots`` defaults to the slots declared in the manifest; an
    explicit list overrides the slot set (descriptions are taken from the
    declared slots where names coincide).
    """
    declared = {s.slot: s.description for s in task.upstream_slots}
    if upstream_slots is None:
        slot_names = [s.slot for s in task.upstream_slots]
    else:
        slot_names = list(upstream_slots)
        if len(set(slot_names)) != len(slot_names):
            raise ValueError(f"duplicate upstream slot names: {slot_names}")

    from_files = FunctionDescriptor(
        name=f"fcall_{task.name}_{FROM_FILES}",
        description=task.description,
        properties=tuple((p.name, p.description) for p in task.file_params),
        required=tuple(p.name for p in task.file_params),
    )
    from_futures = FunctionDescriptor(
        name=f"fcall_{task.name}_{FROM_FUTURES}",
        description=task.futures_description or task.description,
        properties=tuple(
            (s, declared.get(s, f"Future id consumed by slot {s}")) for s in slot_names
        ),
        required=tuple(slot_names),
    )
    return from_files, from_futures


def validate_arguments(descriptor: FunctionDescriptor, raw_args: str) -> dict[str, str]:
    """Parse and check a raw argument payload against a descriptor.

    Returns the name-to-value binding, ordered as the descriptor declares
    its properties. Raises ArgumentError on a malformed payload, a missing
    required key, an unexpected key, or a non-string value.
    """
    try:
        payload = json.loads(raw_args)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"malformed argument payload: {exc}") from exc
    if not isinstance(payload, dict):
        raise ArgumentError(
            f"argument payload must be a JSON object, got {type(payload).__name__}"
        )
    for key in descriptor.required:
        if key not in payload:
            raise ArgumentError(f"missing required argument {key!r} for {descriptor.name}")
    known = {prop for prop, _ in descriptor.properties}
    for key in payload:
        if key not in known:
            raise ArgumentError(f"unexpected argument {key!r} for {descriptor.name}")
    for key, value in payload.items():
        if not isinstance(value, str):
            raise ArgumentError(
                f"argument {key!r} must be a string, got {type(value).__name__}"
            )
    return {prop: payload[prop] for prop, _ in descriptor.properties if prop in payload}


@dataclass(frozen=True)
class Registry:
    """Immutable set of validated tasks plus their derived descriptors."""

    name: str
    tasks: tuple[TaskDefinition, ...]
    _by_task: dict[str, TaskDefinition] = field(repr=False, default_factory=dict)
    _by_function: dict[str, FunctionDescriptor] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        by_task = {t.name: t for t in self.tasks}
        by_function: dict[str, FunctionDescriptor] = {}
        for t in self.tasks:
            for d in derive_descriptors(t):
                by_function[d.name] = d
        object.__setattr__(self, "_by_task", by_task)
        object.__setattr__(self, "_by_function", by_function)

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, name: str) -> TaskDefinition:
        try:
            return self._by_task[name]
        except KeyError:
            raise KeyError(f"unknown task: {name!r}") from None

    def descriptors(self) -> tuple[FunctionDescriptor, ...]:
        return tuple(self._by_function.values())

    def descriptor(self, function_name: str) -> FunctionDescriptor:
        try:
            return self._by_function[function_name]
        except KeyError:
            raise UnknownFunctionError(f"unknown function: {function_name!r}") from None

    def dispatch_target(self, function_name: str) -> tuple[TaskDefinition, str]:
        """Resolve a function name to (task, variant); variant is the suffix."""
        self.descriptor(function_name)  # raises for unregistered names
        task_name, variant = parse_function_name(function_name)
        return self.task(task_name), variant


def _require(condition: bool, message: str):
    if not condition:
        raise ManifestError(message)


def _get_str(obj: dict, key: str, ctx: str, default: str | None = None) -> str:
    if key not in obj:
        if default is not None:
            return default
        raise ManifestError(f"{ctx}: missing required field {key!r}")
    value = obj[key]
    _require(isinstance(value, str), f"{ctx}: field {key!r} must be a string")
    return value


def _parse_task(obj: dict) -> TaskDefinition:
    _require(isinstance(obj, dict), "task entries must be objects")
    name = _get_str(obj, "name", "task")
    ctx = f"task {name!r}"
    _require(bool(IDENTIFIER_RE.match(name)), f"{ctx}: name must match [a-z][a-z0-9_]*")
    description = _get_str(obj, "description", ctx, default="")
    futures_description = _get_str(obj, "futures_description", ctx, default="")
    command = _get_str(obj, "command", ctx)

    params: list[ParameterSpec] = []
    for p in obj.get("params", []):
        _require(isinstance(p, dict), f"{ctx}: params entries must be objects")
        pname = _get_str(p, "name", f"{ctx} param")
        pctx = f"{ctx} param {pname!r}"
        _require(bool(IDENTIFIER_RE.match(pname)), f"{pctx}: invalid identifier")
        kind = _get_str(p, "kind", pctx, default="file-path")
        _require(kind in PARAM_KINDS, f"{pctx}: kind must be one of {PARAM_KINDS}")
        _require(
            pname not in {q.name for q in params}, f"{ctx}: duplicate param {pname!r}"
        )
        params.append(ParameterSpec(pname, _get_str(p, "description", pctx, default=""), kind))

    param_names = {p.name for p in params}
    for placeholder in PLACEHOLDER_RE.findall(command):
        _require(
            placeholder in param_names,
            f"{ctx}: command references undeclared placeholder ${{{placeholder}}}",
        )

    outputs: list[OutputSpec] = []
    for o in obj.get("outputs", []):
        _require(isinstance(o, dict), f"{ctx}: outputs entries must be objects")
        role = _get_str(o, "role", f"{ctx} output")
        octx = f"{ctx} output {role!r}"
        _require(bool(IDENTIFIER_RE.match(role)), f"{octx}: invalid role identifier")
        _require(
            role not in {u.role for u in outputs}, f"{ctx}: duplicate output role {role!r}"
        )
        path = o.get("path")
        glob = o.get("glob")
        _require(
            (path is None) != (glob is None),
            f"{octx}: exactly one of 'path' or 'glob' is required",
        )
        outputs.append(OutputSpec(role, path, glob))
    output_roles = {o.role for o in outputs}

    checks: list[OutcomePredicate] = []
    for c in obj.get("checks", []):
        _require(isinstance(c, dict), f"{ctx}: checks entries must be objects")
        kind = _get_str(c, "kind", f"{ctx} check")
        cctx = f"{ctx} check {kind!r}"
        _require(kind in PREDICATE_KINDS, f"{cctx}: unknown predicate kind")
        target = c.get("target")
        if kind in TARGETED_PREDICATES:
            _require(isinstance(target, str), f"{cctx}: 'target' output role is required")
            _require(target in output_roles, f"{cctx}: target {target!r} is not a declared output role")
        else:
            _require(target is None, f"{cctx}: 'target' is not allowed for this kind")
        checks.append(OutcomePredicate(kind, target))

    slots: list[UpstreamSlot] = []
    wired_params: set[str] = set()
    for s in obj.get("upstream", []):
        _require(isinstance(s, dict), f"{ctx}: upstream entries must be objects")
        slot = _get_str(s, "slot", f"{ctx} upstream slot")
        sctx = f"{ctx} slot {slot!r}"
        _require(bool(IDENTIFIER_RE.match(slot)), f"{sctx}: invalid identifier")
        _require(slot not in {u.slot for u in slots}, f"{ctx}: duplicate slot {slot!r}")
        wires: list[SlotWire] = []
        for w in s.get("wiring", []):
            _require(isinstance(w, dict), f"{sctx}: wiring entries must be objects")
            wparam = _get_str(w, "param", sctx)
            _require(wparam in param_names, f"{sctx}: wiring names unknown param {wparam!r}")
            _require(wparam not in wired_params, f"{ctx}: param {wparam!r} wired more than once")
            wired_params.add(wparam)
            wires.append(SlotWire(_get_str(w, "output", sctx), wparam))
        slots.append(UpstreamSlot(slot, _get_str(s, "description", sctx, default=""), tuple(wires)))

    hints = None
    if "resources" in obj:
        r = obj["resources"]
        _require(isinstance(r, dict), f"{ctx}: resources must be an object")
        memory = r.get("memory_bytes", 0)
        storage = r.get("storage_bytes", 0)
        server_class = r.get("server_class", "")
        _require(
            isinstance(memory, int) and memory >= 0,
            f"{ctx}: resources.memory_bytes must be a non-negative integer",
        )
        _require(
            isinstance(storage, int) and storage >= 0,
            f"{ctx}: resources.storage_bytes must be a non-negative integer",
        )
        _require(isinstance(server_class, str), f"{ctx}: resources.server_class must be a string")
        hints = ResourceHints(memory, storage, server_class)

    return TaskDefinition(
        name=name,
        description=description,
        file_params=tuple(params),
        command_template=command,
        declared_outputs=tuple(outputs),
        outcome_checks=tuple(checks),
        upstream_slots=tuple(slots),
        futures_description=futures_description,
        resource_hints=hints,
    )


def load_manifest(manifest_text: str) -> Registry:
    """Parse and validate a manifest document into an immutable Registry."""
    try:
        doc = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"manifest parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    _require(isinstance(doc, dict), "manifest must be a JSON object")
    name = doc.get("name", "manifest")
    _require(isinstance(name, str), "manifest 'name' must be a string")
    tasks_raw = doc.get("tasks")
    _require(isinstance(tasks_raw, list), "manifest must contain a top-level 'tasks' list")

    tasks: list[TaskDefinition] = []
    for entry in tasks_raw:
        task = _parse_task(entry)
        _require(
            task.name not in {t.name for t in tasks},
            f"duplicate task name {task.name!r}",
        )
        tasks.append(task)
    return Registry(name=name, tasks=tuple(tasks))


def load_manifest_file(path: str) -> Registry:
    with open(path, encoding="utf-8") as fh:
        return load_manifest(fh.read())
