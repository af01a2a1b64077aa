"""Planner, executor, and debugger agents over the futures engine.

The planner turns a natural-language description into an ordered plan over
registered tasks. The executor dispatches plan steps as futures (each step
in its own short conversation so context never accumulates across steps),
screens resource constraints before launch, and checks every outcome
against the step's predicates. Failed steps go to the debugger, whose
proposal is applied, bounded, and escalated to a human when it cannot help.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace

from .backend import BackendRequest, BackendResponse, Script, ScriptRule, ScriptedBackend
from .conversation import (
    DEFAULT_BUDGET,
    EVENT_DISPATCH,
    EVENT_ERROR_FORWARDED,
    Message,
    TranscriptEvent,
    run_instruction,
)
from .engine import Engine, ExecutionRecord
from .registry import OutcomePredicate, Registry, TaskDefinition

PLANNER_RETRY_BOUND = 3
# debugger consultations per step before escalation is forced
DEBUG_ATTEMPTS_PER_STEP = 2

OK = "ok"
STEP_FAILED = "failed"

RETRY_STEP = "retry_step"
MODIFY_PLAN = "modify_plan"
ESCALATE = "escalate"
ABORT = "abort"
REMEDIATION_KINDS = (RETRY_STEP, MODIFY_PLAN, ESCALATE, ABORT)

APPROVE_RETRY = "approve_retry"
PROVIDE_BINDING = "provide_binding"
DECISION_KINDS = (APPROVE_RETRY, PROVIDE_BINDING, ABORT)

PLAN_COMPLETED = "completed"
PLAN_ABORTED = "aborted"

CAPACITY_MEMORY_ENV = "FLOWCALL_HOST_MEMORY_BYTES"
CAPACITY_STORAGE_ENV = "FLOWCALL_HOST_STORAGE_BYTES"
CAPACITY_CLASSES_ENV = "FLOWCALL_HOST_SERVER_CLASSES"

PLANNER_PREAMBLE = (
    "You are a workflow planner. Translate the request into an ordered plan "
    "over the available tasks, binding the first task to files and later "
    "tasks to earlier steps."
)
DEBUGGER_PREAMBLE = (
    "You diagnose failed workflow steps and propose exactly one remediation."
)

EVENT_PLAN_CREATED = "plan_created"
EVENT_STEP_STARTED = "step_started"
EVENT_STEP_OUTCOME = "step_outcome"
EVENT_REMEDIATION = "remediation"
EVENT_ESCALATION_RAISED = "escalation_raised"
EVENT_ESCALATION_ANSWERED = "escalation_answered"
EVENT_PLAN_FINISHED = "plan_finished"


class PlanError(RuntimeError):
    """No valid plan could be obtained from the backend."""


class PlanValidationError(ValueError):
    """A proposed plan or replacement violated the plan invariants."""


class EscalationLookupError(LookupError):
    """The escalation ID is unknown to the channel."""


class DuplicateAnswerError(RuntimeError):
    """The escalation was already answered; decisions deliver exactly once."""


@dataclass(frozen=True)
class ResourceConstraints:
    max_memory: int = 0
    max_storage: int = 0
    server_class: str = ""


@dataclass(frozen=True)
class HostCapacity:
    """Configured host limits; None means unconstrained."""

    memory_bytes: int | None = None
    storage_bytes: int | None = None
    server_classes: frozenset[str] | None = None

    @classmethod
    def from_env(cls) -> "HostCapacity":
        memory = os.environ.get(CAPACITY_MEMORY_ENV)
        storage = os.environ.get(CAPACITY_STORAGE_ENV)
        classes = os.environ.get(CAPACITY_CLASSES_ENV)
        return cls(
            memory_bytes=int(memory) if memory else None,
            storage_bytes=int(storage) if storage else None,
            server_classes=frozenset(
                c.strip() for c in classes.split(",") if c.strip()
            ) if classes else None,
        )

    def admits(self, constraints: ResourceConstraints) -> tuple[bool, str]:
        if self.memory_bytes is not None and constraints.max_memory > self.memory_bytes:
            return False, (
                f"requires {constraints.max_memory} bytes of memory, "
                f"host has {self.memory_bytes}"
            )
        if self.storage_bytes is not None and constraints.max_storage > self.storage_bytes:
            return False, (
                f"requires {constraints.max_storage} bytes of storage, "
                f"host has {self.storage_bytes}"
            )
        if (
            constraints.server_class
            and self.server_classes is not None
            and constraints.server_class not in self.server_classes
        ):
            return False, f"requires server class {constraints.server_class!r}"
        return True, ""


@dataclass(frozen=True)
class PlanStep:
    """One plan entry: a task plus exactly one binding form."""

    index: int
    task: str
    files: dict[str, str] | None = None
    uses: dict[str, int] | None = None  # slot -> earlier step index
    expected_outcome: tuple[OutcomePredicate, ...] = ()
    constraints: ResourceConstraints = ResourceConstraints()

    def __post_init__(self):
        if (self.files is None) == (self.uses is None):
            raise ValueError(f"step {self.index}: exactly one binding form is required")

    def references(self) -> tuple[int, ...]:
        return tuple(sorted(set((self.uses or {}).values())))


@dataclass(frozen=True)
class Plan:
    steps: tuple[PlanStep, ...]
    source_description: str

    def summary(self) -> str:
        chain = "; ".join(f"step {s.index}: {s.task}" for s in self.steps)
        return (
            f"This step belongs to a plan for: {self.source_description}. "
            f"The full plan is: {chain}."
        )


@dataclass(frozen=True)
class StepOutcome:
    index: int
    record: ExecutionRecord | None
    checks: dict[str, bool]
    verdict: str
    future_id: str | None = None


@dataclass(frozen=True)
class Remediation:
    kind: str
    raw_steps: tuple[dict, ...] = ()  # modify_plan proposal, validated on apply
    question: str = ""
    reason: str = ""


@dataclass(frozen=True)
class HumanDecision:
    kind: str
    values: dict[str, str] | None = None
    note: str = ""


@dataclass
class Escalation:
    id: str
    question: str
    step_index: int | None = None


class EscalationChannel:
    """Blocking mailbox between a running plan and a human operator.

    ``ask`` blocks the calling plan until ``answer`` delivers a decision
    (exactly once per escalation) or the channel closes, which resolves
    every waiter to abort. A ``responder`` callback, when set, answers
    synchronously instead — that is the CLI prompt path.
    """

    def __init__(self, responder=None):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._counter = 0
        self._pending: dict[str, Escalation] = {}
        self._decisions: dict[str, HumanDecision] = {}
        self._answered: set[str] = set()
        self._seen: set[str] = set()
        self._closed = False
        self._responder = responder

    def raise_escalation(self, question: str, step_index: int | None = None) -> Escalation:
        with self._lock:
            escalation = Escalation(f"esc_{self._counter}", question, step_index)
            self._counter += 1
            if not self._closed:
                self._pending[escalation.id] = escalation
            self._seen.add(escalation.id)
            return escalation

    def wait(self, escalation: Escalation, timeout: float | None = None) -> HumanDecision:
        if self._responder is not None:
            decision = self._responder(escalation)
            with self._cond:
                self._pending.pop(escalation.id, None)
                self._answered.add(escalation.id)
            return decision
        with self._cond:
            while escalation.id not in self._decisions and not self._closed:
                if not self._cond.wait(timeout):
                    break
            if escalation.id in self._decisions:
                return self._decisions[escalation.id]
            self._pending.pop(escalation.id, None)
            return HumanDecision(ABORT, note="escalation channel closed")

    def answer(self, escalation_id: str, decision: HumanDecision):
        if decision.kind not in DECISION_KINDS:
            raise ValueError(f"unknown decision kind {decision.kind!r}")
        with self._cond:
            if escalation_id in self._answered:
                raise DuplicateAnswerError(f"escalation {escalation_id} already answered")
            if escalation_id not in self._pending:
                raise EscalationLookupError(f"no pending escalation {escalation_id!r}")
            self._pending.pop(escalation_id)
            self._answered.add(escalation_id)
            self._decisions[escalation_id] = decision
            self._cond.notify_all()

    def pending(self) -> list[Escalation]:
        with self._lock:
            return list(self._pending.values())

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def escalate(question: str, channel: EscalationChannel, step_index: int | None = None) -> HumanDecision:
    """Raise a question and block until a human decision arrives."""
    escalation = channel.raise_escalation(question, step_index)
    return channel.wait(escalation)


# -- planner ---------------------------------------------------------------


def _planner_user_message(description: str, registry: Registry) -> str:
    lines = ["Plan the following request using only these tasks:"]
    for t in registry.tasks:
        params = ", ".join(p.name for p in t.file_params) or "none"
        slots = ", ".join(s.slot for s in t.upstream_slots) or "none"
        lines.append(f"- {t.name}: {t.description} (params: {params}; slots: {slots})")
    lines.append(
        'Respond with only a JSON object of the form {"steps": [...]} where each '
        'step is {"task": "<name>", "files": {"<param>": "<path>"}} or '
        '{"task": "<name>", "uses": {"<slot>": <earlier step index>}}.'
    )
    lines.append(f"Request: {description}")
    return "\n".join(lines)


def _constraints_for(task: TaskDefinition) -> ResourceConstraints:
    hints = task.resource_hints
    if hints is None:
        return ResourceConstraints()
    return ResourceConstraints(
        max_memory=hints.memory_bytes,
        max_storage=hints.storage_bytes,
        server_class=hints.server_class,
    )


def _parse_plan_step(entry, index: int, registry: Registry) -> PlanStep:
    ctx = f"step {index}"
    if not isinstance(entry, dict):
        raise PlanValidationError(f"{ctx}: must be an object")
    task_name = entry.get("task")
    if not isinstance(task_name, str):
        raise PlanValidationError(f"{ctx}: missing task name")
    try:
        task = registry.task(task_name)
    except KeyError:
        raise PlanValidationError(f"{ctx}: unknown task {task_name!r}") from None
    files = entry.get("files")
    uses = entry.get("uses")
    if (files is None) == (uses is None):
        raise PlanValidationError(f"{ctx}: exactly one of 'files' or 'uses' is required")
    if files is not None:
        if not isinstance(files, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in files.items()
        ):
            raise PlanValidationError(f"{ctx}: 'files' must map param names to strings")
        declared = {p.name for p in task.file_params}
        missing = sorted(declared - set(files))
        unknown = sorted(set(files) - declared)
        if missing:
            raise PlanValidationError(f"{ctx}: missing file binding(s) {missing}")
        if unknown:
            raise PlanValidationError(f"{ctx}: unknown file binding(s) {unknown}")
        files = dict(files)
    if uses is not None:
        if not isinstance(uses, dict) or not all(
            isinstance(k, str) and isinstance(v, int) and not isinstance(v, bool)
            for k, v in uses.items()
        ):
            raise PlanValidationError(f"{ctx}: 'uses' must map slot names to step indices")
        declared_slots = {s.slot for s in task.upstream_slots}
        missing = sorted(declared_slots - set(uses))
        unknown = sorted(set(uses) - declared_slots)
        if missing:
            raise PlanValidationError(f"{ctx}: missing slot binding(s) {missing}")
        if unknown:
            raise PlanValidationError(f"{ctx}: unknown slot binding(s) {unknown}")
        for slot, ref in uses.items():
            if not 0 <= ref < index:
                raise PlanValidationError(
                    f"{ctx}: slot {slot!r} references step {ref}, "
                    "which is not an earlier step"
                )
        uses = dict(uses)
    return PlanStep(
        index=index,
        task=task.name,
        files=files,
        uses=uses,
        expected_outcome=task.outcome_checks,
        constraints=_constraints_for(task),
    )


def parse_plan_payload(payload, registry: Registry, description: str) -> Plan:
    if not isinstance(payload, dict):
        raise PlanValidationError("plan must be a JSON object")
    steps_raw = payload.get("steps")
    if not isinstance(steps_raw, list) or not steps_raw:
        raise PlanValidationError("plan needs a non-empty 'steps' list")
    steps = tuple(
        _parse_plan_step(entry, i, registry) for i, entry in enumerate(steps_raw)
    )
    return Plan(steps=steps, source_description=description)


def make_plan(
    description: str,
    registry: Registry,
    backend,
    *,
    model: str = "gpt-4",
    on_event=None,
) -> Plan:
    """Ask the backend for a plan; invalid proposals are re-queried.

    Proposals must be final responses whose content parses as a plan
    object; anything else is forwarded back as an error up to the retry
    bound, after which PlanError is raised.
    """
    if len(registry) == 0:
        raise PlanError("registry is empty; nothing to plan over")
    messages = [
        Message("system", PLANNER_PREAMBLE),
        Message("user", _planner_user_message(description, registry)),
    ]
    last_error = ""
    for _ in range(PLANNER_RETRY_BOUND):
        response = backend.complete(
            BackendRequest(
                model=model,
                messages=tuple(messages),
                functions=registry.descriptors(),
            )
        )
        if not response.stop:
            last_error = "planner must respond with a plan object, not a function call"
        else:
            try:
                payload = json.loads(response.content)
            except json.JSONDecodeError as exc:
                last_error = f"plan is not valid JSON: {exc}"
            else:
                try:
                    return parse_plan_payload(payload, registry, description)
                except PlanValidationError as exc:
                    last_error = str(exc)
        messages.append(Message("assistant", response.content))
        messages.append(Message("user", f"Error: {last_error}"))
        if on_event is not None:
            on_event(TranscriptEvent(
                EVENT_ERROR_FORWARDED, {"error": last_error, "phase": "planner"}
            ))
    raise PlanError(f"unplannable after {PLANNER_RETRY_BOUND} proposals: {last_error}")


# -- outcome checks ----------------------------------------------------------


def _evaluate_predicate(predicate: OutcomePredicate, record: ExecutionRecord) -> bool:
    if predicate.kind == "exit-code-zero":
        return record.exit_code == 0
    if predicate.kind == "output-exists":
        return bool(record.produced_outputs.get(predicate.target or "", []))
    if predicate.kind == "glob-nonempty":
        return bool(record.produced_outputs.get(predicate.target or "", []))
    if predicate.kind == "stderr-empty":
        try:
            return os.path.getsize(record.stderr_path) == 0
        except OSError:
            return False
    raise ValueError(f"unknown predicate kind {predicate.kind!r}")


def check_outcome(
    step: PlanStep, record: ExecutionRecord, *, future_id: str | None = None
) -> StepOutcome:
    """Evaluate every declared predicate; ok needs exit code 0 plus all checks."""
    checks = {p.key(): _evaluate_predicate(p, record) for p in step.expected_outcome}
    verdict = OK if record.exit_code == 0 and all(checks.values()) else STEP_FAILED
    return StepOutcome(
        index=step.index, record=record, checks=checks, verdict=verdict, future_id=future_id
    )


# -- debugger ----------------------------------------------------------------


def _stderr_tail(record: ExecutionRecord | None, limit: int = 2000) -> str:
    if record is None:
        return ""
    try:
        with open(record.stderr_path, encoding="utf-8", errors="replace") as fh:
            text = fh.read()
        return text[-limit:]
    except OSError:
        return ""


def _auto_question(step: PlanStep, outcome: StepOutcome) -> str:
    exit_code = outcome.record.exit_code if outcome.record else "not launched"
    failed = sorted(k for k, passed in outcome.checks.items() if not passed)
    return (
        f"Step {step.index} (task {step.task}) failed and the debugger could not "
        f"remediate it. Exit code: {exit_code}; failed checks: {failed or 'none'}. "
        "How should we proceed?"
    )


def debug_step(step: PlanStep, outcome: StepOutcome, backend, *, model: str = "gpt-4") -> Remediation:
    """Ask the backend to diagnose a failed step.

    The proposal must be a final response whose content is a JSON object
    naming one remediation action; anything unparseable falls back to
    escalation (that is the safety net, not an error).
    """
    exit_code = outcome.record.exit_code if outcome.record else "not launched"
    binding = step.files if step.files is not None else step.uses
    user = (
        "Diagnose the failed step and respond with only a JSON object, one of: "
        '{"action": "retry_step"} | {"action": "modify_plan", "steps": [...]} | '
        '{"action": "escalate", "question": "..."} | {"action": "abort", "reason": "..."}.\n'
        f"Step {step.index} task {step.task} failed.\n"
        f"Binding: {binding}\n"
        f"Checks: {outcome.checks}\n"
        f"Exit code: {exit_code}\n"
        f"Stderr tail:\n{_stderr_tail(outcome.record)}"
    )
    fallback = Remediation(ESCALATE, question=_auto_question(step, outcome))
    try:
        response = backend.complete(
            BackendRequest(
                model=model,
                messages=(Message("system", DEBUGGER_PREAMBLE), Message("user", user)),
                functions=(),
            )
        )
    except Exception:
        return fallback
    if not response.stop:
        return fallback
    try:
        payload = json.loads(response.content)
    except json.JSONDecodeError:
        return fallback
    if not isinstance(payload, dict):
        return fallback
    action = payload.get("action")
    if action == RETRY_STEP:
        return Remediation(RETRY_STEP)
    if action == MODIFY_PLAN:
        steps = payload.get("steps")
        if isinstance(steps, list) and steps and all(isinstance(s, dict) for s in steps):
            return Remediation(MODIFY_PLAN, raw_steps=tuple(steps))
        return fallback
    if action == ESCALATE:
        question = payload.get("question")
        return Remediation(
            ESCALATE,
            question=question if isinstance(question, str) and question
            else _auto_question(step, outcome),
        )
    if action == ABORT:
        reason = payload.get("reason")
        return Remediation(ABORT, reason=reason if isinstance(reason, str) else "debugger abort")
    return fallback


# -- plan surgery ------------------------------------------------------------


def validate_replacement(
    raw_steps: tuple[dict, ...], plan: Plan, at: int, registry: Registry
) -> tuple[PlanStep, ...]:
    """Validate modify_plan steps: known tasks, references strictly before ``at``."""
    validated = []
    for offset, entry in enumerate(raw_steps):
        step = _parse_plan_step(entry, at, registry)  # enforces refs < at
        validated.append(replace(step, index=at + offset))
    return tuple(validated)


def splice_plan(plan: Plan, at: int, replacement: tuple[PlanStep, ...]) -> Plan:
    """Replace step ``at`` with the replacement steps, re-indexing the rest.

    Later references to the replaced step point at the last replacement
    step; references beyond it shift by the growth. Acyclicity is preserved
    because replacements may only reference steps before ``at``.
    """
    shift = len(replacement) - 1

    def remap(ref: int) -> int:
        if ref < at:
            return ref
        if ref == at:
            return at + shift
        return ref + shift

    out: list[PlanStep] = list(plan.steps[:at]) + list(replacement)
    for s in plan.steps[at + 1:]:
        uses = {slot: remap(ref) for slot, ref in (s.uses or {}).items()} if s.uses is not None else None
        out.append(replace(s, index=s.index + shift, uses=uses))
    return Plan(steps=tuple(out), source_description=plan.source_description)


# -- executor ----------------------------------------------------------------


@dataclass
class StepAttempt:
    index: int
    attempt: int
    future_id: str | None
    outcome: StepOutcome
    remediation: Remediation | None = None
    decision: HumanDecision | None = None


@dataclass
class PlanReport:
    plan: Plan
    attempts: list[StepAttempt] = field(default_factory=list)
    status: str = PLAN_COMPLETED
    reason: str | None = None

    def ok_count(self) -> int:
        return len({a.index for a in self.attempts if a.outcome.verdict == OK})

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "reason": self.reason,
            "description": self.plan.source_description,
            "steps": [
                {
                    "index": s.index,
                    "task": s.task,
                    "files": s.files,
                    "uses": s.uses,
                }
                for s in self.plan.steps
            ],
            "attempts": [
                {
                    "index": a.index,
                    "attempt": a.attempt,
                    "future_id": a.future_id,
                    "verdict": a.outcome.verdict,
                    "checks": a.outcome.checks,
                    "remediation": a.remediation.kind if a.remediation else None,
                    "decision": a.decision.kind if a.decision else None,
                }
                for a in self.attempts
            ],
        }


class _PlanAborted(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class _Executor:
    def __init__(self, plan, engine, backend, channel, capacity, budget, model, on_event):
        self.plan = plan
        self.engine = engine
        self.registry = engine.registry
        self.backend = backend
        self.channel = channel
        self.capacity = capacity
        self.budget = budget
        self.model = model
        self.on_event = on_event
        self.report = PlanReport(plan=plan)
        self.ok: dict[int, str] = {}  # step index -> future id that passed
        self.attempt_no: dict[int, int] = {}

    def emit(self, event_type: str, data: dict):
        if self.on_event is not None:
            self.on_event(TranscriptEvent(event_type, data))

    # - step dispatch -

    def _step_sink(self, step_index: int):
        def sink(event: TranscriptEvent):
            if event.type in (EVENT_DISPATCH, EVENT_ERROR_FORWARDED):
                data = dict(event.data)
                data["step_index"] = step_index
                self.emit(event.type, data)
        return sink

    def _dispatch(self, step: PlanStep) -> str | None:
        """Run the step's own fresh conversation; returns the future id."""
        if step.files is not None:
            function = f"fcall_{step.task}_from_files"
            args = dict(step.files)
        else:
            function = f"fcall_{step.task}_from_futures"
            args = {slot: self.ok[ref] for slot, ref in (step.uses or {}).items()}
        script = Script(rules=(
            ScriptRule(always=True, function=function,
                       arguments=json.dumps(args), consume_once=True),
            ScriptRule(always=True, final="DONE"),
        ))
        directive = f"Execute step {step.index} of the plan: task {step.task}."
        transcript = run_instruction(
            directive,
            self.registry,
            self.engine,
            ScriptedBackend(script),
            self.budget,
            preamble=self.plan.summary(),
            model=self.model,
            on_event=self._step_sink(step.index),
        )
        ids = transcript.dispatched_ids()
        return ids[0] if ids else None

    def _run_once(self, step: PlanStep) -> StepOutcome:
        admitted, why = self.capacity.admits(step.constraints)
        if not admitted:
            return StepOutcome(
                index=step.index,
                record=None,
                checks={"resource-constraints": False},
                verdict=STEP_FAILED,
                future_id=None,
            )
        future_id = self._dispatch(step)
        if future_id is None:
            return StepOutcome(
                index=step.index,
                record=None,
                checks={"dispatch": False},
                verdict=STEP_FAILED,
                future_id=None,
            )
        record = self.engine.await_completion(future_id)
        return check_outcome(step, record, future_id=future_id)

    def _record_attempt(self, step: PlanStep, outcome: StepOutcome) -> StepAttempt:
        self.attempt_no[step.index] = self.attempt_no.get(step.index, 0) + 1
        attempt = StepAttempt(
            index=step.index,
            attempt=self.attempt_no[step.index],
            future_id=outcome.future_id,
            outcome=outcome,
        )
        self.report.attempts.append(attempt)
        self.emit(EVENT_STEP_OUTCOME, {
            "step_index": step.index,
            "task": step.task,
            "attempt": attempt.attempt,
            "future_id": outcome.future_id,
            "verdict": outcome.verdict,
            "checks": outcome.checks,
        })
        return attempt

    # - remediation -

    def _remediate(self, step: PlanStep, outcome: StepOutcome, attempt: StepAttempt):
        """Loop until the step passes, the plan is spliced, or the plan aborts."""
        debug_used = 0
        while True:
            if debug_used < DEBUG_ATTEMPTS_PER_STEP:
                remediation = debug_step(step, outcome, self.backend, model=self.model)
                debug_used += 1
            else:
                remediation = Remediation(ESCALATE, question=_auto_question(step, outcome))
            if remediation.kind == MODIFY_PLAN:
                try:
                    replacement = validate_replacement(
                        remediation.raw_steps, self.plan, step.index, self.registry
                    )
                except PlanValidationError as exc:
                    remediation = Remediation(
                        ESCALATE,
                        question=(
                            f"Debugger proposed an invalid plan change ({exc}). "
                            + _auto_question(step, outcome)
                        ),
                    )
                else:
                    attempt.remediation = remediation
                    self.emit(EVENT_REMEDIATION, {
                        "step_index": step.index,
                        "kind": MODIFY_PLAN,
                        "replacement_count": len(replacement),
                    })
                    self._apply_splice(step.index, replacement)
                    return
            attempt.remediation = remediation
            self.emit(EVENT_REMEDIATION, {
                "step_index": step.index,
                "kind": remediation.kind,
                "question": remediation.question,
                "reason": remediation.reason,
            })
            if remediation.kind == ABORT:
                raise _PlanAborted(f"debugger abort: {remediation.reason}")
            if remediation.kind == RETRY_STEP:
                outcome = self._run_once(step)
                attempt = self._record_attempt(step, outcome)
                if outcome.verdict == OK:
                    self.ok[step.index] = outcome.future_id or ""
                    return
                continue
            # escalation
            escalation = self.channel.raise_escalation(remediation.question, step.index)
            self.emit(EVENT_ESCALATION_RAISED, {
                "escalation_id": escalation.id,
                "question": escalation.question,
                "step_index": step.index,
            })
            decision = self.channel.wait(escalation)
            attempt.decision = decision
            self.emit(EVENT_ESCALATION_ANSWERED, {
                "escalation_id": escalation.id,
                "decision": decision.kind,
            })
            if decision.kind == ABORT:
                raise _PlanAborted("human abort")
            if decision.kind == PROVIDE_BINDING:
                merged = dict(step.files or {})
                merged.update(decision.values or {})
                step = replace(step, files=merged, uses=None)
            outcome = self._run_once(step)
            attempt = self._record_attempt(step, outcome)
            if outcome.verdict == OK:
                self.ok[step.index] = outcome.future_id or ""
                return
            # fall through: debugger gets another look (until its bound)

    def _apply_splice(self, at: int, replacement: tuple[PlanStep, ...]):
        shift = len(replacement) - 1
        self.plan = splice_plan(self.plan, at, replacement)
        self.report.plan = self.plan
        if shift:
            self.ok = {
                (i if i < at else i + shift): fid for i, fid in self.ok.items()
            }
            self.attempt_no = {
                (i if i < at else i + shift): n for i, n in self.attempt_no.items()
            }

    # - main loop -

    def run(self) -> PlanReport:
        self.emit(EVENT_PLAN_CREATED, {
            "description": self.plan.source_description,
            "steps": [
                {"index": s.index, "task": s.task, "files": s.files, "uses": s.uses}
                for s in self.plan.steps
            ],
        })
        try:
            while len(self.ok) < len(self.plan.steps):
                ready = [
                    s for s in self.plan.steps
                    if s.index not in self.ok
                    and all(ref in self.ok for ref in s.references())
                ]
                if not ready:
                    raise _PlanAborted("plan stalled: unsatisfiable step references")
                launched: list[tuple[PlanStep, str | None, StepOutcome | None]] = []
                for step in ready:
                    admitted, why = self.capacity.admits(step.constraints)
                    if not admitted:
                        outcome = StepOutcome(
                            index=step.index,
                            record=None,
                            checks={"resource-constraints": False},
                            verdict=STEP_FAILED,
                            future_id=None,
                        )
                        launched.append((step, None, outcome))
                        continue
                    self.emit(EVENT_STEP_STARTED, {
                        "step_index": step.index, "task": step.task,
                    })
                    future_id = self._dispatch(step)
                    if future_id is None:
                        outcome = StepOutcome(
                            index=step.index,
                            record=None,
                            checks={"dispatch": False},
                            verdict=STEP_FAILED,
                            future_id=None,
                        )
                        launched.append((step, None, outcome))
                    else:
                        launched.append((step, future_id, None))
                failures: list[tuple[int, StepOutcome, StepAttempt]] = []
                for step, future_id, pre_outcome in launched:
                    if pre_outcome is None:
                        record = self.engine.await_completion(future_id)
                        outcome = check_outcome(step, record, future_id=future_id)
                    else:
                        outcome = pre_outcome
                    attempt = self._record_attempt(step, outcome)
                    if outcome.verdict == OK:
                        self.ok[step.index] = outcome.future_id or ""
                    else:
                        failures.append((step.index, outcome, attempt))
                # remediate serially; a splice shifts the queued indices
                while failures:
                    index, outcome, attempt = failures.pop(0)
                    step = self.plan.steps[index]
                    step_count = len(self.plan.steps)
                    self._remediate(step, outcome, attempt)
                    shift = len(self.plan.steps) - step_count
                    if shift:
                        failures = [
                            (i if i < index else i + shift, o, a)
                            for i, o, a in failures
                        ]
            self.report.status = PLAN_COMPLETED
        except _PlanAborted as exc:
            self.report.status = PLAN_ABORTED
            self.report.reason = exc.reason
        self.emit(EVENT_PLAN_FINISHED, {
            "status": self.report.status,
            "reason": self.report.reason,
        })
        return self.report


def execute_plan(
    plan: Plan,
    engine: Engine,
    backend,
    escalation_channel: EscalationChannel,
    *,
    capacity: HostCapacity | None = None,
    budget: int = DEFAULT_BUDGET,
    model: str = "gpt-4",
    on_event=None,
) -> PlanReport:
    """Execute a validated plan; see the module docstring for the protocol."""
    executor = _Executor(
        plan=plan,
        engine=engine,
        backend=backend,
        channel=escalation_channel,
        capacity=capacity or HostCapacity.from_env(),
        budget=budget,
        model=model,
        on_event=on_event,
    )
    return executor.run()
