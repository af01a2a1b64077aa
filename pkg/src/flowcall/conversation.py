"""The function-calling loop that turns one instruction into scheduled futures.

A conversation starts from a system preamble plus the user's instruction.
Each step sends the accumulated messages and all registry descriptors to a
backend; a function-call response is validated and dispatched to the engine,
after which exactly two messages are appended: the assistant's choice and a
user message naming the assigned future ID. A final response ends the loop.
Dispatch and validation failures are forwarded back to the backend verbatim
so it can propose an alternative, up to a bounded number of retries; token
use is estimated before every request and enforced against a budget.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources

from . import backend as backend_mod
from .backend import BackendRequest, BackendResponse
from .engine import Engine, EngineError
from .registry import (
    ArgumentError,
    FunctionDescriptor,
    Registry,
    UnknownFunctionError,
    validate_arguments,
)

ACTIVE = "active"
DONE = "done"
ABORTED = "aborted"

DISPATCHED = "dispatched"
FINISHED = "finished"

REASON_TOKEN_BUDGET = "token-budget"
REASON_UNRECOVERABLE = "unrecoverable-dispatch"

DEFAULT_BUDGET = 16384
# consecutive bad backend responses tolerated before aborting
RETRY_BOUND = 3
# flat token overhead charged per message on top of ceil(chars / 4)
PER_MESSAGE_OVERHEAD = 4

SCHEDULED_TEMPLATE = "Task scheduled with AppFuture id: {id}"
ERROR_TEMPLATE = "Error: {error}"

EVENT_DISPATCH = "dispatch"
EVENT_ERROR_FORWARDED = "error_forwarded"
EVENT_DONE = "done"
EVENT_ABORTED = "aborted"
TERMINAL_EVENTS = (EVENT_DONE, EVENT_ABORTED)


class ConversationError(RuntimeError):
    """Misuse of the conversation state machine (e.g. stepping a done state)."""


@dataclass(frozen=True)
class FunctionCall:
    name: str
    arguments: str  # raw argument text exactly as the backend returned it


@dataclass(frozen=True)
class Message:
    role: str
    content: str = ""
    function_call: FunctionCall | None = None

    def __post_init__(self):
        if self.function_call is not None and self.role != "assistant":
            raise ValueError("only assistant messages may carry a function call")


def default_preamble() -> str:
    """The stock system context; override per conversation or via asset file."""
    path = os.environ.get("FLOWCALL_PREAMBLE_FILE")
    if path:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    return (
        resources.files("flowcall").joinpath("assets/default_context.txt").read_text("utf-8")
    )


def estimate_tokens(messages, descriptors=()) -> int:
    """Deterministic token estimate for a request.

    Each message costs ceil(chars / 4) plus a flat overhead of 4, where
    chars counts its content plus any function-call name and raw arguments.
    Each descriptor costs ceil(chars of its serialized form / 4).
    """
    total = 0
    for m in messages:
        chars = len(m.content)
        if m.function_call is not None:
            chars += len(m.function_call.name) + len(m.function_call.arguments)
        total += math.ceil(chars / 4) + PER_MESSAGE_OVERHEAD
    for d in descriptors:
        total += math.ceil(len(d.serialize()) / 4)
    return total


@dataclass
class ConversationState:
    """Accumulated dialogue plus dispatch and token accounting."""

    messages: list[Message]
    descriptors: tuple[FunctionDescriptor, ...] = ()
    budget: int = DEFAULT_BUDGET
    model: str = ""
    dispatch_count: int = 0
    status: str = ACTIVE
    abort_reason: str | None = None

    @property
    def token_estimate(self) -> int:
        return estimate_tokens(self.messages, self.descriptors)


@dataclass(frozen=True)
class StepResult:
    kind: str  # dispatched | finished | aborted
    future_id: str | None = None
    reason: str | None = None


@dataclass(frozen=True)
class TranscriptEvent:
    type: str
    data: dict


@dataclass
class Transcript:
    """Ordered event log of one conversation run plus its final messages."""

    events: list[TranscriptEvent] = field(default_factory=list)
    messages: list[Message] = field(default_factory=list)

    @property
    def terminal(self) -> TranscriptEvent | None:
        for event in reversed(self.events):
            if event.type in TERMINAL_EVENTS:
                return event
        return None

    def dispatched_ids(self) -> list[str]:
        return [e.data["future_id"] for e in self.events if e.type == EVENT_DISPATCH]


def new_conversation(
    preamble: str,
    instruction: str,
    budget: int,
    *,
    descriptors: tuple[FunctionDescriptor, ...] = (),
    model: str = "",
) -> ConversationState:
    if budget <= 0:
        raise ValueError("budget must be positive")
    model = model or os.environ.get(backend_mod.MODEL_ENV, backend_mod.DEFAULT_MODEL)
    return ConversationState(
        messages=[Message("system", preamble), Message("user", instruction)],
        descriptors=descriptors,
        budget=budget,
        model=model,
    )


def _emit(on_event, event_type: str, data: dict):
    if on_event is not None:
        on_event(TranscriptEvent(event_type, data))


def _abort(state: ConversationState, reason: str, detail: str, on_event) -> StepResult:
    state.status = ABORTED
    state.abort_reason = reason
    _emit(on_event, EVENT_ABORTED, {"reason": reason, "detail": detail})
    return StepResult(ABORTED, reason=reason)


def _request(state: ConversationState) -> BackendRequest:
    return BackendRequest(
        model=state.model,
        messages=tuple(state.messages),
        functions=state.descriptors,
        temperature=0.0,
    )


def step(
    state: ConversationState,
    backend,
    registry: Registry,
    engine: Engine,
    *,
    on_event=None,
) -> StepResult:
    """One backend round-trip: dispatch the chosen function or finish.

    Transport errors propagate with the state unchanged (retryable by the
    caller); validation and dispatch failures are forwarded to the backend
    rather than raised.
    """
    if state.status != ACTIVE:
        raise ConversationError(f"cannot step a conversation with status {state.status}")
    if state.token_estimate > state.budget:
        return _abort(
            state,
            REASON_TOKEN_BUDGET,
            f"estimated {state.token_estimate} tokens exceeds budget {state.budget}",
            on_event,
        )
    response = backend.complete(_request(state))
    return _handle_response(state, response, backend, registry, engine, 1, on_event)


def _handle_response(
    state, response: BackendResponse, backend, registry, engine, attempt, on_event
) -> StepResult:
    if response.stop:
        state.status = DONE
        _emit(on_event, EVENT_DONE, {"content": response.content})
        return StepResult(FINISHED)

    call = FunctionCall(response.name or "", response.raw_args or "")
    try:
        descriptor = registry.descriptor(call.name)
        bound = validate_arguments(descriptor, call.arguments)
        task, variant = registry.dispatch_target(call.name)
        if variant == "from_files":
            future_id = engine.schedule_from_files(task, bound)
        else:
            future_id = engine.schedule_from_futures(task, bound)
    except (UnknownFunctionError, ArgumentError, EngineError) as exc:
        return forward_error(
            state, str(exc), backend, registry, engine,
            failing_call=call, attempt=attempt, on_event=on_event,
        )
    state.messages.append(Message("assistant", function_call=call))
    state.messages.append(Message("user", SCHEDULED_TEMPLATE.format(id=future_id)))
    state.dispatch_count += 1
    # the future is pending at the instant schedule returns; report that
    # state rather than racing the worker thread for a snapshot
    _emit(on_event, EVENT_DISPATCH, {
        "function": call.name,
        "args": bound,
        "future_id": future_id,
        "future_state": "pending",
        "handle": f"0x{id(engine.table.get(future_id)):x}",
    })
    return StepResult(DISPATCHED, future_id=future_id)


def forward_error(
    state: ConversationState,
    error: str,
    backend,
    registry: Registry,
    engine: Engine,
    *,
    failing_call: FunctionCall,
    attempt: int = 1,
    on_event=None,
) -> StepResult:
    """Report a dispatch failure to the backend and process its next choice.

    The failing choice and the error text are appended as an assistant and a
    user message, so the backend sees exactly what went wrong. Once the retry
    bound is reached the conversation aborts instead of re-querying.
    """
    if attempt >= RETRY_BOUND:
        return _abort(state, REASON_UNRECOVERABLE, error, on_event)
    state.messages.append(Message("assistant", function_call=failing_call))
    state.messages.append(Message("user", ERROR_TEMPLATE.format(error=error)))
    _emit(on_event, EVENT_ERROR_FORWARDED, {"error": error, "function": failing_call.name})
    if state.token_estimate > state.budget:
        return _abort(
            state,
            REASON_TOKEN_BUDGET,
            f"estimated {state.token_estimate} tokens exceeds budget {state.budget}",
            on_event,
        )
    response = backend.complete(_request(state))
    return _handle_response(state, response, backend, registry, engine, attempt + 1, on_event)


def run_instruction(
    instruction: str,
    registry: Registry,
    engine: Engine,
    backend,
    budget: int = DEFAULT_BUDGET,
    *,
    preamble: str | None = None,
    model: str = "",
    on_event=None,
) -> Transcript:
    """Drive the loop from a fresh conversation until done or aborted."""
    if len(registry) == 0:
        raise ValueError("registry is empty; nothing can be dispatched")
    transcript = Transcript()

    def sink(event: TranscriptEvent):
        transcript.events.append(event)
        _emit(on_event, event.type, event.data)

    state = new_conversation(
        preamble if preamble is not None else default_preamble(),
        instruction,
        budget,
        descriptors=registry.descriptors(),
        model=model,
    )
    while state.status == ACTIVE:
        try:
            step(state, backend, registry, engine, on_event=sink)
        except backend_mod.BackendError as exc:
            _abort(state, "backend-error", str(exc), sink)
    transcript.messages = list(state.messages)
    return transcript
