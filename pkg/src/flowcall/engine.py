"""Futures engine: runs task commands asynchronously under generated IDs.

Each scheduled execution becomes a TaskFuture indexed in a shared
FutureTable under an ID of the form ``future_<counter>_run_<task>``. The
command runs in its own output directory (``<runs root>/<run id>/<future
id>/``) with stdout/stderr captured to files; declared outputs are
collected from that directory when the command exits. Futures scheduled
from other futures wait until every upstream succeeds, then consume the
upstream output roles their manifest wiring names.
"""

from __future__ import annotations

import glob as globmod
import os
import re
import shlex
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field, replace

from .registry import PLACEHOLDER_RE, Registry, TaskDefinition

RUNS_ROOT_ENV = "FLOWCALL_RUNS_ROOT"
DEFAULT_RUNS_ROOT = "runs"

FUTURE_ID_RE = re.compile(r"^future_([0-9]+)_run_([a-z][a-z0-9_]*)$")

PENDING = "pending"
RUNNING = "running"
SUCCEEDED = "succeeded"
FAILED = "failed"
TERMINAL = (SUCCEEDED, FAILED)

# exit_code recorded when the command never launched (dependency failure)
NEVER_LAUNCHED = -1


class EngineError(RuntimeError):
    """Base class for scheduling and execution failures."""


class UnknownFutureError(EngineError):
    """A future ID is not present in the table."""


class MissingBindingError(EngineError):
    """A schedule call did not bind every required parameter or slot."""


class AwaitTimeoutError(EngineError):
    """await_completion hit its deadline before the future turned terminal."""


@dataclass(frozen=True)
class ExecutionRecord:
    """Terminal facts about one execution attempt."""

    exit_code: int
    stdout_path: str
    stderr_path: str
    produced_outputs: dict[str, list[str]]
    wall_time: float
    started_at: float | None = None   # monotonic clock; None if never launched
    finished_at: float | None = None


@dataclass
class TaskFuture:
    """Handle for one scheduled execution. Mutated only by the engine."""

    id: str
    task: str
    state: str = PENDING
    output_dir: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    record: ExecutionRecord | None = None
    failure_cause: str | None = None

    def snapshot(self) -> "TaskFuture":
        return replace(self, inputs=dict(self.inputs))


class FutureTable:
    """Shared ID-indexed registry of futures; safe for concurrent use.

    The monotone counter starts at ``seed_counter`` (0 by default, seedable
    to replay known transcripts) and is never reused.
    """

    def __init__(self, seed_counter: int = 0):
        if seed_counter < 0:
            raise ValueError("seed_counter must be non-negative")
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._entries: dict[str, TaskFuture] = {}
        self._counter = seed_counter

    @property
    def counter(self) -> int:
        with self._lock:
            return self._counter

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def ids(self) -> list[str]:
        with self._lock:
            return list(self._entries)

    def next_future_id(self, task_name: str) -> str:
        with self._lock:
            future_id = f"future_{self._counter}_run_{task_name}"
            self._counter += 1
            return future_id

    def index(self, future: TaskFuture):
        with self._lock:
            if future.id in self._entries:
                raise EngineError(f"future id {future.id} already indexed")
            self._entries[future.id] = future

    def get(self, future_id: str) -> TaskFuture:
        with self._lock:
            try:
                return self._entries[future_id]
            except KeyError:
                raise UnknownFutureError(f"unknown future id: {future_id!r}") from None

    def resolve(self, future_id: str) -> TaskFuture:
        with self._lock:
            try:
                return self._entries[future_id].snapshot()
            except KeyError:
                raise UnknownFutureError(f"unknown future id: {future_id!r}") from None

    def set_state(self, future_id: str, state: str):
        with self._cond:
            self._entries[future_id].state = state
            self._cond.notify_all()

    def finish(self, future_id: str, record: ExecutionRecord, state: str, cause: str | None):
        assert state in TERMINAL
        with self._cond:
            future = self._entries[future_id]
            future.record = record
            future.failure_cause = cause
            future.state = state
            self._cond.notify_all()

    def wait_terminal(self, future_id: str, timeout: float | None = None) -> TaskFuture:
        self.get(future_id)  # raise early on unknown ids
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._entries[future_id].state not in TERMINAL:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise AwaitTimeoutError(
                        f"{future_id} still {self._entries[future_id].state} after {timeout}s"
                    )
                self._cond.wait(remaining)
            return self._entries[future_id].snapshot()

    def wait_upstreams(self, ids: list[str]) -> str | None:
        """Block until all of ``ids`` succeed, or any fails (returning it)."""
        with self._cond:
            while True:
                states = {i: self._entries[i].state for i in ids}
                for i, s in states.items():
                    if s == FAILED:
                        return i
                if all(s == SUCCEEDED for s in states.values()):
                    return None
                self._cond.wait()


def substitute_command(template: str, bindings: dict[str, str]) -> str:
    """Replace ``${param}`` placeholders with shell-escaped binding values.

    Only lowercase ``${name}`` forms are placeholders; anything else in the
    template (shell variables, command substitution) is left for the shell.
    """
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise MissingBindingError(f"no binding for placeholder ${{{name}}}")
        return shlex.quote(bindings[name])

    return PLACEHOLDER_RE.sub(repl, template)


class Engine:
    """Schedules task futures for one run and owns their FutureTable."""

    def __init__(
        self,
        registry: Registry,
        *,
        runs_root: str | None = None,
        run_id: str | None = None,
        seed_counter: int = 0,
        state_listener=None,
    ):
        self.registry = registry
        root = runs_root or os.environ.get(RUNS_ROOT_ENV) or DEFAULT_RUNS_ROOT
        self.run_id = run_id or "run_" + uuid.uuid4().hex[:12]
        # absolute so recorded output paths stay valid from any working dir
        self.run_dir = os.path.abspath(os.path.join(root, self.run_id))
        self.table = FutureTable(seed_counter)
        self._state_listener = state_listener
        self._edges: list[tuple[str, str]] = []
        self._edges_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    # -- scheduling ------------------------------------------------------

    def schedule_from_files(self, task: TaskDefinition, bindings: dict[str, str]) -> str:
        """Launch a task against physical file paths; returns the new ID.

        file-path bindings are resolved to absolute paths at schedule time;
        string-literal bindings pass through verbatim. The call returns as
        soon as the future is indexed; it never waits for the command.
        """
        declared = {p.name for p in task.file_params}
        missing = [n for n in declared if n not in bindings]
        if missing:
            raise MissingBindingError(
                f"missing binding for param(s) {missing} of task {task.name}"
            )
        unknown = [n for n in bindings if n not in declared]
        if unknown:
            raise MissingBindingError(
                f"unknown binding(s) {unknown} for task {task.name}"
            )
        resolved = {}
        for p in task.file_params:
            value = bindings[p.name]
            resolved[p.name] = os.path.abspath(value) if p.kind == "file-path" else value
        future = self._new_future(task)
        future.inputs.update(resolved)
        self._start_worker(future, task, resolved, upstream_bindings=None)
        return future.id

    def schedule_from_futures(self, task: TaskDefinition, slot_bindings: dict[str, str]) -> str:
        """Launch a task fed by upstream futures; returns the new ID.

        The command starts only once every referenced future has succeeded;
        a failed upstream fails this future without running its command.
        """
        declared = {s.slot: s for s in task.upstream_slots}
        missing = [s for s in declared if s not in slot_bindings]
        if missing:
            raise MissingBindingError(
                f"missing binding for slot(s) {missing} of task {task.name}"
            )
        unknown = [s for s in slot_bindings if s not in declared]
        if unknown:
            raise MissingBindingError(f"unknown slot(s) {unknown} for task {task.name}")
        wired = {w.param for s in task.upstream_slots for w in s.wiring}
        unwired = [p.name for p in task.file_params if p.name not in wired]
        if unwired:
            raise EngineError(
                f"task {task.name} cannot run from futures: param(s) {unwired} "
                "have no slot wiring"
            )
        for slot, upstream_id in slot_bindings.items():
            self.table.get(upstream_id)  # raises UnknownFutureError
        future = self._new_future(task)
        with self._edges_lock:
            for upstream_id in slot_bindings.values():
                self._edges.append((upstream_id, future.id))
        self._start_worker(future, task, {}, upstream_bindings=dict(slot_bindings))
        return future.id

    def resolve(self, future_id: str) -> TaskFuture:
        return self.table.resolve(future_id)

    def await_completion(self, future_id: str, timeout: float | None = None) -> ExecutionRecord:
        future = self.table.wait_terminal(future_id, timeout)
        assert future.record is not None
        return future.record

    def await_all(self, timeout: float | None = None):
        """Wait for every scheduled future to reach a terminal state."""
        for future_id in self.table.ids():
            self.table.wait_terminal(future_id, timeout)

    def edges(self) -> list[tuple[str, str]]:
        with self._edges_lock:
            return list(self._edges)

    # -- internals -------------------------------------------------------

    def _new_future(self, task: TaskDefinition) -> TaskFuture:
        future_id = self.table.next_future_id(task.name)
        output_dir = os.path.join(self.run_dir, future_id)
        try:
            os.makedirs(output_dir)
        except OSError as exc:
            raise EngineError(f"cannot create output directory {output_dir}: {exc}") from exc
        future = TaskFuture(id=future_id, task=task.name, output_dir=output_dir)
        self.table.index(future)
        return future

    def _start_worker(self, future, task, resolved, upstream_bindings):
        thread = threading.Thread(
            target=self._worker,
            args=(future, task, resolved, upstream_bindings),
            name=future.id,
            daemon=True,
        )
        self._threads.append(thread)
        thread.start()

    def _notify(self, future: TaskFuture):
        if self._state_listener is not None:
            try:
                self._state_listener(future.id, future.state, future.task)
            except Exception:  # listeners must never kill a worker
                pass

    def _set_state(self, future: TaskFuture, state: str):
        self.table.set_state(future.id, state)
        self._notify(future)

    def _worker(self, future, task, resolved, upstream_bindings):
        self._set_state(future, RUNNING)
        bindings = dict(resolved)
        if upstream_bindings is not None:
            failed_id = self.table.wait_upstreams(list(upstream_bindings.values()))
            if failed_id is not None:
                self._fail_without_launch(future, f"upstream {failed_id} failed")
                return
            for slot in task.upstream_slots:
                upstream = self.table.get(upstream_bindings[slot.slot])
                record = upstream.record
                for wire in slot.wiring:
                    paths = (record.produced_outputs if record else {}).get(wire.output, [])
                    if not paths:
                        self._fail_without_launch(
                            future,
                            f"upstream {upstream.id} produced no output for "
                            f"role {wire.output!r}",
                        )
                        return
                    bindings[wire.param] = paths[0]
            future.inputs.update(bindings)
        self._execute(future, task, bindings)

    def _fail_without_launch(self, future: TaskFuture, cause: str):
        stdout_path = os.path.join(future.output_dir, "stdout.txt")
        stderr_path = os.path.join(future.output_dir, "stderr.txt")
        for p in (stdout_path, stderr_path):
            open(p, "ab").close()
        record = ExecutionRecord(
            exit_code=NEVER_LAUNCHED,
            stdout_path=stdout_path,
            stderr_path=stderr_path,
            produced_outputs={},
            wall_time=0.0,
        )
        self.table.finish(future.id, record, FAILED, cause)
        self._notify(future)

    def _execute(self, future: TaskFuture, task: TaskDefinition, bindings: dict[str, str]):
        stdout_path = os.path.join(future.output_dir, "stdout.txt")
        stderr_path = os.path.join(future.output_dir, "stderr.txt")
        try:
            command = substitute_command(task.command_template, bindings)
        except MissingBindingError as exc:
            self._fail_without_launch(future, str(exc))
            return
        started = time.monotonic()
        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            proc = subprocess.Popen(
                command, shell=True, cwd=future.output_dir, stdout=out, stderr=err
            )
            exit_code = proc.wait()
        finished = time.monotonic()
        produced: dict[str, list[str]] = {}
        for spec in task.declared_outputs:
            if spec.path is not None:
                candidate = os.path.join(future.output_dir, spec.path)
                produced[spec.role] = [candidate] if os.path.exists(candidate) else []
            else:
                produced[spec.role] = sorted(
                    globmod.glob(os.path.join(future.output_dir, spec.glob or ""))
                )
        record = ExecutionRecord(
            exit_code=exit_code,
            stdout_path=stdout_path,
            stderr_path=stderr_path,
            produced_outputs=produced,
            wall_time=finished - started,
            started_at=started,
            finished_at=finished,
        )
        state = SUCCEEDED if exit_code == 0 else FAILED
        cause = None if exit_code == 0 else f"command exited with code {exit_code}"
        self.table.finish(future.id, record, state, cause)
        self._notify(future)
