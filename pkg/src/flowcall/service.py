"""Long-running HTTP service: submit runs, inspect them, stream their events.

Each run executes in a background thread against its own engine and run
directory; every event is appended to the run's in-memory log and to
``events.jsonl`` on disk, so subscribers connected from the start see a
faithful prefix-ordered view (replay of everything so far, then live
events, over server-sent events). Escalations raised by planned runs are
answered through POST endpoints and delivered exactly once.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Literal

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from . import agents, conversation, runlog
from .backend import make_backend
from .engine import Engine, RUNS_ROOT_ENV, DEFAULT_RUNS_ROOT
from .registry import Registry

API_TOKEN_ENV = "FLOWCALL_API_TOKEN"

MODE_LOOP = "direct-loop"
MODE_PLANNED = "planned"
MODES = (MODE_LOOP, MODE_PLANNED)

RUN_RUNNING = "running"
RUN_DONE = "done"
RUN_ABORTED = "aborted"

# how long a finished stream generator waits between condition checks
_STREAM_POLL_SECONDS = 1.0


class UnknownRunError(LookupError):
    pass


class UnknownManifestError(LookupError):
    pass


@dataclass
class _Run:
    run_id: str
    instruction: str
    mode: str
    manifest: str
    writer: runlog.RunWriter
    engine: Engine
    channel: agents.EscalationChannel
    status: str = RUN_RUNNING
    created: float = field(default_factory=time.time)
    finished: float | None = None
    plan_report: dict | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    cond: threading.Condition = None  # type: ignore[assignment]
    terminal: bool = False

    def __post_init__(self):
        self.cond = threading.Condition(self.lock)

    def emit(self, event_type: str, data: dict):
        with self.cond:
            self.writer.emit(event_type, data)
            self.cond.notify_all()

    def mark_terminal(self, status: str):
        with self.cond:
            self.status = status
            self.finished = time.time()
            self.terminal = True
            self.cond.notify_all()

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "instruction": self.instruction,
            "mode": self.mode,
            "manifest": self.manifest,
            "status": self.status,
            "created": self.created,
            "finished": self.finished,
        }

    def detail(self) -> dict:
        info = self.summary()
        info["event_count"] = len(self.writer.events)
        info["plan_report"] = self.plan_report
        info["pending_escalations"] = [
            {"escalation_id": e.id, "question": e.question, "step_index": e.step_index}
            for e in self.channel.pending()
        ]
        return info


class RunManager:
    """Owns every run the service has started and their shared config."""

    def __init__(
        self,
        registries: dict[str, Registry],
        *,
        runs_root: str | None = None,
        default_backend: str = "live",
        default_manifest: str | None = None,
        capacity: agents.HostCapacity | None = None,
        preamble: str | None = None,
    ):
        if not registries:
            raise ValueError("at least one manifest must be loaded")
        self.registries = dict(registries)
        self.runs_root = runs_root or os.environ.get(RUNS_ROOT_ENV) or DEFAULT_RUNS_ROOT
        self.default_backend = default_backend
        self.default_manifest = default_manifest or next(iter(self.registries))
        self.capacity = capacity
        self.preamble = preamble
        self._runs: dict[str, _Run] = {}
        self._lock = threading.Lock()

    # -- run lifecycle --

    def submit_run(
        self,
        instruction: str,
        mode: str,
        manifest: str | None = None,
        *,
        backend_spec: str | None = None,
        budget: int = conversation.DEFAULT_BUDGET,
        seed_counter: int = 0,
    ) -> str:
        if not instruction.strip():
            raise ValueError("instruction must not be empty")
        if mode not in MODES:
            raise ValueError(f"invalid mode {mode!r}; expected one of {MODES}")
        manifest_name = manifest or self.default_manifest
        try:
            registry = self.registries[manifest_name]
        except KeyError:
            raise UnknownManifestError(f"unknown manifest {manifest_name!r}") from None

        run_holder: dict[str, _Run] = {}

        def state_listener(future_id: str, state: str, task: str):
            run = run_holder.get("run")
            if run is not None:
                run.emit("future_state", {"future_id": future_id, "state": state, "task": task})

        engine = Engine(
            registry,
            runs_root=self.runs_root,
            seed_counter=seed_counter,
            state_listener=state_listener,
        )
        run = _Run(
            run_id=engine.run_id,
            instruction=instruction,
            mode=mode,
            manifest=manifest_name,
            writer=runlog.RunWriter(engine.run_dir),
            engine=engine,
            channel=agents.EscalationChannel(),
        )
        run_holder["run"] = run
        with self._lock:
            self._runs[run.run_id] = run
        thread = threading.Thread(
            target=self._execute,
            args=(run, registry, backend_spec or self.default_backend, budget),
            name=f"run-{run.run_id}",
            daemon=True,
        )
        thread.start()
        return run.run_id

    def _execute(self, run: _Run, registry: Registry, backend_spec: str, budget: int):
        run.emit("run_started", {
            "instruction": run.instruction,
            "mode": run.mode,
            "manifest": run.manifest,
        })
        status = RUN_ABORTED
        try:
            backend = make_backend(backend_spec)
            sink = lambda event: run.emit(event.type, event.data)
            if run.mode == MODE_LOOP:
                transcript = conversation.run_instruction(
                    run.instruction,
                    registry,
                    run.engine,
                    backend,
                    budget,
                    preamble=self.preamble,
                    on_event=sink,
                )
                run.engine.await_all()
                terminal = transcript.terminal
                status = RUN_DONE if terminal and terminal.type == "done" else RUN_ABORTED
            else:
                plan = agents.make_plan(
                    run.instruction, registry, backend, on_event=sink
                )
                report = agents.execute_plan(
                    plan,
                    run.engine,
                    backend,
                    run.channel,
                    capacity=self.capacity,
                    budget=budget,
                    on_event=sink,
                )
                run.plan_report = report.to_dict()
                status = RUN_DONE if report.status == agents.PLAN_COMPLETED else RUN_ABORTED
        except agents.PlanError as exc:
            run.emit("aborted", {"reason": "unplannable", "detail": str(exc)})
        except Exception as exc:  # surface, never leave a silently hung run
            run.emit("aborted", {"reason": "internal-error", "detail": str(exc)})
        finally:
            run.channel.close()
            run.emit("run_finished", {"status": status})
            run.mark_terminal(status)
            run.writer.finalize(run.summary() | {"plan_report": run.plan_report})

    # -- queries --

    def get(self, run_id: str) -> _Run:
        with self._lock:
            try:
                return self._runs[run_id]
            except KeyError:
                raise UnknownRunError(f"unknown run {run_id!r}") from None

    def list_runs(self) -> list[dict]:
        with self._lock:
            runs = list(self._runs.values())
        return [r.summary() for r in sorted(runs, key=lambda r: r.created)]

    def stream_events(self, run_id: str) -> Iterator[runlog.EventRecord]:
        """Replay all events so far, then follow live until the run finishes."""
        run = self.get(run_id)
        cursor = 0
        while True:
            with run.cond:
                while cursor >= len(run.writer.events) and not run.terminal:
                    run.cond.wait(_STREAM_POLL_SECONDS)
                batch = run.writer.events[cursor:]
                cursor += len(batch)
                finished = run.terminal and cursor >= len(run.writer.events)
            yield from batch
            if finished:
                return

    def answer_escalation(self, run_id: str, escalation_id: str, decision: agents.HumanDecision):
        run = self.get(run_id)
        run.channel.answer(escalation_id, decision)

    def dag(self, run_id: str) -> dict:
        run = self.get(run_id)
        with run.cond:
            events = list(run.writer.events)
        return dag_from_events(events)


_STATE_RANK = {"pending": 0, "running": 1, "succeeded": 2, "failed": 2}


def dag_from_events(events) -> dict:
    """Fold an event stream into dependency-graph nodes and edges.

    Nodes are futures (from dispatch events, states advanced by
    future_state events); edges connect a future to any dispatch argument
    naming another known future. States only move forward, and a state
    observed before its node's dispatch event (worker threads race the
    dispatcher) is buffered, not lost. The web UI applies this same fold
    client-side.
    """
    nodes: dict[str, dict] = {}
    edges: list[dict] = []
    ahead: dict[str, str] = {}  # states seen before their dispatch event

    def advance(node: dict, state: str):
        if _STATE_RANK.get(state, 0) >= _STATE_RANK.get(node["state"], 0):
            node["state"] = state

    for event in events:
        data = event.data
        if event.type == "dispatch":
            future_id = data["future_id"]
            task = data["function"]
            for suffix in ("_from_files", "_from_futures"):
                if task.endswith(suffix):
                    task = task[len("fcall_"):-len(suffix)]
                    break
            node = {
                "id": future_id,
                "task": task,
                "state": data.get("future_state", "pending"),
                "step_index": data.get("step_index"),
            }
            if future_id in ahead:
                advance(node, ahead.pop(future_id))
            nodes[future_id] = node
            for value in (data.get("args") or {}).values():
                if value in nodes:
                    edges.append({"source": value, "target": future_id})
        elif event.type == "future_state":
            future_id = data.get("future_id", "")
            node = nodes.get(future_id)
            if node is not None:
                advance(node, data["state"])
            elif future_id:
                previous = ahead.get(future_id, "pending")
                if _STATE_RANK.get(data["state"], 0) >= _STATE_RANK.get(previous, 0):
                    ahead[future_id] = data["state"]
    return {"nodes": list(nodes.values()), "edges": edges}


# -- HTTP layer --------------------------------------------------------------


class SubmitRunRequest(BaseModel):
    instruction: str = Field(min_length=1)
    mode: Literal["direct-loop", "planned"] = MODE_LOOP
    manifest: str | None = None
    backend: str | None = None
    budget: int = Field(default=conversation.DEFAULT_BUDGET, gt=0)
    seed_counter: int = Field(default=0, ge=0)


class DecisionRequest(BaseModel):
    decision: Literal["approve_retry", "provide_binding", "abort"]
    values: dict[str, str] | None = None
    note: str = ""


def create_app(manager: RunManager) -> FastAPI:
    app = FastAPI(title="flowcall", version="0.1.0")
    # the web UI is served separately and talks to these endpoints directly
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    token = os.environ.get(API_TOKEN_ENV, "")

    def authorize(request: Request):
        if token and request.headers.get("Authorization") != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad token")

    auth = Depends(authorize)

    @app.post("/runs", status_code=202, dependencies=[auth])
    def submit_run(body: SubmitRunRequest) -> dict:
        try:
            run_id = manager.submit_run(
                body.instruction,
                body.mode,
                body.manifest,
                backend_spec=body.backend,
                budget=body.budget,
                seed_counter=body.seed_counter,
            )
        except UnknownManifestError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"run_id": run_id}

    @app.get("/runs", dependencies=[auth])
    def list_runs() -> dict:
        return {"runs": manager.list_runs()}

    @app.get("/runs/{run_id}", dependencies=[auth])
    def get_run(run_id: str) -> dict:
        try:
            return manager.get(run_id).detail()
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/runs/{run_id}/dag", dependencies=[auth])
    def get_dag(run_id: str) -> dict:
        try:
            return manager.dag(run_id)
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/runs/{run_id}/events", dependencies=[auth])
    def get_events(run_id: str):
        try:
            manager.get(run_id)
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

        def sse() -> Iterator[str]:
            for event in manager.stream_events(run_id):
                payload = json.dumps(event.data, separators=(",", ":"))
                yield f"id: {event.seq}\nevent: {event.type}\ndata: {payload}\n\n"

        return StreamingResponse(sse(), media_type="text/event-stream")

    @app.post("/runs/{run_id}/escalations/{escalation_id}", dependencies=[auth])
    def answer_escalation(run_id: str, escalation_id: str, body: DecisionRequest) -> dict:
        decision = agents.HumanDecision(
            kind=body.decision, values=body.values, note=body.note
        )
        try:
            manager.answer_escalation(run_id, escalation_id, decision)
        except UnknownRunError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except agents.EscalationLookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except agents.DuplicateAnswerError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return {"status": "delivered", "escalation_id": escalation_id}

    return app
