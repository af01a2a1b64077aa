"""Operator command line: validate manifests, run instructions, replay, serve."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import agents, conversation, runlog, service
from .backend import BackendError, ScriptError, make_backend
from .engine import Engine
from .registry import ManifestError, load_manifest_file


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_registry(path: str):
    try:
        return load_manifest_file(path)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc


def cmd_validate(args) -> int:
    registry = _load_registry(args.manifest)
    print(f"{args.manifest}: OK ({len(registry)} task(s))")
    return 0


def cmd_tasks(args) -> int:
    registry = _load_registry(args.manifest)
    for task in registry.tasks:
        params = ", ".join(p.name for p in task.file_params) or "-"
        slots = ", ".join(s.slot for s in task.upstream_slots) or "-"
        print(f"{task.name}\tparams: {params}\tslots: {slots}")
        print(f"\t{task.description}")
    return 0


def _printing_sink(writer: runlog.RunWriter):
    def sink(event):
        writer.emit(event.type, event.data)
        sys.stdout.write(runlog.render_event(event.type, event.data))
        sys.stdout.flush()
    return sink


def _run_loop(args, registry, engine, backend, sink) -> int:
    transcript = conversation.run_instruction(
        args.instruction,
        registry,
        engine,
        backend,
        args.budget,
        preamble=_read_preamble(args),
        on_event=sink,
    )
    engine.await_all(timeout=args.wait_timeout)
    terminal = transcript.terminal
    if terminal is None or terminal.type != "done":
        return _fail(f"run aborted: {terminal.data if terminal else 'no terminal event'}")
    failed = [
        fid for fid in engine.table.ids()
        if engine.resolve(fid).state == "failed"
    ]
    if failed:
        return _fail(f"task future(s) failed: {', '.join(failed)}")
    return 0


def _prompt_responder(escalation: agents.Escalation) -> agents.HumanDecision:
    """Inline escalation prompt: approve_retry | abort | provide_binding k=v ..."""
    print(f"\nEscalation {escalation.id}: {escalation.question}", file=sys.stderr)
    while True:
        print("decision [approve_retry|abort|provide_binding k=v ...]: ",
              end="", file=sys.stderr, flush=True)
        line = sys.stdin.readline()
        if not line:
            return agents.HumanDecision(agents.ABORT, note="input closed")
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == agents.APPROVE_RETRY:
            return agents.HumanDecision(agents.APPROVE_RETRY)
        if parts[0] == agents.ABORT:
            return agents.HumanDecision(agents.ABORT)
        if parts[0] == agents.PROVIDE_BINDING:
            values = {}
            for pair in parts[1:]:
                if "=" in pair:
                    key, value = pair.split("=", 1)
                    values[key] = value
            return agents.HumanDecision(agents.PROVIDE_BINDING, values=values)
        print(f"unrecognized decision {parts[0]!r}", file=sys.stderr)


def _run_plan(args, registry, engine, backend, sink, *, interactive: bool) -> int:
    responder = _prompt_responder if interactive else None
    channel = agents.EscalationChannel(responder=responder)
    if not interactive:
        channel.close()  # batch runs cannot answer; escalations abort
    try:
        plan = agents.make_plan(args.instruction, registry, backend, on_event=sink)
    except agents.PlanError as exc:
        return _fail(str(exc))
    report = agents.execute_plan(
        plan, engine, backend, channel, budget=args.budget, on_event=sink
    )
    if report.status != agents.PLAN_COMPLETED:
        return _fail(f"plan aborted: {report.reason}")
    return 0


def _read_preamble(args) -> str | None:
    if getattr(args, "preamble", None):
        with open(args.preamble, encoding="utf-8") as fh:
            return fh.read()
    return None


def cmd_run(args) -> int:
    registry = _load_registry(args.manifest)
    backend = make_backend(args.backend)
    engine = Engine(
        registry, runs_root=args.runs_root, seed_counter=args.seed_counter
    )
    writer = runlog.RunWriter(engine.run_dir)
    sink = _printing_sink(writer)
    try:
        if args.mode == "loop":
            code = _run_loop(args, registry, engine, backend, sink)
        else:
            code = _run_plan(args, registry, engine, backend, sink, interactive=False)
    finally:
        writer.finalize({
            "instruction": args.instruction,
            "mode": args.mode,
            "manifest": args.manifest,
        })
    if not args.quiet_run_dir:
        print(f"run directory: {engine.run_dir}", file=sys.stderr)
    return code


def cmd_chat(args) -> int:
    registry = _load_registry(args.manifest)
    backend = make_backend(args.backend)
    print("enter instructions, one per line (EOF or 'quit' to exit)", file=sys.stderr)
    while True:
        print("> ", end="", file=sys.stderr, flush=True)
        line = sys.stdin.readline()
        if not line or line.strip() in ("quit", "exit"):
            return 0
        instruction = line.strip()
        if not instruction:
            continue
        engine = Engine(registry, runs_root=args.runs_root)
        writer = runlog.RunWriter(engine.run_dir)
        sink = _printing_sink(writer)
        chat_args = argparse.Namespace(
            instruction=instruction,
            budget=args.budget,
            wait_timeout=args.wait_timeout,
            preamble=getattr(args, "preamble", None),
        )
        try:
            if args.mode == "loop":
                _run_loop(chat_args, registry, engine, backend, sink)
            else:
                _run_plan(chat_args, registry, engine, backend, sink, interactive=True)
        finally:
            writer.finalize({"instruction": instruction, "mode": args.mode})


def cmd_replay(args) -> int:
    try:
        events = runlog.read_events(args.transcript)
    except OSError as exc:
        return _fail(f"cannot read transcript: {exc}")
    sys.stdout.write(runlog.normalize(runlog.render_transcript(events)))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    registry = _load_registry(args.manifest)
    manager = service.RunManager(
        {registry.name: registry},
        runs_root=args.runs_root,
        default_backend=args.backend,
    )
    app = service.create_app(manager)
    host, _, port = args.addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcall",
        description="Run computational workflows from natural-language instructions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("tasks", help="list the tasks in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_tasks)

    def add_run_opts(p, with_seed=True):
        p.add_argument("--backend", default="live",
                       help="'live' or 'script:<file>' (default: live)")
        p.add_argument("--mode", choices=("loop", "plan"), default="loop")
        p.add_argument("--budget", type=int, default=conversation.DEFAULT_BUDGET)
        p.add_argument("--runs-root", default=None,
                       help="directory for run records (default: $FLOWCALL_RUNS_ROOT or ./runs)")
        p.add_argument("--preamble", default=None,
                       help="file overriding the default system context")
        p.add_argument("--wait-timeout", type=float, default=120.0,
                       help="seconds to wait for scheduled futures after the loop ends")
        if with_seed:
            p.add_argument("--seed-counter", type=int, default=0,
                           help="initial future counter value")

    p = sub.add_parser("run", help="run one instruction")
    p.add_argument("manifest")
    p.add_argument("instruction")
    add_run_opts(p)
    p.add_argument("--quiet-run-dir", action="store_true",
                   help="do not print the run directory to stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("chat", help="interactive instruction loop")
    p.add_argument("manifest")
    add_run_opts(p, with_seed=False)
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("replay", help="re-print a stored run transcript, normalized")
    p.add_argument("transcript", help="run directory or events.jsonl file")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("manifest")
    p.add_argument("--addr",
                   default=os.environ.get("FLOWCALL_ADDR", "127.0.0.1:8321"))
    p.add_argument("--backend", default="live")
    p.add_argument("--runs-root", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, ScriptError, BackendError, ValueError) as exc:
        return _fail(str(exc))
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
