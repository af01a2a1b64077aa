"""Acceptance suite: one test per release criterion.

Each criterion records a PASS/FAIL verdict that pytest prints as a final
"acceptance criteria" section (see conftest.pytest_terminal_summary).
"""

import json
import random
import time
from contextlib import contextmanager

import pytest
from fastapi.testclient import TestClient

from flowcall import cli, service
from flowcall.backend import LiveBackend, ScriptedBackend, load_script
from flowcall.conversation import run_instruction
from flowcall.engine import Engine
from flowcall.registry import derive_descriptors, load_manifest, load_manifest_file
from flowcall.runlog import normalize

from conftest import (
    ACCEPTANCE_RESULTS,
    GOLDENS,
    PAPER_INSTRUCTION,
    STOP_RULE,
    FakeScheduler,
    completion_body,
    manifest_text,
    script_text,
    stub_server,  # noqa: F401  (fixture)
    task_entry,
)
from test_agents import DEMO_PLAN_STEPS, flaky_manifest, flaky_plan
from test_backend import request_for
from test_service import sse_events, wait_escalation, wait_terminal


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        ACCEPTANCE_RESULTS.append((name, "FAIL"))
        raise
    ACCEPTANCE_RESULTS.append((name, "PASS"))


def test_paper_transcript_golden(capsys, workspace, demo_manifest_path,
                                 paper_script_path):
    """Scripted fixture + demo manifest + counter 5 reproduce the transcript."""
    with criterion("paper-transcript-golden"):
        started = time.monotonic()
        code = cli.main([
            "run", demo_manifest_path, PAPER_INSTRUCTION,
            "--backend", f"script:{paper_script_path}",
            "--seed-counter", "5",
            "--quiet-run-dir",
        ])
        elapsed = time.monotonic() - started
        out = capsys.readouterr().out
        assert code == 0
        golden = (GOLDENS / "paper_transcript.txt").read_text()
        assert normalize(out) == golden
        assert "Task scheduled with AppFuture id: future_5_run_vcf_transform" in out
        assert "Task scheduled with AppFuture id: future_6_run_pyclone_vi" in out
        assert out.rstrip().endswith("DONE")
        assert elapsed < 2.0, f"took {elapsed:.2f}s (limit 2s)"


def test_descriptor_golden(demo_registry):
    """pyclone_vi descriptors serialize byte-exact to the stored golden."""
    with criterion("descriptor-golden"):
        pair = derive_descriptors(demo_registry.task("pyclone_vi"))
        rendered = json.dumps([d.to_wire() for d in pair], indent=4) + "\n"
        golden = (GOLDENS / "pyclone_vi_descriptors.json").read_text()
        assert rendered == golden
        assert pair[0].required == ("pyclone_vi_formatted",)
        assert pair[1].required == ("vcf_future_id",)


def test_message_accumulation_property(demo_registry):
    """1000 randomized scripted cases, n in 0..10: |messages| == 2 + 2n."""
    with criterion("message-accumulation-property"):
        rng = random.Random(0xACC)
        started = time.monotonic()
        violations = 0
        for case in range(1000):
            n = rng.randint(0, 10)
            rules = []
            for _ in range(n):
                task = rng.choice(demo_registry.tasks)
                rules.append({
                    "match": {"always": True},
                    "respond": {
                        "function": f"fcall_{task.name}_from_files",
                        "arguments": {
                            p.name: f"./f{rng.randrange(1 << 16):x}"
                            for p in task.file_params
                        },
                    },
                    "consume_once": True,
                })
            backend = ScriptedBackend(load_script(script_text(*rules, STOP_RULE)))
            scheduler = FakeScheduler(demo_registry, seed_counter=rng.randrange(50))
            transcript = run_instruction(
                "go", demo_registry, scheduler, backend, preamble="",
            )
            if len(transcript.messages) != 2 + 2 * n:
                violations += 1
            if len(transcript.dispatched_ids()) != n:
                violations += 1
        elapsed = time.monotonic() - started
        assert violations == 0
        assert elapsed < 10.0, f"took {elapsed:.2f}s (limit 10s)"


def _random_dag(rng, size, fail_some):
    """Build (manifest text, edge list, failing sources) for one random DAG."""
    tasks, edges, failing = [], [], set()
    for i in range(size):
        parents = [j for j in range(i) if rng.random() < 0.4]
        if not parents:
            fails = fail_some and rng.random() < 0.35
            if fails:
                failing.add(i)
            tasks.append(task_entry(
                f"n{i}",
                command="exit 1" if fails else "echo x > out.txt",
                outputs=[{"role": "out", "path": "out.txt"}],
            ))
        else:
            params = [f"in{j}" for j in range(len(parents))]
            cat = " ".join(f"${{in{j}}}" for j in range(len(parents)))
            tasks.append(task_entry(
                f"n{i}",
                params=params,
                command=f"cat {cat} > out.txt",
                outputs=[{"role": "out", "path": "out.txt"}],
                upstream=[
                    {"slot": f"dep{j}", "wiring": [{"output": "out", "param": f"in{j}"}]}
                    for j in range(len(parents))
                ],
            ))
            edges.extend((p, i) for p in parents)
    return manifest_text(*tasks), edges, failing


def _descendants(edges, sources):
    reach = set(sources)
    changed = True
    while changed:
        changed = False
        for up, down in edges:
            if up in reach and down not in reach:
                reach.add(down)
                changed = True
    return reach - set(sources)


def test_dependency_ordering_property(tmp_path):
    """100 randomized DAGs: starts respect upstream finishes; failures block."""
    with criterion("dependency-ordering-property"):
        rng = random.Random(0xDA6)
        started = time.monotonic()
        for case in range(100):
            size = rng.randint(2, 8)
            text, edges, failing = _random_dag(rng, size, fail_some=case % 3 == 0)
            reg = load_manifest(text)
            engine = Engine(reg, runs_root=str(tmp_path / f"dag{case}"))
            ids = {}
            for i in range(size):
                task = reg.task(f"n{i}")
                parents = [p for (p, c) in edges if c == i]
                if not parents:
                    ids[i] = engine.schedule_from_files(task, {})
                else:
                    ids[i] = engine.schedule_from_futures(
                        task, {f"dep{j}": ids[p] for j, p in enumerate(parents)}
                    )
            engine.await_all(timeout=60)
            snapshots = {i: engine.resolve(ids[i]) for i in range(size)}
            blocked = _descendants(edges, failing)
            for i, snapshot in snapshots.items():
                if i in failing:
                    assert snapshot.state == "failed"
                elif i in blocked:
                    # downstream of a failure: never starts
                    assert snapshot.state == "failed", f"case {case} node {i}"
                    assert snapshot.record.started_at is None
                else:
                    assert snapshot.state == "succeeded", f"case {case} node {i}"
            for up, down in edges:
                if down in blocked or up in failing:
                    continue
                assert snapshots[down].record.started_at >= snapshots[up].record.finished_at, (
                    f"case {case}: edge {up}->{down} ordering violated"
                )
        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"took {elapsed:.2f}s (limit 60s)"


def test_error_forwarding_recovery(workspace, demo_registry, tmp_path):
    """One bad name then a correction recovers; three bad responses abort."""
    with criterion("error-forwarding-recovery"):
        recover = ScriptedBackend(load_script(script_text(
            {"match": {"substring": "go"},
             "respond": {"function": "fcall_nope_from_files", "arguments": {}},
             "consume_once": True},
            {"match": {"substring": "Error:"},
             "respond": {"function": "fcall_vcf_transform_from_files",
                         "arguments": {
                             "vep_vcf": "./example_data/VEP_raw.A25.mutect2.filtered.snp.vcf"
                         }},
             "consume_once": True},
            STOP_RULE,
        )))
        engine = Engine(demo_registry, runs_root=str(tmp_path / "r1"))
        transcript = run_instruction("go", demo_registry, engine, recover, preamble="")
        assert [e.type for e in transcript.events] == [
            "error_forwarded", "dispatch", "done",
        ]
        engine.await_all(timeout=30)

        hopeless = ScriptedBackend(load_script(script_text(
            {"match": {"always": True},
             "respond": {"function": "fcall_missing_from_files", "arguments": {}}},
        )))
        engine2 = Engine(demo_registry, runs_root=str(tmp_path / "r2"))
        transcript2 = run_instruction("go", demo_registry, engine2, hopeless,
                                      preamble="")
        assert transcript2.terminal.type == "aborted"
        assert transcript2.terminal.data["reason"] == "unrecoverable-dispatch"
        assert len(transcript2.dispatched_ids()) == 0

        # deterministic: identical scripts give identical event sequences
        engine3 = Engine(demo_registry, runs_root=str(tmp_path / "r3"))
        hopeless2 = ScriptedBackend(load_script(script_text(
            {"match": {"always": True},
             "respond": {"function": "fcall_missing_from_files", "arguments": {}}},
        )))
        transcript3 = run_instruction("go", demo_registry, engine3, hopeless2,
                                      preamble="")
        assert [e.type for e in transcript2.events] == [e.type for e in transcript3.events]


def test_token_budget_safety(demo_registry, tmp_path):
    """Budget 10 with an oversized preamble aborts before any dispatch."""
    with criterion("token-budget-safety"):
        backend = ScriptedBackend(load_script(script_text(STOP_RULE)))
        engine = Engine(demo_registry, runs_root=str(tmp_path / "runs"))
        transcript = run_instruction(
            "do things", demo_registry, engine, backend,
            budget=10, preamble="context " * 600,
        )
        assert transcript.terminal.type == "aborted"
        assert transcript.terminal.data["reason"] == "token-budget"
        assert len(transcript.dispatched_ids()) == 0
        assert len(engine.table) == 0  # no backend round-trip, nothing scheduled


def test_planned_mode_end_to_end(workspace, demo_manifest_path, tmp_path):
    """4-step demo plan; rigged failure + scripted retry; escalation via HTTP."""
    with criterion("planned-mode-end-to-end"):
        # 1) all four steps complete ok
        registry = load_manifest_file(demo_manifest_path)
        plan_script = tmp_path / "plan.json"
        plan_script.write_text(script_text(
            {"match": {"substring": "Plan the following request"},
             "respond": {"final": json.dumps({"steps": DEMO_PLAN_STEPS})},
             "consume_once": True},
            STOP_RULE,
        ))
        manager = service.RunManager(
            {"demo": registry, "fault": load_manifest(flaky_manifest())},
            runs_root=str(workspace / "runs"),
            default_backend=f"script:{plan_script}",
        )
        client = TestClient(service.create_app(manager))
        run_id = client.post("/runs", json={
            "instruction": "run the demo end to end", "mode": "planned",
        }).json()["run_id"]
        body = wait_terminal(client, run_id)
        assert body["status"] == "done"
        events = sse_events(client, run_id)
        outcomes = [d for t, d in events if t == "step_outcome"]
        assert len(outcomes) == 4
        assert all(o["verdict"] == "ok" for o in outcomes)

        # 2) step 2 rigged to fail once; scripted debugger proposes retry
        retry_script = tmp_path / "retry.json"
        retry_script.write_text(script_text(
            {"match": {"substring": "Plan the following request"},
             "respond": {"final": json.dumps(
                 {"steps": flaky_plan(tmp_path / "acc_marker")})},
             "consume_once": True},
            {"match": {"substring": "Diagnose the failed step"},
             "respond": {"final": json.dumps({"action": "retry_step"})}},
            STOP_RULE,
        ))
        run_id = client.post("/runs", json={
            "instruction": "seed then flaky",
            "mode": "planned",
            "manifest": "fault",
            "backend": f"script:{retry_script}",
        }).json()["run_id"]
        body = wait_terminal(client, run_id)
        assert body["status"] == "done"
        events = sse_events(client, run_id)
        step2 = [d for t, d in events if t == "step_outcome" and d["step_index"] == 1]
        assert [o["verdict"] for o in step2] == ["failed", "ok"]
        remediations = [d for t, d in events if t == "remediation"]
        assert [r["kind"] for r in remediations] == ["retry_step"]

        # 3) debugger garbage raises an escalation; answering approve_retry
        #    through the service endpoint completes the run
        garbage_script = tmp_path / "garbage.json"
        garbage_script.write_text(script_text(
            {"match": {"substring": "Plan the following request"},
             "respond": {"final": json.dumps(
                 {"steps": flaky_plan(tmp_path / "acc_marker2")})},
             "consume_once": True},
            {"match": {"substring": "Diagnose the failed step"},
             "respond": {"final": "utter nonsense"}},
            STOP_RULE,
        ))
        run_id = client.post("/runs", json={
            "instruction": "seed then flaky again",
            "mode": "planned",
            "manifest": "fault",
            "backend": f"script:{garbage_script}",
        }).json()["run_id"]
        escalation = wait_escalation(client, run_id)
        answer = client.post(
            f"/runs/{run_id}/escalations/{escalation['escalation_id']}",
            json={"decision": "approve_retry"},
        )
        assert answer.status_code == 200
        body = wait_terminal(client, run_id)
        assert body["status"] == "done"


def test_live_protocol_conformance(stub_server):
    """The live client maps canned HTTP bodies exactly like the scripted one."""
    with criterion("live-protocol-conformance"):
        server, handler = stub_server
        handler.canned = [
            completion_body(
                function="fcall_vcf_transform_from_files",
                arguments='{"vep_vcf": "./example_data/VEP_raw.A25.mutect2.filtered.snp.vcf"}',
            ),
            completion_body(
                function="fcall_pyclone_vi_from_futures",
                arguments='{"vcf_future_id": "future_5_run_vcf_transform"}',
            ),
            completion_body(content="DONE"),
        ]
        live = LiveBackend(base_url=f"http://127.0.0.1:{server.server_address[1]}")
        scripted = ScriptedBackend(load_script(script_text(
            {"match": {"substring": "transform the vcf file"},
             "respond": {
                 "function": "fcall_vcf_transform_from_files",
                 "raw_arguments": '{"vep_vcf": "./example_data/VEP_raw.A25.mutect2.filtered.snp.vcf"}',
             },
             "consume_once": True},
            {"match": {"substring": "future_5_run_vcf_transform"},
             "respond": {
                 "function": "fcall_pyclone_vi_from_futures",
                 "raw_arguments": '{"vcf_future_id": "future_5_run_vcf_transform"}',
             },
             "consume_once": True},
            STOP_RULE,
        )))
        prompts = [
            PAPER_INSTRUCTION,
            "Task scheduled with AppFuture id: future_5_run_vcf_transform",
            "Task scheduled with AppFuture id: future_6_run_pyclone_vi",
        ]
        for prompt in prompts:
            from_live = live.complete(request_for(prompt))
            from_script = scripted.complete(request_for(prompt))
            assert from_live == from_script, prompt
        live.close()
