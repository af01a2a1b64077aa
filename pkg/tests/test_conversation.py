import json
import math
import random

import pytest

from flowcall.backend import ScriptedBackend, load_script
from flowcall.conversation import (
    DEFAULT_BUDGET,
    REASON_TOKEN_BUDGET,
    REASON_UNRECOVERABLE,
    ConversationError,
    FunctionCall,
    Message,
    default_preamble,
    estimate_tokens,
    new_conversation,
    run_instruction,
    step,
)
from flowcall.engine import Engine
from flowcall.registry import load_manifest

from conftest import (
    PAPER_INSTRUCTION,
    STOP_RULE,
    FakeScheduler,
    manifest_text,
    script_text,
    task_entry,
)


@pytest.fixture()
def paper_backend(paper_script_path):
    return ScriptedBackend(load_script(open(paper_script_path).read()))


def stop_backend():
    return ScriptedBackend(load_script(script_text(STOP_RULE)))


class TestEstimateTokens:
    def test_empty_input_is_zero(self):
        assert estimate_tokens([], ()) == 0

    def test_eight_char_message(self):
        assert estimate_tokens([Message("user", "12345678")]) == 2 + 4

    def test_function_call_chars_counted(self):
        message = Message("assistant", function_call=FunctionCall("abcd", "efgh"))
        assert estimate_tokens([message]) == math.ceil(8 / 4) + 4

    def test_additive_over_components(self, demo_registry):
        # independent recomputation from raw character counts
        preamble, instruction = "a" * 37, "b" * 11
        state = new_conversation(
            preamble, instruction, DEFAULT_BUDGET,
            descriptors=demo_registry.descriptors(),
        )
        expected = (
            math.ceil(37 / 4) + 4
            + math.ceil(11 / 4) + 4
            + sum(math.ceil(len(d.serialize()) / 4) for d in demo_registry.descriptors())
        )
        assert state.token_estimate == expected

    def test_stable_across_runs(self, demo_registry):
        args = ([Message("system", default_preamble()), Message("user", PAPER_INSTRUCTION)],
                demo_registry.descriptors())
        assert estimate_tokens(*args) == estimate_tokens(*args)


class TestNewConversation:
    def test_two_messages_active(self):
        state = new_conversation(default_preamble(), PAPER_INSTRUCTION, 16384)
        assert [m.role for m in state.messages] == ["system", "user"]
        assert state.status == "active"
        assert state.dispatch_count == 0

    def test_empty_preamble_allowed(self):
        state = new_conversation("", "x", 1)
        assert len(state.messages) == 2

    def test_budget_must_be_positive(self):
        with pytest.raises(ValueError):
            new_conversation("p", "i", 0)

    def test_function_call_requires_assistant_role(self):
        with pytest.raises(ValueError):
            Message("user", "x", function_call=FunctionCall("f", "{}"))


class TestStep:
    def test_first_paper_step_dispatches_future_5(
        self, workspace, demo_registry, paper_backend
    ):
        engine = Engine(demo_registry, seed_counter=5)
        state = new_conversation(
            default_preamble(), PAPER_INSTRUCTION, DEFAULT_BUDGET,
            descriptors=demo_registry.descriptors(),
        )
        result = step(state, paper_backend, demo_registry, engine)
        assert result.kind == "dispatched"
        assert result.future_id == "future_5_run_vcf_transform"
        assert len(state.messages) == 4  # grown by exactly two
        assert state.messages[2].function_call.name == "fcall_vcf_transform_from_files"
        assert state.messages[3].content == (
            "Task scheduled with AppFuture id: future_5_run_vcf_transform"
        )

    def test_immediate_stop_finishes_without_dispatch(self, demo_registry, tmp_path):
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        state = new_conversation("p", "i", DEFAULT_BUDGET,
                                 descriptors=demo_registry.descriptors())
        result = step(state, stop_backend(), demo_registry, engine)
        assert result.kind == "finished"
        assert state.status == "done"
        assert state.dispatch_count == 0
        assert len(state.messages) == 2

    def test_step_on_done_state_raises(self, demo_registry, tmp_path):
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        state = new_conversation("p", "i", DEFAULT_BUDGET)
        step(state, stop_backend(), demo_registry, engine)
        with pytest.raises(ConversationError):
            step(state, stop_backend(), demo_registry, engine)

    def test_budget_exceeded_before_send_aborts(self, demo_registry, tmp_path):
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        state = new_conversation("x" * 4000, "i", 10,
                                 descriptors=demo_registry.descriptors())
        result = step(state, stop_backend(), demo_registry, engine)
        assert result.kind == "aborted" and result.reason == REASON_TOKEN_BUDGET
        assert state.status == "aborted"
        assert state.dispatch_count == 0


class TestErrorForwarding:
    def test_unknown_function_then_correct(self, demo_registry, tmp_path):
        backend = ScriptedBackend(load_script(script_text(
            {"match": {"substring": "go"}, "respond": {"function": "fcall_nope_from_files"},
             "consume_once": True},
            {"match": {"substring": "Error:"},
             "respond": {"function": "fcall_vcf_transform_from_files",
                         "arguments": {"vep_vcf": "./x.vcf"}},
             "consume_once": True},
            STOP_RULE,
        )))
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("go", demo_registry, engine, backend, preamble="")
        kinds = [e.type for e in transcript.events]
        assert kinds == ["error_forwarded", "dispatch", "done"]
        assert "fcall_nope_from_files" in transcript.events[0].data["error"]

    def test_malformed_payload_forwards_parse_message(self, demo_registry, tmp_path):
        backend = ScriptedBackend(load_script(script_text(
            {"match": {"substring": "go"},
             "respond": {"function": "fcall_vcf_transform_from_files",
                         "raw_arguments": "{"},
             "consume_once": True},
            STOP_RULE,
        )))
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("go", demo_registry, engine, backend, preamble="")
        forwarded = [e for e in transcript.events if e.type == "error_forwarded"]
        assert len(forwarded) == 1
        assert "malformed" in forwarded[0].data["error"]
        # the raw argument text is preserved verbatim on the assistant message
        calls = [m for m in transcript.messages if m.function_call is not None]
        assert calls[0].function_call.arguments == "{"

    def test_three_consecutive_bad_responses_abort(self, demo_registry, tmp_path):
        backend = ScriptedBackend(load_script(script_text(
            {"match": {"always": True}, "respond": {"function": "fcall_nah_from_files"}},
        )))
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("go", demo_registry, engine, backend, preamble="")
        kinds = [e.type for e in transcript.events]
        assert kinds == ["error_forwarded", "error_forwarded", "aborted"]
        assert transcript.terminal.data["reason"] == REASON_UNRECOVERABLE

    def test_dispatch_error_is_forwarded_not_raised(self, tmp_path):
        # schedule_from_futures with an unknown upstream id fails dispatch
        reg = load_manifest(manifest_text(
        task_entry("a", params=["p"], command="cat ${p}",
                   upstream=[{"slot": "s", "wiring": [{"output": "o", "param": "p"}]}]),
        ))
        backend = ScriptedBackend(load_script(script_text(
            {"match": {"substring": "go"},
             "respond": {"function": "fcall_a_from_futures",
                         "arguments": {"s": "future_99_run_a"}},
             "consume_once": True},
            STOP_RULE,
        )))
        engine = Engine(reg, runs_root=str(tmp_path))
        transcript = run_instruction("go", reg, engine, backend, preamble="")
        kinds = [e.type for e in transcript.events]
        assert kinds == ["error_forwarded", "done"]
        assert "future_99_run_a" in transcript.events[0].data["error"]


class TestRunInstruction:
    def test_paper_two_step_instruction(self, workspace, demo_registry, paper_backend):
        engine = Engine(demo_registry, seed_counter=5)
        transcript = run_instruction(
            PAPER_INSTRUCTION, demo_registry, engine, paper_backend,
        )
        assert [e.type for e in transcript.events] == ["dispatch", "dispatch", "done"]
        assert transcript.dispatched_ids() == [
            "future_5_run_vcf_transform", "future_6_run_pyclone_vi",
        ]
        assert transcript.events[0].data["function"] == "fcall_vcf_transform_from_files"
        assert transcript.events[1].data["function"] == "fcall_pyclone_vi_from_futures"
        assert transcript.events[1].data["args"] == {
            "vcf_future_id": "future_5_run_vcf_transform"
        }
        assert transcript.events[-1].data["content"] == "DONE"
        engine.await_all(timeout=30)
        assert all(
            engine.resolve(fid).state == "succeeded" for fid in engine.table.ids()
        )

    def test_stop_only_backend_yields_done_only(self, demo_registry, tmp_path):
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("idle", demo_registry, engine, stop_backend())
        assert [e.type for e in transcript.events] == ["done"]

    def test_empty_registry_rejected(self, tmp_path):
        reg = load_manifest('{"tasks": []}')
        engine = Engine(reg, runs_root=str(tmp_path))
        with pytest.raises(ValueError, match="empty"):
            run_instruction("x", reg, engine, stop_backend())

    def test_exactly_one_terminal_event(self, demo_registry, tmp_path):
        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("idle", demo_registry, engine, stop_backend())
        terminals = [e for e in transcript.events if e.type in ("done", "aborted")]
        assert len(terminals) == 1

    def test_no_matching_rule_surfaces_as_aborted_event(self, demo_registry, tmp_path):
        # a script whose only always-rule is consumable is invalid by
        # construction, so starve it differently: default rule exists but the
        # backend raises after it is consumed... instead use a backend stub.
        class Exploding:
            def complete(self, request):
                from flowcall.backend import TransportError
                raise TransportError("socket burst")

        engine = Engine(demo_registry, runs_root=str(tmp_path))
        transcript = run_instruction("x", demo_registry, engine, Exploding())
        assert transcript.terminal.type == "aborted"
        assert transcript.terminal.data["reason"] == "backend-error"
        assert "socket burst" in transcript.terminal.data["detail"]


def chain_registry_and_script(k: int):
    """A k-task chain plus the script that walks it, for order-oracle tests."""
    tasks = [task_entry("c0", command="echo x > out.txt",
                        outputs=[{"role": "out", "path": "out.txt"}])]
    rules = [{
        "match": {"substring": "start the chain"},
        "respond": {"function": "fcall_c0_from_files", "arguments": {}},
        "consume_once": True,
    }]
    for i in range(1, k):
        tasks.append(task_entry(
            f"c{i}", params=["feed"], command="cp ${feed} out.txt",
            outputs=[{"role": "out", "path": "out.txt"}],
            upstream=[{"slot": "dep", "wiring": [{"output": "out", "param": "feed"}]}],
        ))
        rules.append({
            "match": {"pattern": rf"AppFuture id: (future_\d+_run_c{i - 1})\b"},
            "respond": {"function": f"fcall_c{i}_from_futures",
                        "arguments": {"dep": "${1}"}},
            "consume_once": True,
        })
    rules.append(STOP_RULE)
    return load_manifest(manifest_text(*tasks)), load_script(script_text(*rules))


class TestChainsAndProperties:
    def test_random_k_chains_dispatch_in_script_order(self, tmp_path):
        rng = random.Random(7)
        for case in range(5):
            k = rng.randint(1, 5)
            reg, script = chain_registry_and_script(k)
            engine = Engine(reg, runs_root=str(tmp_path / f"case{case}"))
            transcript = run_instruction(
                "start the chain", reg, engine, ScriptedBackend(script), preamble="",
            )
            # oracle: the script's own rule sequence fixes the expected order
            expected = [f"fcall_c0_from_files"] + [
                f"fcall_c{i}_from_futures" for i in range(1, k)
            ]
            dispatched = [
                e.data["function"] for e in transcript.events if e.type == "dispatch"
            ]
            assert dispatched == expected
            engine.await_all(timeout=30)

    def test_message_accumulation_with_real_engine(self, tmp_path, demo_registry):
        for n in range(4):
            rules = [{
                "match": {"always": True},
                "respond": {"function": "fcall_vcf_transform_from_files",
                            "arguments": {"vep_vcf": f"./in{i}.vcf"}},
                "consume_once": True,
            } for i in range(n)]
            backend = ScriptedBackend(load_script(script_text(*rules, STOP_RULE)))
            engine = Engine(demo_registry, runs_root=str(tmp_path / f"n{n}"))
            transcript = run_instruction("go", demo_registry, engine, backend,
                                         preamble="")
            assert len(transcript.messages) == 2 + 2 * n
            engine.await_all(timeout=30)

    def test_message_accumulation_bulk_randomized(self, demo_registry):
        """1000 random scripted cases, n in 0..10; no subprocesses involved."""
        rng = random.Random(20240811)
        task_names = [t.name for t in demo_registry.tasks]
        for _ in range(1000):
            n = rng.randint(0, 10)
            rules = []
            for _ in range(n):
                task = rng.choice(task_names)
                args = {
                    p.name: f"./{rng.randrange(1 << 20):x}"
                    for p in demo_registry.task(task).file_params
                }
                rules.append({
                    "match": {"always": True},
                    "respond": {"function": f"fcall_{task}_from_files",
                                "arguments": args},
                    "consume_once": True,
                })
            backend = ScriptedBackend(load_script(script_text(*rules, STOP_RULE)))
            scheduler = FakeScheduler(demo_registry)
            transcript = run_instruction(
                "go", demo_registry, scheduler, backend, preamble="",
            )
            assert len(transcript.messages) == 2 + 2 * n
            assert len(transcript.dispatched_ids()) == n

    def test_replay_determinism(self, workspace, demo_registry, paper_script_path):
        from flowcall.runlog import normalize, render_transcript

        outputs = []
        for attempt in range(2):
            backend = ScriptedBackend(load_script(open(paper_script_path).read()))
            engine = Engine(demo_registry, seed_counter=5,
                            runs_root=str(workspace / f"runs{attempt}"))
            transcript = run_instruction(
                PAPER_INSTRUCTION, demo_registry, engine, backend,
            )
            engine.await_all(timeout=30)
            outputs.append(normalize(render_transcript(transcript.events)))
        assert outputs[0] == outputs[1]

    def test_dispatched_functions_always_in_registry(self, demo_registry):
        rng = random.Random(99)
        task_names = [t.name for t in demo_registry.tasks]
        known = {d.name for d in demo_registry.descriptors()}
        for _ in range(50):
            n = rng.randint(0, 6)
            rules = []
            for _ in range(n):
                task = rng.choice(task_names)
                rules.append({
                    "match": {"always": True},
                    "respond": {
                        "function": f"fcall_{task}_from_files",
                        "arguments": {
                            p.name: "x" for p in demo_registry.task(task).file_params
                        },
                    },
                    "consume_once": True,
                })
            backend = ScriptedBackend(load_script(script_text(*rules, STOP_RULE)))
            scheduler = FakeScheduler(demo_registry)
            transcript = run_instruction("go", demo_registry, scheduler, backend,
                                         preamble="")
            for event in transcript.events:
                if event.type == "dispatch":
                    assert event.data["function"] in known
