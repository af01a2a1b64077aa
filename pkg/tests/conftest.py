import json
import shutil
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path

import pytest

from flowcall.engine import FutureTable, TaskFuture
from flowcall.registry import Registry, load_manifest

FIXTURES = resources.files("flowcall").joinpath("fixtures")
GOLDENS = Path(__file__).parent / "goldens"

# filled by test_acceptance's criterion() helper; printed after the run
ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, verdict in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{name}: {verdict}")

# the demo instruction driving the two-step transcript fixture
PAPER_INSTRUCTION = (
    "Help me with two things: \n"
    "First: transform the vcf file \n"
    "./example_data/VEP_raw.A25.mutect2.filtered.snp.vcf.\n"
    "Second: execute pyclone-vi on the file outputed in the first step."
)


@pytest.fixture(scope="session")
def demo_manifest_text() -> str:
    return FIXTURES.joinpath("phyloflow_demo.json").read_text("utf-8")


@pytest.fixture(scope="session")
def demo_manifest_path() -> str:
    return str(FIXTURES.joinpath("phyloflow_demo.json"))


@pytest.fixture(scope="session")
def paper_script_path() -> str:
    return str(FIXTURES.joinpath("paper_script.json"))


@pytest.fixture()
def demo_registry(demo_manifest_text) -> Registry:
    return load_manifest(demo_manifest_text)


@pytest.fixture()
def workspace(tmp_path, monkeypatch) -> Path:
    """A scratch cwd containing example_data/, with runs kept inside it."""
    data_dir = tmp_path / "example_data"
    data_dir.mkdir()
    src = FIXTURES.joinpath("example_data/VEP_raw.A25.mutect2.filtered.snp.vcf")
    shutil.copy(str(src), data_dir / "VEP_raw.A25.mutect2.filtered.snp.vcf")
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("FLOWCALL_RUNS_ROOT", str(tmp_path / "runs"))
    return tmp_path


def task_entry(
    name,
    *,
    description="",
    params=(),
    command=":",
    outputs=(),
    checks=(),
    upstream=(),
    **extra,
):
    """Build one manifest task entry; params may be plain names."""
    entry = {
        "name": name,
        "description": description or f"stub task {name}",
        "params": [
            p if isinstance(p, dict) else {"name": p, "kind": "file-path"}
            for p in params
        ],
        "command": command,
        "outputs": list(outputs),
        "checks": list(checks),
        "upstream": list(upstream),
    }
    entry.update(extra)
    return entry


def manifest_text(*tasks, name="test") -> str:
    return json.dumps({"name": name, "tasks": list(tasks)})


def script_text(*rules) -> str:
    return json.dumps({"rules": list(rules)})


STOP_RULE = {"match": {"always": True}, "respond": {"final": "DONE"}}


class CannedHandler(BaseHTTPRequestHandler):
    """Stub chat-completions endpoint replaying canned response bodies."""

    canned: list[dict] = []
    requests: list[dict] = []
    index = 0

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        type(self).requests.append(json.loads(self.rfile.read(length)))
        body = type(self).canned[min(type(self).index, len(type(self).canned) - 1)]
        type(self).index += 1
        payload = json.dumps(body).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def completion_body(*, function=None, arguments=None, content=None, finish="stop"):
    message = {"role": "assistant", "content": content}
    if function is not None:
        message["function_call"] = {"name": function, "arguments": arguments or "{}"}
        finish = "function_call"
    return {"choices": [{"message": message, "finish_reason": finish}]}


@pytest.fixture()
def stub_server():
    handler = type("Handler", (CannedHandler,), {"canned": [], "requests": [], "index": 0})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, handler
    server.shutdown()
    server.server_close()


class FakeScheduler:
    """Engine stand-in for conversation-shape tests: real IDs, no processes."""

    def __init__(self, registry, seed_counter=0):
        self.registry = registry
        self.table = FutureTable(seed_counter)
        self.calls = []

    def _schedule(self, task, bindings):
        future = TaskFuture(id=self.table.next_future_id(task.name), task=task.name)
        self.table.index(future)
        self.calls.append((task.name, dict(bindings)))
        return future.id

    def schedule_from_files(self, task, bindings):
        return self._schedule(task, bindings)

    def schedule_from_futures(self, task, slot_bindings):
        for upstream_id in slot_bindings.values():
            self.table.get(upstream_id)
        return self._schedule(task, slot_bindings)
