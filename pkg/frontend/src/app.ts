// Page wiring: submit instructions, follow the stream, answer escalations.

import { ApiClient } from "./api.js";
import { prepareSubmit } from "./form.js";
import { applyEvent, initialView, type RunView } from "./state.js";
import {
  parseBindingInput,
  renderDag,
  renderEscalationModal,
  renderFeed,
  renderStatus,
} from "./render.js";
import type { DecisionBody } from "./types.js";

const params = new URLSearchParams(window.location.search);
const api = new ApiClient(params.get("api") ?? "http://127.0.0.1:8321");

let view: RunView | null = null;
let connection = "idle";
let source: EventSource | null = null;

const $ = (id: string) => document.getElementById(id)!;

function redraw() {
  if (!view) return;
  $("status").innerHTML = renderStatus(view, connection);
  $("dag").innerHTML = renderDag(view);
  $("feed").innerHTML = renderFeed(view);
  $("modal-host").innerHTML = renderEscalationModal(view);
  $("feed").scrollTop = $("feed").scrollHeight;
  $("run-title").textContent = view.runId;
}

function watch(runId: string) {
  source?.close();
  view = initialView(runId);
  connection = "connecting";
  source = api.openEvents(
    runId,
    (event) => {
      if (view) {
        view = applyEvent(view, event);
        if (event.type === "run_finished") {
          connection = "closed";
          source?.close();
        }
        redraw();
      }
    },
    (state) => {
      // a dropped stream reconnects with a full replay; duplicate events
      // are discarded by sequence number in the reducer
      connection = state;
      if (state === "reconnecting" && view) {
        view = initialView(runId);
      }
      redraw();
    },
  );
  redraw();
  void refreshRunList();
}

async function refreshRunList() {
  const { runs } = await api.listRuns();
  $("runs").innerHTML = runs
    .map(
      (run) =>
        `<li><a href="#" data-run="${run.run_id}">${run.run_id}</a>` +
        ` <em>${run.status}</em> ${run.instruction.slice(0, 60)}</li>`,
    )
    .join("");
}

async function submit() {
  const instruction = ($("instruction") as HTMLTextAreaElement).value;
  const mode = ($("mode") as HTMLSelectElement).value as
    | "direct-loop"
    | "planned";
  const problem = $("submit-error");
  problem.textContent = "";
  const prep = prepareSubmit(instruction, mode);
  if (!prep.ok) {
    problem.textContent = prep.error; // inline validation: no request sent
    return;
  }
  try {
    const runId = await api.submitRun(prep.body);
    watch(runId);
  } catch (error) {
    problem.textContent = String(error);
  }
}

async function decide(escalationId: string, decision: DecisionBody["decision"]) {
  if (!view) return;
  const body: DecisionBody = { decision };
  if (decision === "provide_binding") {
    const input = document.getElementById("binding-input") as HTMLInputElement | null;
    body.values = parseBindingInput(input?.value ?? "");
  }
  await api.answerEscalation(view.runId, escalationId, body);
}

function main() {
  $("submit").addEventListener("click", () => void submit());
  $("runs").addEventListener("click", (raw) => {
    const target = raw.target as HTMLElement;
    const runId = target.dataset.run;
    if (runId) {
      raw.preventDefault();
      watch(runId);
    }
  });
  $("modal-host").addEventListener("click", (raw) => {
    const target = raw.target as HTMLElement;
    const decision = target.dataset.decision as DecisionBody["decision"] | undefined;
    const modal = target.closest("[data-escalation]") as HTMLElement | null;
    if (decision && modal?.dataset.escalation) {
      void decide(modal.dataset.escalation, decision);
    }
  });
  void refreshRunList();
  setInterval(() => void refreshRunList(), 5000);
}

main();
