// HTML fragments for the run view. Pure string builders over RunView so
// the view layer stays replay-testable without a DOM.

import { layerDag } from "./dag.js";
import { activeEscalation, type RunView } from "./state.js";

function esc(text: unknown): string {
  return String(text)
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderDag(view: RunView): string {
  const { layers } = layerDag(view.nodes, view.edges);
  if (!layers.length) {
    return '<p class="empty">no futures scheduled yet</p>';
  }
  const columns = layers
    .map(
      (layer) =>
        `<div class="dag-layer">${layer
          .map(
            (node) =>
              `<div class="dag-node state-${node.state}" data-node="${esc(node.id)}">` +
              `<span class="dag-task">${esc(node.task)}</span>` +
              `<span class="dag-id">${esc(node.id)}</span>` +
              `<span class="dag-state">${esc(node.state)}</span></div>`,
          )
          .join("")}</div>`,
    )
    .join('<div class="dag-arrow">&#8594;</div>');
  return `<div class="dag">${columns}</div>`;
}

export function renderFeed(view: RunView): string {
  return view.feed
    .map((entry) => `<li class="feed-${esc(entry.kind)}">${esc(entry.text)}</li>`)
    .join("");
}

export function renderEscalationModal(view: RunView): string {
  const escalation = activeEscalation(view);
  if (!escalation) {
    return "";
  }
  return (
    `<div class="modal-backdrop"><div class="modal" data-escalation="${esc(escalation.escalation_id)}">` +
    `<h3>Escalation ${esc(escalation.escalation_id)}</h3>` +
    `<p>${esc(escalation.question)}</p>` +
    `<div class="modal-binding"><input id="binding-input" placeholder="param=value, param=value" /></div>` +
    `<div class="modal-actions">` +
    `<button data-decision="approve_retry">Approve retry</button>` +
    `<button data-decision="provide_binding">Provide binding</button>` +
    `<button data-decision="abort" class="danger">Abort</button>` +
    `</div></div></div>`
  );
}

export function renderStatus(view: RunView, connection: string): string {
  return (
    `<span class="status status-${esc(view.status)}">${esc(view.status)}</span>` +
    `<span class="conn conn-${esc(connection)}">${esc(connection)}</span>`
  );
}

/** Parse the modal's binding input: "a=1, b=2" -> {a: "1", b: "2"}. */
export function parseBindingInput(text: string): Record<string, string> {
  const values: Record<string, string> = {};
  for (const pair of text.split(",")) {
    const trimmed = pair.trim();
    if (!trimmed) continue;
    const eq = trimmed.indexOf("=");
    if (eq > 0) {
      values[trimmed.slice(0, eq).trim()] = trimmed.slice(eq + 1).trim();
    }
  }
  return values;
}
