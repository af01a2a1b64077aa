// Pure view-state reducer: folding the run's event stream (replayed or
// live) into the RunView always yields the same result, so reconnects just
// replay from the start.

import type {
  DagEdge,
  DagNode,
  NodeState,
  PendingEscalation,
  RunEvent,
  RunStatus,
} from "./types.js";

export interface FeedEntry {
  seq: number;
  kind: string;
  text: string;
}

export interface RunView {
  runId: string;
  instruction: string;
  mode: string;
  status: RunStatus;
  nodes: DagNode[];
  edges: DagEdge[];
  feed: FeedEntry[];
  pendingEscalations: PendingEscalation[];
  lastSeq: number;
  // states observed before their node's dispatch event (worker threads
  // race the dispatcher on the service side)
  aheadStates: Record<string, NodeState>;
}

const STATE_RANK: Record<NodeState, number> = {
  pending: 0,
  running: 1,
  succeeded: 2,
  failed: 2,
};

export function initialView(runId: string): RunView {
  return {
    runId,
    instruction: "",
    mode: "",
    status: "running",
    nodes: [],
    edges: [],
    feed: [],
    pendingEscalations: [],
    lastSeq: -1,
    aheadStates: {},
  };
}

function taskFromFunction(name: string): string {
  for (const suffix of ["_from_files", "_from_futures"]) {
    if (name.endsWith(suffix)) {
      return name.slice("fcall_".length, name.length - suffix.length);
    }
  }
  return name;
}

function advance(current: NodeState, next: NodeState): NodeState {
  // node states only move forward
  return STATE_RANK[next] >= STATE_RANK[current] ? next : current;
}

function feedText(event: RunEvent): string | null {
  const d = event.data as Record<string, any>;
  switch (event.type) {
    case "run_started":
      return `run started (${d.mode}): ${d.instruction}`;
    case "dispatch":
      return `${d.function}(${JSON.stringify(d.args)}) -> ${d.future_id}`;
    case "error_forwarded":
      return `error forwarded: ${d.error}`;
    case "done":
      return `${d.content || "DONE"}`;
    case "aborted":
      return `aborted: ${d.reason}${d.detail ? ` (${d.detail})` : ""}`;
    case "plan_created":
      return `plan with ${(d.steps as unknown[]).length} step(s)`;
    case "step_outcome":
      return `step ${d.step_index} (${d.task}) attempt ${d.attempt}: ${d.verdict}`;
    case "remediation":
      return `step ${d.step_index} remediation: ${d.kind}`;
    case "escalation_raised":
      return `escalation ${d.escalation_id}: ${d.question}`;
    case "escalation_answered":
      return `escalation ${d.escalation_id} answered: ${d.decision}`;
    case "plan_finished":
      return `plan ${d.status}${d.reason ? `: ${d.reason}` : ""}`;
    case "run_finished":
      return `run finished: ${d.status}`;
    default:
      return null;
  }
}

export function applyEvent(view: RunView, event: RunEvent): RunView {
  if (event.seq <= view.lastSeq) {
    return view; // duplicate delivery during a reconnect replay
  }
  const next: RunView = {
    ...view,
    nodes: view.nodes.map((n) => ({ ...n })),
    edges: [...view.edges],
    feed: [...view.feed],
    pendingEscalations: [...view.pendingEscalations],
    aheadStates: { ...view.aheadStates },
    lastSeq: event.seq,
  };
  const d = event.data as Record<string, any>;

  switch (event.type) {
    case "run_started": {
      next.instruction = String(d.instruction ?? "");
      next.mode = String(d.mode ?? "");
      break;
    }
    case "dispatch": {
      const id = String(d.future_id);
      let state: NodeState = (d.future_state as NodeState) ?? "pending";
      if (next.aheadStates[id]) {
        state = advance(state, next.aheadStates[id]);
        delete next.aheadStates[id];
      }
      next.nodes.push({
        id,
        task: taskFromFunction(String(d.function)),
        state,
        stepIndex: (d.step_index as number | null) ?? null,
      });
      const known = new Set(next.nodes.map((n) => n.id));
      for (const value of Object.values(d.args ?? {})) {
        if (typeof value === "string" && value !== id && known.has(value)) {
          next.edges.push({ source: value, target: id });
        }
      }
      break;
    }
    case "future_state": {
      const id = String(d.future_id);
      const state = d.state as NodeState;
      const node = next.nodes.find((n) => n.id === id);
      if (node) {
        node.state = advance(node.state, state);
      } else {
        const buffered = next.aheadStates[id] ?? "pending";
        next.aheadStates[id] = advance(buffered, state);
      }
      break;
    }
    case "escalation_raised": {
      next.pendingEscalations.push({
        escalation_id: String(d.escalation_id),
        question: String(d.question),
        step_index: (d.step_index as number | null) ?? null,
      });
      break;
    }
    case "escalation_answered": {
      next.pendingEscalations = next.pendingEscalations.filter(
        (e) => e.escalation_id !== d.escalation_id,
      );
      break;
    }
    case "run_finished": {
      next.status = d.status as RunStatus;
      break;
    }
  }

  const text = feedText(event);
  if (text !== null) {
    next.feed.push({ seq: event.seq, kind: event.type, text });
  }
  return next;
}

export function replay(runId: string, events: RunEvent[]): RunView {
  return events.reduce(applyEvent, initialView(runId));
}

/** The escalation the modal should show, if any. */
export function activeEscalation(view: RunView): PendingEscalation | null {
  return view.pendingEscalations[0] ?? null;
}
