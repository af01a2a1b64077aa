// Payload types for the flowcall service API (see docs/service.md).

export type RunStatus = "running" | "done" | "aborted";
export type NodeState = "pending" | "running" | "succeeded" | "failed";
export type DecisionKind = "approve_retry" | "provide_binding" | "abort";

export interface RunEvent {
  seq: number;
  type: string;
  data: Record<string, unknown>;
}

export interface RunSummary {
  run_id: string;
  instruction: string;
  mode: string;
  manifest: string;
  status: RunStatus;
  created: number;
  finished: number | null;
}

export interface PendingEscalation {
  escalation_id: string;
  question: string;
  step_index: number | null;
}

export interface RunDetail extends RunSummary {
  event_count: number;
  plan_report: Record<string, unknown> | null;
  pending_escalations: PendingEscalation[];
}

export interface SubmitRunBody {
  instruction: string;
  mode: "direct-loop" | "planned";
  manifest?: string;
  backend?: string;
  budget?: number;
  seed_counter?: number;
}

export interface DecisionBody {
  decision: DecisionKind;
  values?: Record<string, string>;
  note?: string;
}

export interface DagNode {
  id: string;
  task: string;
  state: NodeState;
  stepIndex: number | null;
}

export interface DagEdge {
  source: string;
  target: string;
}
