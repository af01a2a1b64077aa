// Thin client for the flowcall service endpoints (docs/service.md).

import type {
  DecisionBody,
  RunDetail,
  RunEvent,
  RunSummary,
  SubmitRunBody,
} from "./types.js";

export class ApiClient {
  constructor(private readonly base: string) {}

  private url(path: string): string {
    return `${this.base.replace(/\/$/, "")}${path}`;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.url(path), {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!response.ok) {
      const body = await response.text();
      throw new Error(`${init?.method ?? "GET"} ${path} -> ${response.status}: ${body}`);
    }
    return (await response.json()) as T;
  }

  async submitRun(body: SubmitRunBody): Promise<string> {
    const out = await this.request<{ run_id: string }>("/runs", {
      method: "POST",
      body: JSON.stringify(body),
    });
    return out.run_id;
  }

  listRuns(): Promise<{ runs: RunSummary[] }> {
    return this.request("/runs");
  }

  getRun(runId: string): Promise<RunDetail> {
    return this.request(`/runs/${runId}`);
  }

  /** POST the documented decision payload for a pending escalation. */
  answerEscalation(
    runId: string,
    escalationId: string,
    body: DecisionBody,
  ): Promise<{ status: string; escalation_id: string }> {
    return this.request(`/runs/${runId}/escalations/${escalationId}`, {
      method: "POST",
      body: JSON.stringify(body),
    });
  }

  /**
   * Subscribe to the run's event stream. The service replays every event
   * from the start, so a reconnect resumes by full replay; the reducer
   * drops duplicates by sequence number.
   */
  openEvents(
    runId: string,
    onEvent: (event: RunEvent) => void,
    onStateChange?: (state: "open" | "reconnecting") => void,
  ): EventSource {
    const source = new EventSource(this.url(`/runs/${runId}/events`));
    const types = [
      "run_started", "dispatch", "error_forwarded", "done", "aborted",
      "future_state", "plan_created", "step_started", "step_outcome",
      "remediation", "escalation_raised", "escalation_answered",
      "plan_finished", "run_finished",
    ];
    for (const type of types) {
      source.addEventListener(type, (raw) => {
        const message = raw as MessageEvent<string>;
        onEvent({
          seq: Number(message.lastEventId),
          type,
          data: JSON.parse(message.data),
        });
      });
    }
    source.onopen = () => onStateChange?.("open");
    source.onerror = () => onStateChange?.("reconnecting");
    return source;
  }
}
