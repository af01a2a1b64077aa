// Submission form logic, kept pure so the no-request-on-invalid-input
// behavior is directly testable.

import type { SubmitRunBody } from "./types.js";

export type SubmitPrep =
  | { ok: true; body: SubmitRunBody }
  | { ok: false; error: string };

export function prepareSubmit(
  instruction: string,
  mode: "direct-loop" | "planned",
): SubmitPrep {
  const trimmed = instruction.trim();
  if (!trimmed) {
    return { ok: false, error: "enter an instruction first" };
  }
  return { ok: true, body: { instruction: trimmed, mode } };
}
