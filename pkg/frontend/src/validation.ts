// Client-side validation mirroring the service rules exactly: scores are
// integers 1..5, checklist flags come from the six-error taxonomy, and the
// NoFinding group only admits false positive / false negative.

import type { Draft, IndependentDraft, ParallelDraft } from "./types.js";

export const FINDING_GROUPS = [
  "Pneumothorax",
  "PleuralEffusion",
  "Edema",
  "ConsolidationOrPneumonia",
  "Atelectasis",
  "NoFinding",
] as const;

export const GROUP_FLAGS = [
  "FalsePositive",
  "FalseNegative",
  "PositionalError",
  "InaccurateDescription",
] as const;

export const NO_FINDING_FLAGS = ["FalsePositive", "FalseNegative"] as const;

export function allowedFlags(group: string): readonly string[] {
  return group === "NoFinding" ? NO_FINDING_FLAGS : GROUP_FLAGS;
}

export function isValidScore(value: unknown): value is number {
  return typeof value === "number" && Number.isInteger(value) && value >= 1 && value <= 5;
}

export function validateParallel(draft: ParallelDraft): string[] {
  const problems: string[] = [];
  if (!isValidScore(draft.score_a)) problems.push("score_a must be an integer 1..5");
  if (!isValidScore(draft.score_b)) problems.push("score_b must be an integer 1..5");
  return problems;
}

export function validateIndependent(draft: IndependentDraft): string[] {
  const problems: string[] = [];
  for (const [group, flags] of Object.entries(draft.groups)) {
    if (!(FINDING_GROUPS as readonly string[]).includes(group)) {
      problems.push(`unknown finding group ${group}`);
      continue;
    }
    const allowed = allowedFlags(group);
    for (const flag of flags) {
      if (!allowed.includes(flag)) {
        problems.push(`flag ${flag} not allowed for ${group}`);
      }
    }
  }
  return problems;
}

export function validateDraft(draft: Draft): string[] {
  return draft.kind === "parallel" ? validateParallel(draft) : validateIndependent(draft);
}
