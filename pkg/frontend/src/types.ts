// Payload shapes served by the study service /v1 API.

export interface Overlays {
  boxes?: Record<string, string>;    // name -> "[x1, y1, x2, y2]"
  contours?: Record<string, string>; // name -> "[x0, y0, .., xn, yn]"
}

export interface ParallelCase {
  case_id: string;
  image_id: string;
  report_a: string;
  report_b: string;
  overlays: Overlays;
}

export interface IndependentCase {
  case_id: string;
  image_id: string;
  report: string;
  overlays: Overlays;
  finding_groups: string[];
}

export type CasePayload = ParallelCase | IndependentCase;

export interface Ack {
  status: string;
  replaced: boolean;
}

export interface Aggregate {
  n_cases: number;
  n_parallel: number;
  n_independent: number;
  preference_rate: number | null;
  omission_rate: number | null;
  error_rate: number | null;
  [key: string]: unknown;
}

export interface ParallelDraft {
  kind: "parallel";
  case_id: string;
  score_a: number | null;
  score_b: number | null;
}

export interface IndependentDraft {
  kind: "independent";
  case_id: string;
  groups: Record<string, string[]>;
  nonexistent_comparison: boolean;
  nonexistent_lateral: boolean;
}

export type Draft = ParallelDraft | IndependentDraft;
