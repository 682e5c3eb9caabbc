// Thin client for the study service /v1 JSON API with a retry queue for
// judgment submissions that failed on network errors.

import type { Ack, Aggregate, CasePayload, Draft } from "./types.js";

export interface PendingSubmission {
  path: string;
  body: Record<string, unknown>;
}

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

export class StudyApi {
  readonly queue: PendingSubmission[] = [];

  constructor(
    private readonly base: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.base}${path}`, init);
    const payload = await response.json();
    if (!response.ok) {
      throw new ApiError(payload.code ?? "Error", payload.message ?? "", response.status);
    }
    return payload as T;
  }

  nextCase(sessionId: string, rater: string, protocol: "parallel" | "independent") {
    const query = `rater=${encodeURIComponent(rater)}&protocol=${protocol}`;
    return this.request<CasePayload | { done: true }>(
      `/v1/sessions/${sessionId}/next?${query}`,
    );
  }

  aggregate(sessionId: string) {
    return this.request<Aggregate>(`/v1/sessions/${sessionId}/aggregate`);
  }

  overlays(caseId: string) {
    return this.request<Record<string, Record<string, string>>>(
      `/v1/cases/${caseId}/overlays`,
    );
  }

  imageUrl(caseId: string): string {
    return `${this.base}/v1/cases/${caseId}/image`;
  }

  private judgmentBody(sessionId: string, rater: string, draft: Draft) {
    if (draft.kind === "parallel") {
      return {
        path: "/v1/judgments/parallel",
        body: {
          session_id: sessionId,
          rater_id: rater,
          case_id: draft.case_id,
          score_a: draft.score_a,
          score_b: draft.score_b,
        },
      };
    }
    return {
      path: "/v1/judgments/independent",
      body: {
        session_id: sessionId,
        rater_id: rater,
        case_id: draft.case_id,
        groups: draft.groups,
        nonexistent_comparison: draft.nonexistent_comparison,
        nonexistent_lateral: draft.nonexistent_lateral,
      },
    };
  }

  /** Submit a judgment; network failures are queued for a later flush. */
  async submit(sessionId: string, rater: string, draft: Draft): Promise<Ack> {
    const { path, body } = this.judgmentBody(sessionId, rater, draft);
    try {
      return await this.request<Ack>(path, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    } catch (err) {
      if (err instanceof ApiError) throw err; // validation errors surface
      this.queue.push({ path, body });
      throw err;
    }
  }

  /** Re-send queued submissions in order; stops at the first failure. */
  async flush(): Promise<number> {
    let sent = 0;
    while (this.queue.length > 0) {
      const pending = this.queue[0];
      try {
        await this.request<Ack>(pending.path, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(pending.body),
        });
      } catch (err) {
        if (err instanceof ApiError) {
          this.queue.shift(); // rejected by the service, drop it
          throw err;
        }
        break;
      }
      this.queue.shift();
      sent += 1;
    }
    return sent;
  }
}
