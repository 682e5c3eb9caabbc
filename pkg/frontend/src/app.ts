// Rater view: image with toggleable overlays, blinded report panes, score
// entry or per-disease error checklist, and the submit flow with optimistic
// advance on ack.

import { StudyApi } from "./api.js";
import { renderOverlays, type OverlayToggles } from "./overlay.js";
import type { CasePayload, Draft, IndependentCase, ParallelCase } from "./types.js";
import { FINDING_GROUPS, allowedFlags, validateDraft } from "./validation.js";

export interface AppConfig {
  sessionId: string;
  rater: string;
  protocol: "parallel" | "independent";
  imageSize?: number;
}

function isParallel(payload: CasePayload): payload is ParallelCase {
  return "report_a" in payload;
}

export class RaterApp {
  current: CasePayload | null = null;
  draft: Draft | null = null;
  done = false;
  completed = 0;
  toggles: OverlayToggles = { boxes: true, contours: true };
  lastError = "";

  constructor(
    private readonly api: StudyApi,
    private readonly config: AppConfig,
    private readonly root: HTMLElement,
  ) {}

  async loadNext(): Promise<void> {
    let payload: CasePayload | { done: true };
    try {
      payload = await this.api.nextCase(
        this.config.sessionId, this.config.rater, this.config.protocol);
    } catch (err) {
      // malformed payloads and network failures show a non-blocking banner
      this.lastError = err instanceof Error ? err.message : String(err);
      this.render();
      return;
    }
    if ("done" in payload) {
      this.current = null;
      this.draft = null;
      this.done = true;
    } else {
      this.current = payload;
      this.draft = this.emptyDraft(payload);
      this.done = false;
      this.lastError = "";
    }
    this.render();
  }

  emptyDraft(payload: CasePayload): Draft {
    if (this.config.protocol === "parallel") {
      return { kind: "parallel", case_id: payload.case_id, score_a: null, score_b: null };
    }
    return {
      kind: "independent",
      case_id: payload.case_id,
      groups: {},
      nonexistent_comparison: false,
      nonexistent_lateral: false,
    };
  }

  setScore(arm: "a" | "b", value: number): void {
    if (this.draft?.kind !== "parallel") return;
    if (arm === "a") this.draft.score_a = value;
    else this.draft.score_b = value;
    this.render();
  }

  /** Toggle a checklist flag; disallowed combinations are unselectable. */
  toggleFlag(group: string, flag: string): boolean {
    if (this.draft?.kind !== "independent") return false;
    if (!allowedFlags(group).includes(flag)) return false;
    const flags = this.draft.groups[group] ?? [];
    const index = flags.indexOf(flag);
    if (index >= 0) flags.splice(index, 1);
    else flags.push(flag);
    if (flags.length > 0) this.draft.groups[group] = flags;
    else delete this.draft.groups[group];
    this.render();
    return true;
  }

  setCaseFlag(which: "comparison" | "lateral", value: boolean): void {
    if (this.draft?.kind !== "independent") return;
    if (which === "comparison") this.draft.nonexistent_comparison = value;
    else this.draft.nonexistent_lateral = value;
  }

  setToggle(which: keyof OverlayToggles, value: boolean): void {
    this.toggles[which] = value;
    this.render();
  }

  canSubmit(): boolean {
    if (!this.draft) return false;
    if (this.draft.kind === "parallel" &&
        (this.draft.score_a === null || this.draft.score_b === null)) {
      return false;
    }
    return validateDraft(this.draft).length === 0;
  }

  async submit(): Promise<boolean> {
    if (!this.draft || !this.canSubmit()) {
      this.lastError = "complete the form before submitting";
      this.render();
      return false;
    }
    try {
      await this.api.submit(this.config.sessionId, this.config.rater, this.draft);
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      this.render();
      return false;
    }
    this.lastError = "";
    this.completed += 1;
    await this.loadNext(); // optimistic advance on ack
    return true;
  }

  render(): void {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";
    const progress = doc.createElement("div");
    progress.className = "progress";
    progress.textContent = this.done
      ? `all cases reviewed (${this.completed} submitted)`
      : `case ${this.completed + 1}`;
    this.root.appendChild(progress);
    if (this.lastError) {
      const banner = doc.createElement("div");
      banner.className = "error-banner";
      banner.textContent = this.lastError;
      this.root.appendChild(banner);
    }
    if (!this.current || !this.draft) return;

    const toggles = doc.createElement("div");
    toggles.className = "overlay-toggles";
    for (const which of ["boxes", "contours"] as const) {
      const label = doc.createElement("label");
      const box = doc.createElement("input");
      box.type = "checkbox";
      box.checked = this.toggles[which];
      box.dataset.toggle = which;
      box.addEventListener("change", () => this.setToggle(which, box.checked));
      label.appendChild(box);
      label.appendChild(doc.createTextNode(` show ${which}`));
      toggles.appendChild(label);
    }
    this.root.appendChild(toggles);

    const figure = doc.createElement("figure");
    figure.className = "case-image";
    const img = doc.createElement("img");
    img.src = this.api.imageUrl(this.current.case_id);
    img.alt = `chest radiograph ${this.current.image_id}`;
    figure.appendChild(img);
    const svg = doc.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("class", "overlay-layer");
    const size = this.config.imageSize ?? 512;
    renderOverlays(svg, this.current.overlays ?? {}, size, size, this.toggles);
    figure.appendChild(svg);
    this.root.appendChild(figure);

    if (isParallel(this.current)) {
      this.renderReports(doc, [
        ["Report A", this.current.report_a, "a"],
        ["Report B", this.current.report_b, "b"],
      ]);
    } else {
      this.renderIndependent(doc, this.current);
    }

    const button = doc.createElement("button");
    button.className = "submit";
    button.textContent = "Submit";
    button.disabled = !this.canSubmit();
    button.addEventListener("click", () => void this.submit());
    this.root.appendChild(button);
  }

  private renderReports(doc: Document, panes: [string, string, "a" | "b"][]): void {
    const row = doc.createElement("div");
    row.className = "report-row";
    for (const [title, text, arm] of panes) {
      const pane = doc.createElement("section");
      pane.className = "report-pane";
      const head = doc.createElement("h3");
      head.textContent = title;
      pane.appendChild(head);
      const body = doc.createElement("p");
      body.textContent = text;
      pane.appendChild(body);
      const scores = doc.createElement("div");
      scores.className = "score-buttons";
      for (let value = 1; value <= 5; value += 1) {
        const pick = doc.createElement("button");
        pick.textContent = String(value);
        pick.dataset.arm = arm;
        pick.dataset.score = String(value);
        const selected = this.draft?.kind === "parallel" &&
          (arm === "a" ? this.draft.score_a : this.draft.score_b) === value;
        pick.className = selected ? "score selected" : "score";
        pick.addEventListener("click", () => this.setScore(arm, value));
        scores.appendChild(pick);
      }
      pane.appendChild(scores);
      row.appendChild(pane);
    }
    this.root.appendChild(row);
  }

  private renderIndependent(doc: Document, payload: IndependentCase): void {
    const pane = doc.createElement("section");
    pane.className = "report-pane";
    const body = doc.createElement("p");
    body.textContent = payload.report;
    pane.appendChild(body);
    this.root.appendChild(pane);

    const list = doc.createElement("div");
    list.className = "disease-list";
    for (const group of FINDING_GROUPS) {
      const detail = doc.createElement("details");
      detail.className = "disease-pane";
      detail.dataset.group = group;
      const summary = doc.createElement("summary");
      summary.textContent = group;
      detail.appendChild(summary);
      for (const flag of allowedFlags(group)) {
        const label = doc.createElement("label");
        const box = doc.createElement("input");
        box.type = "checkbox";
        box.dataset.group = group;
        box.dataset.flag = flag;
        const draft = this.draft;
        box.checked = draft?.kind === "independent" &&
          (draft.groups[group] ?? []).includes(flag);
        box.addEventListener("change", () => this.toggleFlag(group, flag));
        label.appendChild(box);
        label.appendChild(doc.createTextNode(flag));
        detail.appendChild(label);
      }
      list.appendChild(detail);
    }
    for (const [which, text] of [
      ["comparison", "Mentions a nonexistent comparison"],
      ["lateral", "Mentions a nonexistent lateral image"],
    ] as const) {
      const label = doc.createElement("label");
      const box = doc.createElement("input");
      box.type = "checkbox";
      box.dataset.caseFlag = which;
      box.addEventListener("change", () => this.setCaseFlag(which, box.checked));
      label.appendChild(box);
      label.appendChild(doc.createTextNode(text));
      list.appendChild(label);
    }
    this.root.appendChild(list);
  }
}

export function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const api = new StudyApi(params.get("api") ?? "");
  const app = new RaterApp(api, {
    sessionId: params.get("session") ?? "session-0001",
    rater: params.get("rater") ?? "r1",
    protocol: (params.get("protocol") as "parallel" | "independent") ?? "parallel",
    imageSize: Number(params.get("size") ?? 512),
  }, document.getElementById("app") as HTMLElement);
  void app.loadNext();
}

if (typeof window !== "undefined" && typeof document !== "undefined" &&
    document.getElementById("app")) {
  boot();
}
