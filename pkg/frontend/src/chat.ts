// Chat pane: message bubbles, clarification input, reference panel,
// feedback buttons, and the connection-retry banner.

import { ApiClient, ApiError } from "./api.js";
import { ConsoleSession, toPanel } from "./state.js";

export interface ChatElements {
  messages: HTMLElement;
  stateBadge: HTMLElement;
  roundBadge: HTMLElement;
  input: HTMLInputElement;
  sendButton: HTMLButtonElement;
  feedbackBar: HTMLElement;
  confirmButton: HTMLButtonElement;
  correctInput: HTMLInputElement;
  correctButton: HTMLButtonElement;
  referencePanel: HTMLElement;
  retryBanner: HTMLElement;
  retryButton: HTMLButtonElement;
}

export class ChatPane {
  readonly session = new ConsoleSession();
  private lastSendArgs: { kind: "open"; imageB64: string; text: string } | { kind: "message"; text: string } | null =
    null;
  onEventStored: (() => void) | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly el: ChatElements,
  ) {
    el.sendButton.addEventListener("click", () => void this.sendFromInput());
    el.input.addEventListener("keydown", (ev) => {
      if (ev.key === "Enter") void this.sendFromInput();
    });
    el.confirmButton.addEventListener("click", () => void this.send("Yes, that is correct."));
    el.correctButton.addEventListener("click", () => {
      const text = el.correctInput.value.trim();
      if (text) void this.send(text);
    });
    el.retryButton.addEventListener("click", () => void this.retry());
  }

  async open(imageB64: string, firstUtterance: string): Promise<void> {
    this.lastSendArgs = { kind: "open", imageB64, text: firstUtterance };
    this.session.optimisticSend(firstUtterance);
    this.render();
    try {
      const resp = await this.api.createSession(imageB64, firstUtterance);
      this.session.applyResponse(resp);
      await this.refreshReference();
    } catch (err) {
      this.fail(err);
    }
    this.render();
  }

  private async sendFromInput(): Promise<void> {
    const text = this.el.input.value.trim();
    if (!text) return;
    this.el.input.value = "";
    await this.send(text);
  }

  async send(text: string): Promise<void> {
    if (!this.session.sessionId) return;
    this.lastSendArgs = { kind: "message", text };
    this.session.optimisticSend(text);
    this.render();
    try {
      const resp = await this.api.sendMessage(this.session.sessionId, text);
      const action = this.session.applyResponse(resp);
      await this.refreshReference();
      if (action.type === "session_closed" && action.event_id && this.onEventStored) {
        this.onEventStored();
      }
    } catch (err) {
      this.fail(err);
    }
    this.render();
  }

  /** Pull the authoritative view; populates the reference panel. */
  private async refreshReference(): Promise<void> {
    if (!this.session.sessionId) return;
    const view = await this.api.getSession(this.session.sessionId);
    this.session.applyView(view);
    this.session.reference = view.retrieval ? toPanel(view.retrieval) : null;
  }

  private fail(err: unknown): void {
    const message = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
    this.session.connectionLost(message);
  }

  private async retry(): Promise<void> {
    if (!this.lastSendArgs) return;
    const args = this.lastSendArgs;
    if (args.kind === "open") {
      await this.open(args.imageB64, args.text);
    } else {
      await this.send(args.text);
    }
  }

  render(): void {
    const { el, session } = this;
    el.messages.replaceChildren(
      ...session.rendered().map((turn) => {
        const bubble = document.createElement("div");
        bubble.className = `bubble ${turn.speaker}`;
        bubble.textContent = turn.text;
        return bubble;
      }),
    );
    el.messages.scrollTop = el.messages.scrollHeight;
    el.stateBadge.textContent = session.serverState || session.phase;
    el.roundBadge.textContent = `round ${session.clarificationRound}`;
    el.feedbackBar.hidden = session.phase !== "awaiting_feedback";
    el.input.disabled = session.phase === "closed" || session.phase === "awaiting_robot";
    el.retryBanner.hidden = session.phase !== "error";
    if (session.lastError) el.retryBanner.querySelector("span")!.textContent = session.lastError;
    this.renderReference();
    if (session.phase === "clarifying") el.input.focus();
  }

  private renderReference(): void {
    const panel = this.el.referencePanel;
    const ref = this.session.reference;
    if (!this.session.usedReference || !ref) {
      panel.hidden = true;
      return;
    }
    panel.hidden = false;
    panel.replaceChildren();
    const title = document.createElement("h3");
    title.textContent = "Answered with a remembered interaction";
    const img = document.createElement("img");
    img.className = "ref-thumb";
    img.alt = "retrieved subject";
    img.src = this.api.eventImageUrl(ref.eventId);
    img.addEventListener("load", () => cropToBBox(img, ref.bbox));
    const detail = document.createElement("dl");
    detail.innerHTML =
      `<dt>question</dt><dd>${escapeHtml(ref.question)}</dd>` +
      `<dt>answer</dt><dd>${escapeHtml(ref.answer)}</dd>` +
      `<dt>sim_img</dt><dd data-field="sim_img">${ref.simImg}</dd>` +
      `<dt>sim_text</dt><dd data-field="sim_text">${ref.simText}</dd>`;
    panel.append(title, img, detail);
  }
}

/** Show only the event's subject region of an <img> via a cropped canvas. */
export function cropToBBox(img: HTMLImageElement, bbox: [number, number, number, number]): void {
  if (img.dataset.cropped === "1") return; // the re-assigned src fires load again
  const [x0, y0, x1, y1] = bbox;
  const sx = Math.round(x0 * img.naturalWidth);
  const sy = Math.round(y0 * img.naturalHeight);
  const sw = Math.max(1, Math.round(x1 * img.naturalWidth) - sx);
  const sh = Math.max(1, Math.round(y1 * img.naturalHeight) - sy);
  const canvas = document.createElement("canvas");
  canvas.width = sw;
  canvas.height = sh;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.drawImage(img, sx, sy, sw, sh, 0, 0, sw, sh);
  img.dataset.cropped = "1";
  img.src = canvas.toDataURL();
}

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
