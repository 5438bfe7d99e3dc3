// Console session state, kept free of DOM concerns so it is unit-testable.
//
// The invariant that matters: `messages` mirrors the server transcript
// exactly (count and order). A just-sent user message may be shown
// optimistically, but the next server response replaces the whole list
// with the server's truth.

import type { ActionJson, RetrievalRef, SessionResponse, SessionView, Turn } from "./api.js";

export type Phase =
  | "idle"
  | "awaiting_robot"
  | "clarifying"
  | "awaiting_feedback"
  | "closed"
  | "error";

export interface ReferencePanel {
  eventId: string;
  question: string;
  answer: string;
  simImg: number;
  simText: number;
  imageRef: string;
  bbox: [number, number, number, number];
}

export class ConsoleSession {
  sessionId: string | null = null;
  messages: Turn[] = [];
  pendingUser: string | null = null;
  phase: Phase = "idle";
  serverState = "";
  clarificationRound = 0;
  usedReference = false;
  reference: ReferencePanel | null = null;
  finalAnswer: string | null = null;
  storedEventId: string | null = null;
  lastError: string | null = null;

  /** Messages to render: server truth plus at most one optimistic echo. */
  rendered(): Turn[] {
    if (this.pendingUser === null) return this.messages;
    return [...this.messages, { speaker: "user", text: this.pendingUser, timestamp: NaN }];
  }

  optimisticSend(text: string): void {
    this.pendingUser = text;
    this.phase = "awaiting_robot";
    this.lastError = null;
  }

  /** Server response wins over any optimistic state. */
  applyResponse(resp: SessionResponse): ActionJson {
    this.sessionId = resp.session_id;
    this.pendingUser = null;
    this.messages = [...resp.transcript];
    this.serverState = resp.state;
    this.lastError = null;
    const action = resp.action;
    if (action.type === "ask_clarification") {
      this.phase = "clarifying";
      this.clarificationRound += 1;
    } else if (action.type === "final_answer") {
      this.phase = "awaiting_feedback";
      this.finalAnswer = action.text ?? null;
      this.usedReference = Boolean(action.used_reference);
    } else {
      this.phase = "closed";
      this.storedEventId = action.event_id ?? null;
    }
    return action;
  }

  /** Reconcile against GET /sessions/{id}; the view is authoritative. */
  applyView(view: SessionView): void {
    this.sessionId = view.session_id;
    this.messages = [...view.transcript];
    this.serverState = view.state;
    this.clarificationRound = view.clarification_round;
    this.usedReference = view.used_reference;
    this.finalAnswer = view.final_answer;
    this.storedEventId = view.stored_event_id;
    this.reference = view.retrieval ? toPanel(view.retrieval) : null;
  }

  connectionLost(message: string): void {
    // the optimistic echo stays visible; the retry banner owns recovery
    this.phase = "error";
    this.lastError = message;
  }

  mirrorsTranscript(serverTranscript: Turn[]): boolean {
    if (this.messages.length !== serverTranscript.length) return false;
    return this.messages.every(
      (m, i) =>
        m.speaker === serverTranscript[i].speaker &&
        m.text === serverTranscript[i].text &&
        m.timestamp === serverTranscript[i].timestamp,
    );
  }
}

export function toPanel(ref: RetrievalRef): ReferencePanel {
  return {
    eventId: ref.event_id,
    question: ref.question,
    answer: ref.answer,
    simImg: ref.sim_img,
    simText: ref.sim_text,
    imageRef: ref.image_ref,
    bbox: ref.bbox,
  };
}

export interface EventBrowserState {
  offset: number;
  limit: number;
  total: number;
}

export function pageCount(state: EventBrowserState): number {
  return Math.max(1, Math.ceil(state.total / state.limit));
}

export function currentPage(state: EventBrowserState): number {
  return Math.floor(state.offset / state.limit) + 1;
}

export function updateProgressPercent(pending: number, threshold: number): number {
  if (threshold <= 0) return 0;
  return Math.min(100, Math.round((pending / threshold) * 100));
}
