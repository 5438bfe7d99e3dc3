// Typed client for the service HTTP API. Nothing here computes answers or
// similarities: every figure the console shows comes back from the server.

export interface Turn {
  speaker: "user" | "robot";
  text: string;
  timestamp: number;
}

export interface ActionJson {
  type: "ask_clarification" | "final_answer" | "session_closed";
  question?: string;
  text?: string;
  used_reference?: boolean;
  event_id?: string | null;
}

export interface SessionResponse {
  session_id: string;
  state: string;
  action: ActionJson;
  transcript: Turn[];
}

export interface RetrievalRef {
  event_id: string;
  question: string;
  answer: string;
  sim_img: number;
  sim_text: number;
  image_ref: string;
  bbox: [number, number, number, number];
}

export interface SessionView {
  session_id: string;
  state: string;
  image_ref: string;
  clarification_round: number;
  resolved_question: string | null;
  transcript: Turn[];
  final_answer: string | null;
  used_reference: boolean;
  retrieval: RetrievalRef | null;
  stored_event_id: string | null;
}

export interface EventJson {
  event_id: string;
  image_ref: string;
  bbox: [number, number, number, number];
  question: string;
  answer: string;
  created_at: number;
  session_id: string;
  provider_tag: string;
  localization_flagged: boolean;
  dim: number;
}

export interface EventsPage {
  total: number;
  offset: number;
  events: EventJson[];
}

export interface PendingJobJson {
  job_id: string;
  status: string;
  submitted_at: number;
  batch_id: string | null;
}

export interface UpdateStatus {
  event_count: number;
  exported_count: number;
  pending_toward_threshold: number;
  threshold: number;
  last_batch_id: string | null;
  last_exported_event_id: string | null;
  pending_job: PendingJobJson | null;
  active_model_version: string;
}

export interface TurnsPage {
  turns: Turn[];
  next: number;
  state: string;
}

export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError("ConnectionLost", String(err), 0);
    }
    if (!resp.ok) {
      let code = "HttpError";
      let message = `HTTP ${resp.status}`;
      try {
        const body = await resp.json();
        if (body?.error?.code) {
          code = body.error.code;
          message = body.error.message ?? message;
        }
      } catch {
        // non-JSON error body; keep the generic message
      }
      throw new ApiError(code, message, resp.status);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  createSession(imageB64: string, utterance: string): Promise<SessionResponse> {
    return this.post("/sessions", { image_b64: imageB64, utterance });
  }

  sendMessage(sessionId: string, text: string): Promise<SessionResponse> {
    return this.post(`/sessions/${sessionId}/messages`, { text });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request(`/sessions/${sessionId}`);
  }

  pollTurns(sessionId: string, after: number, waitS = 10): Promise<TurnsPage> {
    return this.request(`/sessions/${sessionId}/turns?after=${after}&wait_s=${waitS}`);
  }

  listEvents(offset = 0, limit = 10): Promise<EventsPage> {
    return this.request(`/events?offset=${offset}&limit=${limit}`);
  }

  getEvent(eventId: string): Promise<EventJson> {
    return this.request(`/events/${eventId}`);
  }

  eventImageUrl(eventId: string): string {
    return `${this.baseUrl}/events/${eventId}/image`;
  }

  updateStatus(): Promise<UpdateStatus> {
    return this.request("/update/status");
  }

  triggerUpdate(): Promise<{ batch_id: string; job_id: string; records: number }> {
    return this.post("/update/trigger", {});
  }

  health(): Promise<{ status: string; model_version: string; event_count: number }> {
    return this.request("/healthz");
  }
}
