/**
 * Typed client for the session service.
 *
 * Bodies are JSON with base64 PNG images; errors arrive as
 * {"error": {"code", "message"}} and surface as ApiError so callers can
 * branch on the code (PROTOCOL, PARSE, BACKEND, VALIDATION).
 */

import type {
  CreateSessionBody,
  DecisionBody,
  ErrorEnvelope,
  SessionView,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}>;

export class ApiClient {
  private base: string;

  constructor(
    baseUrl: string,
    private fetchFn: FetchLike = fetch as unknown as FetchLike,
  ) {
    this.base = baseUrl.replace(/\/+$/, "");
  }

  async health(): Promise<boolean> {
    const res = await this.fetchFn(`${this.base}/health`);
    return res.ok;
  }

  async listSessions(): Promise<string[]> {
    const body = (await this.request("/sessions")) as { sessions: string[] };
    return body.sessions;
  }

  async createSession(body: CreateSessionBody): Promise<SessionView> {
    return (await this.request("/sessions", "POST", body)) as SessionView;
  }

  async getSession(id: string): Promise<SessionView> {
    return (await this.request(
      `/sessions/${encodeURIComponent(id)}`,
    )) as SessionView;
  }

  async postDecision(id: string, decision: DecisionBody): Promise<SessionView> {
    return (await this.request(
      `/sessions/${encodeURIComponent(id)}/decision`,
      "POST",
      decision,
    )) as SessionView;
  }

  /** Absolute URL for an artifact path from a snapshot. */
  artifactUrl(path: string): string {
    return path.startsWith("/") ? `${this.base}${path}` : path;
  }

  private async request(
    path: string,
    method = "GET",
    body?: unknown,
  ): Promise<unknown> {
    const res = await this.fetchFn(`${this.base}${path}`, {
      method,
      headers: body !== undefined ? { "content-type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = await res.json();
    if (!res.ok) {
      const envelope = payload as ErrorEnvelope;
      const code = envelope?.error?.code ?? "UNKNOWN";
      const message = envelope?.error?.message ?? `HTTP ${res.status}`;
      throw new ApiError(res.status, code, message);
    }
    return payload;
  }
}
