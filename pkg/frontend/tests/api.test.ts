import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import type { SessionView } from "../src/types.js";

interface Call {
  url: string;
  method: string;
  headers: Record<string, string>;
  body?: string;
}

function mockFetch(status: number, payload: unknown) {
  const calls: Call[] = [];
  const fn = async (
    input: string,
    init?: { method?: string; headers?: Record<string, string>; body?: string },
  ) => {
    calls.push({
      url: input,
      method: init?.method ?? "GET",
      headers: init?.headers ?? {},
      body: init?.body,
    });
    return {
      ok: status >= 200 && status < 300,
      status,
      json: async () => payload,
    };
  };
  return { calls, fn };
}

const view: SessionView = {
  id: "abc",
  state: "AwaitDetectReview",
  revision: 1,
  tag: "object",
  bbox_tgt: [4, 4, 20, 20],
  bbox_ref: null,
  pending_step: "detect",
  question: "Accept the detected region?",
  message: null,
  artifacts: { ref: "/sessions/abc/artifacts/ref", tgt: "/sessions/abc/artifacts/tgt" },
  history: [],
};

describe("ApiClient", () => {
  it("lists sessions from the envelope", async () => {
    const { calls, fn } = mockFetch(200, { sessions: ["a", "b"] });
    const client = new ApiClient("http://host:9", fn);
    expect(await client.listSessions()).toEqual(["a", "b"]);
    expect(calls[0].url).toBe("http://host:9/sessions");
    expect(calls[0].method).toBe("GET");
  });

  it("trims trailing slashes off the base URL", async () => {
    const { calls, fn } = mockFetch(200, { sessions: [] });
    await new ApiClient("http://host:9///", fn).listSessions();
    expect(calls[0].url).toBe("http://host:9/sessions");
  });

  it("creates a session with a JSON body", async () => {
    const { calls, fn } = mockFetch(201, view);
    const client = new ApiClient("http://host:9", fn);
    const got = await client.createSession({
      image_ref: "QUJD",
      image_tgt: "REVG",
      tag: "logo",
    });
    expect(got.id).toBe("abc");
    expect(calls[0].method).toBe("POST");
    expect(calls[0].headers["content-type"]).toBe("application/json");
    expect(JSON.parse(calls[0].body!)).toEqual({
      image_ref: "QUJD",
      image_tgt: "REVG",
      tag: "logo",
    });
  });

  it("posts decisions to the session decision endpoint", async () => {
    const { calls, fn } = mockFetch(200, view);
    const client = new ApiClient("http://host:9", fn);
    await client.postDecision("abc", {
      verdict: "reject",
      bbox: [4, 4, 20, 20],
      revision: 1,
    });
    expect(calls[0].url).toBe("http://host:9/sessions/abc/decision");
    expect(JSON.parse(calls[0].body!)).toEqual({
      verdict: "reject",
      bbox: [4, 4, 20, 20],
      revision: 1,
    });
  });

  it("escapes session ids in paths", async () => {
    const { calls, fn } = mockFetch(200, view);
    await new ApiClient("http://host:9", fn).getSession("a/b c");
    expect(calls[0].url).toBe("http://host:9/sessions/a%2Fb%20c");
  });

  it("turns error envelopes into ApiError", async () => {
    const { fn } = mockFetch(409, {
      error: { code: "PROTOCOL", message: "stale decision for revision 1" },
    });
    const client = new ApiClient("http://host:9", fn);
    const err = await client
      .postDecision("abc", { verdict: "accept", revision: 1 })
      .then(() => null, (e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    const apiErr = err as ApiError;
    expect(apiErr.status).toBe(409);
    expect(apiErr.code).toBe("PROTOCOL");
    expect(apiErr.message).toContain("stale decision");
  });

  it("falls back to a generic code when the envelope is malformed", async () => {
    const { fn } = mockFetch(500, { oops: true });
    const client = new ApiClient("http://host:9", fn);
    const err = await client.listSessions().then(() => null, (e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).code).toBe("UNKNOWN");
  });

  it("resolves artifact paths against the base URL", () => {
    const client = new ApiClient("http://host:9", mockFetch(200, {}).fn);
    expect(client.artifactUrl("/sessions/abc/artifacts/ref")).toBe(
      "http://host:9/sessions/abc/artifacts/ref",
    );
    expect(client.artifactUrl("data:image/png;base64,AA==")).toBe(
      "data:image/png;base64,AA==",
    );
  });
});
