/**
 * Browser entry point: session picker, create form, and the review loop.
 *
 * All state lives on the server. After every acknowledged decision the
 * client re-fetches the snapshot and re-renders; nothing is predicted
 * locally. The DecisionGuard makes double-clicks inert by allowing one
 * in-flight decision per (session, revision) pair.
 */

import { ApiClient, ApiError } from "./api.js";
import { DecisionGuard } from "./guard.js";
import { renderEmptyState, renderSession } from "./ui.js";
import type { DecisionBody, SessionView } from "./types.js";

const ZOOM = 8;
const IMAGE_SIDE = 32;
const POLL_MS = 1500;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id} in page shell`);
  return node as T;
}

async function fileToBase64(file: File): Promise<string> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let bin = "";
  for (const byte of buf) bin += String.fromCharCode(byte);
  return btoa(bin);
}

export function boot(): void {
  const client = new ApiClient("");
  const guard = new DecisionGuard();
  const listNode = el<HTMLElement>("session-list");
  const mainNode = el<HTMLElement>("session-main");
  const statusNode = el<HTMLElement>("status-line");
  let currentId: string | null = null;

  const setStatus = (text: string) => {
    statusNode.textContent = text;
  };

  const showError = (err: unknown) => {
    if (err instanceof ApiError) {
      setStatus(`${err.code}: ${err.message}`);
    } else {
      setStatus(String(err));
    }
  };

  const sendDecision = async (view: SessionView, decision: DecisionBody) => {
    if (!guard.acquire(view.id, view.revision)) return;
    try {
      const next = await client.postDecision(view.id, decision);
      setStatus(`decision applied, now ${next.state}`);
      paint(next);
    } catch (err) {
      // a stale-revision conflict means another tab moved the session;
      // refresh rather than surfacing the race to the reviewer
      if (err instanceof ApiError && err.status === 409) {
        guard.release(view.id, view.revision);
        await refresh(view.id);
        return;
      }
      guard.release(view.id, view.revision);
      showError(err);
    }
  };

  const paint = (view: SessionView) => {
    currentId = view.id;
    renderSession(mainNode, view, {
      zoom: ZOOM,
      imageSide: IMAGE_SIDE,
      artifactUrl: (path) => client.artifactUrl(path),
    }, {
      onDecision: (decision) => void sendDecision(view, decision),
    });
  };

  const refresh = async (id: string) => {
    try {
      paint(await client.getSession(id));
    } catch (err) {
      showError(err);
    }
  };

  const refreshList = async () => {
    try {
      const ids = await client.listSessions();
      listNode.replaceChildren();
      if (ids.length === 0 && !currentId) {
        renderEmptyState(mainNode);
      }
      for (const id of ids) {
        const btn = document.createElement("button");
        btn.className = "session-pick";
        btn.textContent = id;
        btn.addEventListener("click", () => void refresh(id));
        listNode.appendChild(btn);
      }
    } catch (err) {
      showError(err);
    }
  };

  const form = el<HTMLFormElement>("create-form");
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void (async () => {
      const refFile = el<HTMLInputElement>("ref-file").files?.[0];
      const tgtFile = el<HTMLInputElement>("tgt-file").files?.[0];
      const tag = el<HTMLInputElement>("tag-field").value.trim();
      if (!refFile || !tgtFile) {
        setStatus("pick both a reference and a target image");
        return;
      }
      try {
        const view = await client.createSession({
          image_ref: await fileToBase64(refFile),
          image_tgt: await fileToBase64(tgtFile),
          ...(tag ? { tag } : {}),
        });
        setStatus(`created ${view.id}`);
        paint(view);
        await refreshList();
      } catch (err) {
        showError(err);
      }
    })();
  });

  // polling keeps the snapshot honest even when another client decides
  setInterval(() => {
    void refreshList();
    if (currentId) void refresh(currentId);
  }, POLL_MS);

  void client.health().then(
    () => setStatus("connected"),
    (err) => showError(err),
  );
  void refreshList();
}

boot();
