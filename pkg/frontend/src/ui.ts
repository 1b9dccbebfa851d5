/**
 * DOM renderer for one agent session.
 *
 * The renderer is deliberately dumb: it paints the latest snapshot and
 * forwards user intents to the handler. It never mutates its own copy of
 * the state and never anticipates a transition; the caller re-renders
 * with whatever snapshot the server returns next.
 */

import { dragToBox, overlayStyle, toImagePoint } from "./bbox.js";
import type { Box, DecisionBody, SessionView } from "./types.js";
import { tupleToBox } from "./types.js";

export interface UiHandlers {
  /** A decision the reviewer committed at the current gate. */
  onDecision(decision: DecisionBody): void;
}

export interface RenderOptions {
  /** Display zoom factor; boxes stay in image pixels regardless. */
  zoom: number;
  /** Original image side in pixels (panes are square at desk scale). */
  imageSide: number;
  /** Resolve an artifact path from the snapshot to a fetchable URL. */
  artifactUrl(path: string): string;
}

/** Gates where a drawn box override makes sense, mapped to the pane. */
const DRAW_PANE: Record<string, "tgt" | "ref"> = {
  detect: "tgt",
  find_ref: "ref",
  correct: "tgt",
};

export function renderEmptyState(root: HTMLElement): void {
  root.replaceChildren();
  const note = document.createElement("p");
  note.dataset.testid = "empty-state";
  note.textContent = "No sessions yet. Create one to start reviewing.";
  root.appendChild(note);
}

export function renderSession(
  root: HTMLElement,
  view: SessionView,
  options: RenderOptions,
  handlers: UiHandlers,
): void {
  root.replaceChildren();

  const header = document.createElement("div");
  header.className = "session-header";
  const title = document.createElement("h2");
  title.textContent = `Session ${view.id}`;
  const state = document.createElement("span");
  state.dataset.testid = "state-label";
  state.className = "state-label";
  state.textContent = view.state;
  header.append(title, state);
  root.appendChild(header);

  const panes = document.createElement("div");
  panes.className = "panes";
  panes.appendChild(
    buildPane("Reference", "ref", view.artifacts.ref ?? null,
              view.bbox_ref ? tupleToBox(view.bbox_ref) : null,
              view, options, handlers),
  );
  panes.appendChild(
    buildPane("Target", "tgt", view.artifacts.tgt ?? null,
              view.bbox_tgt ? tupleToBox(view.bbox_tgt) : null,
              view, options, handlers),
  );
  root.appendChild(panes);

  const crops = document.createElement("div");
  crops.className = "crops";
  for (const name of ["crop_ref", "crop_tgt"] as const) {
    const path = view.artifacts[name];
    if (!path) continue;
    const img = document.createElement("img");
    img.dataset.testid = name;
    img.className = "crop-preview";
    img.src = options.artifactUrl(path);
    img.alt = name;
    crops.appendChild(img);
  }
  if (crops.childElementCount > 0) {
    root.appendChild(crops);
  }

  if (view.state === "Done") {
    const banner = document.createElement("p");
    banner.dataset.testid = "completion-banner";
    banner.className = "banner";
    banner.textContent = view.message ?? "";
    root.appendChild(banner);
    const corrected = view.artifacts.corrected;
    if (corrected) {
      const img = document.createElement("img");
      img.dataset.testid = "corrected-image";
      img.className = "corrected";
      img.src = options.artifactUrl(corrected);
      img.alt = "corrected result";
      img.style.width = `${options.imageSide * options.zoom}px`;
      root.appendChild(img);
    }
    return;
  }
  if (view.state === "Failed") {
    const banner = document.createElement("p");
    banner.dataset.testid = "failure-banner";
    banner.className = "banner banner-failed";
    banner.textContent = "The workflow failed; see the history below.";
    root.appendChild(banner);
    return;
  }

  if (view.pending_step) {
    root.appendChild(buildControls(view, handlers));
  }
}

function buildPane(
  label: string,
  role: "ref" | "tgt",
  imagePath: string | null,
  box: Box | null,
  view: SessionView,
  options: RenderOptions,
  handlers: UiHandlers,
): HTMLElement {
  const wrap = document.createElement("figure");
  wrap.className = "pane";
  const caption = document.createElement("figcaption");
  caption.textContent = label;
  wrap.appendChild(caption);

  const stage = document.createElement("div");
  stage.dataset.testid = `pane-${role}`;
  stage.className = "stage";
  const side = options.imageSide * options.zoom;
  stage.style.position = "relative";
  stage.style.width = `${side}px`;
  stage.style.height = `${side}px`;

  if (imagePath) {
    const img = document.createElement("img");
    img.src = options.artifactUrl(imagePath);
    img.alt = label;
    img.style.width = "100%";
    img.style.height = "100%";
    img.style.imageRendering = "pixelated";
    img.draggable = false;
    stage.appendChild(img);
  }

  if (box) {
    const overlay = document.createElement("div");
    overlay.dataset.testid = `overlay-${role}`;
    overlay.className = "box-overlay";
    overlay.style.position = "absolute";
    const style = overlayStyle(box, options.zoom);
    overlay.style.left = style.left;
    overlay.style.top = style.top;
    overlay.style.width = style.width;
    overlay.style.height = style.height;
    stage.appendChild(overlay);
  }

  const pending = view.pending_step;
  if (pending && DRAW_PANE[pending] === role) {
    wireDrawing(stage, view, options, handlers);
  }

  wrap.appendChild(stage);
  return wrap;
}

/**
 * Drag-to-draw on a pane: preview while dragging, and on release send a
 * reject carrying the normalized integer box. Degenerate drags (zero area
 * after rounding) are discarded.
 */
function wireDrawing(
  stage: HTMLElement,
  view: SessionView,
  options: RenderOptions,
  handlers: UiHandlers,
): void {
  let start: { x: number; y: number } | null = null;
  let preview: HTMLDivElement | null = null;

  const point = (ev: PointerEvent) => {
    const rect = stage.getBoundingClientRect();
    return toImagePoint(
      ev.clientX - rect.left,
      ev.clientY - rect.top,
      options.zoom,
    );
  };

  stage.addEventListener("pointerdown", (ev) => {
    start = point(ev);
    preview = document.createElement("div");
    preview.className = "box-overlay box-preview";
    preview.style.position = "absolute";
    stage.appendChild(preview);
    stage.setPointerCapture(ev.pointerId);
  });

  stage.addEventListener("pointermove", (ev) => {
    if (!start || !preview) return;
    const now = point(ev);
    const box = dragToBox(start.x, start.y, now.x, now.y,
                          options.imageSide, options.imageSide);
    if (box) {
      const style = overlayStyle(box, options.zoom);
      preview.style.left = style.left;
      preview.style.top = style.top;
      preview.style.width = style.width;
      preview.style.height = style.height;
    }
  });

  stage.addEventListener("pointerup", (ev) => {
    if (!start) return;
    const end = point(ev);
    const box = dragToBox(start.x, start.y, end.x, end.y,
                          options.imageSide, options.imageSide);
    start = null;
    preview?.remove();
    preview = null;
    if (box) {
      handlers.onDecision({
        verdict: "reject",
        bbox: [box.xmin, box.ymin, box.xmax, box.ymax],
        revision: view.revision,
      });
    }
  });
}

function buildControls(view: SessionView, handlers: UiHandlers): HTMLElement {
  const controls = document.createElement("div");
  controls.className = "controls";

  const question = document.createElement("p");
  question.dataset.testid = "question";
  question.textContent = view.question ?? "";
  controls.appendChild(question);

  const accept = document.createElement("button");
  accept.dataset.testid = "accept";
  accept.textContent = "Accept";
  accept.addEventListener("click", () => {
    handlers.onDecision({ verdict: "accept", revision: view.revision });
  });

  const reject = document.createElement("button");
  reject.dataset.testid = "reject";
  reject.textContent = "Reject";
  reject.addEventListener("click", () => {
    handlers.onDecision({ verdict: "reject", revision: view.revision });
  });

  const tagInput = document.createElement("input");
  tagInput.dataset.testid = "tag-input";
  tagInput.placeholder = "tag override";
  const tagSend = document.createElement("button");
  tagSend.dataset.testid = "tag-send";
  tagSend.textContent = "Reject with tag";
  tagSend.addEventListener("click", () => {
    const tag = tagInput.value.trim();
    if (!tag) return;
    handlers.onDecision({ verdict: "reject", tag, revision: view.revision });
  });

  const hint = document.createElement("p");
  hint.className = "hint";
  hint.textContent =
    "Accept to continue, Reject to redo, or drag a box on the highlighted pane to override.";

  controls.append(accept, reject, tagInput, tagSend, hint);
  return controls;
}
