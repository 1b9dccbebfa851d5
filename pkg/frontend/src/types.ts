/** Shared types mirroring the session service's JSON bodies. */

/** Box in original-image pixel coordinates, corners as [xmin, ymin, xmax, ymax). */
export type BoxTuple = [number, number, number, number];

export interface Box {
  xmin: number;
  ymin: number;
  xmax: number;
  ymax: number;
}

export function boxToTuple(box: Box): BoxTuple {
  return [box.xmin, box.ymin, box.xmax, box.ymax];
}

export function tupleToBox(t: BoxTuple): Box {
  return { xmin: t[0], ymin: t[1], xmax: t[2], ymax: t[3] };
}

/** One history event as recorded server-side; keys vary per action. */
export type HistoryEvent = Record<string, unknown>;

/**
 * Snapshot of one session as served by GET /sessions/{id}.
 *
 * The client renders snapshots verbatim and never advances state on its
 * own; a fresh snapshot after every acknowledged decision is the only
 * source of truth.
 */
export interface SessionView {
  id: string;
  state: string;
  revision: number;
  tag: string;
  bbox_tgt: BoxTuple | null;
  bbox_ref: BoxTuple | null;
  pending_step: string | null;
  question: string | null;
  message: string | null;
  artifacts: Record<string, string>;
  history: HistoryEvent[];
}

export interface CreateSessionBody {
  image_ref: string;
  image_tgt: string;
  tag?: string;
  session_id?: string;
}

export interface DecisionBody {
  verdict: "accept" | "reject";
  bbox?: BoxTuple;
  tag?: string;
  revision?: number;
}

export interface ErrorEnvelope {
  error: { code: string; message: string };
}
