/**
 * Idempotency guard: at most one decision per session revision.
 *
 * Every snapshot carries a revision that only the server increments. The
 * guard hands out a single send permit per (session, revision); repeat
 * clicks and stale retries are refused locally, and the server's own
 * revision check (409 PROTOCOL on mismatch) backstops anything that
 * slips past.
 */

export class DecisionGuard {
  private sent = new Set<string>();

  /** True exactly once per (session, revision); false on repeats. */
  acquire(sessionId: string, revision: number): boolean {
    const key = `${sessionId}:${revision}`;
    if (this.sent.has(key)) {
      return false;
    }
    this.sent.add(key);
    return true;
  }

  /** Release a permit after a failed send so the gate can be retried. */
  release(sessionId: string, revision: number): void {
    this.sent.delete(`${sessionId}:${revision}`);
  }

  hasSent(sessionId: string, revision: number): boolean {
    return this.sent.has(`${sessionId}:${revision}`);
  }
}
