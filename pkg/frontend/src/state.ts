import { ConflictError, ReviewApi } from "./api.js";
import type { DecisionAction, PairPayload, Progress } from "./types.js";
import { PENDING_STATUS } from "./types.js";

export type Phase = "loading" | "reviewing" | "done" | "error";

export interface ReviewState {
  phase: Phase;
  session: string;
  pair: PairPayload | null;
  progress: Progress | null;
  selectedInstance: string | null;
  /** Change classes currently drawn. Local view option, never sent anywhere. */
  enabledClasses: Set<number>;
  overlayOpacity: number;
  /** True while a decision POST is in flight. */
  submitting: boolean;
  /** Transient error text shown as a toast, cleared on the next action. */
  notice: string | null;
}

export type Listener = (state: ReviewState) => void;

const ALL_CLASSES = [1, 2, 3];

/**
 * Session state machine for the review queue.
 *
 * All rendering is a pure function of this state plus local toggle state,
 * so every mutation funnels through here. Accept and discard advance the
 * view optimistically: the UI switches to the loading screen immediately
 * and rolls back to the same pair with a notice if the POST fails.
 */
export class ReviewController {
  readonly state: ReviewState;
  private readonly api: ReviewApi;
  private readonly listeners: Listener[] = [];

  constructor(api: ReviewApi, session: string) {
    this.api = api;
    this.state = {
      phase: "loading",
      session,
      pair: null,
      progress: null,
      selectedInstance: null,
      enabledClasses: new Set(ALL_CLASSES),
      overlayOpacity: 0.5,
      submitting: false,
      notice: null,
    };
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      const at = this.listeners.indexOf(listener);
      if (at >= 0) {
        this.listeners.splice(at, 1);
      }
    };
  }

  private emit(): void {
    for (const listener of [...this.listeners]) {
      listener(this.state);
    }
  }

  async loadNext(): Promise<void> {
    this.state.phase = "loading";
    this.state.pair = null;
    this.state.selectedInstance = null;
    this.emit();
    try {
      const { pair, progress } = await this.api.nextPair(this.state.session);
      this.state.progress = progress;
      if (pair === null) {
        this.state.phase = "done";
      } else {
        this.state.pair = pair;
        this.state.phase = "reviewing";
      }
    } catch (err) {
      this.state.phase = "error";
      this.state.notice = errorText(err);
    }
    this.emit();
  }

  /** Flip one class layer. Pure view state; no request is issued. */
  toggleClass(changeClass: number): void {
    if (this.state.enabledClasses.has(changeClass)) {
      this.state.enabledClasses.delete(changeClass);
    } else {
      this.state.enabledClasses.add(changeClass);
    }
    this.emit();
  }

  setOpacity(value: number): void {
    this.state.overlayOpacity = Math.min(1, Math.max(0, value));
    this.emit();
  }

  selectInstance(instanceId: string | null): void {
    this.state.selectedInstance = instanceId;
    this.emit();
  }

  accept(): Promise<void> {
    return this.finalize("accept");
  }

  discard(): Promise<void> {
    return this.finalize("discard");
  }

  /** Remove the selected instance from the pair. The pair stays pending. */
  async removeSelected(): Promise<void> {
    const pair = this.state.pair;
    const instanceId = this.state.selectedInstance;
    if (this.state.phase !== "reviewing" || pair === null || this.state.submitting) {
      return;
    }
    if (instanceId === null) {
      this.state.notice = "select an instance to remove";
      this.emit();
      return;
    }
    this.state.submitting = true;
    this.state.notice = null;
    this.emit();
    try {
      const updated = await this.api.submitDecision(pair.pair_id, {
        action: "remove_instance",
        reviewer: this.state.session,
        instance_id: instanceId,
      });
      this.state.pair = updated;
      this.state.selectedInstance = null;
    } catch (err) {
      if (err instanceof ConflictError) {
        await this.reloadAfterConflict(pair.pair_id);
      } else {
        this.state.notice = errorText(err);
      }
    }
    this.state.submitting = false;
    this.emit();
  }

  private async finalize(action: DecisionAction): Promise<void> {
    const pair = this.state.pair;
    if (this.state.phase !== "reviewing" || pair === null || this.state.submitting) {
      return;
    }
    this.state.submitting = true;
    this.state.notice = null;
    // Optimistic advance: leave the pair right away, roll back on failure.
    this.state.phase = "loading";
    this.state.pair = null;
    this.state.selectedInstance = null;
    this.emit();
    try {
      await this.api.submitDecision(pair.pair_id, {
        action,
        reviewer: this.state.session,
      });
      this.state.submitting = false;
      await this.loadNext();
      return;
    } catch (err) {
      this.state.submitting = false;
      if (err instanceof ConflictError) {
        await this.reloadAfterConflict(pair.pair_id);
      } else {
        this.state.phase = "reviewing";
        this.state.pair = pair;
        this.state.notice = errorText(err);
      }
      this.emit();
    }
  }

  /**
   * Another session finalized the pair first. Fetch its current record,
   * and advance if it is no longer pending.
   */
  private async reloadAfterConflict(pairId: string): Promise<void> {
    try {
      const fresh = await this.api.getPair(pairId);
      if (fresh.status === PENDING_STATUS) {
        this.state.pair = fresh;
        this.state.phase = "reviewing";
        this.state.notice = "pair changed on the server, reloaded";
      } else {
        this.state.notice = "pair was finalized elsewhere, moving on";
        await this.loadNext();
      }
    } catch (err) {
      this.state.phase = "error";
      this.state.notice = errorText(err);
    }
  }

  /**
   * Keep the lease on the open pair alive. The queue endpoint renews the
   * caller's lease and hands back the same pair, so only the progress
   * counters are taken from the response; the open view is never swapped.
   */
  async renewLease(): Promise<void> {
    if (this.state.phase !== "reviewing" || this.state.submitting) {
      return;
    }
    try {
      const { progress } = await this.api.nextPair(this.state.session);
      this.state.progress = progress;
      this.emit();
    } catch {
      // Renewal is best effort; a dropped ping only risks the lease.
    }
  }
}

function errorText(err: unknown): string {
  if (err instanceof Error) {
    return err.message;
  }
  return String(err);
}
