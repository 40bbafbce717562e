/** Wire types for the review service HTTP API. */

/** One pseudo-annotated instance as served for a pair. */
export interface InstanceView {
  instance_id: string | null;
  /** 1 object change, 2 appearance change, 3 not in view. */
  change_class: number | null;
  phrase: string | null;
  /** Mask area in pixels. */
  area: number;
  /** URL of the instance mask PNG (white on black). */
  png: string;
}

export interface PairPayload {
  pair_id: string;
  status: string;
  coverage: number;
  images: { t0: string; t1: string };
  instances: InstanceView[];
}

export interface Progress {
  total: number;
  pending: number;
  accepted: number;
  discarded: number;
}

export interface NextResponse {
  pair: PairPayload | null;
  progress: Progress;
}

export type DecisionAction = "accept" | "discard" | "remove_instance";

export interface DecisionBody {
  action: DecisionAction;
  reviewer: string;
  instance_id?: string;
}

export const PENDING_STATUS = "pending_review";

export const CLASS_NAMES: Record<number, string> = {
  1: "object change",
  2: "appearance change",
  3: "not in view",
};
