import type { DecisionBody, NextResponse, PairPayload, Progress } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

/** Raised when the pair was finalized by another session (HTTP 409). */
export class ConflictError extends ApiError {
  constructor(status: number, detail: string) {
    super(status, detail);
    this.name = "ConflictError";
  }
}

export class NotFoundError extends ApiError {
  constructor(status: number, detail: string) {
    super(status, detail);
    this.name = "NotFoundError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ReviewApi {
  private readonly fetchFn: FetchLike;
  private readonly base: string;

  constructor(fetchFn?: FetchLike, base = "") {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
    this.base = base;
  }

  nextPair(session: string): Promise<NextResponse> {
    return this.getJson(`/api/pairs/next?session=${encodeURIComponent(session)}`);
  }

  getPair(pairId: string): Promise<PairPayload> {
    return this.getJson(`/api/pairs/${encodeURIComponent(pairId)}`);
  }

  progress(): Promise<Progress> {
    return this.getJson("/api/progress");
  }

  async submitDecision(pairId: string, body: DecisionBody): Promise<PairPayload> {
    const res = await this.fetchFn(
      `${this.base}/api/pairs/${encodeURIComponent(pairId)}/decision`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      },
    );
    return this.unwrap(res);
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    return this.unwrap(res);
  }

  private async unwrap<T>(res: Response): Promise<T> {
    if (res.ok) {
      return (await res.json()) as T;
    }
    let detail = `HTTP ${res.status}`;
    try {
      const body = (await res.json()) as { detail?: unknown };
      if (typeof body.detail === "string") {
        detail = body.detail;
      }
    } catch {
      // non-JSON error body, keep the status line
    }
    if (res.status === 409) {
      throw new ConflictError(res.status, detail);
    }
    if (res.status === 404) {
      throw new NotFoundError(res.status, detail);
    }
    throw new ApiError(res.status, detail);
  }
}
