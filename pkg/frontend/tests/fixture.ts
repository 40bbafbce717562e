/**
 * In-memory stand-in for the review service, speaking the same HTTP wire
 * format. Tests point a `ReviewApi` at `fetchFor(service)` and then assert
 * against the service's internal state to check that UI actions mutated
 * the backend the way they should.
 */

import type { FetchLike } from "../src/api.js";
import type {
  DecisionBody,
  InstanceView,
  NextResponse,
  PairPayload,
  Progress,
} from "../src/types.js";
import { PENDING_STATUS } from "../src/types.js";

export function fixtureInstance(
  instanceId: string,
  changeClass: number,
  extra: Partial<InstanceView> = {},
): InstanceView {
  return {
    instance_id: instanceId,
    change_class: changeClass,
    phrase: null,
    area: 40,
    png: `/static/fixture/06_pseudo/${instanceId}.png`,
    ...extra,
  };
}

export function fixturePair(pairId: string, instances: InstanceView[]): PairPayload {
  return {
    pair_id: pairId,
    status: PENDING_STATUS,
    coverage: 0.75,
    images: {
      t0: `/static/${pairId}/t0.png`,
      t1: `/static/${pairId}/t1.png`,
    },
    instances,
  };
}

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export class FixtureService {
  private readonly pairs = new Map<string, PairPayload>();
  private readonly leases = new Map<string, string>();
  readonly decisionLog: Array<{ pairId: string; body: DecisionBody }> = [];
  postCount = 0;
  getCount = 0;

  constructor(pairs: readonly PairPayload[]) {
    for (const pair of pairs) {
      this.pairs.set(pair.pair_id, structuredClone(pair) as PairPayload);
    }
  }

  statusOf(pairId: string): string {
    const pair = this.pairs.get(pairId);
    if (pair === undefined) {
      throw new Error(`no fixture pair ${pairId}`);
    }
    return pair.status;
  }

  instanceIds(pairId: string): string[] {
    const pair = this.pairs.get(pairId);
    if (pair === undefined) {
      throw new Error(`no fixture pair ${pairId}`);
    }
    return pair.instances.map((inst) => inst.instance_id ?? "");
  }

  progress(): Progress {
    let pending = 0;
    let accepted = 0;
    let discarded = 0;
    for (const pair of this.pairs.values()) {
      if (pair.status === PENDING_STATUS) {
        pending += 1;
      } else if (pair.status === "accepted") {
        accepted += 1;
      } else if (pair.status === "discarded") {
        discarded += 1;
      }
    }
    return { total: this.pairs.size, pending, accepted, discarded };
  }

  private next(session: string): NextResponse {
    for (const pair of this.pairs.values()) {
      if (pair.status !== PENDING_STATUS) {
        continue;
      }
      const holder = this.leases.get(pair.pair_id);
      if (holder === undefined || holder === session) {
        this.leases.set(pair.pair_id, session);
        return { pair: structuredClone(pair) as PairPayload, progress: this.progress() };
      }
    }
    return { pair: null, progress: this.progress() };
  }

  private decide(pairId: string, body: DecisionBody): Response {
    this.postCount += 1;
    this.decisionLog.push({ pairId, body });
    const pair = this.pairs.get(pairId);
    if (pair === undefined) {
      return json(404, { detail: `unknown pair: ${pairId}` });
    }
    if (pair.status !== PENDING_STATUS) {
      return json(409, { detail: `pair already ${pair.status}` });
    }
    if (body.action === "accept") {
      pair.status = "accepted";
      this.leases.delete(pairId);
    } else if (body.action === "discard") {
      pair.status = "discarded";
      this.leases.delete(pairId);
    } else if (body.action === "remove_instance") {
      if (body.instance_id === undefined) {
        return json(422, { detail: "remove_instance needs an instance_id" });
      }
      const before = pair.instances.length;
      pair.instances = pair.instances.filter(
        (inst) => inst.instance_id !== body.instance_id,
      );
      if (pair.instances.length === before) {
        return json(404, { detail: `unknown instance: ${body.instance_id}` });
      }
    } else {
      return json(422, { detail: `unknown action: ${String(body.action)}` });
    }
    return json(200, structuredClone(pair));
  }

  async handle(input: string, init?: RequestInit): Promise<Response> {
    const url = new URL(input, "http://fixture.test");
    const method = (init?.method ?? "GET").toUpperCase();
    if (method === "GET") {
      this.getCount += 1;
      if (url.pathname === "/api/progress") {
        return json(200, this.progress());
      }
      if (url.pathname === "/api/pairs/next") {
        return json(200, this.next(url.searchParams.get("session") ?? "anonymous"));
      }
      const pairMatch = /^\/api\/pairs\/([^/]+)$/.exec(url.pathname);
      if (pairMatch !== null) {
        const pairId = decodeURIComponent(pairMatch[1]!);
        const pair = this.pairs.get(pairId);
        if (pair === undefined) {
          return json(404, { detail: `unknown pair: ${pairId}` });
        }
        return json(200, structuredClone(pair));
      }
    }
    if (method === "POST") {
      const decisionMatch = /^\/api\/pairs\/([^/]+)\/decision$/.exec(url.pathname);
      if (decisionMatch !== null) {
        const pairId = decodeURIComponent(decisionMatch[1]!);
        const body = JSON.parse(String(init?.body ?? "{}")) as DecisionBody;
        return this.decide(pairId, body);
      }
    }
    return json(404, { detail: `no route for ${method} ${url.pathname}` });
  }
}

export function fetchFor(service: FixtureService): FetchLike {
  return (input, init) => service.handle(input, init);
}

/** Wait for queued promise callbacks and zero-delay timers to run. */
export async function settle(turns = 4): Promise<void> {
  for (let i = 0; i < turns; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}
