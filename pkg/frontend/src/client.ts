/**
 * Session client: request/reply correlation over a line channel, plus
 * the scripted headless session used by the conformance tests.
 *
 * The server handles one message at a time per connection, so all
 * events belonging to request N arrive before the reply to request
 * N+1; `request()` consumes interleaved events into the view model
 * while waiting for the matching reply.
 */
import {
  isEvent,
  makeRequest,
  parseServerLine,
  type Reply,
  type RequestType,
} from "./protocol.js";
import type { LineChannel } from "./transport.js";
import {
  initialViewModel,
  reduce,
  type ViewModel,
} from "./viewmodel.js";

export class SessionClient {
  vm: ViewModel = initialViewModel();
  /** View model snapshot after every reduced message, for replay checks. */
  frames: ViewModel[] = [];
  private nextId = 1;
  private iterator: AsyncGenerator<string>;

  constructor(private channel: LineChannel) {
    this.iterator = channel.lines();
  }

  private apply(action: Parameters<typeof reduce>[1]): void {
    this.vm = reduce(this.vm, action);
    this.frames.push(this.vm);
  }

  /** Send one request; reduce all events until its reply arrives. */
  async request(
    type: RequestType,
    fields: Record<string, unknown> = {},
  ): Promise<Reply> {
    const msg = makeRequest(type, this.nextId++, fields);
    this.apply({ dir: "send", msg });
    this.channel.send(JSON.stringify(msg));
    for (;;) {
      const next = await this.iterator.next();
      if (next.done) throw new Error("channel closed awaiting reply");
      const parsed = parseServerLine(next.value);
      this.apply({ dir: "recv", msg: parsed });
      if (!isEvent(parsed) && parsed.re === msg.id) return parsed;
    }
  }

  close(): void {
    this.channel.close();
  }
}

export interface SessionScript {
  sceneSeed: number;
  profile: string;
  tickStride: number;
  target: [number, number, number];
  planSeed: number;
  planIndex: number;
  misaim: { yaw: number; pitch: number };
  maxAimAttempts: number;
}

const round6 = (x: number) => Math.round(x * 1e6) / 1e6;

/**
 * Drive a full session: load -> (forced out-of-order, rejected) ->
 * plans -> select -> misaim -> correct until aligned -> hold ->
 * autonomous -> record.  Mirrors the golden transcript generator.
 */
export async function runScriptedSession(
  client: SessionClient,
  script: SessionScript,
): Promise<ViewModel> {
  await client.request("load_scene", {
    seed: script.sceneSeed,
    profile: script.profile,
    tick_stride: script.tickStride,
  });

  // deliberately out of order: the server must reject it and the
  // console must render the rejection without changing state
  const rejected = await client.request("start_autonomous");
  if (rejected.ok) throw new Error("out-of-order request was accepted");

  await client.request("request_plans", {
    target: script.target,
    seed: script.planSeed,
  });
  await client.request("select_plan", { i: script.planIndex });
  await client.request("aim", script.misaim);

  let aligned = false;
  for (let attempt = 0; attempt < script.maxAimAttempts; attempt++) {
    const check = await client.request("query_alignment");
    if (!check.ok) throw new Error("query_alignment failed");
    if ((check as Record<string, unknown>).aligned === true) {
      aligned = true;
      break;
    }
    const suggestion = (check as Record<string, unknown>)
      .suggested_correction as [number, number];
    await client.request("aim", {
      yaw: round6(suggestion[0]),
      pitch: round6(suggestion[1]),
    });
  }
  if (!aligned) throw new Error("never aligned");

  await client.request("request_hold");
  const start = await client.request("start_autonomous");
  if (!start.ok) throw new Error("start_autonomous rejected");
  const record = await client.request("get_record");
  if (!record.ok) throw new Error("get_record rejected");
  return client.vm;
}
