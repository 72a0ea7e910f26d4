/** Shared access to the committed golden transcript. */
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

const HERE = dirname(fileURLToPath(import.meta.url));

function readLines(name: string): string[] {
  return readFileSync(join(HERE, "golden", name), "utf8")
    .split("\n")
    .filter((line) => line.length > 0);
}

export const goldenIn: string[] = readLines("session.in.ndjson");
export const goldenOut: string[] = readLines("session.out.ndjson");

export interface Exchange {
  request: Record<string, unknown>;
  /** The direct reply plus the events that follow it. */
  responses: Record<string, unknown>[];
}

/**
 * Pair each request with its reply and trailing events.  The server is
 * synchronous per connection: the reply comes first, then that
 * request's events, then the next request's reply.
 */
export function goldenExchanges(): Exchange[] {
  const outs = goldenOut.map(
    (line) => JSON.parse(line) as Record<string, unknown>,
  );
  const exchanges: Exchange[] = [];
  let cursor = 0;
  for (const line of goldenIn) {
    const request = JSON.parse(line) as Record<string, unknown>;
    const reply = outs[cursor];
    if (reply === undefined || reply.re !== request.id) {
      throw new Error(`transcript out of sync at request id ${request.id}`);
    }
    const responses = [reply];
    cursor += 1;
    while (cursor < outs.length && !("re" in outs[cursor]!)) {
      responses.push(outs[cursor]!);
      cursor += 1;
    }
    exchanges.push({ request, responses });
  }
  if (cursor !== outs.length) throw new Error("unconsumed transcript lines");
  return exchanges;
}
