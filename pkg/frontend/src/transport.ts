/**
 * NDJSON line transport.
 *
 * The console talks to exactly one socket; everything above this layer
 * sees an async stream of parsed server messages.  Two channels are
 * provided: a raw TCP channel (headless clients, node) and an in-memory
 * channel (tests).  A browser bundle supplies a WebSocket channel with
 * the same shape via an NDJSON-over-WebSocket bridge.
 */
import * as net from "node:net";

export interface LineChannel {
  send(line: string): void;
  lines(): AsyncGenerator<string>;
  close(): void;
}

/** Split a byte stream into complete lines (trailing partials buffered). */
export class LineSplitter {
  private buf = "";

  push(chunk: string): string[] {
    this.buf += chunk;
    const parts = this.buf.split("\n");
    this.buf = parts.pop() ?? "";
    return parts.filter((p) => p.length > 0);
  }
}

export class TcpChannel implements LineChannel {
  private constructor(private socket: net.Socket) {}

  static connect(host: string, port: number): Promise<TcpChannel> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port }, () =>
        resolve(new TcpChannel(socket)),
      );
      socket.once("error", reject);
    });
  }

  send(line: string): void {
    this.socket.write(line + "\n");
  }

  async *lines(): AsyncGenerator<string> {
    const splitter = new LineSplitter();
    for await (const chunk of this.socket) {
      yield* splitter.push(chunk.toString("utf8"));
    }
  }

  close(): void {
    this.socket.end();
  }
}

/** In-memory channel: the test harness plays the server side. */
export class MemoryChannel implements LineChannel {
  sent: string[] = [];
  private queue: string[] = [];
  private waiters: Array<(line: string | null) => void> = [];
  private closed = false;

  constructor(
    private onSend: (line: string, chan: MemoryChannel) => void = () => {},
  ) {}

  send(line: string): void {
    this.sent.push(line);
    this.onSend(line, this);
  }

  /** Server side: push one line toward the client. */
  deliver(line: string): void {
    const waiter = this.waiters.shift();
    if (waiter) waiter(line);
    else this.queue.push(line);
  }

  async *lines(): AsyncGenerator<string> {
    for (;;) {
      const queued = this.queue.shift();
      if (queued !== undefined) {
        yield queued;
        continue;
      }
      if (this.closed) return;
      const line = await new Promise<string | null>((resolve) =>
        this.waiters.push(resolve),
      );
      if (line === null) return;
      yield line;
    }
  }

  close(): void {
    this.closed = true;
    for (const waiter of this.waiters.splice(0)) waiter(null);
  }
}
