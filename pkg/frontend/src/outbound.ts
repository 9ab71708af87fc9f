/**
 * Outbound message path: panel edits go out on commit, drag moves are
 * coalesced to at most one GeometryUpdate per animation frame (the client
 * mirror of the server's tick coalescing), and messages composed while
 * disconnected are queued and replayed on reconnect.
 */

import type { GeometryUpdate, Message } from "./codec.js";
import { encode } from "./codec.js";
import type { Schedule } from "./render-loop.js";

export const QUEUE_LIMIT = 100;

export interface OutboxHooks {
  send: (bytes: Uint8Array<ArrayBuffer>) => void;
  schedule: Schedule;
  log: (entry: string) => void;
  warn: (text: string) => void;
}

function describe(msg: Message): string {
  switch (msg.type) {
    case "param":
      return `param ${msg.name} = ${msg.value}`;
    case "geometry": {
      const at = `(${msg.x.toFixed(3)}, ${msg.y.toFixed(3)})`;
      const temp = msg.temperature === null ? "" : ` T=${msg.temperature}`;
      return `${msg.op} ${msg.entity} #${msg.entityId} ${at}${temp}`;
    }
    default:
      return msg.type;
  }
}

export class Outbox {
  private connected = false;
  private queue: Array<Uint8Array<ArrayBuffer>> = [];
  private dropped = 0;
  private pendingMove: GeometryUpdate | null = null;
  private flushArmed = false;

  constructor(private hooks: OutboxHooks) {}

  /** Emit immediately (or queue while disconnected). */
  post(msg: Message): void {
    this.dispatch(encode(msg), describe(msg));
  }

  /**
   * Emit a drag move; only the freshest position survives until the next
   * animation frame sends it.
   */
  move(msg: GeometryUpdate): void {
    this.pendingMove = msg;
    if (this.flushArmed) return;
    this.flushArmed = true;
    this.hooks.schedule(() => {
      this.flushArmed = false;
      if (this.pendingMove === null) return;
      const pending = this.pendingMove;
      this.pendingMove = null;
      this.dispatch(encode(pending), describe(pending));
    });
  }

  /** Force out a coalesced move now (drag end must not lose the last hop). */
  flushMove(): void {
    if (this.pendingMove === null) return;
    const pending = this.pendingMove;
    this.pendingMove = null;
    this.dispatch(encode(pending), describe(pending));
  }

  setConnected(connected: boolean): void {
    this.connected = connected;
    if (!connected) return;
    this.dropped = 0;
    const backlog = this.queue;
    this.queue = [];
    for (const bytes of backlog) {
      this.hooks.send(bytes);
    }
  }

  get queuedCount(): number {
    return this.queue.length;
  }

  private dispatch(bytes: Uint8Array<ArrayBuffer>, entry: string): void {
    if (this.connected) {
      this.hooks.send(bytes);
      this.hooks.log(entry);
      return;
    }
    if (this.queue.length >= QUEUE_LIMIT) {
      this.dropped += 1;
      this.hooks.warn(
        `disconnected: queue full, dropped ${this.dropped} message` +
          (this.dropped === 1 ? "" : "s"),
      );
      return;
    }
    this.queue.push(bytes);
    this.hooks.log(`${entry} (queued)`);
  }
}
