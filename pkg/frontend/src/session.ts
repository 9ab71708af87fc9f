/**
 * Transport-agnostic client core: handshake, inbound decode, view updates,
 * repaint scheduling.  main.ts plugs in a WebSocket and a canvas; the tests
 * plug in byte buffers and a hand-cranked frame clock.
 */

import type { Message } from "./codec.js";
import { FrameDecoder, MSG_CODES, ProtocolError, encode } from "./codec.js";
import { Outbox } from "./outbound.js";
import type { Schedule } from "./render-loop.js";
import { RenderLoop } from "./render-loop.js";
import type { ViewState } from "./state.js";
import { applyServerMessage, createView, logOutbound } from "./state.js";

export interface SessionHooks {
  /** Write bytes to the transport. */
  send: (bytes: Uint8Array<ArrayBuffer>) => void;
  /** Animation-frame scheduler (requestAnimationFrame in the browser). */
  schedule: Schedule;
  /** Paint callback; runs at most once per animation frame. */
  render: (view: ViewState) => void;
  /** The session is unusable; the owner should close the transport. */
  teardown?: () => void;
}

export class ClientSession {
  readonly view: ViewState;
  readonly outbox: Outbox;
  private decoder = new FrameDecoder();
  private loop: RenderLoop;
  private awaitingAck = false;

  constructor(private hooks: SessionHooks) {
    this.view = createView();
    this.loop = new RenderLoop(hooks.schedule, () => hooks.render(this.view));
    this.outbox = new Outbox({
      send: hooks.send,
      schedule: hooks.schedule,
      log: (entry) => {
        logOutbound(this.view, entry);
        this.loop.invalidate();
      },
      warn: (text) => {
        this.view.banner = text;
        this.loop.invalidate();
      },
    });
  }

  /** The transport is open: greet the server and await its Ack. */
  transportOpen(): void {
    this.decoder = new FrameDecoder(); // a new transport is a new byte stream
    this.awaitingAck = true;
    this.view.connection = "connecting";
    this.hooks.send(encode({ type: "hello", protocolVersion: 1, clientKind: "ui" }));
    this.loop.invalidate();
  }

  /** Inbound bytes; one whole protocol frame per WebSocket message. */
  feed(bytes: Uint8Array): void {
    let messages: Message[];
    try {
      messages = this.decoder.feed(bytes);
    } catch (e) {
      if (e instanceof ProtocolError) {
        this.fail(`protocol corruption: ${e.message}`);
        return;
      }
      throw e;
    }
    let changed = false;
    for (const msg of messages) {
      if (this.awaitingAck && msg.type === "ack" && msg.refMsg === MSG_CODES.hello) {
        this.awaitingAck = false;
        this.view.connection = "connected";
        this.view.banner = null;
        this.outbox.setConnected(true);
        changed = true;
        continue;
      }
      if (applyServerMessage(this.view, msg)) changed = true;
      if (msg.type === "bye") {
        this.outbox.setConnected(false);
        this.hooks.teardown?.();
      }
    }
    if (changed) this.loop.invalidate();
  }

  /** The transport dropped; keep the last picture, queue further edits. */
  transportClosed(): void {
    if (this.view.connection === "error") return;
    this.view.connection = "closed";
    this.view.banner = "connection lost; edits are queued";
    this.outbox.setConnected(false);
    this.loop.invalidate();
  }

  repaint(): void {
    this.loop.invalidate();
  }

  private fail(text: string): void {
    this.view.connection = "error";
    this.view.banner = text;
    this.outbox.setConnected(false);
    this.loop.invalidate();
    this.hooks.teardown?.();
  }
}
