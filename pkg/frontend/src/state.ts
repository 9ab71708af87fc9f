/**
 * Console view state and the reducers that fold protocol messages into it.
 *
 * Pure of DOM and sockets so the whole message path is testable headless.
 * The one rendering rule that matters lives here: the view holds exactly
 * one ResultFrame at a time, and a frame with a lower epoch than the last
 * held one is discarded, so what the user sees is always a single
 * consistent picture with monotone epochs.
 */

import type { GeometryEntity, Message, ResultFrame, Stats } from "./codec.js";

export type Connection = "connecting" | "connected" | "closed" | "error";

export interface Overlay {
  entity: GeometryEntity;
  id: number;
  x: number; // unit-square coordinates; the server rasterizes
  y: number;
  temperature: number;
}

export interface Indicator {
  level: number;
  reason: string; // why the server last switched; "" until the first notice
}

/** Fixed color scale; set from the first frame and never rescaled. */
export interface Scale {
  lo: number;
  hi: number;
}

const RESIDUAL_CAPACITY = 512;
const LOG_CAPACITY = 200;

/** Append-only ring of the latest residuals, for the convergence chart. */
export class ResidualRing {
  private ring = new Float64Array(RESIDUAL_CAPACITY);
  private next = 0;
  private count = 0;

  push(value: number): void {
    this.ring[this.next] = value;
    this.next = (this.next + 1) % RESIDUAL_CAPACITY;
    this.count = Math.min(this.count + 1, RESIDUAL_CAPACITY);
  }

  values(): number[] {
    const out: number[] = [];
    const start = (this.next - this.count + RESIDUAL_CAPACITY) % RESIDUAL_CAPACITY;
    for (let i = 0; i < this.count; i++) {
      out.push(this.ring[(start + i) % RESIDUAL_CAPACITY]!);
    }
    return out;
  }
}

export interface ViewState {
  connection: Connection;
  banner: string | null; // visible warning or error text
  frame: ResultFrame | null; // the single frame the canvas shows
  indicator: Indicator | null;
  overlays: Map<number, Overlay>; // the client's intent; frames confirm it
  drag: { id: number; x: number; y: number } | null;
  residuals: ResidualRing;
  stats: Stats | null;
  scale: Scale | null;
  outboundLog: string[];
  framesDropped: number; // stale-epoch discards, shown in the status bar
}

export function createView(): ViewState {
  return {
    connection: "connecting",
    banner: null,
    frame: null,
    indicator: null,
    overlays: new Map(),
    drag: null,
    residuals: new ResidualRing(),
    stats: null,
    scale: null,
    outboundLog: [],
    framesDropped: 0,
  };
}

/** Record an emitted message; capped so the log cannot grow without bound. */
export function logOutbound(view: ViewState, entry: string): void {
  view.outboundLog.push(entry);
  if (view.outboundLog.length > LOG_CAPACITY) {
    view.outboundLog.splice(0, view.outboundLog.length - LOG_CAPACITY);
  }
}

function fieldExtent(field: Float64Array): Scale {
  let lo = Infinity;
  let hi = -Infinity;
  for (let i = 0; i < field.length; i++) {
    const v = field[i]!;
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  return { lo, hi };
}

function applyFrame(view: ViewState, frame: ResultFrame): boolean {
  if (view.frame !== null && frame.epoch < view.frame.epoch) {
    view.framesDropped += 1;
    return false;
  }
  view.frame = frame;
  view.residuals.push(frame.residual);
  if (view.scale === null) {
    // Constrained cells travel inside the field and free cells stay between
    // them (maximum principle), so the first frame's extent is the
    // scenario's constrained min/max.  Fixing the scale here keeps level
    // switches from causing color jumps.
    view.scale = fieldExtent(frame.field);
  }
  if (view.indicator === null) {
    view.indicator = { level: frame.levelIndex, reason: "" };
  }
  return true;
}

/**
 * Fold one server message into the view.  Returns true when the view
 * changed and a repaint is due.
 */
export function applyServerMessage(view: ViewState, msg: Message): boolean {
  switch (msg.type) {
    case "frame":
      return applyFrame(view, msg);
    case "level_switch":
      view.indicator = { level: msg.toIndex, reason: msg.reason };
      return true;
    case "stats":
      view.stats = msg;
      return true;
    case "bye":
      view.connection = "closed";
      view.banner = "server said goodbye";
      return true;
    case "ack":
      return false; // handshake acks carry no view content
    default:
      // hello / param / geometry flow client to server only
      return false;
  }
}

/** The epoch currently on screen; -1 before the first frame. */
export function renderedEpoch(view: ViewState): number {
  return view.frame === null ? -1 : view.frame.epoch;
}
