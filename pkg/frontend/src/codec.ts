/**
 * Binary wire codec for the steering protocol, version 1.
 *
 * Frame layout (all integers little-endian):
 *
 *     magic   4 bytes  "STER"
 *     version u16      1
 *     msg_type u16
 *     payload_len u32
 *     payload  payload_len bytes
 *
 * Strings are u8-length-prefixed UTF-8 (255 bytes max); result fields are
 * raw f64 arrays.  Byte-identical to the server's codec.  The web transport
 * carries exactly one frame per binary WebSocket message, but decode() is
 * carriage-agnostic and FrameDecoder accepts arbitrary chunking.
 */

export const VERSION = 1;
export const HEADER_SIZE = 12;
export const MAX_NAME = 255;

const MAGIC = new Uint8Array([0x53, 0x54, 0x45, 0x52]); // "STER"

export const VarKind = {
  INT: 0,
  FLOAT: 1,
  BOOL: 2,
  POINT2D: 3,
  BLOB: 4,
} as const;
export type VarKind = (typeof VarKind)[keyof typeof VarKind];

export type ParamValue = number | boolean | [number, number] | Uint8Array;

export const CLIENT_KINDS = ["ui", "headless"] as const;
export const GEOMETRY_OPS = ["add", "move", "delete"] as const;
export const GEOMETRY_ENTITIES = ["heat_source", "boundary_point"] as const;

export type ClientKind = (typeof CLIENT_KINDS)[number];
export type GeometryOp = (typeof GEOMETRY_OPS)[number];
export type GeometryEntity = (typeof GEOMETRY_ENTITIES)[number];

export interface Hello {
  type: "hello";
  protocolVersion: number;
  clientKind: ClientKind;
}

export interface ParamUpdate {
  type: "param";
  name: string;
  kind: VarKind;
  value: ParamValue;
}

export interface GeometryUpdate {
  type: "geometry";
  op: GeometryOp;
  entity: GeometryEntity;
  entityId: number;
  x: number;
  y: number;
  temperature: number | null;
}

export interface ResultFrame {
  type: "frame";
  epoch: number;
  levelIndex: number;
  iteration: number;
  residual: number;
  width: number;
  height: number;
  field: Float64Array;
}

export interface LevelSwitch {
  type: "level_switch";
  fromIndex: number;
  toIndex: number;
  reason: string;
}

export interface Stats {
  type: "stats";
  epoch: number;
  overheadPct: number;
  restartLatencyUs: number;
  updatesCoalesced: number;
}

export interface Ack {
  type: "ack";
  refMsg: number;
}

export interface Bye {
  type: "bye";
}

export type Message =
  | Hello
  | ParamUpdate
  | GeometryUpdate
  | ResultFrame
  | LevelSwitch
  | Stats
  | Ack
  | Bye;

export const MSG_CODES: Record<Message["type"], number> = {
  hello: 1,
  param: 2,
  geometry: 3,
  frame: 4,
  level_switch: 5,
  stats: 6,
  ack: 7,
  bye: 8,
};

const CODE_TYPES: Record<number, Message["type"]> = {};
for (const [name, code] of Object.entries(MSG_CODES)) {
  CODE_TYPES[code] = name as Message["type"];
}

export class ProtocolError extends Error {}

/** Payload-level corruption; caught by decode() and reported as Corrupt. */
class Truncated extends Error {}

export type DecodeResult =
  | { ok: "msg"; msg: Message; consumed: number }
  | { ok: "need_more" }
  | { ok: "corrupt"; reason: string };

// Field data is memcpy'd between bytes and Float64Array, which assumes a
// little-endian host; every supported browser and node target is.  The
// check keeps a big-endian host from silently scrambling frames.
const HOST_LE = new Uint8Array(Float64Array.of(1).buffer)[7] === 0x3f;
if (!HOST_LE) {
  throw new ProtocolError("big-endian hosts are not supported");
}

const utf8Encode = new TextEncoder();
const utf8Decode = new TextDecoder("utf-8", { fatal: true });

// -- payload packing -------------------------------------------------------

class Writer {
  private buf: Uint8Array<ArrayBuffer> = new Uint8Array(256);
  private view = new DataView(this.buf.buffer);
  private pos = 0;

  private grow(extra: number): void {
    if (this.pos + extra <= this.buf.length) return;
    const next = new Uint8Array(Math.max(this.buf.length * 2, this.pos + extra));
    next.set(this.buf.subarray(0, this.pos));
    this.buf = next;
    this.view = new DataView(next.buffer);
  }

  u8(v: number): void {
    this.grow(1);
    this.view.setUint8(this.pos, v);
    this.pos += 1;
  }

  u16(v: number): void {
    this.grow(2);
    this.view.setUint16(this.pos, v, true);
    this.pos += 2;
  }

  u32(v: number): void {
    this.grow(4);
    this.view.setUint32(this.pos, v, true);
    this.pos += 4;
  }

  u64(v: number): void {
    this.grow(8);
    this.view.setBigUint64(this.pos, BigInt(v), true);
    this.pos += 8;
  }

  i64(v: number): void {
    this.grow(8);
    this.view.setBigInt64(this.pos, BigInt(v), true);
    this.pos += 8;
  }

  f64(v: number): void {
    this.grow(8);
    this.view.setFloat64(this.pos, v, true);
    this.pos += 8;
  }

  bytes(raw: Uint8Array): void {
    this.grow(raw.length);
    this.buf.set(raw, this.pos);
    this.pos += raw.length;
  }

  str8(s: string): void {
    const raw = utf8Encode.encode(s);
    if (raw.length > MAX_NAME) {
      throw new ProtocolError(`string exceeds ${MAX_NAME} bytes`);
    }
    this.u8(raw.length);
    this.bytes(raw);
  }

  take(): Uint8Array<ArrayBuffer> {
    return this.buf.subarray(0, this.pos);
  }
}

class Reader {
  private pos: number;

  constructor(
    private data: Uint8Array,
    private view: DataView,
    start: number,
    private end: number,
  ) {
    this.pos = start;
  }

  private advance(n: number): number {
    if (this.pos + n > this.end) throw new Truncated("payload overrun");
    const at = this.pos;
    this.pos += n;
    return at;
  }

  u8(): number {
    return this.view.getUint8(this.advance(1));
  }

  u16(): number {
    return this.view.getUint16(this.advance(2), true);
  }

  u32(): number {
    return this.view.getUint32(this.advance(4), true);
  }

  u64(): number {
    return Number(this.view.getBigUint64(this.advance(8), true));
  }

  i64(): number {
    return Number(this.view.getBigInt64(this.advance(8), true));
  }

  f64(): number {
    return this.view.getFloat64(this.advance(8), true);
  }

  bytes(n: number): Uint8Array {
    const at = this.advance(n);
    return this.data.slice(at, at + n);
  }

  str8(): string {
    const n = this.u8();
    try {
      return utf8Decode.decode(this.bytes(n));
    } catch {
      throw new Truncated("bad utf-8");
    }
  }

  done(): void {
    if (this.pos !== this.end) throw new Truncated("trailing bytes in payload");
  }
}

function checkInt(v: number, what: string): number {
  if (!Number.isSafeInteger(v)) {
    throw new ProtocolError(`${what} is not an integer: ${v}`);
  }
  return v;
}

function encodeValue(w: Writer, kind: VarKind, value: ParamValue): void {
  switch (kind) {
    case VarKind.INT:
      w.i64(checkInt(value as number, "int value"));
      return;
    case VarKind.FLOAT:
      w.f64(value as number);
      return;
    case VarKind.BOOL:
      w.u8(value ? 1 : 0);
      return;
    case VarKind.POINT2D: {
      const [x, y] = value as [number, number];
      w.f64(x);
      w.f64(y);
      return;
    }
    case VarKind.BLOB: {
      const raw = value as Uint8Array;
      if (raw.length > 0xffffffff) throw new ProtocolError("blob too large");
      w.u32(raw.length);
      w.bytes(raw);
      return;
    }
    default:
      throw new ProtocolError(`unknown kind code ${kind}`);
  }
}

function decodeValue(r: Reader, kind: VarKind): ParamValue {
  switch (kind) {
    case VarKind.INT:
      return r.i64();
    case VarKind.FLOAT:
      return r.f64();
    case VarKind.BOOL:
      return r.u8() !== 0;
    case VarKind.POINT2D:
      return [r.f64(), r.f64()];
    case VarKind.BLOB:
      return r.bytes(r.u32());
    default:
      throw new Truncated(`unknown kind code ${kind}`);
  }
}

function encodePayload(w: Writer, msg: Message): void {
  switch (msg.type) {
    case "hello": {
      const kind = CLIENT_KINDS.indexOf(msg.clientKind);
      if (kind < 0) throw new ProtocolError(`unknown client kind ${msg.clientKind}`);
      w.u16(msg.protocolVersion);
      w.u8(kind);
      return;
    }
    case "param": {
      w.str8(msg.name);
      w.u8(msg.kind);
      encodeValue(w, msg.kind, msg.value);
      return;
    }
    case "geometry": {
      const op = GEOMETRY_OPS.indexOf(msg.op);
      const entity = GEOMETRY_ENTITIES.indexOf(msg.entity);
      if (op < 0) throw new ProtocolError(`unknown geometry op ${msg.op}`);
      if (entity < 0) throw new ProtocolError(`unknown entity class ${msg.entity}`);
      w.u8(op);
      w.u8(entity);
      w.u32(checkInt(msg.entityId, "entity id"));
      w.f64(msg.x);
      w.f64(msg.y);
      w.u8(msg.temperature === null ? 0 : 1);
      if (msg.temperature !== null) w.f64(msg.temperature);
      return;
    }
    case "frame": {
      if (msg.field.length !== msg.width * msg.height) {
        throw new ProtocolError(
          `field has ${msg.field.length} entries for a ` +
            `${msg.width}x${msg.height} frame`,
        );
      }
      w.u64(msg.epoch);
      w.u16(msg.levelIndex);
      w.u64(msg.iteration);
      w.f64(msg.residual);
      w.u32(msg.width);
      w.u32(msg.height);
      w.bytes(new Uint8Array(msg.field.buffer, msg.field.byteOffset, msg.field.byteLength));
      return;
    }
    case "level_switch":
      w.u16(msg.fromIndex);
      w.u16(msg.toIndex);
      w.str8(msg.reason);
      return;
    case "stats":
      w.u64(msg.epoch);
      w.f64(msg.overheadPct);
      w.u64(msg.restartLatencyUs);
      w.u32(msg.updatesCoalesced);
      return;
    case "ack":
      w.u32(checkInt(msg.refMsg, "ack ref"));
      return;
    case "bye":
      return;
  }
}

function decodePayload(code: number, r: Reader): Message {
  const type = CODE_TYPES[code];
  if (type === undefined) throw new Truncated(`unknown message type ${code}`);
  let msg: Message;
  switch (type) {
    case "hello": {
      const version = r.u16();
      const kindCode = r.u8();
      const clientKind = CLIENT_KINDS[kindCode];
      if (clientKind === undefined) {
        throw new Truncated(`unknown client kind code ${kindCode}`);
      }
      msg = { type, protocolVersion: version, clientKind };
      break;
    }
    case "param": {
      const name = r.str8();
      const kindCode = r.u8();
      if (!Object.values(VarKind).includes(kindCode as VarKind)) {
        throw new Truncated(`unknown kind code ${kindCode}`);
      }
      const kind = kindCode as VarKind;
      msg = { type, name, kind, value: decodeValue(r, kind) };
      break;
    }
    case "geometry": {
      const op = GEOMETRY_OPS[r.u8()];
      const entity = GEOMETRY_ENTITIES[r.u8()];
      if (op === undefined || entity === undefined) {
        throw new Truncated("bad geometry codes");
      }
      const entityId = r.u32();
      const x = r.f64();
      const y = r.f64();
      const temperature = r.u8() ? r.f64() : null;
      msg = { type, op, entity, entityId, x, y, temperature };
      break;
    }
    case "frame": {
      const epoch = r.u64();
      const levelIndex = r.u16();
      const iteration = r.u64();
      const residual = r.f64();
      const width = r.u32();
      const height = r.u32();
      const raw = r.bytes(width * height * 8);
      const field = new Float64Array(width * height);
      new Uint8Array(field.buffer).set(raw);
      msg = { type, epoch, levelIndex, iteration, residual, width, height, field };
      break;
    }
    case "level_switch":
      msg = { type, fromIndex: r.u16(), toIndex: r.u16(), reason: r.str8() };
      break;
    case "stats":
      msg = {
        type,
        epoch: r.u64(),
        overheadPct: r.f64(),
        restartLatencyUs: r.u64(),
        updatesCoalesced: r.u32(),
      };
      break;
    case "ack":
      msg = { type, refMsg: r.u32() };
      break;
    case "bye":
      msg = { type };
      break;
  }
  r.done();
  return msg;
}

// -- framing ---------------------------------------------------------------

/** Serialize one message to a complete frame. */
export function encode(msg: Message): Uint8Array<ArrayBuffer> {
  const w = new Writer();
  w.bytes(MAGIC);
  w.u16(VERSION);
  w.u16(MSG_CODES[msg.type]);
  w.u32(0); // patched below
  try {
    encodePayload(w, msg);
  } catch (e) {
    if (e instanceof TypeError || e instanceof RangeError) {
      throw new ProtocolError(`field out of range: ${e.message}`);
    }
    throw e;
  }
  const out = w.take();
  const payloadLen = out.length - HEADER_SIZE;
  if (payloadLen > 0xffffffff) throw new ProtocolError("payload exceeds the u32 length field");
  new DataView(out.buffer, out.byteOffset).setUint32(8, payloadLen, true);
  return out;
}

/**
 * Try to decode one frame from the head of `data`.
 *
 * Returns need_more when the buffer is incomplete, corrupt when the stream
 * can only be torn down.  Never throws on malformed input.
 */
export function decode(data: Uint8Array): DecodeResult {
  if (data.length < HEADER_SIZE) return { ok: "need_more" };
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  for (let i = 0; i < 4; i++) {
    if (data[i] !== MAGIC[i]) return { ok: "corrupt", reason: "bad magic" };
  }
  const version = view.getUint16(4, true);
  if (version !== VERSION) {
    return { ok: "corrupt", reason: `unsupported version ${version}` };
  }
  const code = view.getUint16(6, true);
  const payloadLen = view.getUint32(8, true);
  const total = HEADER_SIZE + payloadLen;
  if (data.length < total) return { ok: "need_more" };
  const r = new Reader(data, view, HEADER_SIZE, total);
  try {
    return { ok: "msg", msg: decodePayload(code, r), consumed: total };
  } catch (e) {
    if (e instanceof Truncated) {
      return { ok: "corrupt", reason: e.message || "malformed payload" };
    }
    throw e;
  }
}

/**
 * Incremental frame splitter for a byte stream.
 *
 * Feed arbitrary chunks; complete messages come out in order.  Corruption
 * raises ProtocolError: framing has no resynchronization point, so the
 * session has to be torn down.
 */
export class FrameDecoder {
  private buf = new Uint8Array(0);

  feed(chunk: Uint8Array): Message[] {
    if (this.buf.length === 0) {
      this.buf = chunk.slice();
    } else {
      const next = new Uint8Array(this.buf.length + chunk.length);
      next.set(this.buf);
      next.set(chunk, this.buf.length);
      this.buf = next;
    }
    const out: Message[] = [];
    for (;;) {
      const result = decode(this.buf);
      if (result.ok === "need_more") return out;
      if (result.ok === "corrupt") throw new ProtocolError(result.reason);
      this.buf = this.buf.subarray(result.consumed);
      out.push(result.msg);
    }
  }

  get pending(): number {
    return this.buf.length;
  }
}
