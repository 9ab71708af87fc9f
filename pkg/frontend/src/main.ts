/**
 * Browser entry point: one WebSocket to /steer, one canvas, one panel.
 *
 * All state lives in the ClientSession's ViewState; DOM handlers translate
 * pointer and input events into protocol messages, the render callback
 * paints the view, and nothing here talks to the server except through the
 * binary protocol.
 */

import type { GeometryEntity } from "./codec.js";
import { VarKind } from "./codec.js";
import { Heatmap } from "./heatmap.js";
import { ClientSession } from "./session.js";
import type { ViewState } from "./state.js";

function $(id: string): HTMLElement {
  return document.getElementById(id)!;
}

const $canvas = $("field") as HTMLCanvasElement;
const $residuals = $("residuals") as HTMLCanvasElement;
const $banner = $("banner");
const $connection = $("connection");
const $epoch = $("epoch");
const $level = $("level");
const $iteration = $("iteration");
const $residual = $("residual");
const $stats = $("stats");
const $outbound = $("outbound");
const $maxIter = $("max-iter") as HTMLInputElement;
const $tolerance = $("tolerance") as HTMLInputElement;
const $temperature = $("temperature") as HTMLInputElement;

const heatmap = new Heatmap($canvas);

// ------------------------------------------------------------ session

let socket: WebSocket | null = null;

const session = new ClientSession({
  send: (bytes) => {
    if (socket !== null && socket.readyState === WebSocket.OPEN) {
      socket.send(bytes);
    }
  },
  schedule: (cb) => requestAnimationFrame(cb),
  render: draw,
  teardown: () => socket?.close(),
});

function connect(): void {
  const scheme = location.protocol === "https:" ? "wss" : "ws";
  socket = new WebSocket(`${scheme}://${location.host}/steer`);
  socket.binaryType = "arraybuffer";
  socket.onopen = () => session.transportOpen();
  socket.onmessage = (event) => session.feed(new Uint8Array(event.data as ArrayBuffer));
  socket.onclose = () => {
    session.transportClosed();
    if (session.view.connection !== "error") {
      setTimeout(connect, 2000); // corruption stays down; plain drops retry
    }
  };
}

connect();

// ------------------------------------------------------------ tools

type Tool = "drag" | "add-source" | "add-boundary" | "delete";

let tool: Tool = "drag";
let nextEntityId = 1000; // clear of scene-file ids, same convention as scripts

for (const button of document.querySelectorAll<HTMLButtonElement>("[data-tool]")) {
  button.addEventListener("click", () => {
    tool = button.dataset.tool as Tool;
    for (const other of document.querySelectorAll<HTMLButtonElement>("[data-tool]")) {
      other.classList.toggle("active", other === button);
    }
  });
}

function canvasPoint(event: PointerEvent): [number, number] {
  const rect = $canvas.getBoundingClientRect();
  const px = ((event.clientX - rect.left) * $canvas.width) / rect.width;
  const py = ((event.clientY - rect.top) * $canvas.height) / rect.height;
  return [px, py];
}

function addEntity(entity: GeometryEntity, x: number, y: number): void {
  const temperature = Number($temperature.value);
  if (!Number.isFinite(temperature)) return;
  const id = nextEntityId++;
  session.view.overlays.set(id, { entity, id, x, y, temperature });
  session.outbox.post({
    type: "geometry",
    op: "add",
    entity,
    entityId: id,
    x,
    y,
    temperature,
  });
  session.repaint();
}

$canvas.addEventListener("pointerdown", (event) => {
  const [px, py] = canvasPoint(event);
  const [x, y] = heatmap.toUnit(px, py);
  const view = session.view;
  if (tool === "add-source") {
    addEntity("heat_source", x, y);
    return;
  }
  if (tool === "add-boundary") {
    addEntity("boundary_point", x, y);
    return;
  }
  const overlay = heatmap.hit(view, px, py);
  if (overlay === null) return;
  if (tool === "delete") {
    view.overlays.delete(overlay.id);
    session.outbox.post({
      type: "geometry",
      op: "delete",
      entity: overlay.entity,
      entityId: overlay.id,
      x: 0,
      y: 0,
      temperature: null,
    });
    session.repaint();
    return;
  }
  view.drag = { id: overlay.id, x, y };
  $canvas.setPointerCapture(event.pointerId);
  session.repaint();
});

$canvas.addEventListener("pointermove", (event) => {
  const view = session.view;
  if (view.drag === null) return;
  const overlay = view.overlays.get(view.drag.id);
  if (overlay === undefined) return;
  const [px, py] = canvasPoint(event);
  const [x, y] = heatmap.toUnit(px, py);
  overlay.x = x; // the overlay is the client's intent; frames confirm it
  overlay.y = y;
  view.drag = { id: overlay.id, x, y };
  session.outbox.move({
    type: "geometry",
    op: "move",
    entity: overlay.entity,
    entityId: overlay.id,
    x,
    y,
    temperature: null,
  });
  session.repaint();
});

$canvas.addEventListener("pointerup", () => {
  if (session.view.drag === null) return;
  session.outbox.flushMove(); // the final position must not be coalesced away
  session.view.drag = null;
  session.repaint();
});

// ------------------------------------------------------------ panel

$maxIter.addEventListener("change", () => {
  const value = Math.floor(Number($maxIter.value));
  if (!Number.isFinite(value) || value < 1) return;
  session.outbox.post({ type: "param", name: "max_iter", kind: VarKind.INT, value });
});

$tolerance.addEventListener("change", () => {
  const value = Number($tolerance.value);
  if (!Number.isFinite(value) || value <= 0) return;
  session.outbox.post({ type: "param", name: "tolerance", kind: VarKind.FLOAT, value });
});

// ------------------------------------------------------------ painting

function drawResiduals(view: ViewState): void {
  const ctx = $residuals.getContext("2d")!;
  const { width, height } = $residuals;
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, width, height);
  const values = view.residuals.values().filter((v) => v > 0);
  if (values.length < 2) return;
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    const logged = Math.log10(v);
    if (logged < lo) lo = logged;
    if (logged > hi) hi = logged;
  }
  if (hi - lo < 1e-12) hi = lo + 1;
  ctx.strokeStyle = "#61c3a2";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (let i = 0; i < values.length; i++) {
    const x = (i / (values.length - 1)) * (width - 4) + 2;
    const y = height - 3 - ((Math.log10(values[i]!) - lo) / (hi - lo)) * (height - 6);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  }
  ctx.stroke();
}

function draw(view: ViewState): void {
  heatmap.draw(view);
  drawResiduals(view);
  $connection.textContent = view.connection;
  $connection.dataset.state = view.connection;
  $banner.textContent = view.banner ?? "";
  $banner.style.display = view.banner === null ? "none" : "block";
  const frame = view.frame;
  $epoch.textContent = frame === null ? "-" : String(frame.epoch);
  $iteration.textContent = frame === null ? "-" : String(frame.iteration);
  $residual.textContent = frame === null ? "-" : frame.residual.toExponential(2);
  if (view.indicator === null) {
    $level.textContent = "-";
  } else {
    const size = frame === null ? "" : ` ${frame.width}x${frame.height}`;
    const reason = view.indicator.reason === "" ? "" : ` (${view.indicator.reason})`;
    $level.textContent = `L${view.indicator.level}${size}${reason}`;
  }
  if (view.stats === null) {
    $stats.textContent = "-";
  } else {
    $stats.textContent =
      `epoch ${view.stats.epoch}: overhead ${view.stats.overheadPct.toFixed(1)}%, ` +
      `restart ${view.stats.restartLatencyUs} us, ` +
      `${view.stats.updatesCoalesced} update(s) coalesced`;
  }
  $outbound.textContent = view.outboundLog.slice(-12).join("\n");
}

session.repaint();
