/**
 * Canvas heatmap: the frame's field painted cell-per-pixel into an
 * offscreen buffer, then scaled up without smoothing so cells stay crisp.
 * Entity overlays live in unit-square coordinates and are drawn over
 * whatever resolution the current frame has, so a level switch rescales
 * the picture but never moves a marker.
 */

import { normalize, rampColor } from "./colormap.js";
import type { Overlay, ViewState } from "./state.js";

// The server rounds half to even; Math.round rounds half up, which would
// disagree on exact cell midpoints.
function roundHalfEven(v: number): number {
  const floor = Math.floor(v);
  const diff = v - floor;
  if (diff < 0.5) return floor;
  if (diff > 0.5) return floor + 1;
  return floor % 2 === 0 ? floor : floor + 1;
}

/** Unit coordinate to the cell it pins, matching the server's rasterizer. */
export function nearestCell(
  x: number,
  y: number,
  width: number,
  height: number,
): [number, number] {
  const i = roundHalfEven(y * (height - 1));
  const j = roundHalfEven(x * (width - 1));
  return [Math.min(Math.max(i, 0), height - 1), Math.min(Math.max(j, 0), width - 1)];
}

export class Heatmap {
  private ctx: CanvasRenderingContext2D;
  private cells: HTMLCanvasElement;
  private cellsCtx: CanvasRenderingContext2D;
  private image: ImageData | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    this.ctx = canvas.getContext("2d")!;
    this.cells = document.createElement("canvas");
    this.cellsCtx = this.cells.getContext("2d")!;
  }

  /** Canvas pixel position of a unit-square point, snapped to its cell. */
  toCanvas(view: ViewState, x: number, y: number): [number, number] {
    const frame = view.frame;
    if (frame === null) {
      return [x * this.canvas.width, y * this.canvas.height];
    }
    const [i, j] = nearestCell(x, y, frame.width, frame.height);
    return [
      ((j + 0.5) * this.canvas.width) / frame.width,
      ((i + 0.5) * this.canvas.height) / frame.height,
    ];
  }

  /** Canvas pixel position back to unit coordinates. */
  toUnit(px: number, py: number): [number, number] {
    const x = px / this.canvas.width;
    const y = py / this.canvas.height;
    return [Math.min(Math.max(x, 0), 1), Math.min(Math.max(y, 0), 1)];
  }

  draw(view: ViewState): void {
    const { ctx, canvas } = this;
    ctx.fillStyle = "#10141c";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    const frame = view.frame;
    if (frame === null || view.scale === null) {
      ctx.fillStyle = "#8b93a7";
      ctx.font = "14px system-ui, sans-serif";
      ctx.textAlign = "center";
      ctx.fillText("waiting for the first frame", canvas.width / 2, canvas.height / 2);
      return;
    }
    if (this.cells.width !== frame.width || this.cells.height !== frame.height) {
      this.cells.width = frame.width;
      this.cells.height = frame.height;
      this.image = null;
    }
    if (this.image === null) {
      this.image = this.cellsCtx.createImageData(frame.width, frame.height);
    }
    const pixels = this.image.data;
    const { lo, hi } = view.scale;
    for (let i = 0; i < frame.field.length; i++) {
      const [r, g, b] = rampColor(normalize(frame.field[i]!, lo, hi));
      pixels[i * 4] = r;
      pixels[i * 4 + 1] = g;
      pixels[i * 4 + 2] = b;
      pixels[i * 4 + 3] = 255;
    }
    this.cellsCtx.putImageData(this.image, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(this.cells, 0, 0, canvas.width, canvas.height);
    for (const overlay of view.overlays.values()) {
      this.drawOverlay(view, overlay, view.drag?.id === overlay.id);
    }
  }

  private drawOverlay(view: ViewState, overlay: Overlay, dragging: boolean): void {
    const { ctx } = this;
    const [px, py] = this.toCanvas(view, overlay.x, overlay.y);
    ctx.lineWidth = dragging ? 3 : 2;
    ctx.strokeStyle = dragging ? "#ffffff" : "#dde3f0";
    ctx.fillStyle = "rgba(16, 20, 28, 0.55)";
    if (overlay.entity === "heat_source") {
      ctx.beginPath();
      ctx.arc(px, py, 9, 0, Math.PI * 2);
      ctx.fill();
      ctx.stroke();
    } else {
      ctx.beginPath();
      ctx.rect(px - 7, py - 7, 14, 14);
      ctx.fill();
      ctx.stroke();
    }
    ctx.fillStyle = "#f2f5fb";
    ctx.font = "11px system-ui, sans-serif";
    ctx.textAlign = "center";
    ctx.fillText(`#${overlay.id} ${overlay.temperature}`, px, py - 13);
  }

  /** The overlay under a canvas point, if any is within grab range. */
  hit(view: ViewState, px: number, py: number): Overlay | null {
    let best: Overlay | null = null;
    let bestDist = 14; // pixels
    for (const overlay of view.overlays.values()) {
      const [ox, oy] = this.toCanvas(view, overlay.x, overlay.y);
      const dist = Math.hypot(ox - px, oy - py);
      if (dist <= bestDist) {
        best = overlay;
        bestDist = dist;
      }
    }
    return best;
  }
}
