/**
 * Animation-frame plumbing with the scheduler injected, so tests can run
 * the console on a hand-cranked frame clock instead of requestAnimationFrame.
 */

export type Schedule = (callback: () => void) => void;

/** Paints at most once per animation frame, and only when marked dirty. */
export class RenderLoop {
  private dirty = false;

  constructor(
    private schedule: Schedule,
    private draw: () => void,
  ) {}

  invalidate(): void {
    if (this.dirty) return;
    this.dirty = true;
    this.schedule(() => {
      this.dirty = false;
      this.draw();
    });
  }
}
