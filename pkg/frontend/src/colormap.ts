/**
 * Fixed cold-to-hot color ramp.  The scale endpoints come from the first
 * frame (the scenario's constrained extremes); values outside clamp, so a
 * later hotter source saturates instead of rescaling the whole picture.
 */

const STOPS: Array<[number, number, number, number]> = [
  [0.0, 18, 26, 66],
  [0.25, 28, 91, 158],
  [0.5, 64, 164, 158],
  [0.75, 233, 179, 68],
  [1.0, 208, 42, 29],
];

/** Map t in [0, 1] (clamped) to [r, g, b]. */
export function rampColor(t: number): [number, number, number] {
  const x = t <= 0 ? 0 : t >= 1 ? 1 : t;
  for (let i = 1; i < STOPS.length; i++) {
    const [t1, r1, g1, b1] = STOPS[i]!;
    if (x > t1) continue;
    const [t0, r0, g0, b0] = STOPS[i - 1]!;
    const f = (x - t0) / (t1 - t0);
    return [
      Math.round(r0 + f * (r1 - r0)),
      Math.round(g0 + f * (g1 - g0)),
      Math.round(b0 + f * (b1 - b0)),
    ];
  }
  const [, r, g, b] = STOPS[STOPS.length - 1]!;
  return [r, g, b];
}

/** Normalize a field value against the fixed scale; constant scale maps to 0.5. */
export function normalize(value: number, lo: number, hi: number): number {
  if (hi <= lo) return 0.5;
  return (value - lo) / (hi - lo);
}
