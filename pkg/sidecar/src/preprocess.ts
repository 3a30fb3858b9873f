// Intensity windowing: clip to the 1..99 percentile band and rescale to
// [0, 1].  Scanner intensities vary wildly between protocols; the band keeps
// a handful of hot voxels from flattening everything else.

export function percentile(sorted: Float32Array, q: number): number {
  if (sorted.length === 0) throw new Error('empty data');
  const pos = (q / 100) * (sorted.length - 1);
  const lo = Math.floor(pos);
  const hi = Math.ceil(pos);
  const frac = pos - lo;
  return sorted[lo] * (1 - frac) + sorted[hi] * frac;
}

export function windowIntensities(
  data: Float32Array,
  lowQ = 1,
  highQ = 99,
): Float32Array {
  const sorted = Float32Array.from(data).sort();
  const lo = percentile(sorted, lowQ);
  const hi = percentile(sorted, highQ);
  const span = hi - lo;
  const out = new Float32Array(data.length);
  if (span <= 0) return out;
  for (let i = 0; i < data.length; i++) {
    const v = (data[i] - lo) / span;
    out[i] = v < 0 ? 0 : v > 1 ? 1 : v;
  }
  return out;
}
