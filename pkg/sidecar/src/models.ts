// Analytic stand-in for a promptable segmentation model.  Foreground is
// split from background by Otsu's threshold, connected components become
// region candidates, and a patch-statistics encoder yields the embedding
// grid.  Everything is a pure function of the input image and prompt text,
// so repeated requests produce identical bytes.

export interface Component {
  pixels: number[];
  area: number;
  box: [number, number, number, number];
  cx: number;
  cy: number;
}

const MIN_COMPONENT_AREA = 4;
export const PATCH = 4;
export const CHANNELS = 12;

export function otsuThreshold(values: Float32Array): number {
  const bins = 256;
  const hist = new Float64Array(bins);
  for (const v of values) {
    let b = Math.floor(v * (bins - 1));
    if (b < 0) b = 0;
    if (b >= bins) b = bins - 1;
    hist[b] += 1;
  }
  const total = values.length;
  let sumAll = 0;
  for (let b = 0; b < bins; b++) sumAll += b * hist[b];

  let best = 0;
  let bestVar = -1;
  let wBack = 0;
  let sumBack = 0;
  for (let t = 0; t < bins; t++) {
    wBack += hist[t];
    if (wBack === 0) continue;
    const wFore = total - wBack;
    if (wFore === 0) break;
    sumBack += t * hist[t];
    const meanBack = sumBack / wBack;
    const meanFore = (sumAll - sumBack) / wFore;
    const between = wBack * wFore * (meanBack - meanFore) ** 2;
    if (between > bestVar) {
      bestVar = between;
      best = t;
    }
  }
  // bin `best` is the last background bin, so foreground starts at the next
  // bin edge; pair this with a >= comparison
  return (best + 1) / (bins - 1);
}

// 4-connected components of plane >= threshold, x fastest.
export function connectedComponents(
  plane: Float32Array,
  nx: number,
  ny: number,
  threshold: number,
): Component[] {
  const seen = new Uint8Array(nx * ny);
  const components: Component[] = [];
  const queue = new Int32Array(nx * ny);

  for (let start = 0; start < nx * ny; start++) {
    if (seen[start] || plane[start] < threshold) continue;
    let head = 0;
    let tail = 0;
    queue[tail++] = start;
    seen[start] = 1;
    const pixels: number[] = [];
    let minX = nx, minY = ny, maxX = -1, maxY = -1;
    let sumX = 0, sumY = 0;
    while (head < tail) {
      const idx = queue[head++];
      pixels.push(idx);
      const x = idx % nx;
      const y = (idx - x) / nx;
      if (x < minX) minX = x;
      if (y < minY) minY = y;
      if (x > maxX) maxX = x;
      if (y > maxY) maxY = y;
      sumX += x;
      sumY += y;
      const neighbors = [
        x > 0 ? idx - 1 : -1,
        x < nx - 1 ? idx + 1 : -1,
        y > 0 ? idx - nx : -1,
        y < ny - 1 ? idx + nx : -1,
      ];
      for (const n of neighbors) {
        if (n >= 0 && !seen[n] && plane[n] >= threshold) {
          seen[n] = 1;
          queue[tail++] = n;
        }
      }
    }
    if (pixels.length >= MIN_COMPONENT_AREA) {
      components.push({
        pixels,
        area: pixels.length,
        box: [minX, minY, maxX + 1, maxY + 1],
        cx: sumX / pixels.length,
        cy: sumY / pixels.length,
      });
    }
  }
  // stable order: top-left corner first, then size
  components.sort((a, b) =>
    a.box[1] - b.box[1] || a.box[0] - b.box[0] || b.area - a.area);
  return components;
}

export function segmentPlane(
  plane: Float32Array,
  nx: number,
  ny: number,
): { threshold: number; components: Component[] } {
  const threshold = otsuThreshold(plane);
  return { threshold, components: connectedComponents(plane, nx, ny, threshold) };
}

export function componentMask(
  component: Component,
  nx: number,
  ny: number,
): Uint8Array {
  const mask = new Uint8Array(nx * ny);
  for (const idx of component.pixels) mask[idx] = 1;
  return mask;
}

function fnv1a(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

function mix(h: number, v: number): number {
  h = (h ^ (v >>> 0)) >>> 0;
  h = Math.imul(h, 0x01000193) >>> 0;
  return (h ^ (h >>> 15)) >>> 0;
}

// Deterministic pseudo-confidence: the prompt text and a quantized shape
// signature decide the score, a real grounding head would do the same job.
export function promptScore(prompt: string, component: Component): number {
  let h = fnv1a(prompt);
  h = mix(h, Math.round(component.cx * 8));
  h = mix(h, Math.round(component.cy * 8));
  h = mix(h, component.area);
  return 0.3 + 0.7 * ((h % 100000) / 100000);
}

// Patch-statistics encoder: each PATCH x PATCH cell becomes CHANNELS
// intensity statistics.  No absolute positions go in, so a structure keeps
// its signature when it moves.
export function encodePlane(
  plane: Float32Array,
  nx: number,
  ny: number,
): { values: Float32Array; gridDims: [number, number] } {
  const gx = Math.ceil(nx / PATCH);
  const gy = Math.ceil(ny / PATCH);
  const threshold = otsuThreshold(plane);
  const values = new Float32Array(gx * gy * CHANNELS);
  const cell = (i: number, j: number, c: number) => i + gx * (j + gy * c);

  for (let j = 0; j < gy; j++) {
    for (let i = 0; i < gx; i++) {
      let count = 0;
      let sum = 0, sumSq = 0, sumCube = 0;
      let minV = Infinity, maxV = -Infinity;
      let gradX = 0, gradY = 0, edges = 0, fore = 0;
      for (let y = j * PATCH; y < Math.min((j + 1) * PATCH, ny); y++) {
        for (let x = i * PATCH; x < Math.min((i + 1) * PATCH, nx); x++) {
          const v = plane[x + nx * y];
          count++;
          sum += v;
          sumSq += v * v;
          if (v < minV) minV = v;
          if (v > maxV) maxV = v;
          if (v >= threshold) fore++;
          const dx = x < nx - 1 ? Math.abs(plane[x + 1 + nx * y] - v) : 0;
          const dy = y < ny - 1 ? Math.abs(plane[x + nx * (y + 1)] - v) : 0;
          gradX += dx;
          gradY += dy;
          if (dx + dy > 0.1) edges++;
          const centered = v - 0.5;
          sumCube += centered * centered * centered;
        }
      }
      const mean = sum / count;
      const variance = Math.max(sumSq / count - mean * mean, 0);
      values[cell(i, j, 0)] = mean;
      values[cell(i, j, 1)] = Math.sqrt(variance);
      values[cell(i, j, 2)] = minV;
      values[cell(i, j, 3)] = maxV;
      values[cell(i, j, 4)] = gradX / count;
      values[cell(i, j, 5)] = gradY / count;
      values[cell(i, j, 6)] = fore / count;
      values[cell(i, j, 7)] = Math.cbrt(sumCube / count);
      values[cell(i, j, 8)] = maxV - minV;
      values[cell(i, j, 9)] = sumSq / count;
      values[cell(i, j, 10)] = edges / count;
      values[cell(i, j, 11)] = 1;
    }
  }
  return { values, gridDims: [gx, gy] };
}
