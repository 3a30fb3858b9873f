import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { afterAll, describe, expect, it } from 'vitest';

import { ErrorSchema, ResponseSchema } from '../src/protocol.js';
import { serveMain } from '../src/serve.js';
import { readEmbedding, readMask, writeVolume } from '../src/volio.js';

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'serve-'));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

// Volume with two bright blobs per slice, otherwise dark.
function blobVolume(nx: number, ny: number, nz: number): Float32Array {
  const data = new Float32Array(nx * ny * nz).fill(0.05);
  const put = (x0: number, y0: number, x1: number, y1: number, z: number) => {
    for (let y = y0; y < y1; y++) {
      for (let x = x0; x < x1; x++) data[x + nx * (y + ny * z)] = 0.9;
    }
  };
  for (let z = 0; z < nz; z++) {
    put(4, 5, 10, 11, z);
    put(18, 16, 25, 22, z);
  }
  return data;
}

function runRequest(
  name: string,
  dims: number[],
  body: Record<string, unknown>,
): { code: number; outDir: string } {
  const dir = path.join(tmp, name);
  fs.mkdirSync(dir, { recursive: true });
  const image = writeVolume(
    {
      kind: 'volume',
      dims,
      spacingMm: dims.map(() => 1),
      data: blobVolume(dims[0], dims[1], dims.length === 3 ? dims[2] : 1),
    },
    path.join(dir, 'image'),
  );
  const outDir = path.join(dir, 'out');
  const requestPath = path.join(dir, 'request.json');
  fs.writeFileSync(requestPath, JSON.stringify({
    image,
    prompts: ['hole', 'dog'],
    slice_range: null,
    output_dir: outDir,
    ...body,
  }));
  return { code: serveMain(requestPath), outDir };
}

function readResponse(outDir: string) {
  return ResponseSchema.parse(
    JSON.parse(fs.readFileSync(path.join(outDir, 'response.json'), 'utf8')));
}

describe('serveMain on a 3D volume', () => {
  const { code, outDir } = runRequest('vol3d', [32, 32, 3], {});
  const response = readResponse(outDir);

  it('exits 0 with a schema-valid response', () => {
    expect(code).toBe(0);
    // two blobs x two prompts x three slices
    expect(response.rois.length).toBe(12);
    expect(response.embeddings.length).toBe(3);
  });

  it('keeps every mask inside its box and on the plane grid', () => {
    for (const roi of response.rois) {
      expect(typeof roi.slice).toBe('number');
      const mask = readMask(path.join(outDir, roi.mask));
      expect(mask.dims).toEqual([32, 32]);
      const [x0, y0, x1, y1] = roi.box;
      expect(x0).toBeLessThan(x1);
      expect(y0).toBeLessThan(y1);
      let set = 0;
      for (let y = 0; y < 32; y++) {
        for (let x = 0; x < 32; x++) {
          if (mask.data[x + 32 * y]) {
            set++;
            expect(x >= x0 && x < x1 && y >= y0 && y < y1).toBe(true);
          }
        }
      }
      expect(set).toBeGreaterThan(0);
      expect(roi.score).toBeGreaterThanOrEqual(0);
      expect(roi.score).toBeLessThanOrEqual(1);
    }
  });

  it('writes one embedding per slice with uniform channels', () => {
    const channels = new Set<number>();
    const slices: number[] = [];
    for (const entry of response.embeddings) {
      const emb = readEmbedding(path.join(outDir, entry.file));
      channels.add(emb.channels);
      expect(emb.dims).toEqual([8, 8]);
      slices.push(entry.slice as number);
    }
    expect(channels.size).toBe(1);
    expect(slices).toEqual([0, 1, 2]);
  });
});

describe('serveMain variants', () => {
  it('marks 2D responses with null slices', () => {
    const { code, outDir } = runRequest('vol2d', [32, 32], {});
    expect(code).toBe(0);
    const response = readResponse(outDir);
    expect(response.rois.length).toBe(4);
    for (const roi of response.rois) expect(roi.slice).toBeNull();
    expect(response.embeddings).toEqual([
      { slice: null, file: 'e_0000.t2r.json' },
    ]);
  });

  it('honors a half-open slice range', () => {
    const { code, outDir } = runRequest('ranged', [32, 32, 4], {
      slice_range: [1, 3],
    });
    expect(code).toBe(0);
    const response = readResponse(outDir);
    expect([...new Set(response.rois.map((r) => r.slice))]).toEqual([1, 2]);
    expect(response.embeddings.map((e) => e.slice)).toEqual([1, 2]);
  });

  it('rejects an out-of-bounds slice range', () => {
    const { code, outDir } = runRequest('badrange', [32, 32, 3], {
      slice_range: [0, 9],
    });
    expect(code).toBe(1);
    const report = ErrorSchema.parse(
      JSON.parse(fs.readFileSync(path.join(outDir, 'error.json'), 'utf8')));
    expect(report.stage).toBe('inference');
    expect(report.message).toMatch(/slice range/);
  });

  it('produces byte-identical responses for repeated requests', () => {
    const a = runRequest('rep_a', [32, 32, 2], {});
    const b = runRequest('rep_b', [32, 32, 2], {});
    expect(a.code).toBe(0);
    expect(b.code).toBe(0);
    const bytes = (dir: string, file: string) =>
      fs.readFileSync(path.join(dir, file));
    expect(bytes(a.outDir, 'response.json')).toEqual(bytes(b.outDir, 'response.json'));
    for (const file of fs.readdirSync(a.outDir).sort()) {
      expect(bytes(a.outDir, file)).toEqual(bytes(b.outDir, file));
    }
  });

  it('reports a missing image as an inference failure', () => {
    const dir = path.join(tmp, 'noimg');
    const outDir = path.join(dir, 'out');
    fs.mkdirSync(dir, { recursive: true });
    const requestPath = path.join(dir, 'request.json');
    fs.writeFileSync(requestPath, JSON.stringify({
      image: path.join(dir, 'missing.t2r.json'),
      prompts: ['hole'],
      slice_range: null,
      output_dir: outDir,
    }));
    expect(serveMain(requestPath)).toBe(1);
    const report = ErrorSchema.parse(
      JSON.parse(fs.readFileSync(path.join(outDir, 'error.json'), 'utf8')));
    expect(report.stage).toBe('inference');
  });

  it('fails rejected requests before any output exists', () => {
    const requestPath = path.join(tmp, 'badreq.json');
    fs.writeFileSync(requestPath, JSON.stringify({ prompts: [] }));
    expect(serveMain(requestPath)).toBe(1);
  });
});
