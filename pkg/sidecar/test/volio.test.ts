import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { afterAll, describe, expect, it } from 'vitest';

import {
  canonicalJson,
  headerPath,
  readEmbedding,
  readMask,
  readVolume,
  slicePlane,
  writeEmbedding,
  writeMask,
  writeVolume,
  Volume,
} from '../src/volio.js';

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'volio-'));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

function ramp(n: number): Float32Array {
  return Float32Array.from({ length: n }, (_, i) => i * 0.25 - 3);
}

describe('container round trips', () => {
  it('volume 3D', () => {
    const vol: Volume = {
      kind: 'volume',
      dims: [4, 3, 2],
      spacingMm: [1, 1.5, 2],
      data: ramp(24),
    };
    const header = writeVolume(vol, path.join(tmp, 'v3'));
    const back = readVolume(header);
    expect(back.dims).toEqual([4, 3, 2]);
    expect(back.spacingMm).toEqual([1, 1.5, 2]);
    expect(Array.from(back.data)).toEqual(Array.from(vol.data));
  });

  it('volume 2D via bare path (suffix added)', () => {
    const vol: Volume = {
      kind: 'volume', dims: [5, 4], spacingMm: [0.5, 0.5], data: ramp(20),
    };
    const header = writeVolume(vol, path.join(tmp, 'v2'));
    expect(header.endsWith('.t2r.json')).toBe(true);
    expect(readVolume(path.join(tmp, 'v2')).dims).toEqual([5, 4]);
  });

  it('mask round trip and value check', () => {
    const data = new Uint8Array(12);
    data[3] = 1;
    data[7] = 1;
    const header = writeMask(
      { kind: 'mask', dims: [4, 3], spacingMm: [1, 1], data },
      path.join(tmp, 'm'),
    );
    const back = readMask(header);
    expect(Array.from(back.data)).toEqual(Array.from(data));
    data[5] = 2;
    expect(() =>
      writeMask({ kind: 'mask', dims: [4, 3], spacingMm: [1, 1], data },
        path.join(tmp, 'm_bad')),
    ).toThrow(/0 or 1/);
  });

  it('embedding keeps channel count', () => {
    const emb = {
      kind: 'embedding' as const,
      dims: [3, 2],
      spacingMm: [4, 4],
      channels: 5,
      data: ramp(30),
    };
    const back = readEmbedding(writeEmbedding(emb, path.join(tmp, 'e')));
    expect(back.channels).toBe(5);
    expect(back.dims).toEqual([3, 2]);
    expect(Array.from(back.data)).toEqual(Array.from(emb.data));
  });

  it('rejects payload size mismatch on read', () => {
    const vol: Volume = {
      kind: 'volume', dims: [4, 4], spacingMm: [1, 1], data: ramp(16),
    };
    writeVolume(vol, path.join(tmp, 'trunc'));
    const raw = path.join(tmp, 'trunc.t2r.raw');
    fs.writeFileSync(raw, fs.readFileSync(raw).subarray(0, 40));
    expect(() => readVolume(path.join(tmp, 'trunc'))).toThrow(/bytes/);
  });

  it('rejects payload length mismatch on write', () => {
    expect(() => writeVolume(
      { kind: 'volume', dims: [4, 4], spacingMm: [1, 1], data: ramp(15) },
      path.join(tmp, 'short'),
    )).toThrow(/match dims/);
  });
});

describe('format stability', () => {
  it('two writes of the same content are byte-identical', () => {
    const vol: Volume = {
      kind: 'volume', dims: [6, 5], spacingMm: [1, 2], data: ramp(30),
    };
    const a = writeVolume(vol, path.join(tmp, 'stable_a'));
    fs.mkdirSync(path.join(tmp, 'again'));
    const b = writeVolume(vol, path.join(tmp, 'again', 'stable_a'));
    expect(fs.readFileSync(a)).toEqual(fs.readFileSync(b));
    expect(fs.readFileSync(a.replace('.t2r.json', '.t2r.raw')))
      .toEqual(fs.readFileSync(b.replace('.t2r.json', '.t2r.raw')));
  });

  it('headers carry sorted keys and a trailing newline', () => {
    const vol: Volume = {
      kind: 'volume', dims: [2, 2], spacingMm: [1, 1], data: ramp(4),
    };
    const text = fs.readFileSync(writeVolume(vol, path.join(tmp, 'keys')), 'utf8');
    expect(text.endsWith('\n')).toBe(true);
    const keys = Object.keys(JSON.parse(text));
    expect(keys).toEqual([...keys].sort());
    expect(keys).toEqual(['byte_order', 'dims', 'dtype', 'kind', 'raw', 'spacing_mm']);
  });

  it('payload is little-endian axis-0-fastest', () => {
    // value encodes its own coordinates, then the flat layout is checked
    const data = new Float32Array(2 * 3 * 2);
    for (let z = 0; z < 2; z++) {
      for (let y = 0; y < 3; y++) {
        for (let x = 0; x < 2; x++) {
          data[x + 2 * (y + 3 * z)] = x + 10 * y + 100 * z;
        }
      }
    }
    writeVolume(
      { kind: 'volume', dims: [2, 3, 2], spacingMm: [1, 1, 1], data },
      path.join(tmp, 'order'),
    );
    const raw = fs.readFileSync(path.join(tmp, 'order.t2r.raw'));
    expect(raw.readFloatLE(0)).toBe(0);     // (0,0,0)
    expect(raw.readFloatLE(4)).toBe(1);     // (1,0,0) -> x fastest
    expect(raw.readFloatLE(8)).toBe(10);    // (0,1,0)
    expect(raw.readFloatLE(24)).toBe(100);  // (0,0,1)
  });

  it('canonicalJson sorts nested keys', () => {
    expect(canonicalJson({ b: 1, a: { d: 2, c: 3 } }))
      .toBe('{\n  "a": {\n    "c": 3,\n    "d": 2\n  },\n  "b": 1\n}\n');
  });

  it('headerPath is idempotent', () => {
    expect(headerPath('x.t2r.json')).toBe('x.t2r.json');
    expect(headerPath('x')).toBe('x.t2r.json');
  });
});

describe('slicePlane', () => {
  it('extracts the z plane of a 3D volume', () => {
    const data = new Float32Array(3 * 2 * 4);
    for (let i = 0; i < data.length; i++) data[i] = i;
    const vol: Volume = {
      kind: 'volume', dims: [3, 2, 4], spacingMm: [1, 1, 1], data,
    };
    const plane = slicePlane(vol, 2);
    expect(Array.from(plane)).toEqual([12, 13, 14, 15, 16, 17]);
  });

  it('returns the whole array for 2D input', () => {
    const vol: Volume = {
      kind: 'volume', dims: [2, 2], spacingMm: [1, 1], data: ramp(4),
    };
    expect(slicePlane(vol, 0)).toBe(vol.data);
  });
});
