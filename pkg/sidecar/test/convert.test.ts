import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { gzipSync } from 'node:zlib';
import { afterAll, describe, expect, it } from 'vitest';

import { convertMain, parseNifti, resampleVolume } from '../src/convert.js';
import { readVolume, Volume } from '../src/volio.js';

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'convert-'));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

// Minimal uncompressed NIfTI-1 file: 348-byte header, data at 352.
function makeNifti(
  dims: number[],
  spacing: number[],
  values: number[],
  opts: { datatype?: number; slope?: number; inter?: number } = {},
): Buffer {
  const datatype = opts.datatype ?? 16; // float32
  const bitpix = datatype === 4 ? 16 : 32;
  const itemBytes = bitpix / 8;
  const header = Buffer.alloc(352);
  header.writeInt32LE(348, 0);
  header.writeInt16LE(dims.length, 40);
  dims.forEach((d, i) => header.writeInt16LE(d, 42 + 2 * i));
  for (let i = dims.length; i < 7; i++) header.writeInt16LE(1, 42 + 2 * i);
  header.writeInt16LE(datatype, 70);
  header.writeInt16LE(bitpix, 72);
  header.writeFloatLE(1, 76); // qfac
  spacing.forEach((s, i) => header.writeFloatLE(s, 80 + 4 * i));
  header.writeFloatLE(352, 108); // vox_offset
  header.writeFloatLE(opts.slope ?? 0, 112);
  header.writeFloatLE(opts.inter ?? 0, 116);
  header.write('n+1\0', 344, 'latin1');

  const data = Buffer.alloc(values.length * itemBytes);
  values.forEach((v, i) => {
    if (datatype === 4) data.writeInt16LE(v, i * 2);
    else data.writeFloatLE(v, i * 4);
  });
  return Buffer.concat([header, data]);
}

const count = (dims: number[]) => dims.reduce((a, b) => a * b, 1);

describe('parseNifti', () => {
  it('reads dims, spacing and float32 values', () => {
    const dims = [6, 5, 4];
    const values = Array.from({ length: count(dims) }, (_, i) => i * 0.5);
    const vol = parseNifti(makeNifti(dims, [1.5, 2, 2.5], values));
    expect(vol.dims).toEqual(dims);
    expect(vol.spacingMm).toEqual([1.5, 2, 2.5]);
    expect(Array.from(vol.data)).toEqual(values);
  });

  it('applies slope and intercept scaling', () => {
    const values = [0, 1, 2, 3];
    const vol = parseNifti(makeNifti([2, 2], [1, 1], values, {
      datatype: 4, slope: 2, inter: 1,
    }));
    expect(Array.from(vol.data)).toEqual([1, 3, 5, 7]);
  });

  it('accepts gzip-compressed input', () => {
    const values = [5, 6, 7, 8];
    const plain = makeNifti([2, 2], [0.5, 0.5], values);
    const vol = parseNifti(gzipSync(plain));
    expect(vol.dims).toEqual([2, 2]);
    expect(Array.from(vol.data)).toEqual(values);
  });

  it('rejects non-NIfTI input', () => {
    expect(() => parseNifti(Buffer.alloc(1024))).toThrow(/not a NIfTI/);
  });

  it('rejects unsupported dimensionality', () => {
    const values = Array.from({ length: 16 }, (_, i) => i);
    expect(() => parseNifti(makeNifti([2, 2, 2, 2], [1, 1, 1, 1], values)))
      .toThrow(/only 2D and 3D/);
  });
});

describe('resampleVolume', () => {
  const ramp3d = (): Volume => {
    const dims = [6, 4, 3];
    const data = new Float32Array(count(dims));
    for (let z = 0; z < 3; z++) {
      for (let y = 0; y < 4; y++) {
        for (let x = 0; x < 6; x++) data[x + 6 * (y + 4 * z)] = x;
      }
    }
    return { kind: 'volume', dims, spacingMm: [1, 2, 1], data };
  };

  it('is exact at identical spacing', () => {
    const vol = ramp3d();
    const out = resampleVolume(vol, [1, 2, 1]);
    expect(out.dims).toEqual(vol.dims);
    expect(out.spacingMm).toEqual(vol.spacingMm);
    expect(Array.from(out.data)).toEqual(Array.from(vol.data));
  });

  it('interpolates a linear ramp exactly between samples', () => {
    const out = resampleVolume(ramp3d(), [0.5, 2, 1]);
    expect(out.dims).toEqual([12, 4, 3]);
    for (let x = 0; x < 12; x++) {
      // source coordinate x/2, clamped to the last sample at the edge
      const expected = Math.min(x * 0.5, 5);
      expect(out.data[x + 12 * (1 + 4 * 1)]).toBeCloseTo(expected, 6);
    }
  });

  it('handles 2D planes', () => {
    const vol: Volume = {
      kind: 'volume',
      dims: [4, 4],
      spacingMm: [2, 2],
      data: Float32Array.from({ length: 16 }, (_, i) => i % 4),
    };
    const out = resampleVolume(vol, [1, 1]);
    expect(out.dims).toEqual([8, 8]);
    expect(out.spacingMm).toEqual([1, 1]);
    expect(out.data[2 + 8 * 3]).toBeCloseTo(1, 6);
  });

  it('rejects malformed target spacing', () => {
    expect(() => resampleVolume(ramp3d(), [1, 1])).toThrow(/axes/);
    expect(() => resampleVolume(ramp3d(), [1, -1, 1])).toThrow(/bad target/);
  });
});

describe('convertMain', () => {
  it('converts a file end to end', () => {
    const dims = [5, 4, 2];
    const values = Array.from({ length: count(dims) }, (_, i) => i);
    const nii = path.join(tmp, 'img.nii');
    fs.writeFileSync(nii, makeNifti(dims, [1, 1, 2], values));
    const out = path.join(tmp, 'img');
    expect(convertMain([nii, out])).toBe(0);
    const vol = readVolume(out);
    expect(vol.dims).toEqual(dims);
    expect(vol.spacingMm).toEqual([1, 1, 2]);
    expect(Array.from(vol.data)).toEqual(values);
  });

  it('resamples when --spacing is given', () => {
    const dims = [6, 4, 2];
    const values = Array.from({ length: count(dims) }, (_, i) => i);
    const nii = path.join(tmp, 'res.nii');
    fs.writeFileSync(nii, makeNifti(dims, [1, 1, 1], values));
    const out = path.join(tmp, 'res');
    expect(convertMain([nii, out, '--spacing', '2,1,1'])).toBe(0);
    expect(readVolume(out).dims).toEqual([3, 4, 2]);
  });

  it('fails with usage on wrong arguments', () => {
    expect(convertMain(['only-one'])).toBe(2);
  });

  it('fails cleanly on unreadable input', () => {
    expect(convertMain([path.join(tmp, 'absent.nii'), path.join(tmp, 'x')])).toBe(1);
  });
});
