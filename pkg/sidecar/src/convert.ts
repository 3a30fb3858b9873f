// NIfTI to container conversion: node convert.js <input.nii[.gz]> <output>
// [--spacing x,y[,z]].  With --spacing the image is resampled onto the new
// grid by trilinear interpolation.

import * as fs from 'node:fs';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';
import * as nifti from 'nifti-reader-js';

import { writeVolume, Volume } from './volio.js';

function toArrayBuffer(buf: Buffer): ArrayBuffer {
  const copy = new ArrayBuffer(buf.byteLength);
  new Uint8Array(copy).set(buf);
  return copy;
}

export function parseNifti(data: Buffer): Volume {
  let ab = toArrayBuffer(data);
  if (nifti.isCompressed(ab)) {
    ab = nifti.decompress(ab) as ArrayBuffer;
  }
  if (!nifti.isNIFTI(ab)) {
    throw new Error('not a NIfTI file');
  }
  const header = nifti.readHeader(ab);
  if (header === null) {
    throw new Error('unreadable NIfTI header');
  }
  const ndim = header.dims[0];
  if (ndim < 2 || ndim > 3) {
    throw new Error(`only 2D and 3D images convert, got ${ndim}D`);
  }
  const dims = header.dims.slice(1, 1 + ndim).map(Number);
  const spacing = header.pixDims.slice(1, 1 + ndim).map((s) => {
    const v = Number(s);
    return v > 0 ? v : 1.0;
  });

  const raw = nifti.readImage(header, ab);
  const count = dims.reduce((a, b) => a * b, 1);
  let typed:
    | Float32Array | Float64Array | Int16Array | Int32Array
    | Uint8Array | Int8Array | Uint16Array;
  switch (header.datatypeCode) {
    case nifti.NIFTI1.TYPE_UINT8: typed = new Uint8Array(raw); break;
    case nifti.NIFTI1.TYPE_INT8: typed = new Int8Array(raw); break;
    case nifti.NIFTI1.TYPE_INT16: typed = new Int16Array(raw); break;
    case nifti.NIFTI1.TYPE_UINT16: typed = new Uint16Array(raw); break;
    case nifti.NIFTI1.TYPE_INT32: typed = new Int32Array(raw); break;
    case nifti.NIFTI1.TYPE_FLOAT32: typed = new Float32Array(raw); break;
    case nifti.NIFTI1.TYPE_FLOAT64: typed = new Float64Array(raw); break;
    default:
      throw new Error(`unsupported NIfTI datatype ${header.datatypeCode}`);
  }
  if (typed.length < count) {
    throw new Error(`payload holds ${typed.length} values, need ${count}`);
  }
  // NIfTI stores x fastest as well, so the order carries straight over;
  // slope/intercept scaling applies when the header sets a slope
  const slope = header.scl_slope !== 0 ? header.scl_slope : 1;
  const inter = header.scl_inter ?? 0;
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = typed[i] * slope + inter;
  return { kind: 'volume', dims, spacingMm: spacing, data: out };
}

export function resampleVolume(vol: Volume, targetSpacing: number[]): Volume {
  if (targetSpacing.length !== vol.dims.length) {
    throw new Error('target spacing axes disagree with image dims');
  }
  for (const s of targetSpacing) {
    if (!(s > 0)) throw new Error(`bad target spacing ${s}`);
  }
  const src = vol.dims.length === 2 ? [...vol.dims, 1] : vol.dims;
  const spacingIn = vol.dims.length === 2
    ? [...vol.spacingMm, 1] : vol.spacingMm;
  const spacingOut = vol.dims.length === 2
    ? [...targetSpacing, 1] : targetSpacing;
  const dst = src.map((n, a) =>
    Math.max(1, Math.round((n * spacingIn[a]) / spacingOut[a])));
  const [nx, ny, nz] = src;
  const [mx, my, mz] = dst;
  const out = new Float32Array(mx * my * mz);
  const at = (x: number, y: number, z: number) =>
    vol.data[x + nx * (y + ny * z)];

  for (let z = 0; z < mz; z++) {
    for (let y = 0; y < my; y++) {
      for (let x = 0; x < mx; x++) {
        // physical position of the output voxel, then source coordinates
        const sx = Math.min(Math.max((x * spacingOut[0]) / spacingIn[0], 0), nx - 1);
        const sy = Math.min(Math.max((y * spacingOut[1]) / spacingIn[1], 0), ny - 1);
        const sz = Math.min(Math.max((z * spacingOut[2]) / spacingIn[2], 0), nz - 1);
        const x0 = Math.floor(sx), y0 = Math.floor(sy), z0 = Math.floor(sz);
        const x1 = Math.min(x0 + 1, nx - 1);
        const y1 = Math.min(y0 + 1, ny - 1);
        const z1 = Math.min(z0 + 1, nz - 1);
        const fx = sx - x0, fy = sy - y0, fz = sz - z0;
        const c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
        const c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
        const c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
        const c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
        const c0 = c00 * (1 - fy) + c10 * fy;
        const c1 = c01 * (1 - fy) + c11 * fy;
        out[x + mx * (y + my * z)] = c0 * (1 - fz) + c1 * fz;
      }
    }
  }
  const outDims = vol.dims.length === 2 ? [mx, my] : [mx, my, mz];
  const outSpacing = vol.dims.length === 2
    ? [targetSpacing[0], targetSpacing[1]] : targetSpacing;
  return { kind: 'volume', dims: outDims, spacingMm: outSpacing, data: out };
}

export function convertMain(argv: string[]): number {
  const positional: string[] = [];
  let spacingArg: string | null = null;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === '--spacing') {
      spacingArg = argv[++i] ?? null;
    } else {
      positional.push(argv[i]);
    }
  }
  if (positional.length !== 2) {
    console.error('usage: convert.js <input.nii[.gz]> <output> [--spacing x,y[,z]]');
    return 2;
  }
  try {
    let volume = parseNifti(fs.readFileSync(positional[0]));
    if (spacingArg !== null) {
      volume = resampleVolume(volume, spacingArg.split(',').map(Number));
    }
    const header = writeVolume(volume, positional[1]);
    console.log(`wrote ${header} (${volume.dims.join('x')})`);
    return 0;
  } catch (err) {
    console.error(`convert error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] && fileURLToPath(import.meta.url) === path.resolve(process.argv[1]);

if (invokedDirectly) {
  process.exit(convertMain(process.argv.slice(2)));
}
