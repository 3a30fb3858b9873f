// Container file I/O: a JSON header next to a raw little-endian payload.
// Payloads are stored with axis 0 fastest (column-major flat order), so
// flatIndex = x + dims[0] * (y + dims[1] * z).  Embeddings are channel-last,
// which in that order makes each channel one contiguous plane block.

import * as fs from 'node:fs';
import * as path from 'node:path';

export const HEADER_SUFFIX = '.t2r.json';
export const RAW_SUFFIX = '.t2r.raw';

export type ContainerKind = 'volume' | 'mask' | 'embedding';

export interface Volume {
  kind: 'volume';
  dims: number[];
  spacingMm: number[];
  data: Float32Array;
}

export interface Mask {
  kind: 'mask';
  dims: number[];
  spacingMm: number[];
  data: Uint8Array;
}

export interface Embedding {
  kind: 'embedding';
  dims: number[];
  spacingMm: number[];
  channels: number;
  data: Float32Array;
}

// Stable serialization: sorted keys, two-space indent, trailing newline.
export function canonicalJson(value: unknown): string {
  return JSON.stringify(sortKeys(value), null, 2) + '\n';
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value !== null && typeof value === 'object') {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as object).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

export function headerPath(p: string): string {
  return p.endsWith(HEADER_SUFFIX) ? p : p + HEADER_SUFFIX;
}

function checkDims(dims: number[]): void {
  if (dims.length < 2 || dims.length > 3) {
    throw new Error(`dims must be 2D or 3D, got ${JSON.stringify(dims)}`);
  }
  for (const d of dims) {
    if (!Number.isInteger(d) || d < 1) {
      throw new Error(`bad dimension ${d}`);
    }
  }
}

function elementCount(dims: number[], channels = 1): number {
  return dims.reduce((a, b) => a * b, 1) * channels;
}

function writeContainer(
  p: string,
  kind: ContainerKind,
  dims: number[],
  spacingMm: number[],
  payload: Buffer,
  channels?: number,
): string {
  checkDims(dims);
  if (spacingMm.length !== dims.length) {
    throw new Error('spacing axes disagree with dims');
  }
  const header = headerPath(p);
  const rawName = path.basename(header).slice(0, -HEADER_SUFFIX.length) + RAW_SUFFIX;
  const meta: Record<string, unknown> = {
    kind,
    dims,
    spacing_mm: spacingMm,
    dtype: kind === 'mask' ? 'u8' : 'f32',
    byte_order: 'le',
    raw: rawName,
  };
  if (kind === 'embedding') meta.channels = channels;
  fs.writeFileSync(header, canonicalJson(meta));
  fs.writeFileSync(path.join(path.dirname(header), rawName), payload);
  return header;
}

export function writeVolume(vol: Volume, p: string): string {
  if (vol.data.length !== elementCount(vol.dims)) {
    throw new Error('volume payload does not match dims');
  }
  return writeContainer(
    p, 'volume', vol.dims, vol.spacingMm,
    Buffer.from(vol.data.buffer, vol.data.byteOffset, vol.data.byteLength),
  );
}

export function writeMask(mask: Mask, p: string): string {
  if (mask.data.length !== elementCount(mask.dims)) {
    throw new Error('mask payload does not match dims');
  }
  for (const v of mask.data) {
    if (v > 1) throw new Error('mask values must be 0 or 1');
  }
  return writeContainer(
    p, 'mask', mask.dims, mask.spacingMm,
    Buffer.from(mask.data.buffer, mask.data.byteOffset, mask.data.byteLength),
  );
}

export function writeEmbedding(emb: Embedding, p: string): string {
  if (emb.channels < 1) throw new Error('embedding needs at least one channel');
  if (emb.data.length !== elementCount(emb.dims, emb.channels)) {
    throw new Error('embedding payload does not match dims and channels');
  }
  return writeContainer(
    p, 'embedding', emb.dims, emb.spacingMm,
    Buffer.from(emb.data.buffer, emb.data.byteOffset, emb.data.byteLength),
    emb.channels,
  );
}

interface Header {
  kind: ContainerKind;
  dims: number[];
  spacing_mm: number[];
  dtype: string;
  byte_order: string;
  raw: string;
  channels?: number;
}

function readContainer(p: string, expectKind: ContainerKind): {
  header: Header;
  payload: Buffer;
} {
  const header = headerPath(p);
  const meta = JSON.parse(fs.readFileSync(header, 'utf8')) as Header;
  for (const key of ['kind', 'dims', 'spacing_mm', 'dtype', 'byte_order', 'raw']) {
    if (!(key in meta)) throw new Error(`header ${header} missing '${key}'`);
  }
  if (meta.kind !== expectKind) {
    throw new Error(`${header}: expected kind '${expectKind}', found '${meta.kind}'`);
  }
  if (meta.byte_order !== 'le') {
    throw new Error(`${header}: unsupported byte order '${meta.byte_order}'`);
  }
  checkDims(meta.dims);
  const rawFile = path.join(path.dirname(header), meta.raw);
  const payload = fs.readFileSync(rawFile);
  const channels = expectKind === 'embedding' ? (meta.channels ?? 0) : 1;
  if (expectKind === 'embedding' && channels < 1) {
    throw new Error(`${header}: embedding channels must be >= 1`);
  }
  const itemSize = meta.dtype === 'u8' ? 1 : 4;
  const expected = elementCount(meta.dims, channels) * itemSize;
  if (payload.length !== expected) {
    throw new Error(
      `${rawFile}: payload is ${payload.length} bytes, header declares ${expected}`,
    );
  }
  return { header: meta, payload };
}

export function readVolume(p: string): Volume {
  const { header, payload } = readContainer(p, 'volume');
  if (header.dtype !== 'f32') throw new Error(`volume dtype '${header.dtype}'`);
  return {
    kind: 'volume',
    dims: header.dims,
    spacingMm: header.spacing_mm,
    data: new Float32Array(payload.buffer, payload.byteOffset, payload.length / 4),
  };
}

export function readMask(p: string): Mask {
  const { header, payload } = readContainer(p, 'mask');
  if (header.dtype !== 'u8') throw new Error(`mask dtype '${header.dtype}'`);
  return {
    kind: 'mask',
    dims: header.dims,
    spacingMm: header.spacing_mm,
    data: new Uint8Array(payload.buffer, payload.byteOffset, payload.length),
  };
}

export function readEmbedding(p: string): Embedding {
  const { header, payload } = readContainer(p, 'embedding');
  if (header.dtype !== 'f32') throw new Error(`embedding dtype '${header.dtype}'`);
  return {
    kind: 'embedding',
    dims: header.dims,
    spacingMm: header.spacing_mm,
    channels: header.channels as number,
    data: new Float32Array(payload.buffer, payload.byteOffset, payload.length / 4),
  };
}

// Pull one z plane out of a volume as a flat x-fastest array.
export function slicePlane(vol: Volume, z: number): Float32Array {
  const [nx, ny] = vol.dims;
  if (vol.dims.length === 2) return vol.data;
  const plane = new Float32Array(nx * ny);
  const offset = nx * ny * z;
  plane.set(vol.data.subarray(offset, offset + nx * ny));
  return plane;
}
