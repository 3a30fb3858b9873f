// Sidecar entry point.  Invoked as: node serve.js <request.json>
// Writes response.json plus mask/embedding containers into the request's
// output_dir, or error.json there and a nonzero exit on failure.

import * as fs from 'node:fs';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';

import {
  componentMask,
  encodePlane,
  promptScore,
  segmentPlane,
  CHANNELS,
  PATCH,
} from './models.js';
import { windowIntensities } from './preprocess.js';
import { parseRequest, Request, Response, Roi } from './protocol.js';
import {
  canonicalJson,
  readVolume,
  slicePlane,
  writeEmbedding,
  writeMask,
  HEADER_SUFFIX,
} from './volio.js';

export function handleRequest(request: Request): Response {
  const volume = readVolume(request.image);
  const [nx, ny] = volume.dims;
  const is3d = volume.dims.length === 3;
  const nz = is3d ? volume.dims[2] : 1;

  let zList: Array<number | null>;
  if (!is3d) {
    zList = [null];
  } else {
    const [lo, hi] = request.slice_range ?? [0, nz];
    if (lo < 0 || hi > nz || lo >= hi) {
      throw new Error(`slice range [${lo}, ${hi}) outside volume of ${nz}`);
    }
    zList = [];
    for (let z = lo; z < hi; z++) zList.push(z);
  }

  const windowed = windowIntensities(volume.data);
  const windowedVolume = { ...volume, data: windowed };
  const outDir = request.output_dir;
  fs.mkdirSync(outDir, { recursive: true });

  const rois: Roi[] = [];
  const embeddings: Array<{ slice: number | null; file: string }> = [];
  const planeSpacing = [volume.spacingMm[0] * PATCH, volume.spacingMm[1] * PATCH];
  let maskCount = 0;

  for (const slice of zList) {
    const plane = slice === null
      ? windowed
      : slicePlane(windowedVolume, slice);

    const { components } = segmentPlane(plane, nx, ny);
    for (const prompt of request.prompts) {
      for (const component of components) {
        const name = `m_${String(maskCount).padStart(4, '0')}`;
        maskCount++;
        writeMask(
          {
            kind: 'mask',
            dims: [nx, ny],
            spacingMm: [volume.spacingMm[0], volume.spacingMm[1]],
            data: componentMask(component, nx, ny),
          },
          path.join(outDir, name),
        );
        rois.push({
          prompt,
          slice,
          box: component.box,
          score: promptScore(prompt, component),
          mask: name + HEADER_SUFFIX,
        });
      }
    }

    const { values, gridDims } = encodePlane(plane, nx, ny);
    const embName = `e_${String(embeddings.length).padStart(4, '0')}`;
    writeEmbedding(
      {
        kind: 'embedding',
        dims: gridDims,
        spacingMm: planeSpacing,
        channels: CHANNELS,
        data: values,
      },
      path.join(outDir, embName),
    );
    embeddings.push({ slice, file: embName + HEADER_SUFFIX });
  }

  return { rois, embeddings };
}

export function serveMain(requestPath: string): number {
  let outDir: string | null = null;
  let stage = 'request';
  try {
    const request = parseRequest(fs.readFileSync(requestPath, 'utf8'));
    outDir = request.output_dir;
    stage = 'inference';
    const response = handleRequest(request);
    stage = 'response';
    fs.writeFileSync(
      path.join(outDir, 'response.json'),
      canonicalJson(response),
    );
    return 0;
  } catch (err) {
    const message = err instanceof Error ? err.message : String(err);
    if (outDir !== null) {
      try {
        fs.mkdirSync(outDir, { recursive: true });
        fs.writeFileSync(
          path.join(outDir, 'error.json'),
          canonicalJson({ stage, message }),
        );
      } catch {
        // diagnostics are best effort; the exit code still reports failure
      }
    }
    console.error(`sidecar error [${stage}]: ${message}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] && fileURLToPath(import.meta.url) === path.resolve(process.argv[1]);

if (invokedDirectly) {
  if (process.argv.length !== 3) {
    console.error('usage: serve.js <request.json>');
    process.exit(2);
  }
  process.exit(serveMain(process.argv[2]));
}
