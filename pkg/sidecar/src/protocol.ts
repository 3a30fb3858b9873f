// Exchange protocol: the engine writes request.json and invokes this
// process with its path; we exit 0 after writing response.json into the
// requested output directory, or exit nonzero leaving error.json behind.

import { z } from 'zod';

export const RequestSchema = z.object({
  image: z.string(),
  prompts: z.array(z.string().min(1)).min(1),
  slice_range: z.tuple([z.number().int(), z.number().int()]).nullable(),
  output_dir: z.string(),
});

export type Request = z.infer<typeof RequestSchema>;

export const RoiSchema = z.object({
  prompt: z.string(),
  slice: z.number().int().nullable(),
  box: z.tuple([
    z.number().int(), z.number().int(), z.number().int(), z.number().int(),
  ]),
  score: z.number().min(0).max(1),
  mask: z.string(),
});

export const EmbeddingEntrySchema = z.object({
  slice: z.number().int().nullable(),
  file: z.string(),
});

export const ResponseSchema = z.object({
  rois: z.array(RoiSchema),
  embeddings: z.array(EmbeddingEntrySchema),
});

export type Response = z.infer<typeof ResponseSchema>;
export type Roi = z.infer<typeof RoiSchema>;

export const ErrorSchema = z.object({
  stage: z.string(),
  message: z.string(),
});

export type ErrorReport = z.infer<typeof ErrorSchema>;

export function parseRequest(text: string): Request {
  return RequestSchema.parse(JSON.parse(text));
}
