/**
 * Minimal wire-format helpers, written against the protocol alone.
 *
 * Frames are canonical JSON envelopes (sorted keys, no whitespace); binary
 * payloads travel base64-encoded, optionally deflate- or zlib-compressed.
 * Nothing here is imported from the service host implementation: speaking
 * the documented bytes is the whole point of this client.
 */

import * as zlib from "node:zlib";

export type Compression = "none" | "deflate" | "zlib";

export interface Payload {
  schema: string;
  compression: Compression;
  data: string; // base64
}

export interface Envelope {
  op: string;
  id?: string;
  target?: string;
  payload?: Payload;
  sla?: {
    times?: { t_desire_ms: number; t_max_ms: number };
    resources?: { cpu_millicores: number; memory_mb: number };
  };
  status?: { code: string; detail?: string };
}

/** JSON with lexicographically sorted keys and no insignificant whitespace. */
export function canonical(value: unknown): string {
  return JSON.stringify(sortKeys(value));
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) {
    return value.map(sortKeys);
  }
  if (value !== null && typeof value === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as object).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

export function encodeEnvelope(e: Envelope): string {
  return canonical(e);
}

export function makePayload(schema: string, body: Buffer, compression: Compression): Payload {
  let packed: Buffer;
  switch (compression) {
    case "none":
      packed = body;
      break;
    case "deflate":
      packed = zlib.deflateRawSync(body, { level: 6 });
      break;
    case "zlib":
      packed = zlib.deflateSync(body, { level: 6 });
      break;
  }
  return { schema, compression, data: packed.toString("base64") };
}

export function payloadBody(p: Payload): Buffer {
  const packed = Buffer.from(p.data, "base64");
  switch (p.compression) {
    case "none":
      return packed;
    case "deflate":
      return zlib.inflateRawSync(packed);
    case "zlib":
      return zlib.inflateSync(packed);
    default:
      throw new Error(`unknown compression ${p.compression}`);
  }
}

/** u32be width, u32be height, then 3*w*h pixel bytes. */
export function imageRgb(width: number, height: number, fillStep = 0): Buffer {
  const body = Buffer.alloc(8 + 3 * width * height);
  body.writeUInt32BE(width, 0);
  body.writeUInt32BE(height, 4);
  for (let j = 0; j < 3 * width * height; j++) {
    body[8 + j] = (j + fillStep) % 256;
  }
  return body;
}

/** u32be width, u32be height, then w*h cell bytes. */
export function gridMap(width: number, height: number, fill = 0): Buffer {
  const body = Buffer.alloc(8 + width * height, fill);
  body.writeUInt32BE(width, 0);
  body.writeUInt32BE(height, 4);
  return body;
}
