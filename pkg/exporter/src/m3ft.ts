/**
 * M3FT tensor files (little-endian): magic "M3FT", version u32, model name
 * (u32 length + UTF-8), n, h, w, d u32, float32 data [view][row][col][dim].
 * Embedding lists reuse the container with n=1, h=1, w=m.
 */

import * as fs from "fs";

export const VERSION = 1;

export interface FeatureTensor {
  modelName: string;
  nViews: number;
  height: number;
  width: number;
  dim: number;
  data: Float32Array; // length nViews*height*width*dim
}

export function encodeTensor(t: FeatureTensor): Buffer {
  const rows = t.nViews * t.height * t.width;
  if (t.data.length !== rows * t.dim) {
    throw new Error(
      `data length ${t.data.length} != n*h*w*d = ${rows * t.dim}`,
    );
  }
  for (let i = 0; i < t.data.length; i++) {
    if (!Number.isFinite(t.data[i])) {
      throw new Error(`non-finite value at flat index ${i}`);
    }
  }
  const name = Buffer.from(t.modelName, "utf-8");
  const header = Buffer.alloc(4 + 8 + name.length + 16);
  header.write("M3FT", 0, "ascii");
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt32LE(name.length, 8);
  name.copy(header, 12);
  let off = 12 + name.length;
  header.writeUInt32LE(t.nViews, off);
  header.writeUInt32LE(t.height, off + 4);
  header.writeUInt32LE(t.width, off + 8);
  header.writeUInt32LE(t.dim, off + 12);
  const payload = Buffer.alloc(t.data.length * 4);
  for (let i = 0; i < t.data.length; i++) {
    payload.writeFloatLE(t.data[i], i * 4);
  }
  return Buffer.concat([header, payload]);
}

export function writeTensor(t: FeatureTensor, path: string): void {
  fs.writeFileSync(path, encodeTensor(t));
}

export function readTensor(path: string): FeatureTensor {
  const buf = fs.readFileSync(path);
  if (buf.length < 12 || buf.toString("ascii", 0, 4) !== "M3FT") {
    throw new Error(`${path}: not an M3FT file`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const nameLen = buf.readUInt32LE(8);
  const modelName = buf.toString("utf-8", 12, 12 + nameLen);
  let off = 12 + nameLen;
  const nViews = buf.readUInt32LE(off);
  const height = buf.readUInt32LE(off + 4);
  const width = buf.readUInt32LE(off + 8);
  const dim = buf.readUInt32LE(off + 12);
  off += 16;
  const count = nViews * height * width * dim;
  if (buf.length < off + count * 4) {
    throw new Error(`${path}: truncated payload`);
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = buf.readFloatLE(off + i * 4);
  }
  return { modelName, nViews, height, width, dim, data };
}

/** Embedding list: one row per entry, stored as n=1, h=1, w=rows. */
export function writeEmbeddings(
  modelName: string,
  rows: Float32Array[],
  path: string,
): void {
  if (rows.length === 0) {
    throw new Error("empty embedding list");
  }
  const dim = rows[0].length;
  const data = new Float32Array(rows.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) {
      throw new Error("inconsistent embedding dimensions");
    }
    data.set(row, i * dim);
  });
  writeTensor(
    { modelName, nViews: 1, height: 1, width: rows.length, dim, data },
    path,
  );
}
