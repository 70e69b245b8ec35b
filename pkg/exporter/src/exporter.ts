/**
 * The three export routes: per-view patch features, region-splatted prompt
 * embeddings, and text embedding lists. Every output is an M3FT file the
 * downstream pipeline validates; a sidecar manifest pins the encoder and
 * records the pre-interpolation patch grid.
 */

import * as fs from "fs";
import { encodePatch, encodeText, modelCard } from "./encoders";
import { Image, listImages, readImage, readMask, resizeGrid } from "./image";
import { FeatureTensor, writeEmbeddings, writeTensor } from "./m3ft";

export interface ExportSpec {
  model: string;
  imageDir: string;
  outPath: string;
  height: number;
  width: number;
  device?: string; // hint only; this implementation is CPU-only
}

export interface PatchManifest {
  model: string;
  version: string;
  dim: number;
  patch: number;
  views: number;
  originalGrid: [number, number];
  target: [number, number];
}

function patchGrid(model: string, img: Image): {
  grid: Float64Array;
  gh: number;
  gw: number;
} {
  const card = modelCard(model);
  const p = card.patch;
  const gh = Math.max(1, Math.floor(img.height / p));
  const gw = Math.max(1, Math.floor(img.width / p));
  const grid = new Float64Array(gh * gw * card.dim);
  const block = new Float64Array(p * p * 3);
  for (let gy = 0; gy < gh; gy++) {
    for (let gx = 0; gx < gw; gx++) {
      for (let y = 0; y < p; y++) {
        const sy = Math.min(gy * p + y, img.height - 1);
        for (let x = 0; x < p; x++) {
          const sx = Math.min(gx * p + x, img.width - 1);
          for (let c = 0; c < 3; c++) {
            block[(y * p + x) * 3 + c] = img.data[(sy * img.width + sx) * 3 + c];
          }
        }
      }
      grid.set(encodePatch(model, block, p), (gy * gw + gx) * card.dim);
    }
  }
  return { grid, gh, gw };
}

export function exportPatchFeatures(spec: ExportSpec): PatchManifest {
  const card = modelCard(spec.model);
  const files = listImages(spec.imageDir);
  const data = new Float64Array(files.length * spec.height * spec.width * card.dim);
  let gh = 0;
  let gw = 0;
  files.forEach((file, i) => {
    const img = readImage(file);
    const grid = patchGrid(spec.model, img);
    gh = grid.gh;
    gw = grid.gw;
    const resized = resizeGrid(grid.grid, grid.gh, grid.gw, card.dim,
                               spec.height, spec.width);
    data.set(resized, i * spec.height * spec.width * card.dim);
  });
  const tensor: FeatureTensor = {
    modelName: spec.model,
    nViews: files.length,
    height: spec.height,
    width: spec.width,
    dim: card.dim,
    data: Float32Array.from(data),
  };
  writeTensor(tensor, spec.outPath);
  const manifest: PatchManifest = {
    model: spec.model,
    version: card.version,
    dim: card.dim,
    patch: card.patch,
    views: files.length,
    originalGrid: [gh, gw],
    target: [spec.height, spec.width],
  };
  fs.writeFileSync(`${spec.outPath}.manifest.json`,
                   JSON.stringify(manifest, null, 1) + "\n");
  return manifest;
}

/**
 * Duplicate one embedding into every pixel of its mask region. Pixels
 * covered by several masks take the first (lowest-index) region; uncovered
 * pixels stay zero. Re-splatting an already-splatted map with the same
 * masks and embeddings is a no-op by construction.
 */
export function splatRegions(
  masks: Uint8Array[],
  embeddings: Float64Array[],
  height: number,
  width: number,
): Float64Array {
  if (masks.length !== embeddings.length) {
    throw new Error("need exactly one embedding per mask");
  }
  const dim = embeddings.length > 0 ? embeddings[0].length : 0;
  const out = new Float64Array(height * width * dim);
  const owner = new Int32Array(height * width).fill(-1);
  masks.forEach((mask, k) => {
    if (mask.length !== height * width) {
      throw new Error(`mask ${k} size ${mask.length} != ${height}x${width}`);
    }
    if (embeddings[k].length !== dim) {
      throw new Error("inconsistent embedding dimensions");
    }
    for (let i = 0; i < mask.length; i++) {
      if (mask[i] && owner[i] < 0) {
        owner[i] = k;
        out.set(embeddings[k], i * dim);
      }
    }
  });
  return out;
}

export function exportRegionFeatures(
  model: string,
  maskPaths: string[],
  embeddings: Float64Array[],
  outPath: string,
): void {
  if (maskPaths.length === 0) {
    throw new Error("no masks given");
  }
  const masks = maskPaths.map(readMask);
  const { width, height } = masks[0];
  masks.forEach((m, k) => {
    if (m.width !== width || m.height !== height) {
      throw new Error(`mask ${k} dimensions differ from mask 0`);
    }
  });
  const dim = embeddings[0]?.length ?? 0;
  const data = splatRegions(masks.map((m) => m.data), embeddings, height, width);
  writeTensor(
    {
      modelName: model,
      nViews: 1,
      height,
      width,
      dim,
      data: Float32Array.from(data),
    },
    outPath,
  );
}

export function exportTextEmbeddings(
  model: string,
  strings: string[],
  outPath: string,
): void {
  if (strings.length === 0) {
    throw new Error("empty string list");
  }
  const rows = strings.map((s) => Float32Array.from(encodeText(model, s)));
  writeEmbeddings(model, rows, outPath);
}
