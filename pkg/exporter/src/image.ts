/** PNG/JPEG decoding and the grid resampling shared by the exporters. */

import * as fs from "fs";
import * as path from "path";
import { PNG } from "pngjs";
import * as jpeg from "jpeg-js";

export interface Image {
  width: number;
  height: number;
  /** RGB in [0, 1], row-major, 3 channels. */
  data: Float64Array;
}

export function readImage(file: string): Image {
  const raw = fs.readFileSync(file);
  const ext = path.extname(file).toLowerCase();
  let width: number;
  let height: number;
  let rgba: Uint8Array;
  if (ext === ".png") {
    const png = PNG.sync.read(raw);
    width = png.width;
    height = png.height;
    rgba = png.data;
  } else if (ext === ".jpg" || ext === ".jpeg") {
    const img = jpeg.decode(raw, { useTArray: true });
    width = img.width;
    height = img.height;
    rgba = img.data;
  } else {
    throw new Error(`unsupported image type: ${file}`);
  }
  const data = new Float64Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    data[i * 3] = rgba[i * 4] / 255;
    data[i * 3 + 1] = rgba[i * 4 + 1] / 255;
    data[i * 3 + 2] = rgba[i * 4 + 2] / 255;
  }
  return { width, height, data };
}

export function writePng(img: Image, file: string): void {
  const png = new PNG({ width: img.width, height: img.height });
  for (let i = 0; i < img.width * img.height; i++) {
    for (let c = 0; c < 3; c++) {
      png.data[i * 4 + c] = Math.round(
        Math.min(1, Math.max(0, img.data[i * 3 + c])) * 255,
      );
    }
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(file, PNG.sync.write(png));
}

/** Grayscale mask: any nonzero channel marks a pixel as inside. */
export function readMask(file: string): { width: number; height: number; data: Uint8Array } {
  const img = readImage(file);
  const data = new Uint8Array(img.width * img.height);
  for (let i = 0; i < data.length; i++) {
    const v = img.data[i * 3] + img.data[i * 3 + 1] + img.data[i * 3 + 2];
    data[i] = v > 0 ? 1 : 0;
  }
  return { width: img.width, height: img.height, data };
}

export function listImages(dir: string): string[] {
  const names = fs
    .readdirSync(dir)
    .filter((f) => /\.(png|jpe?g)$/i.test(f))
    .sort();
  if (names.length === 0) {
    throw new Error(`no images found in ${dir}`);
  }
  return names.map((f) => path.join(dir, f));
}

/**
 * Bilinear resize of a (gh, gw, d) grid to (h, w); the usual half-pixel
 * center mapping, clamped at the borders.
 */
export function resizeGrid(
  grid: Float64Array,
  gh: number,
  gw: number,
  dim: number,
  h: number,
  w: number,
): Float64Array {
  const out = new Float64Array(h * w * dim);
  for (let y = 0; y < h; y++) {
    const sy = Math.min(Math.max(((y + 0.5) * gh) / h - 0.5, 0), gh - 1);
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, gh - 1);
    const fy = sy - y0;
    for (let x = 0; x < w; x++) {
      const sx = Math.min(Math.max(((x + 0.5) * gw) / w - 0.5, 0), gw - 1);
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, gw - 1);
      const fx = sx - x0;
      const o = (y * w + x) * dim;
      for (let c = 0; c < dim; c++) {
        const a = grid[(y0 * gw + x0) * dim + c];
        const b = grid[(y0 * gw + x1) * dim + c];
        const cc = grid[(y1 * gw + x0) * dim + c];
        const dd = grid[(y1 * gw + x1) * dim + c];
        out[o + c] =
          a * (1 - fy) * (1 - fx) +
          b * (1 - fy) * fx +
          cc * fy * (1 - fx) +
          dd * fy * fx;
      }
    }
  }
  return out;
}
