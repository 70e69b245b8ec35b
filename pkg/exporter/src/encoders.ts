/**
 * Deterministic stand-in encoders.
 *
 * No pretrained checkpoints ship with this repo, so each model identifier
 * maps to a seeded random-projection featurizer whose weights derive
 * entirely from the pinned name@version string. Re-running an export with
 * the same pin reproduces the bytes exactly; the downstream pipeline never
 * depends on which encoder produced a file, only on the M3FT contract.
 */

export interface ModelCard {
  version: string;
  dim: number;       // embedding width (the model-card dimension)
  patch: number;     // patch size in pixels for the visual route
}

export const MODEL_CARDS: Record<string, ModelCard> = {
  clip: { version: "rp-1", dim: 512, patch: 16 },
  siglip: { version: "rp-1", dim: 768, patch: 16 },
  dinov2: { version: "rp-1", dim: 384, patch: 14 },
  seem: { version: "rp-1", dim: 256, patch: 16 },
  llm: { version: "rp-1", dim: 1024, patch: 16 },
};

export function modelCard(name: string): ModelCard {
  const card = MODEL_CARDS[name];
  if (!card) {
    throw new Error(
      `unknown model ${name!}; known: ${Object.keys(MODEL_CARDS).join(", ")}`,
    );
  }
  return card;
}

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

/** mulberry32: tiny deterministic PRNG over uint32 state. */
function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussians(seed: number, count: number): Float64Array {
  const rand = mulberry32(seed);
  const out = new Float64Array(count);
  for (let i = 0; i < count; i += 2) {
    const u = Math.max(rand(), 1e-12);
    const v = rand();
    const r = Math.sqrt(-2 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < count) {
      out[i + 1] = r * Math.sin(2 * Math.PI * v);
    }
  }
  return out;
}

const PATCH_CELLS = 8; // patches are pooled to 8x8x3 before projection
const PATCH_INPUTS = PATCH_CELLS * PATCH_CELLS * 3;

const projectionCache = new Map<string, Float64Array>();

function projectionMatrix(name: string, card: ModelCard): Float64Array {
  const key = `${name}@${card.version}`;
  let matrix = projectionCache.get(key);
  if (!matrix) {
    matrix = gaussians(fnv1a(key), card.dim * PATCH_INPUTS);
    const scale = 1 / Math.sqrt(PATCH_INPUTS);
    for (let i = 0; i < matrix.length; i++) {
      matrix[i] *= scale;
    }
    projectionCache.set(key, matrix);
  }
  return matrix;
}

function l2normalize(row: Float64Array): void {
  let norm = 0;
  for (let i = 0; i < row.length; i++) {
    norm += row[i] * row[i];
  }
  norm = Math.sqrt(norm) || 1;
  for (let i = 0; i < row.length; i++) {
    row[i] /= norm;
  }
}

/**
 * Embed one patch: average-pool its pixels into an 8x8x3 block, project
 * through the model's pinned matrix, tanh, L2-normalize.
 */
export function encodePatch(
  name: string,
  pixels: Float64Array, // (p*p*3) RGB block
  patchSize: number,
): Float64Array {
  const card = modelCard(name);
  const pooled = new Float64Array(PATCH_INPUTS);
  const counts = new Float64Array(PATCH_CELLS * PATCH_CELLS);
  for (let y = 0; y < patchSize; y++) {
    const cy = Math.min(Math.floor((y * PATCH_CELLS) / patchSize), PATCH_CELLS - 1);
    for (let x = 0; x < patchSize; x++) {
      const cx = Math.min(Math.floor((x * PATCH_CELLS) / patchSize), PATCH_CELLS - 1);
      const cell = cy * PATCH_CELLS + cx;
      counts[cell] += 1;
      for (let c = 0; c < 3; c++) {
        pooled[cell * 3 + c] += pixels[(y * patchSize + x) * 3 + c];
      }
    }
  }
  for (let cell = 0; cell < counts.length; cell++) {
    if (counts[cell] > 0) {
      for (let c = 0; c < 3; c++) {
        pooled[cell * 3 + c] /= counts[cell];
      }
    }
  }
  const matrix = projectionMatrix(name, card);
  const out = new Float64Array(card.dim);
  for (let k = 0; k < card.dim; k++) {
    let acc = 0;
    const base = k * PATCH_INPUTS;
    for (let i = 0; i < PATCH_INPUTS; i++) {
      acc += matrix[base + i] * pooled[i];
    }
    out[k] = Math.tanh(acc);
  }
  l2normalize(out);
  return out;
}

/** Embed a string: average of seeded per-token vectors, L2-normalized. */
export function encodeText(name: string, text: string): Float64Array {
  const card = modelCard(name);
  const tokens = text
    .toLowerCase()
    .split(/[^a-z0-9]+/)
    .filter((t) => t.length > 0);
  const out = new Float64Array(card.dim);
  if (tokens.length === 0) {
    out[0] = 1.0;
    return out;
  }
  for (const token of tokens) {
    const vec = gaussians(fnv1a(`${name}@${card.version}:${token}`), card.dim);
    for (let i = 0; i < card.dim; i++) {
      out[i] += vec[i];
    }
  }
  for (let i = 0; i < card.dim; i++) {
    out[i] /= tokens.length;
  }
  l2normalize(out);
  return out;
}
