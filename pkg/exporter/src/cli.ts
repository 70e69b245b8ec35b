/**
 * Exporter command line.
 *
 *   node dist/cli.js patches --model clip --images DIR --out F.m3ft --height H --width W
 *   node dist/cli.js regions --model seem --masks a.png,b.png --embeddings E.json --out F.m3ft
 *   node dist/cli.js text    --model clip --strings S.txt --out F.m3ft
 *
 * The regions embeddings file is a JSON array of number arrays (one row per
 * mask); the text strings file holds one prompt per line.
 */

import * as fs from "fs";
import {
  exportPatchFeatures,
  exportRegionFeatures,
  exportTextEmbeddings,
} from "./exporter";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near ${key}`);
    }
    out.set(key.slice(2), argv[i + 1]);
  }
  return out;
}

function need(args: Map<string, string>, key: string): string {
  const value = args.get(key);
  if (value === undefined) {
    throw new Error(`missing --${key}`);
  }
  return value;
}

function main(): number {
  const [command, ...rest] = process.argv.slice(2);
  const args = parseArgs(rest);
  if (command === "patches") {
    const manifest = exportPatchFeatures({
      model: need(args, "model"),
      imageDir: need(args, "images"),
      outPath: need(args, "out"),
      height: parseInt(need(args, "height"), 10),
      width: parseInt(need(args, "width"), 10),
    });
    console.log(
      `patches: ${manifest.views} views, grid ${manifest.originalGrid.join("x")}` +
        ` -> ${manifest.target.join("x")}, d=${manifest.dim}`,
    );
    return 0;
  }
  if (command === "regions") {
    const masks = need(args, "masks").split(",");
    const rows = JSON.parse(
      fs.readFileSync(need(args, "embeddings"), "utf-8"),
    ) as number[][];
    exportRegionFeatures(
      need(args, "model"),
      masks,
      rows.map((r) => Float64Array.from(r)),
      need(args, "out"),
    );
    console.log(`regions: ${masks.length} masks, d=${rows[0]?.length ?? 0}`);
    return 0;
  }
  if (command === "text") {
    const lines = fs
      .readFileSync(need(args, "strings"), "utf-8")
      .split("\n")
      .filter((l) => l.trim().length > 0);
    exportTextEmbeddings(need(args, "model"), lines, need(args, "out"));
    console.log(`text: ${lines.length} strings`);
    return 0;
  }
  throw new Error(`unknown command ${command ?? "(none)"}; use patches|regions|text`);
}

try {
  process.exit(main());
} catch (err) {
  console.error(`error: ${err instanceof Error ? err.message : err}`);
  process.exit(2);
}
