/**
 * Probe runner: read a manifest of images, run the configured prompt
 * against the backend, and write TIM files plus sidecar metadata.
 *
 * Manifest: one line per image: `<id> <file> <label> [target@x,y,w,h ...]`.
 * Exit codes: 0 success, 1 usage error, 2 validation/format error,
 * 3 runtime failure.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { DeterministicSaliencyBackend } from "./backend.js";
import { decodePgm, type Box } from "./image.js";
import {
  extractClassification,
  extractDense,
  sidecarText,
  AnswerParseError,
} from "./extract.js";
import type { PromptKind } from "./prompts.js";
import { encodeTim, TimFormatError } from "./tim.js";

interface ManifestRow {
  id: string;
  file: string;
  label: string;
  targets: string[];
  boxes: Box[];
}

export function parseManifest(text: string, source = "<manifest>"): ManifestRow[] {
  const rows: ManifestRow[] = [];
  text.split("\n").forEach((line, i) => {
    const trimmed = line.trim();
    if (!trimmed || trimmed.startsWith("#")) return;
    const parts = trimmed.split(/\s+/);
    if (parts.length < 3) {
      throw new TimFormatError(`${source}:${i + 1}: expected 'id file label ...'`);
    }
    const [id, file, label, ...rest] = parts;
    const targets: string[] = [];
    const boxes: Box[] = [];
    for (const spec of rest) {
      const m = /^(.+)@(\d+),(\d+),(\d+),(\d+)$/.exec(spec);
      if (!m) {
        throw new TimFormatError(`${source}:${i + 1}: bad target spec '${spec}'`);
      }
      targets.push(m[1]);
      boxes.push({ x: +m[2], y: +m[3], w: +m[4], h: +m[5] });
    }
    rows.push({ id, file, label, targets, boxes });
  });
  return rows;
}

function usage(): string {
  return (
    "usage: extract --manifest FILE --images DIR --out DIR " +
    "[--prompt 1|2|3|dense] [--no-boxes] [--grid N]"
  );
}

export function main(argv: string[]): number {
  const args = new Map<string, string | boolean>();
  const positional: string[] = [];
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (a.startsWith("--")) {
      const key = a.slice(2);
      if (key === "no-boxes") args.set(key, true);
      else args.set(key, argv[++i] ?? "");
    } else positional.push(a);
  }
  try {
    if (positional[0] !== "extract") {
      console.error(`unknown command; ${usage()}`);
      return 1;
    }
    for (const req of ["manifest", "images", "out"]) {
      if (!args.has(req)) {
        console.error(`missing --${req}; ${usage()}`);
        return 1;
      }
    }
    const promptId = String(args.get("prompt") ?? "1") as PromptKind;
    if (!["1", "2", "3", "dense"].includes(promptId)) {
      console.error(`bad --prompt ${promptId}; ${usage()}`);
      return 1;
    }
    const manifestPath = String(args.get("manifest"));
    if (!fs.existsSync(manifestPath)) {
      console.error(`manifest not found: ${manifestPath}`);
      return 1;
    }
    const rows = parseManifest(fs.readFileSync(manifestPath, "utf8"), manifestPath);
    const imagesDir = String(args.get("images"));
    const outDir = String(args.get("out"));
    fs.mkdirSync(outDir, { recursive: true });
    const backend = new DeterministicSaliencyBackend({
      patchGrid: Number(args.get("grid") ?? 8),
    });
    const vocabulary = [...new Set(rows.map((r) => r.label))];

    let written = 0;
    let flagged = 0;
    for (const row of rows) {
      const imgPath = path.join(imagesDir, row.file);
      const image = decodePgm(fs.readFileSync(imgPath), imgPath);
      try {
        const rec = promptId === "dense"
          ? extractDense(backend, row.id, image, row.targets, row.boxes,
                         { label: row.label },
                         undefined, undefined, !args.get("no-boxes"))
          : extractClassification(backend, row.id, image,
                                  { id: promptId, template: "", vocabulary },
                                  { label: row.label });
        fs.writeFileSync(path.join(outDir, `${row.id}.tim`), encodeTim(rec.map));
        fs.writeFileSync(path.join(outDir, `${row.id}.meta.txt`), sidecarText(rec));
        written++;
      } catch (err) {
        if (err instanceof AnswerParseError) {
          fs.writeFileSync(path.join(outDir, `${row.id}.flagged.txt`),
                           `unparsable answer: ${err.message}\n`);
          flagged++;
          continue;
        }
        throw err;
      }
    }
    console.log(`wrote ${written} teacher maps to ${outDir}` +
                (flagged ? `; flagged ${flagged}` : ""));
    return flagged > 0 ? 2 : 0;
  } catch (err) {
    if (err instanceof TimFormatError) {
      console.error(`validation error: ${(err as Error).message}`);
      return 2;
    }
    console.error(`runtime failure: ${(err as Error).message}`);
    return 3;
  }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
