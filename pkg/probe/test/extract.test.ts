import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { beforeAll, describe, expect, it } from "vitest";

import { DeterministicSaliencyBackend } from "../src/backend.js";
import { makeFixture, encodePgm, type Fixture } from "../src/image.js";
import { massInBoxes } from "../src/overlay.js";
import {
  extractClassification,
  extractDense,
  sidecarText,
} from "../src/extract.js";
import { parseAnswer, AnswerParseError } from "../src/prompts.js";
import { decodeTim, encodeTim } from "../src/tim.js";
import { main as cliMain, parseManifest } from "../src/cli.js";

const backend = new DeterministicSaliencyBackend();
const FIXTURES: Fixture[] = [];

beforeAll(() => {
  for (let i = 0; i < 10; i++) FIXTURES.push(makeFixture(i, i % 2 === 0 ? 1 : 2));
});

function primaryValidates(timPath: string): boolean {
  // The training side's CLI rejects invalid TIM files with exit code 2;
  // visualize doubles as a validator through the shared read path.
  const out = path.join(os.tmpdir(), `probe-check-${path.basename(timPath)}.pgm`);
  try {
    execFileSync("python3", ["-m", "ivit.cli", "visualize",
                             "--tim", timPath, "--out", out],
                 { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

describe("classification extraction", () => {
  it("emits maps that satisfy the interchange invariants", () => {
    for (const fix of FIXTURES) {
      const rec = extractClassification(backend, fix.id, fix.image,
        { id: "1", template: "", vocabulary: ["disk0", "square0"] },
        { label: fix.label });
      let sum = 0;
      for (const v of rec.map.values) {
        expect(v).toBeGreaterThanOrEqual(0);
        sum += v;
      }
      expect(sum).toBeCloseTo(1, 4);
    }
  });

  it("every fixture TIM passes the training side's validation", { timeout: 120_000 }, () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "probe-tims-"));
    let passed = 0;
    for (const fix of FIXTURES) {
      const rec = extractClassification(backend, fix.id, fix.image,
        { id: "1", template: "" }, { label: fix.label });
      const p = path.join(dir, `${fix.id}.tim`);
      fs.writeFileSync(p, encodeTim(rec.map));
      if (primaryValidates(p)) passed++;
    }
    expect(passed).toBe(FIXTURES.length);
  });

  it("is deterministic for a fixed image and prompt", () => {
    const fix = FIXTURES[0];
    const run = () => encodeTim(extractClassification(backend, fix.id, fix.image,
      { id: "1", template: "" }, { label: fix.label }).map);
    expect(Buffer.compare(run(), run())).toBe(0);
  });

  it("prompt variants carry their id into the map", () => {
    const fix = FIXTURES[1];
    for (const id of ["1", "2", "3"] as const) {
      const rec = extractClassification(backend, fix.id, fix.image,
        { id, template: "" }, { label: fix.label });
      expect(rec.map.promptId).toBe(id);
    }
  });

  it("flags answers missing the foreground key", () => {
    expect(() => parseAnswer("1", "{'background':{'grass'}}"))
      .toThrow(AnswerParseError);
    expect(() => parseAnswer("1", "{'background':{'grass'}}"))
      .toThrow(/foreground/);
  });
});

describe("dense extraction and visual prompting", () => {
  it("single object reduces to the classification-style pipeline", () => {
    const fix = FIXTURES[0];
    const rec = extractDense(backend, fix.id, fix.image, [fix.targets[0]],
                             fix.boxes, { label: fix.label });
    expect(rec.perObject.size).toBe(1);
    expect(rec.map.promptId).toBe("dense");
  });

  it("two-object fixtures spread mass across both box regions", () => {
    const fix = FIXTURES[1]; // two objects
    const rec = extractDense(backend, fix.id, fix.image, fix.targets,
                             fix.boxes, { label: fix.label });
    for (const box of fix.boxes) {
      const mass = massInBoxes(rec.map.values, backend.patchGrid, 64, [box]);
      const area = (box.w * box.h) / (64 * 64);
      expect(mass).toBeGreaterThan(area * 0.9);
    }
  });

  it("empty target list is a usage error", () => {
    const fix = FIXTURES[0];
    expect(() => extractDense(backend, fix.id, fix.image, [], []))
      .toThrow(/target/);
  });

  it("boxes raise in-box teacher mass on at least 8 of 10 fixtures", () => {
    let improved = 0;
    for (const fix of FIXTURES) {
      const boxed = extractDense(backend, fix.id, fix.image, fix.targets,
                                 fix.boxes, { label: fix.label },
                                 undefined, undefined, true);
      const plain = extractDense(backend, fix.id, fix.image, fix.targets,
                                 fix.boxes, { label: fix.label },
                                 undefined, undefined, false);
      const massBoxed = massInBoxes(boxed.map.values, backend.patchGrid, 64,
                                    fix.boxes);
      const massPlain = massInBoxes(plain.map.values, backend.patchGrid, 64,
                                    fix.boxes);
      if (massBoxed >= massPlain) improved++;
    }
    expect(improved).toBeGreaterThanOrEqual(8);
  });
});

describe("sidecar metadata", () => {
  it("records model, prompt, and aggregation settings", () => {
    const fix = FIXTURES[2];
    const rec = extractClassification(backend, fix.id, fix.image,
      { id: "1", template: "" }, { label: fix.label });
    const text = sidecarText(rec);
    expect(text).toContain("model = saliency-sim");
    expect(text).toContain("prompt_id = 1");
    expect(text).toContain("layer_fraction = 0.25");
    expect(text).toContain("background_aggregation = mean");
  });
});

describe("cli", () => {
  it("extracts a manifest end to end", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "probe-cli-"));
    const imagesDir = path.join(dir, "images");
    fs.mkdirSync(imagesDir);
    const lines: string[] = [];
    for (const fix of FIXTURES.slice(0, 4)) {
      fs.writeFileSync(path.join(imagesDir, `${fix.id}.pgm`),
                       encodePgm(fix.image));
      const targets = fix.targets
        .map((t, k) => `${t}@${fix.boxes[k].x},${fix.boxes[k].y},` +
                       `${fix.boxes[k].w},${fix.boxes[k].h}`)
        .join(" ");
      lines.push(`${fix.id} ${fix.id}.pgm ${fix.label} ${targets}`);
    }
    const manifest = path.join(dir, "manifest.txt");
    fs.writeFileSync(manifest, lines.join("\n") + "\n");
    const out = path.join(dir, "out");
    const rc = cliMain(["extract", "--manifest", manifest,
                        "--images", imagesDir, "--out", out,
                        "--prompt", "dense"]);
    expect(rc).toBe(0);
    for (const fix of FIXTURES.slice(0, 4)) {
      const tim = decodeTim(fs.readFileSync(path.join(out, `${fix.id}.tim`)));
      expect(tim.promptId).toBe("dense");
      expect(fs.existsSync(path.join(out, `${fix.id}.meta.txt`))).toBe(true);
    }
  });

  it("reports usage errors", () => {
    expect(cliMain(["extract"])).toBe(1);
    expect(cliMain(["nonsense"])).toBe(1);
  });

  it("rejects malformed manifests", () => {
    expect(() => parseManifest("only two\n")).toThrow(/expected/);
    expect(() => parseManifest("a b c bad@spec\n")).toThrow(/target spec/);
  });
});
