/**
 * TIM teacher-interaction-map files: the binary contract with the training
 * side. Little-endian layout: magic "TIM1", u32 version=1, u32 grid height,
 * u32 grid width, u8 provenance, u8 prompt id, 2 reserved bytes, then
 * grid_h*grid_w float32 values that must be non-negative and sum to 1.
 */

export const TIM_MAGIC = "TIM1";
export const TIM_VERSION = 1;
export const HEADER_BYTES = 20;

export const PROVENANCES = ["synthetic", "vlm-probe", "human"] as const;
export const PROMPT_IDS = ["none", "1", "2", "3", "dense"] as const;

export type Provenance = (typeof PROVENANCES)[number];
export type PromptId = (typeof PROMPT_IDS)[number];

export class TimFormatError extends Error {}

export interface TeacherMap {
  gridH: number;
  gridW: number;
  values: Float32Array; // length gridH * gridW, sums to 1
  provenance: Provenance;
  promptId: PromptId;
  degenerate?: boolean; // constructor fell back to the uniform map
}

export function validateMap(map: TeacherMap): void {
  const n = map.gridH * map.gridW;
  if (map.values.length !== n) {
    throw new TimFormatError(
      `expected ${n} values for ${map.gridH}x${map.gridW}, got ${map.values.length}`,
    );
  }
  let sum = 0;
  for (const v of map.values) {
    if (!Number.isFinite(v) || v < 0) {
      throw new TimFormatError(`values must be finite and >= 0, got ${v}`);
    }
    sum += v;
  }
  if (Math.abs(sum - 1) > 1e-3) {
    throw new TimFormatError(`values sum to ${sum}, not 1`);
  }
}

export function encodeTim(map: TeacherMap): Buffer {
  validateMap(map);
  const buf = Buffer.alloc(HEADER_BYTES + 4 * map.values.length);
  buf.write(TIM_MAGIC, 0, "ascii");
  buf.writeUInt32LE(TIM_VERSION, 4);
  buf.writeUInt32LE(map.gridH, 8);
  buf.writeUInt32LE(map.gridW, 12);
  buf.writeUInt8(PROVENANCES.indexOf(map.provenance), 16);
  buf.writeUInt8(PROMPT_IDS.indexOf(map.promptId), 17);
  // bytes 18..19 reserved, already zero
  for (let i = 0; i < map.values.length; i++) {
    buf.writeFloatLE(map.values[i], HEADER_BYTES + 4 * i);
  }
  return buf;
}

export function decodeTim(buf: Buffer, source = "<buffer>"): TeacherMap {
  if (buf.length < HEADER_BYTES) {
    throw new TimFormatError(`${source}: truncated header (${buf.length} bytes)`);
  }
  if (buf.toString("ascii", 0, 4) !== TIM_MAGIC) {
    throw new TimFormatError(`${source}: bad magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== TIM_VERSION) {
    throw new TimFormatError(`${source}: unsupported version ${version}`);
  }
  const gridH = buf.readUInt32LE(8);
  const gridW = buf.readUInt32LE(12);
  const n = gridH * gridW;
  if (buf.length !== HEADER_BYTES + 4 * n) {
    throw new TimFormatError(
      `${source}: expected ${HEADER_BYTES + 4 * n} bytes, got ${buf.length}`,
    );
  }
  const prov = buf.readUInt8(16);
  const prompt = buf.readUInt8(17);
  if (prov >= PROVENANCES.length) {
    throw new TimFormatError(`${source}: unknown provenance code ${prov}`);
  }
  if (prompt >= PROMPT_IDS.length) {
    throw new TimFormatError(`${source}: unknown prompt code ${prompt}`);
  }
  const values = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    values[i] = buf.readFloatLE(HEADER_BYTES + 4 * i);
  }
  const map: TeacherMap = {
    gridH,
    gridW,
    values,
    provenance: PROVENANCES[prov],
    promptId: PROMPT_IDS[prompt],
  };
  validateMap(map);
  return map;
}

/** max(0, fore - back), L1-normalized; uniform fallback when it vanishes. */
export function filteredDifference(
  fore: Float64Array,
  back: Float64Array,
): { values: Float32Array; degenerate: boolean } {
  if (fore.length !== back.length) {
    throw new TimFormatError(`length mismatch: ${fore.length} vs ${back.length}`);
  }
  const d = new Float64Array(fore.length);
  let norm = 0;
  for (let i = 0; i < fore.length; i++) {
    d[i] = Math.max(0, fore[i] - back[i]);
    norm += d[i];
  }
  const out = new Float32Array(fore.length);
  if (norm > 1e-12) {
    for (let i = 0; i < fore.length; i++) out[i] = d[i] / norm;
    return { values: out, degenerate: false };
  }
  out.fill(1 / fore.length);
  return { values: out, degenerate: true };
}

/** Eq for dense prediction: max(0, sum_k obj_k - back), L1-normalized. */
export function filteredInstanceSum(
  objects: Float64Array[],
  back: Float64Array,
): { values: Float32Array; degenerate: boolean } {
  if (objects.length === 0) {
    throw new TimFormatError("need at least one object strength vector");
  }
  const total = new Float64Array(back.length);
  for (const obj of objects) {
    if (obj.length !== back.length) {
      throw new TimFormatError(
        `object length ${obj.length} != background ${back.length}`,
      );
    }
    for (let i = 0; i < obj.length; i++) total[i] += obj[i];
  }
  return filteredDifference(total, back);
}
