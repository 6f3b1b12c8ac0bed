/**
 * Extraction pipeline: run a VQA prompt, group answer tokens, aggregate
 * their cross-attention into per-group patch strengths, apply the
 * non-negative competition filter, and emit a teacher map plus a
 * provenance record.
 */

import type { VlmBackend, BackendContext } from "./backend.js";
import type { Box, GrayImage } from "./image.js";
import { overlayBoxes, type OverlayStyle, DEFAULT_STYLE } from "./overlay.js";
import {
  AnswerParseError,
  isPunctuation,
  makePrompt,
  parseAnswer,
  type PromptKind,
  type PromptSpec,
} from "./prompts.js";
import {
  filteredDifference,
  filteredInstanceSum,
  type PromptId,
  type TeacherMap,
} from "./tim.js";

export interface AggregationConfig {
  /** fraction of trailing decoder layers to average over (default last 1/4) */
  layerFraction: number;
  excludePunctuation: boolean;
}

export const DEFAULT_AGGREGATION: AggregationConfig = {
  layerFraction: 0.25,
  excludePunctuation: true,
};

export interface ExtractionRecord {
  imageId: string;
  promptId: PromptKind;
  prompt: string;
  answer: string;
  modelId: string;
  aggregation: AggregationConfig;
  boxed: boolean;
  foreground: Float64Array;
  background: Float64Array;
  perObject: Map<string, Float64Array>;
  map: TeacherMap;
  degenerate: boolean;
}

/** Mean cross-attention over the trailing decoder layers, all heads, for
 * one group of answer token indices. */
function groupStrength(
  resp: { crossAttention: (l: number, h: number, t: number) => Float64Array;
          layers: number; heads: number },
  tokenIndices: number[],
  patches: number,
  cfg: AggregationConfig,
): Float64Array {
  const out = new Float64Array(patches);
  if (tokenIndices.length === 0) return out;
  const firstLayer = Math.min(
    resp.layers - 1,
    Math.floor(resp.layers * (1 - cfg.layerFraction)),
  );
  let count = 0;
  for (let layer = firstLayer; layer < resp.layers; layer++) {
    for (let head = 0; head < resp.heads; head++) {
      for (const t of tokenIndices) {
        const att = resp.crossAttention(layer, head, t);
        for (let i = 0; i < patches; i++) out[i] += att[i];
        count++;
      }
    }
  }
  for (let i = 0; i < patches; i++) out[i] /= count;
  return out;
}

function tokenIndicesFor(
  words: string[],
  tokens: string[],
  cfg: AggregationConfig,
): number[] {
  const wanted = new Set(words.map((w) => w.toLowerCase()));
  const picked: number[] = [];
  tokens.forEach((tok, i) => {
    if (cfg.excludePunctuation && isPunctuation(tok)) return;
    const clean = tok.replace(/^'+|'+$/g, "").toLowerCase();
    if (wanted.has(clean)) picked.push(i);
  });
  return picked;
}

/** Mean over the group's strength vectors (multiple background words are
 * averaged, not summed). */
function meanStrength(parts: Float64Array[], patches: number): Float64Array {
  const out = new Float64Array(patches);
  if (parts.length === 0) return out;
  for (const p of parts) for (let i = 0; i < patches; i++) out[i] += p[i];
  for (let i = 0; i < patches; i++) out[i] /= parts.length;
  return out;
}

export function extractClassification(
  backend: VlmBackend,
  imageId: string,
  image: GrayImage,
  spec: PromptSpec,
  ctx: BackendContext = {},
  aggregation: AggregationConfig = DEFAULT_AGGREGATION,
): ExtractionRecord {
  if (spec.id === "dense") {
    throw new Error("use extractDense for the dense prompt");
  }
  const prompt = makePrompt(spec);
  const resp = backend.ask(image, spec.id, prompt, { ...ctx,
    vocabulary: spec.vocabulary });
  const parsed = parseAnswer(spec.id, resp.answer); // throws -> record flagged
  const patches = backend.patchGrid * backend.patchGrid;

  const foreGroups = parsed.foreground.map((w) =>
    groupStrength(resp, tokenIndicesFor([w], resp.tokens, aggregation),
                  patches, aggregation));
  const fore = meanStrength(foreGroups, patches);
  const backGroups = parsed.background.map((w) =>
    groupStrength(resp, tokenIndicesFor([w], resp.tokens, aggregation),
                  patches, aggregation));
  const back = meanStrength(backGroups, patches);

  // Prompt 1 contrasts foreground and background; prompts 2 and 3 use the
  // answer tokens' strengths directly (single token, or description mean).
  const { values, degenerate } = spec.id === "1"
    ? filteredDifference(fore, back)
    : filteredDifference(fore, new Float64Array(patches));

  const map: TeacherMap = {
    gridH: backend.patchGrid,
    gridW: backend.patchGrid,
    values,
    provenance: "vlm-probe",
    promptId: spec.id as PromptId,
    degenerate,
  };
  return {
    imageId, promptId: spec.id, prompt, answer: resp.answer,
    modelId: backend.modelId, aggregation, boxed: false,
    foreground: fore, background: back, perObject: new Map(),
    map, degenerate,
  };
}

export function extractDense(
  backend: VlmBackend,
  imageId: string,
  image: GrayImage,
  targets: string[],
  boxes: Box[],
  ctx: BackendContext = {},
  aggregation: AggregationConfig = DEFAULT_AGGREGATION,
  style: OverlayStyle = DEFAULT_STYLE,
  useBoxes = true,
): ExtractionRecord {
  if (targets.length === 0) {
    throw new Error("dense extraction needs at least one target object");
  }
  const prompted = useBoxes && boxes.length > 0
    ? overlayBoxes(image, boxes, style)
    : image;
  const spec: PromptSpec = { id: "dense", template: "", targets,
                             background: ctx.background };
  const prompt = makePrompt(spec);
  const resp = backend.ask(prompted, "dense", prompt, { ...ctx, targets });
  const parsed = parseAnswer("dense", resp.answer);
  const patches = backend.patchGrid * backend.patchGrid;

  const perObject = new Map<string, Float64Array>();
  for (const obj of parsed.foreground) {
    perObject.set(obj, groupStrength(
      resp, tokenIndicesFor([obj], resp.tokens, aggregation),
      patches, aggregation));
  }
  const backGroups = parsed.background.map((w) =>
    groupStrength(resp, tokenIndicesFor([w], resp.tokens, aggregation),
                  patches, aggregation));
  const back = meanStrength(backGroups, patches);

  const { values, degenerate } = filteredInstanceSum(
    [...perObject.values()], back);
  const map: TeacherMap = {
    gridH: backend.patchGrid, gridW: backend.patchGrid, values,
    provenance: "vlm-probe", promptId: "dense", degenerate,
  };
  return {
    imageId, promptId: "dense", prompt, answer: resp.answer,
    modelId: backend.modelId, aggregation, boxed: useBoxes && boxes.length > 0,
    foreground: meanStrength([...perObject.values()], patches),
    background: back, perObject, map, degenerate,
  };
}

export function sidecarText(rec: ExtractionRecord): string {
  const lines = [
    `image = ${rec.imageId}`,
    `prompt_id = ${rec.promptId}`,
    `model = ${rec.modelId}`,
    `layer_fraction = ${rec.aggregation.layerFraction}`,
    `exclude_punctuation = ${rec.aggregation.excludePunctuation ? 1 : 0}`,
    `background_aggregation = mean`,
    `boxed = ${rec.boxed ? 1 : 0}`,
    `degenerate = ${rec.degenerate ? 1 : 0}`,
    `answer = ${rec.answer}`,
  ];
  return lines.join("\n") + "\n";
}

export { AnswerParseError };
