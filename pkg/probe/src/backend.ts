/**
 * VQA backend interface plus a deterministic offline stand-in.
 *
 * A backend answers a prompt about an image and exposes per-token
 * cross-attention from answer tokens to image patches, per decoder layer
 * and head. The shipped backend is synthetic: it grounds attention in a
 * saliency field computed from the image (local contrast and edge
 * density), so drawn box overlays genuinely shift attention, and it
 * decodes greedily from the fixture's known content. A real model server
 * can be slotted in by implementing the same interface.
 */

import type { GrayImage } from "./image.js";
import { rng } from "./image.js";
import { isPunctuation, type PromptKind } from "./prompts.js";

export interface VlmResponse {
  answer: string;
  tokens: string[];
  /** attention[layer][head] is a Float64Array over patches for one token:
   *  indexed crossAttention(layer, head, tokenIndex). */
  crossAttention: (layer: number, head: number, tokenIndex: number) => Float64Array;
  layers: number;
  heads: number;
}

export interface VlmBackend {
  readonly modelId: string;
  readonly patchGrid: number; // patches per side
  ask(image: GrayImage, promptKind: PromptKind, promptText: string,
      context: BackendContext): VlmResponse;
}

export interface BackendContext {
  /** fixture-provided ground truth the synthetic decoder answers with */
  label?: string;
  targets?: string[];
  background?: string;
  vocabulary?: string[];
}

/** Per-patch saliency: within-patch standard deviation plus mean gradient
 * magnitude, both strong around drawn shapes and box outlines. */
export function saliencyField(image: GrayImage, grid: number): Float64Array {
  const ph = Math.floor(image.height / grid);
  const pw = Math.floor(image.width / grid);
  const out = new Float64Array(grid * grid);
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      let sum = 0;
      let sumSq = 0;
      let grad = 0;
      let n = 0;
      for (let y = gy * ph; y < (gy + 1) * ph; y++) {
        for (let x = gx * pw; x < (gx + 1) * pw; x++) {
          const v = image.pixels[y * image.width + x];
          sum += v;
          sumSq += v * v;
          if (x + 1 < image.width) {
            grad += Math.abs(v - image.pixels[y * image.width + x + 1]);
          }
          if (y + 1 < image.height) {
            grad += Math.abs(v - image.pixels[(y + 1) * image.width + x]);
          }
          n++;
        }
      }
      const mean = sum / n;
      const variance = Math.max(0, sumSq / n - mean * mean);
      out[gy * grid + gx] = Math.sqrt(variance) + grad / n;
    }
  }
  return out;
}

function softmax(logits: Float64Array): Float64Array {
  let max = -Infinity;
  for (const v of logits) max = Math.max(max, v);
  const out = new Float64Array(logits.length);
  let sum = 0;
  for (let i = 0; i < logits.length; i++) {
    out[i] = Math.exp(logits[i] - max);
    sum += out[i];
  }
  for (let i = 0; i < out.length; i++) out[i] /= sum;
  return out;
}

function hashString(s: string): number {
  let h = 2166136261 >>> 0;
  for (let i = 0; i < s.length; i++) {
    h ^= s.charCodeAt(i);
    h = Math.imul(h, 16777619) >>> 0;
  }
  return h;
}

/** Greedy saliency peaks with a two-patch suppression radius, returned in
 * left-to-right order so they line up with reading order of the targets. */
export function saliencyPeaks(field: Float64Array, grid: number,
                              count: number): Array<[number, number]> {
  const work = Float64Array.from(field);
  const peaks: Array<[number, number]> = [];
  for (let k = 0; k < count; k++) {
    let best = -Infinity;
    let at = 0;
    for (let i = 0; i < work.length; i++) {
      if (work[i] > best) {
        best = work[i];
        at = i;
      }
    }
    const py = Math.floor(at / grid);
    const px = at % grid;
    peaks.push([py, px]);
    for (let y = Math.max(0, py - 2); y <= Math.min(grid - 1, py + 2); y++) {
      for (let x = Math.max(0, px - 2); x <= Math.min(grid - 1, px + 2); x++) {
        work[y * grid + x] = -Infinity;
      }
    }
  }
  peaks.sort((a, b) => a[1] - b[1]);
  return peaks;
}

export interface SaliencyBackendOptions {
  patchGrid?: number;
  layers?: number;
  heads?: number;
  sharpness?: number; // saliency -> logit scale
  jitter?: number;    // per-(token, layer, head) perturbation scale
}

/**
 * Deterministic stand-in: attention over patches follows the image's
 * saliency field, sharper for content words, inverted for background
 * words, and noisy-unfocused for punctuation (mirroring how punctuation
 * tokens light up on irrelevant patches in real decoders).
 */
export class DeterministicSaliencyBackend implements VlmBackend {
  readonly modelId: string;
  readonly patchGrid: number;
  readonly layers: number;
  readonly heads: number;
  private readonly sharpness: number;
  private readonly jitter: number;

  constructor(opts: SaliencyBackendOptions = {}) {
    this.patchGrid = opts.patchGrid ?? 8;
    this.layers = opts.layers ?? 8;
    this.heads = opts.heads ?? 4;
    this.sharpness = opts.sharpness ?? 0.12;
    this.jitter = opts.jitter ?? 0.35;
    this.modelId = `saliency-sim/grid${this.patchGrid}-L${this.layers}H${this.heads}`;
  }

  private compose(kind: PromptKind, ctx: BackendContext): string {
    const label = ctx.label ?? "object";
    const background = ctx.background ?? "texture";
    switch (kind) {
      case "1": {
        const word = ctx.vocabulary?.includes(label)
          ? label
          : (ctx.vocabulary?.[0] ?? label);
        return `{'foreground':{'${word}'}, 'background':{'${background}', 'noise'}}`;
      }
      case "2":
        return `${label}.`;
      case "3":
        return `A bright ${label} , on a ${background} field .`;
      case "dense": {
        const objs = (ctx.targets ?? [label]).join(", ");
        return `Yes, there is/are ${objs} in the image, and the background is ${background}.`;
      }
    }
  }

  ask(image: GrayImage, promptKind: PromptKind, promptText: string,
      ctx: BackendContext): VlmResponse {
    const answer = this.compose(promptKind, ctx);
    const tokens = answer
      .split(/\s+/)
      .flatMap((w) => w.split(/([{}(),.:'"])/))
      .filter((t) => t.length > 0);
    const saliency = saliencyField(image, this.patchGrid);
    // normalize saliency to zero mean so inversion is symmetric
    const mean = saliency.reduce((a, b) => a + b, 0) / saliency.length;
    const centered = Float64Array.from(saliency, (v) => v - mean);
    const promptSeed = hashString(promptText) ^ hashString(this.modelId);

    // Object words in a dense answer ground onto "their" saliency peak in
    // reading order, the way noun tokens bind to instances.
    const targetList = ctx.targets ?? [];
    const peaks = promptKind === "dense" && targetList.length > 0
      ? saliencyPeaks(saliency, this.patchGrid, targetList.length)
      : [];
    const peakFor = new Map<string, [number, number]>();
    targetList.forEach((t, k) => {
      if (k < peaks.length) peakFor.set(t.toLowerCase(), peaks[k]);
    });

    const attention = (layer: number, head: number, tokenIndex: number) => {
      const token = tokens[tokenIndex];
      const seed = (promptSeed ^ hashString(token)
        ^ Math.imul(layer + 1, 2654435761)
        ^ Math.imul(head + 1, 40503)
        ^ Math.imul(tokenIndex + 1, 97)) >>> 0;
      const rand = rng(seed);
      const logits = new Float64Array(centered.length);
      const punct = isPunctuation(token);
      // background words look away from salient content; later layers focus
      // harder; punctuation is dominated by its jitter term.
      const backgroundish = token === (ctx.background ?? "texture")
        || token === "noise" || token === "field" || token === "on"
        || token === "a" || token === "A";
      const depth = 0.5 + layer / Math.max(1, this.layers - 1);
      let scale = this.sharpness * depth;
      if (punct) scale *= 0.05;
      if (backgroundish) scale = -scale;
      const peak = peakFor.get(token.replace(/^'+|'+$/g, "").toLowerCase());
      for (let i = 0; i < logits.length; i++) {
        logits[i] = scale * centered[i]
          + this.jitter * (punct ? 4 : 1) * (rand() - 0.5);
        if (peak && !punct) {
          const dy = Math.floor(i / this.patchGrid) - peak[0];
          const dx = (i % this.patchGrid) - peak[1];
          logits[i] += 3.0 * depth * Math.exp(-(dx * dx + dy * dy) / 3.0);
        }
      }
      return softmax(logits);
    };
    return { answer, tokens, crossAttention: attention,
             layers: this.layers, heads: this.heads };
  }
}
