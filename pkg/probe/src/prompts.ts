/**
 * VQA prompt templates and the structured answers the pipeline parses.
 * The dense template substitutes {tgt_obj} and {background}.
 */

export type PromptKind = "1" | "2" | "3" | "dense";

export interface PromptSpec {
  id: PromptKind;
  template: string;
  vocabulary?: string[]; // prompt 1 chooses the foreground word from this list
  targets?: string[];    // dense: object names
  background?: string;   // dense: contextual attribute
}

export const PROMPT_TEMPLATES: Record<PromptKind, string> = {
  "1":
    "If you are doing an image classification task, what is the foreground " +
    "and what is the background? The answer format is as follows: " +
    "{'foreground':{}, 'background':{}}. Please choose the foreground word " +
    "from the list below:",
  "2":
    "If you are doing an image classification task, What is the object in " +
    "the picture? Answer the question using a single word or phrase.",
  "3": "Please describe the object in the picture in detail.",
  dense:
    "If you are doing an object detection task, please tell me if there " +
    "is/are {tgt_obj} in this image. The answer format is as follows: Yes, " +
    "there is/are {tgt_obj} in the image, and the background is {background}.",
};

export function makePrompt(spec: PromptSpec): string {
  if (spec.id === "dense") {
    if (!spec.targets || spec.targets.length === 0) {
      throw new Error("dense prompt needs at least one target object");
    }
    return PROMPT_TEMPLATES.dense
      .replaceAll("{tgt_obj}", spec.targets.join(", "))
      .replaceAll("{background}", spec.background ?? "background");
  }
  let text = PROMPT_TEMPLATES[spec.id];
  if (spec.id === "1" && spec.vocabulary?.length) {
    text += " " + spec.vocabulary.join(", ");
  }
  return text;
}

export interface ParsedAnswer {
  foreground: string[];
  background: string[];
  perObject?: Map<string, string[]>; // dense: object name -> its tokens
}

const FOREGROUND_RE = /'foreground'\s*:\s*\{([^}]*)\}/;
const BACKGROUND_RE = /'background'\s*:\s*\{([^}]*)\}/;

function splitWords(raw: string): string[] {
  return raw
    .split(/[,\s]+/)
    .map((w) => w.trim().replace(/^'+|'+$/g, ""))
    .filter((w) => w.length > 0);
}

export class AnswerParseError extends Error {}

/** Parse the structured answer for each prompt kind; unparsable answers
 * raise so the record can be flagged and no TIM gets emitted. */
export function parseAnswer(kind: PromptKind, answer: string): ParsedAnswer {
  if (kind === "1") {
    const fg = FOREGROUND_RE.exec(answer);
    const bg = BACKGROUND_RE.exec(answer);
    if (!fg) throw new AnswerParseError("answer missing the 'foreground:' key");
    if (!bg) throw new AnswerParseError("answer missing the 'background:' key");
    const fore = splitWords(fg[1]);
    const back = splitWords(bg[1]);
    if (fore.length === 0) throw new AnswerParseError("empty foreground set");
    return { foreground: fore, background: back };
  }
  if (kind === "2") {
    const words = splitWords(answer.replace(/[.!]/g, ""));
    if (words.length === 0) throw new AnswerParseError("empty answer");
    return { foreground: [words[0]], background: [] };
  }
  if (kind === "3") {
    const words = splitWords(answer.replace(/[.!,;]/g, " "));
    if (words.length === 0) throw new AnswerParseError("empty description");
    return { foreground: words, background: [] };
  }
  // dense: "Yes, there is/are <objs> in the image, and the background is <bg>."
  const m = /there is\/are\s+(.+?)\s+in the image, and the background is\s+(.+?)\.?$/.exec(
    answer,
  );
  if (!m) throw new AnswerParseError("dense answer does not match the template");
  const objects = splitWords(m[1]);
  const back = splitWords(m[2]);
  if (objects.length === 0) throw new AnswerParseError("no objects in answer");
  const perObject = new Map(objects.map((o) => [o, [o]]));
  return { foreground: objects, background: back, perObject };
}

export function isPunctuation(token: string): boolean {
  return /^[^\p{L}\p{N}]+$/u.test(token);
}
