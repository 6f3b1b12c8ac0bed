/**
 * Grayscale images as flat byte arrays plus binary PGM (P5) file support,
 * and a deterministic fixture generator: bright geometric shapes over noisy
 * background, with ground-truth boxes for the dense pipeline.
 */

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array; // row-major, length width * height
}

export interface Box {
  x: number; // left, inclusive
  y: number; // top, inclusive
  w: number;
  h: number;
}

export function cloneImage(img: GrayImage): GrayImage {
  return { width: img.width, height: img.height, pixels: new Uint8Array(img.pixels) };
}

export function encodePgm(img: GrayImage): Buffer {
  const header = Buffer.from(`P5\n${img.width} ${img.height}\n255\n`, "ascii");
  return Buffer.concat([header, Buffer.from(img.pixels)]);
}

export function decodePgm(buf: Buffer, source = "<buffer>"): GrayImage {
  const text = buf.toString("latin1");
  if (!text.startsWith("P5")) {
    throw new Error(`${source}: not a binary PGM (P5) file`);
  }
  // header: magic, width, height, maxval, single whitespace, then pixels
  const m = /^P5\s+(\d+)\s+(\d+)\s+(\d+)\s/.exec(text);
  if (!m) throw new Error(`${source}: malformed PGM header`);
  const [, w, h, maxval] = m;
  if (Number(maxval) !== 255) {
    throw new Error(`${source}: only maxval 255 supported`);
  }
  const offset = m[0].length;
  const width = Number(w);
  const height = Number(h);
  if (buf.length !== offset + width * height) {
    throw new Error(`${source}: expected ${width * height} pixel bytes`);
  }
  return { width, height, pixels: new Uint8Array(buf.subarray(offset)) };
}

/** Small deterministic PRNG (mulberry32) so fixtures never depend on Math.random. */
export function rng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function fillNoise(img: GrayImage, rand: () => number, lo: number, hi: number): void {
  for (let i = 0; i < img.pixels.length; i++) {
    img.pixels[i] = Math.round(lo + (hi - lo) * rand());
  }
}

function drawRect(img: GrayImage, box: Box, value: number): void {
  for (let y = box.y; y < box.y + box.h; y++) {
    for (let x = box.x; x < box.x + box.w; x++) {
      img.pixels[y * img.width + x] = value;
    }
  }
}

function drawDisk(img: GrayImage, cx: number, cy: number, r: number, value: number): void {
  for (let y = Math.max(0, cy - r); y <= Math.min(img.height - 1, cy + r); y++) {
    for (let x = Math.max(0, cx - r); x <= Math.min(img.width - 1, cx + r); x++) {
      if ((x - cx) ** 2 + (y - cy) ** 2 <= r * r) {
        img.pixels[y * img.width + x] = value;
      }
    }
  }
}

export interface Fixture {
  id: string;
  image: GrayImage;
  targets: string[];
  boxes: Box[];
  label: string;
}

const SHAPE_NAMES = ["disk", "square"] as const;

/**
 * Deterministic fixture: 64x64 noisy background with one or two bright
 * shapes; each shape gets a ground-truth box with a small margin.
 */
export function makeFixture(index: number, objects: 1 | 2 = 1): Fixture {
  const rand = rng(1000 + index * 7919);
  const img: GrayImage = { width: 64, height: 64, pixels: new Uint8Array(64 * 64) };
  fillNoise(img, rand, 40, 110);
  const boxes: Box[] = [];
  const targets: string[] = [];
  for (let k = 0; k < objects; k++) {
    const shape = SHAPE_NAMES[Math.floor(rand() * SHAPE_NAMES.length)];
    const size = 10 + Math.floor(rand() * 8); // 10..17 px
    const x0 = 4 + Math.floor(rand() * (64 - size - 8 - (k === 1 ? 28 : 0)));
    const y0 = 4 + Math.floor(rand() * (64 - size - 8));
    const x = k === 1 ? Math.min(x0 + 30, 64 - size - 4) : x0;
    if (shape === "square") {
      drawRect(img, { x, y: y0, w: size, h: size }, 230);
    } else {
      const r = Math.floor(size / 2);
      drawDisk(img, x + r, y0 + r, r, 230);
    }
    boxes.push({ x: Math.max(0, x - 2), y: Math.max(0, y0 - 2),
                 w: Math.min(size + 4, 64 - x + 2), h: Math.min(size + 4, 64 - y0 + 2) });
    targets.push(`${shape}${k}`);
  }
  return { id: `fix${String(index).padStart(3, "0")}`, image: img,
           targets, boxes, label: targets[0] };
}
