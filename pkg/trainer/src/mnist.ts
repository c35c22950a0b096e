/**
 * MNIST loading.
 *
 * The `mnist-data` package is used purely as a carrier for the four
 * original idx files; parsing happens here so the byte layout is
 * validated rather than trusted.
 */

import { readFileSync } from "node:fs";
import { createRequire } from "node:module";
import { dirname, join } from "node:path";

import { DataFormatError } from "./errors.js";

const IMAGES_MAGIC = 2051;
const LABELS_MAGIC = 2049;

export interface ImageSet {
  count: number;
  rows: number;
  cols: number;
  /** count * rows * cols bytes, row-major per image. */
  pixels: Uint8Array;
}

export interface MnistData {
  train: ImageSet;
  trainLabels: Uint8Array;
  test: ImageSet;
  testLabels: Uint8Array;
}

function dataDir(): string {
  const require = createRequire(import.meta.url);
  const pkg = require.resolve("mnist-data/package.json");
  return join(dirname(pkg), "data");
}

export function readIdxImages(path: string): ImageSet {
  const buf = readFileSync(path);
  if (buf.length < 16) {
    throw new DataFormatError(`${path}: truncated idx header`);
  }
  const magic = buf.readUInt32BE(0);
  if (magic !== IMAGES_MAGIC) {
    throw new DataFormatError(`${path}: bad magic ${magic}, expected ${IMAGES_MAGIC}`);
  }
  const count = buf.readUInt32BE(4);
  const rows = buf.readUInt32BE(8);
  const cols = buf.readUInt32BE(12);
  const expected = 16 + count * rows * cols;
  if (buf.length !== expected) {
    throw new DataFormatError(`${path}: ${buf.length} bytes, expected ${expected}`);
  }
  return { count, rows, cols, pixels: new Uint8Array(buf.buffer, buf.byteOffset + 16, count * rows * cols) };
}

export function readIdxLabels(path: string): Uint8Array {
  const buf = readFileSync(path);
  if (buf.length < 8) {
    throw new DataFormatError(`${path}: truncated idx header`);
  }
  const magic = buf.readUInt32BE(0);
  if (magic !== LABELS_MAGIC) {
    throw new DataFormatError(`${path}: bad magic ${magic}, expected ${LABELS_MAGIC}`);
  }
  const count = buf.readUInt32BE(4);
  if (buf.length !== 8 + count) {
    throw new DataFormatError(`${path}: ${buf.length} bytes, expected ${8 + count}`);
  }
  const labels = new Uint8Array(buf.buffer, buf.byteOffset + 8, count);
  for (let i = 0; i < labels.length; i++) {
    if (labels[i] > 9) throw new DataFormatError(`${path}: label ${labels[i]} at index ${i}`);
  }
  return labels;
}

export function loadMnist(): MnistData {
  const dir = dataDir();
  const train = readIdxImages(join(dir, "train-images-idx3-ubyte"));
  const trainLabels = readIdxLabels(join(dir, "train-labels-idx1-ubyte"));
  const test = readIdxImages(join(dir, "t10k-images-idx3-ubyte"));
  const testLabels = readIdxLabels(join(dir, "t10k-labels-idx1-ubyte"));
  if (train.count !== trainLabels.length || test.count !== testLabels.length) {
    throw new DataFormatError("image/label counts do not match");
  }
  return { train, trainLabels, test, testLabels };
}

// Standard MNIST channel statistics, applied after scaling to [0, 1].
export const PIXEL_MEAN = 0.1307;
export const PIXEL_STD = 0.3081;

/**
 * Pack selected images as model inputs: normalized grayscale replicated
 * to three channels, laid out (batch, 3, rows, cols) flat.
 */
export function toModelInputs(set: ImageSet, indices: ArrayLike<number>): Float64Array {
  const hw = set.rows * set.cols;
  const out = new Float64Array(indices.length * 3 * hw);
  for (let b = 0; b < indices.length; b++) {
    const src = indices[b] * hw;
    const dst = b * 3 * hw;
    for (let p = 0; p < hw; p++) {
      const v = (set.pixels[src + p] / 255 - PIXEL_MEAN) / PIXEL_STD;
      out[dst + p] = v;
      out[dst + hw + p] = v;
      out[dst + 2 * hw + p] = v;
    }
  }
  return out;
}
