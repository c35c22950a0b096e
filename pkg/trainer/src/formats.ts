/**
 * Engine file formats.
 *
 * Weights ("XMW1"): magic, u16 version, six u32 architecture fields,
 * u32 tensor count, then per tensor in sorted name order: u16 name
 * length, utf-8 name, u8 rank, u64 dims, u8 dtype tag (0 = float32),
 * raw little-endian data.
 *
 * Reference vectors ("XMV1"): magic, u16 version, u32 count, u32
 * image elements, u32 logit elements, then count records of image
 * floats followed by logit floats.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { ModelArch, archTuple, expectedShapes, numel, validateArch } from "./arch.js";
import { FileFormatError } from "./errors.js";

export const WEIGHTS_MAGIC = "XMW1";
export const VECTORS_MAGIC = "XMV1";
export const FORMAT_VERSION = 1;
const DTYPE_F32 = 0;

function writeF32(view: DataView, offset: number, data: Float32Array): number {
  for (let i = 0; i < data.length; i++) {
    view.setFloat32(offset + 4 * i, data[i], true);
  }
  return offset + 4 * data.length;
}

function readF32(view: DataView, offset: number, count: number): Float32Array {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = view.getFloat32(offset + 4 * i, true);
  return out;
}

export function serializeWeights(arch: ModelArch, tensors: Map<string, Float32Array>): Buffer {
  validateArch(arch);
  const shapes = expectedShapes(arch);
  for (const name of tensors.keys()) {
    if (!shapes.has(name)) throw new FileFormatError(`unexpected tensor ${name}`);
  }
  const names = [...shapes.keys()].sort();
  let size = 4 + 2 + 24 + 4;
  const enc = new TextEncoder();
  const encoded = new Map<string, Uint8Array>();
  for (const name of names) {
    const dims = shapes.get(name)!;
    const bytes = enc.encode(name);
    encoded.set(name, bytes);
    size += 2 + bytes.length + 1 + 8 * dims.length + 1 + 4 * numel(dims);
  }
  const buf = Buffer.alloc(size);
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  let off = 0;
  buf.write(WEIGHTS_MAGIC, off, "ascii");
  off += 4;
  view.setUint16(off, FORMAT_VERSION, true);
  off += 2;
  for (const field of archTuple(arch)) {
    view.setUint32(off, field, true);
    off += 4;
  }
  view.setUint32(off, names.length, true);
  off += 4;
  for (const name of names) {
    const dims = shapes.get(name)!;
    const data = tensors.get(name);
    if (data === undefined) throw new FileFormatError(`missing tensor ${name}`);
    if (data.length !== numel(dims)) {
      throw new FileFormatError(`tensor ${name} has ${data.length} elements, expected ${numel(dims)}`);
    }
    const nameBytes = encoded.get(name)!;
    view.setUint16(off, nameBytes.length, true);
    off += 2;
    buf.set(nameBytes, off);
    off += nameBytes.length;
    view.setUint8(off, dims.length);
    off += 1;
    for (const dim of dims) {
      view.setBigUint64(off, BigInt(dim), true);
      off += 8;
    }
    view.setUint8(off, DTYPE_F32);
    off += 1;
    off = writeF32(view, off, data);
  }
  if (off !== size) throw new FileFormatError(`serializer desync: ${off} != ${size}`);
  return buf;
}

export function writeWeights(path: string, arch: ModelArch, tensors: Map<string, Float32Array>): void {
  writeFileSync(path, serializeWeights(arch, tensors));
}

export interface LoadedWeights {
  arch: ModelArch;
  tensors: Map<string, Float32Array>;
}

export function parseWeights(buf: Buffer): LoadedWeights {
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  const need = (off: number, count: number, what: string) => {
    if (off + count > buf.length) throw new FileFormatError(`truncated file while reading ${what}`);
  };
  need(0, 4, "magic");
  const magic = buf.toString("ascii", 0, 4);
  if (magic !== WEIGHTS_MAGIC) {
    throw new FileFormatError(`bad magic ${JSON.stringify(magic)}, expected ${WEIGHTS_MAGIC}`);
  }
  need(4, 2, "version");
  const version = view.getUint16(4, true);
  if (version !== FORMAT_VERSION) throw new FileFormatError(`unsupported weights version ${version}`);
  need(6, 24, "config");
  const fields: number[] = [];
  for (let i = 0; i < 6; i++) fields.push(view.getUint32(6 + 4 * i, true));
  const arch: ModelArch = {
    imageSize: fields[0],
    patchSize: fields[1],
    embedDim: fields[2],
    channelMixDim: fields[3],
    depth: fields[4],
    numClasses: fields[5],
  };
  try {
    validateArch(arch);
  } catch (err) {
    throw new FileFormatError(`invalid config in weights file: ${(err as Error).message}`);
  }
  need(30, 4, "tensor count");
  const count = view.getUint32(30, true);
  let off = 34;
  const tensors = new Map<string, Float32Array>();
  for (let t = 0; t < count; t++) {
    need(off, 2, "name length");
    const nameLen = view.getUint16(off, true);
    off += 2;
    need(off, nameLen, "tensor name");
    const name = buf.toString("utf-8", off, off + nameLen);
    off += nameLen;
    need(off, 1, "rank");
    const rank = view.getUint8(off);
    off += 1;
    need(off, 8 * rank, "dims");
    const dims: number[] = [];
    for (let i = 0; i < rank; i++) {
      dims.push(Number(view.getBigUint64(off, true)));
      off += 8;
    }
    need(off, 1, "dtype");
    const dtype = view.getUint8(off);
    off += 1;
    if (dtype !== DTYPE_F32) {
      throw new FileFormatError(`tensor ${name} has unsupported dtype tag ${dtype}`);
    }
    const elems = numel(dims);
    need(off, 4 * elems, `tensor ${name} data`);
    tensors.set(name, readF32(view, off, elems));
    off += 4 * elems;
  }
  if (off !== buf.length) throw new FileFormatError("trailing bytes after the last tensor");
  const shapes = expectedShapes(arch);
  for (const [name, dims] of shapes) {
    const t = tensors.get(name);
    if (t === undefined) throw new FileFormatError(`missing tensor ${name}`);
    if (t.length !== numel(dims)) {
      throw new FileFormatError(`tensor ${name} has ${t.length} elements, expected ${numel(dims)}`);
    }
    for (let i = 0; i < t.length; i++) {
      if (!Number.isFinite(t[i])) throw new FileFormatError(`tensor ${name} has a non-finite entry`);
    }
  }
  for (const name of tensors.keys()) {
    if (!shapes.has(name)) throw new FileFormatError(`unexpected tensor ${name}`);
  }
  return { arch, tensors };
}

export function readWeights(path: string): LoadedWeights {
  return parseWeights(readFileSync(path));
}

export function serializeVectors(images: Float32Array[], logits: Float32Array[]): Buffer {
  if (images.length !== logits.length || images.length === 0) {
    throw new FileFormatError("need a matching, non-empty image/logit pairing");
  }
  const imageElems = images[0].length;
  const logitElems = logits[0].length;
  const buf = Buffer.alloc(4 + 2 + 12 + images.length * 4 * (imageElems + logitElems));
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  buf.write(VECTORS_MAGIC, 0, "ascii");
  view.setUint16(4, FORMAT_VERSION, true);
  view.setUint32(6, images.length, true);
  view.setUint32(10, imageElems, true);
  view.setUint32(14, logitElems, true);
  let off = 18;
  for (let i = 0; i < images.length; i++) {
    if (images[i].length !== imageElems || logits[i].length !== logitElems) {
      throw new FileFormatError(`vector ${i} has inconsistent element counts`);
    }
    off = writeF32(view, off, images[i]);
    off = writeF32(view, off, logits[i]);
  }
  return buf;
}

export function writeVectors(path: string, images: Float32Array[], logits: Float32Array[]): void {
  writeFileSync(path, serializeVectors(images, logits));
}

export interface LoadedVectors {
  images: Float32Array[];
  logits: Float32Array[];
}

export function readVectors(path: string): LoadedVectors {
  const buf = readFileSync(path);
  const view = new DataView(buf.buffer, buf.byteOffset, buf.length);
  if (buf.length < 18) throw new FileFormatError("truncated vectors header");
  const magic = buf.toString("ascii", 0, 4);
  if (magic !== VECTORS_MAGIC) {
    throw new FileFormatError(`bad magic ${JSON.stringify(magic)}, expected ${VECTORS_MAGIC}`);
  }
  const version = view.getUint16(4, true);
  if (version !== FORMAT_VERSION) throw new FileFormatError(`unsupported vectors version ${version}`);
  const count = view.getUint32(6, true);
  const imageElems = view.getUint32(10, true);
  const logitElems = view.getUint32(14, true);
  const expected = 18 + count * 4 * (imageElems + logitElems);
  if (buf.length !== expected) {
    throw new FileFormatError(`vectors file is ${buf.length} bytes, expected ${expected}`);
  }
  const images: Float32Array[] = [];
  const logits: Float32Array[] = [];
  let off = 18;
  for (let i = 0; i < count; i++) {
    images.push(readF32(view, off, imageElems));
    off += 4 * imageElems;
    logits.push(readF32(view, off, logitElems));
    off += 4 * logitElems;
  }
  return { images, logits };
}
