import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, describe, expect, it } from "vitest";

import { ModelArch, expectedShapes, numel } from "../src/arch.js";
import { FileFormatError } from "../src/errors.js";
import {
  parseWeights, readVectors, readWeights, serializeWeights, writeVectors, writeWeights,
} from "../src/formats.js";

const tinyArch: ModelArch = {
  imageSize: 8, patchSize: 4, embedDim: 16, channelMixDim: 16, depth: 1, numClasses: 5,
};

function tinyTensors(): Map<string, Float32Array> {
  const tensors = new Map<string, Float32Array>();
  let v = 0;
  for (const [name, dims] of expectedShapes(tinyArch)) {
    const t = new Float32Array(numel(dims));
    for (let i = 0; i < t.length; i++) t[i] = Math.fround(Math.sin(v++) * 0.5);
    if (name.endsWith(".var")) for (let i = 0; i < t.length; i++) t[i] = Math.abs(t[i]) + 0.5;
    tensors.set(name, t);
  }
  return tensors;
}

const dir = mkdtempSync(join(tmpdir(), "fmt-"));
afterAll(() => rmSync(dir, { recursive: true, force: true }));

describe("weights file", () => {
  it("has the documented header layout", () => {
    const buf = serializeWeights(tinyArch, tinyTensors());
    expect(buf.toString("ascii", 0, 4)).toBe("XMW1");
    expect(buf.readUInt16LE(4)).toBe(1);
    expect(buf.readUInt32LE(6)).toBe(8);   // image size
    expect(buf.readUInt32LE(10)).toBe(4);  // patch size
    expect(buf.readUInt32LE(14)).toBe(16); // embed dim
    expect(buf.readUInt32LE(18)).toBe(16); // channel mix dim
    expect(buf.readUInt32LE(22)).toBe(1);  // depth
    expect(buf.readUInt32LE(26)).toBe(5);  // classes
    expect(buf.readUInt32LE(30)).toBe(expectedShapes(tinyArch).size);
    // first tensor record in sorted order: head.bias, rank 1, dims [5], f32
    const nameLen = buf.readUInt16LE(34);
    expect(buf.toString("utf-8", 36, 36 + nameLen)).toBe("head.bias");
    expect(buf.readUInt8(36 + nameLen)).toBe(1);
    expect(Number(buf.readBigUInt64LE(37 + nameLen))).toBe(5);
    expect(buf.readUInt8(45 + nameLen)).toBe(0);
  });

  it("round-trips bit for bit", () => {
    const tensors = tinyTensors();
    const path = join(dir, "tiny.xmw");
    writeWeights(path, tinyArch, tensors);
    const loaded = readWeights(path);
    expect(loaded.arch).toEqual(tinyArch);
    expect([...loaded.tensors.keys()].sort()).toEqual([...tensors.keys()].sort());
    for (const [name, t] of tensors) {
      expect(Buffer.from(loaded.tensors.get(name)!.buffer)).toEqual(Buffer.from(t.buffer));
    }
    // serializing the loaded tensors reproduces the same bytes
    expect(serializeWeights(loaded.arch, loaded.tensors)).toEqual(serializeWeights(tinyArch, tensors));
  });

  it("rejects a bad magic", () => {
    const buf = serializeWeights(tinyArch, tinyTensors());
    buf.write("NOPE", 0, "ascii");
    expect(() => parseWeights(buf)).toThrow(FileFormatError);
    expect(() => parseWeights(buf)).toThrow(/magic/);
  });

  it("rejects an unsupported version", () => {
    const buf = serializeWeights(tinyArch, tinyTensors());
    buf.writeUInt16LE(9, 4);
    expect(() => parseWeights(buf)).toThrow(/version/);
  });

  it("rejects truncation anywhere", () => {
    const buf = serializeWeights(tinyArch, tinyTensors());
    expect(() => parseWeights(buf.subarray(0, buf.length - 3))).toThrow(FileFormatError);
    expect(() => parseWeights(buf.subarray(0, 20))).toThrow(/truncated/);
  });

  it("rejects trailing bytes", () => {
    const buf = serializeWeights(tinyArch, tinyTensors());
    expect(() => parseWeights(Buffer.concat([buf, Buffer.from([0])]))).toThrow(/trailing/);
  });

  it("rejects non-finite tensor data", () => {
    const tensors = tinyTensors();
    tensors.get("head.bias")![0] = Infinity;
    const buf = serializeWeights(tinyArch, tensors);
    expect(() => parseWeights(buf)).toThrow(/non-finite/);
  });

  it("rejects a missing file with ENOENT", () => {
    expect(() => readWeights(join(dir, "absent.xmw"))).toThrow(/ENOENT/);
  });
});

describe("vectors file", () => {
  it("round-trips and validates sizes", () => {
    const images = [0, 1, 2].map((i) => Float32Array.from({ length: 12 }, (_, j) => i + j / 16));
    const logits = [0, 1, 2].map((i) => Float32Array.from({ length: 4 }, (_, j) => i - j / 8));
    const path = join(dir, "tiny.xmv");
    writeVectors(path, images, logits);
    const loaded = readVectors(path);
    expect(loaded.images.length).toBe(3);
    for (let i = 0; i < 3; i++) {
      expect([...loaded.images[i]]).toEqual([...images[i]]);
      expect([...loaded.logits[i]]).toEqual([...logits[i]]);
    }
  });

  it("rejects size mismatches and bad magic", () => {
    const images = [new Float32Array(6)];
    const logits = [new Float32Array(2)];
    const path = join(dir, "bad.xmv");
    writeVectors(path, images, logits);
    const good = readVectors(path);
    expect(good.images[0].length).toBe(6);
    writeFileSync(path, Buffer.from("XMQ9??????????????????"));
    expect(() => readVectors(path)).toThrow(/magic/);
  });
});
