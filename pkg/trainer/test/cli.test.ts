import { existsSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { main } from "../src/cli.js";
import { readVectors } from "../src/formats.js";

let dir: string;
let weightsPath: string;
let metricsPath: string;

const tinyTrain = [
  "train", "--epochs", "1", "--train-size", "256", "--val-size", "128",
  "--test-size", "500", "--seed", "11",
];

beforeAll(() => {
  dir = mkdtempSync(join(tmpdir(), "mixer-cli-"));
  weightsPath = join(dir, "w.xmw");
  metricsPath = join(dir, "m.json");
  const rc = main([...tinyTrain, "--weights", weightsPath, "--metrics", metricsPath]);
  expect(rc).toBe(0);
});

afterAll(() => {
  rmSync(dir, { recursive: true, force: true });
});

describe("train subcommand", () => {
  it("writes weights and a metrics report", () => {
    expect(existsSync(weightsPath)).toBe(true);
    const metrics = JSON.parse(readFileSync(metricsPath, "utf8"));
    expect(metrics.config.activation).toBe("square");
    expect(metrics.config.trainSize).toBe(256);
    expect(metrics.history).toHaveLength(1);
    expect(metrics.history[0].meanLoss).toBeGreaterThan(0);
    expect(metrics.testAccuracy).toBeGreaterThanOrEqual(0);
    expect(metrics.testAccuracy).toBeLessThanOrEqual(1);
    expect(metrics.testImages).toBe(500);
    expect(metrics.wallSeconds).toBeGreaterThan(0);
  });

  it("trains with the relu ablation toggle when no weights are requested", () => {
    const m = join(dir, "relu.json");
    const rc = main([...tinyTrain, "--activation", "relu", "--metrics", m]);
    expect(rc).toBe(0);
    const metrics = JSON.parse(readFileSync(m, "utf8"));
    expect(metrics.config.activation).toBe("relu");
    expect(metrics.history).toHaveLength(1);
  });

  it("refuses to combine relu with a weights path before training starts", () => {
    const w = join(dir, "refused.xmw");
    const t0 = Date.now();
    const rc = main([...tinyTrain, "--activation", "relu", "--weights", w]);
    expect(rc).toBe(1);
    expect(existsSync(w)).toBe(false);
    // the refusal must come from the option check, not a failed run
    expect(Date.now() - t0).toBeLessThan(1000);
  });

  it("rejects a malformed option value with the usage code", () => {
    expect(main(["train", "--epochs", "three"])).toBe(2);
  });

  it("rejects an unknown activation with the usage code", () => {
    expect(main([...tinyTrain, "--activation", "gelu"])).toBe(2);
  });
});

describe("export subcommand", () => {
  it("writes reference vectors that read back with the right shapes", () => {
    const vectors = join(dir, "v.xmv");
    const rc = main(["export", "--weights", weightsPath, "--vectors", vectors, "--count", "4", "--seed", "7"]);
    expect(rc).toBe(0);
    const { images, logits } = readVectors(vectors);
    expect(images).toHaveLength(4);
    expect(logits).toHaveLength(4);
    expect(images[0]).toHaveLength(3 * 28 * 28);
    expect(logits[0]).toHaveLength(10);
    for (const row of logits) for (const v of row) expect(Number.isFinite(v)).toBe(true);
  });

  it("is deterministic in its image selection", () => {
    const a = join(dir, "va.xmv");
    const b = join(dir, "vb.xmv");
    expect(main(["export", "--weights", weightsPath, "--vectors", a, "--count", "3", "--seed", "21"])).toBe(0);
    expect(main(["export", "--weights", weightsPath, "--vectors", b, "--count", "3", "--seed", "21"])).toBe(0);
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });

  it("maps a missing weights file to the missing-file code", () => {
    const rc = main(["export", "--weights", join(dir, "absent.xmw"), "--vectors", join(dir, "x.xmv")]);
    expect(rc).toBe(3);
  });

  it("maps a corrupt weights file to the format code", () => {
    const bad = join(dir, "bad.xmw");
    writeFileSync(bad, Buffer.from("not a weights file at all"));
    const rc = main(["export", "--weights", bad, "--vectors", join(dir, "y.xmv")]);
    expect(rc).toBe(4);
  });

  it("rejects an out-of-range count with the usage code", () => {
    const rc = main(["export", "--weights", weightsPath, "--vectors", join(dir, "z.xmv"), "--count", "0"]);
    expect(rc).toBe(2);
  });

  it("rejects an unknown subcommand with the usage code", () => {
    expect(main(["frobnicate"])).toBe(2);
  });
});
