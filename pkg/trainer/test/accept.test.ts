/**
 * Acceptance: train the default MNIST model through the CLI, export the
 * engine files into artifacts/, and verify them against the inference
 * engine's own CLI in both the plain float path and a live two-party
 * private session. Run with `npm run accept`; the training step takes
 * on the order of twenty minutes on one CPU.
 */

import { ChildProcess, spawn, spawnSync } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { readVectors, readWeights } from "../src/formats.js";
import { loadMnist } from "../src/mnist.js";
import { defaultConfig, evalAccuracy, train } from "../src/train.js";

const ROOT = resolve(fileURLToPath(new URL(".", import.meta.url)), "..");
const CLI = join(ROOT, "dist", "cli.js");
const ART = join(ROOT, "artifacts");
const WEIGHTS = join(ART, "mnist-mixer.xmw");
const VECTORS = join(ART, "reference-32.xmv");
const METRICS = join(ART, "metrics.json");

let scratch: string;

function runCli(args: string[]) {
  const res = spawnSync(process.execPath, [CLI, ...args], { encoding: "utf8" });
  if (res.status !== 0) {
    console.error(res.stdout);
    console.error(res.stderr);
  }
  return res;
}

function runEngine(args: string[]) {
  const res = spawnSync("xpi", args, { encoding: "utf8" });
  if (res.status !== 0) {
    console.error(res.stdout);
    console.error(res.stderr);
  }
  return res;
}

/** Start a process and resolve once a stdout line matches, with its capture groups. */
function waitForLine(child: ChildProcess, pattern: RegExp, ms: number): Promise<RegExpMatchArray> {
  return new Promise((resolvePromise, reject) => {
    let buf = "";
    const timer = setTimeout(() => {
      child.kill();
      reject(new Error(`timed out waiting for ${pattern}; got: ${buf}`));
    }, ms);
    child.stdout!.on("data", (chunk: Buffer) => {
      buf += chunk.toString();
      const m = buf.match(pattern);
      if (m) {
        clearTimeout(timer);
        resolvePromise(m);
      }
    });
    child.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`exited with ${code} before matching ${pattern}; got: ${buf}`));
    });
  });
}

beforeAll(() => {
  if (!existsSync(CLI)) throw new Error("dist/cli.js missing; run npm run build first");
  scratch = mkdtempSync(join(tmpdir(), "mixer-accept-"));
});

afterAll(() => {
  rmSync(scratch, { recursive: true, force: true });
});

describe("acceptance", () => {
  it("trains the default model to at least 95% test accuracy within 10 epochs", () => {
    rmSync(ART, { recursive: true, force: true });
    const res = runCli(["train", "--weights", WEIGHTS, "--metrics", METRICS]);
    console.log(res.stdout);
    expect(res.status).toBe(0);
    const metrics = JSON.parse(readFileSync(METRICS, "utf8"));
    expect(metrics.history.length).toBeLessThanOrEqual(10);
    expect(metrics.testImages).toBe(10_000);
    expect(metrics.testAccuracy).toBeGreaterThanOrEqual(0.95);
  });

  it("exports 32 reference vectors from the trained weights", () => {
    const res = runCli(["export", "--weights", WEIGHTS, "--vectors", VECTORS, "--count", "32", "--seed", "7"]);
    expect(res.status).toBe(0);
    const { arch } = readWeights(WEIGHTS);
    const { images, logits } = readVectors(VECTORS);
    expect(images).toHaveLength(32);
    expect(logits).toHaveLength(32);
    expect(images[0]).toHaveLength(3 * arch.imageSize * arch.imageSize);
    expect(logits[0]).toHaveLength(arch.numClasses);
  });

  it("matches the engine's plain float forward within 1e-4", () => {
    const res = runEngine([
      "plain", "--weights", WEIGHTS, "--input", VECTORS,
      "--repr", "float", "--check", "--tol-abs", "1e-4",
    ]);
    console.log(res.stdout);
    expect(res.status).toBe(0);
    expect(res.stdout).toMatch(/argmax_agreement=1\.0000/);
  });

  it("agrees with a live two-party private session on at least 99% of argmaxes", async () => {
    const prefix = join(scratch, "corr");
    const dealt = runEngine([
      "dealer", "--weights", WEIGHTS, "--batch", "32",
      "--trunc-mode", "local", "--seed", "5", "--out", prefix,
    ]);
    expect(dealt.status).toBe(0);

    const server = spawn("xpi", [
      "serve", "--weights", WEIGHTS, "--corr", `${prefix}.party1.xpc`,
      "--batch", "32", "--addr", "127.0.0.1:0",
    ], { stdio: ["ignore", "pipe", "pipe"] });
    const serverDone = new Promise<number | null>((res) => server.on("exit", res));
    try {
      const m = await waitForLine(server, /listening on ([0-9.]+):(\d+)/, 30_000);
      const infer = runEngine([
        "infer", "--weights", WEIGHTS, "--corr", `${prefix}.party0.xpc`,
        "--batch", "32", "--addr", `${m[1]}:${m[2]}`, "--input", VECTORS,
        "--check", "--tol-abs", "0.05", "--tol-argmax", "0.99",
      ]);
      console.log(infer.stdout);
      expect(infer.status).toBe(0);
      expect(await serverDone).toBe(0);
    } finally {
      server.kill();
    }
  });

  it("trains comparably with the relu ablation toggle", () => {
    const data = loadMnist();
    const testIdx = Int32Array.from({ length: data.test.count }, (_, i) => i);
    const accuracy = new Map<string, number>();
    for (const activation of ["square", "relu"] as const) {
      const cfg = { ...defaultConfig(), activation, epochs: 8, trainSize: 8000, valSize: 0 };
      const res = train(cfg, { train: data.train, trainLabels: data.trainLabels });
      const acc = evalAccuracy(res.model, data.test, data.testLabels, testIdx);
      console.log(`${activation}: test accuracy ${(acc * 100).toFixed(2)}%`);
      accuracy.set(activation, acc);
    }
    const gap = Math.abs(accuracy.get("square")! - accuracy.get("relu")!);
    expect(accuracy.get("square")!).toBeGreaterThanOrEqual(0.9);
    expect(accuracy.get("relu")!).toBeGreaterThanOrEqual(0.9);
    expect(gap).toBeLessThanOrEqual(0.02);
  });
});
