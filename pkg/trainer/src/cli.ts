/**
 * Command line entry points.
 *
 *   train   train an MNIST mixer and write engine-ready weights
 *   export  write reference vectors (image, logits) from a weights file
 *
 * Exit codes: 0 success, 1 failed run (divergence, refused export),
 * 2 usage, 3 missing file, 4 malformed data or weights file.
 */

import { existsSync, mkdirSync, writeFileSync } from "node:fs";
import { dirname } from "node:path";

import { Command, CommanderError } from "commander";

import { mnistArch } from "./arch.js";
import { DataFormatError, DivergenceError, ExportError, FileFormatError, TrainerError } from "./errors.js";
import { loadMnist, toModelInputs } from "./mnist.js";
import { Activation, MixerModel } from "./model.js";
import { readVectors, readWeights, writeVectors, writeWeights } from "./formats.js";
import { defaultConfig, evalAccuracy, train } from "./train.js";
import { createRng, shuffle } from "./rng.js";

function ensureDir(path: string): void {
  mkdirSync(dirname(path), { recursive: true });
}

function intOpt(value: string): number {
  const v = Number(value);
  if (!Number.isInteger(v)) throw new CommanderError(2, "trainer.badint", `not an integer: ${value}`);
  return v;
}

function floatOpt(value: string): number {
  const v = Number(value);
  if (!Number.isFinite(v)) throw new CommanderError(2, "trainer.badfloat", `not a number: ${value}`);
  return v;
}

interface TrainOpts {
  epochs: number;
  batchSize: number;
  trainSize: number;
  valSize: number;
  testSize: number;
  lr: number;
  weightDecay: number;
  seed: number;
  activation: string;
  weights?: string;
  metrics?: string;
}

function cmdTrain(opts: TrainOpts): void {
  if (opts.activation !== "square" && opts.activation !== "relu") {
    throw new CommanderError(2, "trainer.activation", `unknown activation ${opts.activation}`);
  }
  if (opts.weights !== undefined && opts.activation !== "square") {
    // fail before spending minutes on a run whose export would be refused
    throw new ExportError("only square-activation models can be exported as weights");
  }
  const cfg = {
    ...defaultConfig(),
    arch: mnistArch(),
    activation: opts.activation as Activation,
    epochs: opts.epochs,
    batchSize: opts.batchSize,
    trainSize: opts.trainSize,
    valSize: opts.valSize,
    learningRate: opts.lr,
    weightDecay: opts.weightDecay,
    seed: opts.seed,
  };
  console.log(
    `training ${cfg.activation} mixer: ${cfg.trainSize} images, ` +
    `${cfg.epochs} epochs, batch ${cfg.batchSize}, lr ${cfg.learningRate}, seed ${cfg.seed}`,
  );
  const data = loadMnist();
  const t0 = Date.now();
  const { model, history } = train(cfg, { train: data.train, trainLabels: data.trainLabels }, (s) => {
    console.log(
      `epoch ${s.epoch}/${cfg.epochs}  loss ${s.meanLoss.toFixed(4)}  ` +
      `val acc ${(s.valAccuracy * 100).toFixed(2)}%  ${s.seconds.toFixed(1)}s`,
    );
  });
  const testCount = Math.min(opts.testSize, data.test.count);
  const testIdx = new Int32Array(testCount);
  for (let i = 0; i < testIdx.length; i++) testIdx[i] = i;
  const testAccuracy = evalAccuracy(model, data.test, data.testLabels, testIdx);
  const wallSeconds = (Date.now() - t0) / 1000;
  console.log(`test accuracy ${(testAccuracy * 100).toFixed(2)}% over ${testCount} images`);
  if (opts.weights !== undefined) {
    ensureDir(opts.weights);
    writeWeights(opts.weights, cfg.arch, model.exportTensors());
    console.log(`wrote weights to ${opts.weights}`);
  }
  if (opts.metrics !== undefined) {
    ensureDir(opts.metrics);
    const payload = {
      config: { ...cfg },
      history,
      testAccuracy,
      testImages: testCount,
      wallSeconds,
    };
    writeFileSync(opts.metrics, JSON.stringify(payload, null, 2) + "\n");
    console.log(`wrote metrics to ${opts.metrics}`);
  }
}

interface ExportOpts {
  weights: string;
  vectors: string;
  count: number;
  seed: number;
}

function cmdExport(opts: ExportOpts): void {
  const { arch, tensors } = readWeights(opts.weights);
  const model = MixerModel.fromTensors(arch, "square", tensors);
  const data = loadMnist();
  if (arch.imageSize !== data.test.rows || arch.imageSize !== data.test.cols) {
    throw new FileFormatError(
      `weights expect ${arch.imageSize}x${arch.imageSize} images, MNIST is ${data.test.rows}x${data.test.cols}`,
    );
  }
  if (opts.count < 1 || opts.count > data.test.count) {
    throw new CommanderError(2, "trainer.count", `count must be in 1..${data.test.count}`);
  }
  const order = new Int32Array(data.test.count);
  for (let i = 0; i < order.length; i++) order[i] = i;
  shuffle(order, createRng(opts.seed));
  const picked = order.slice(0, opts.count);
  const images: Float32Array[] = [];
  const logitRows: Float32Array[] = [];
  const classes = arch.numClasses;
  for (const idx of picked) {
    const img = toModelInputs(data.test, [idx]);
    const logits = model.evalLogits(img, 1);
    images.push(Float32Array.from(img));
    logitRows.push(Float32Array.from(logits.subarray(0, classes)));
  }
  ensureDir(opts.vectors);
  writeVectors(opts.vectors, images, logitRows);
  console.log(`wrote ${opts.count} reference vectors to ${opts.vectors}`);
  // read back and re-derive: the stored pairing must reproduce exactly
  const reread = readVectors(opts.vectors);
  for (let i = 0; i < reread.images.length; i++) {
    const logits = model.evalLogits(reread.images[i], 1);
    for (let j = 0; j < classes; j++) {
      if (Math.fround(logits[j]) !== reread.logits[i][j]) {
        throw new FileFormatError(`vector ${i} logit ${j} did not reproduce after reread`);
      }
    }
  }
  console.log("reread check passed: stored logits reproduce bit for bit");
}

export function buildProgram(): Command {
  const program = new Command();
  program
    .name("mixer-trainer")
    .description("trains square-activation mixer networks on MNIST and exports engine files")
    .exitOverride();
  program
    .command("train")
    .description("train on MNIST and optionally write weights/metrics")
    .option("--epochs <n>", "training epochs", intOpt, 10)
    .option("--batch-size <n>", "minibatch size", intOpt, 128)
    .option("--train-size <n>", "training subset size", intOpt, 12000)
    .option("--val-size <n>", "held-out images for the epoch line", intOpt, 2000)
    .option("--test-size <n>", "test images for the final accuracy", intOpt, 10_000)
    .option("--lr <x>", "peak learning rate", floatOpt, 3e-3)
    .option("--weight-decay <x>", "decoupled weight decay", floatOpt, 0.05)
    .option("--seed <n>", "run seed", intOpt, 1234)
    .option("--activation <kind>", "square or relu", "square")
    .option("--weights <path>", "write engine weights here")
    .option("--metrics <path>", "write run metrics JSON here")
    .action((opts: TrainOpts) => cmdTrain(opts));
  program
    .command("export")
    .description("write reference vectors computed from a weights file")
    .requiredOption("--weights <path>", "weights file to load")
    .requiredOption("--vectors <path>", "vectors file to write")
    .option("--count <n>", "number of vectors", intOpt, 32)
    .option("--seed <n>", "image selection seed", intOpt, 7)
    .action((opts: ExportOpts) => cmdExport(opts));
  return program;
}

export function main(argv: string[]): number {
  try {
    buildProgram().parse(argv, { from: "user" });
    return 0;
  } catch (err) {
    if (err instanceof CommanderError) {
      if (err.code === "commander.helpDisplayed" || err.code === "commander.version") return 0;
      if (err.message) console.error(err.message);
      return 2;
    }
    if (err instanceof DivergenceError) {
      console.error(`diverged: ${err.message}`);
      return 1;
    }
    if (err instanceof ExportError) {
      console.error(`export refused: ${err.message}`);
      return 1;
    }
    if (err instanceof DataFormatError || err instanceof FileFormatError) {
      console.error(`format error: ${err.message}`);
      return 4;
    }
    if (err instanceof Error && (err as NodeJS.ErrnoException).code === "ENOENT") {
      console.error(err.message);
      return 3;
    }
    if (err instanceof TrainerError || err instanceof Error) {
      console.error(err.message);
      return 1;
    }
    throw err;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
