/**
 * The training loop: seeded subset selection, shuffled minibatches,
 * softmax cross-entropy, AdamW with warmup-cosine learning rate, and
 * per-epoch evaluation through the same folded-statistics forward
 * pass the inference engine uses.
 */

import { ModelArch, mnistArch } from "./arch.js";
import { DivergenceError } from "./errors.js";
import { ImageSet, toModelInputs } from "./mnist.js";
import { Activation, MixerModel } from "./model.js";
import { ADAMW_DEFAULTS, AdamW, scheduledLr } from "./optim.js";
import { createRng, shuffle } from "./rng.js";

export interface TrainConfig {
  arch: ModelArch;
  activation: Activation;
  epochs: number;
  batchSize: number;
  learningRate: number;
  warmupFraction: number;
  weightDecay: number;
  beta1: number;
  beta2: number;
  bnMomentum: number;
  seed: number;
  /** Training images drawn (seeded) from the 60k train split. */
  trainSize: number;
  /** Held-out train images used for the per-epoch accuracy line. */
  valSize: number;
}

export function defaultConfig(): TrainConfig {
  return {
    arch: mnistArch(),
    activation: "square",
    epochs: 10,
    batchSize: 128,
    learningRate: 3e-3,
    warmupFraction: 0.05,
    weightDecay: ADAMW_DEFAULTS.weightDecay,
    beta1: ADAMW_DEFAULTS.beta1,
    beta2: ADAMW_DEFAULTS.beta2,
    bnMomentum: 0.1,
    seed: 1234,
    trainSize: 12000,
    valSize: 2000,
  };
}

export interface EpochStats {
  epoch: number;
  meanLoss: number;
  valAccuracy: number;
  seconds: number;
}

export interface TrainResult {
  model: MixerModel;
  history: EpochStats[];
}

/** Mean cross-entropy over the batch; writes dLogits = (softmax - onehot) / batch. */
export function softmaxCrossEntropy(
  logits: Float64Array, labels: ArrayLike<number>, batch: number, classes: number,
  dLogits: Float64Array,
): number {
  let loss = 0;
  for (let b = 0; b < batch; b++) {
    const off = b * classes;
    let max = -Infinity;
    for (let j = 0; j < classes; j++) if (logits[off + j] > max) max = logits[off + j];
    let sum = 0;
    for (let j = 0; j < classes; j++) {
      const e = Math.exp(logits[off + j] - max);
      dLogits[off + j] = e;
      sum += e;
    }
    const target = labels[b];
    loss -= Math.log(dLogits[off + target] / sum);
    for (let j = 0; j < classes; j++) {
      dLogits[off + j] = (dLogits[off + j] / sum - (j === target ? 1 : 0)) / batch;
    }
  }
  return loss / batch;
}

/** Accuracy of the folded-statistics eval pass over the given indices. */
export function evalAccuracy(
  model: MixerModel, set: ImageSet, labels: Uint8Array, indices: ArrayLike<number>,
  chunk = 256,
): number {
  const classes = model.arch.numClasses;
  let correct = 0;
  for (let start = 0; start < indices.length; start += chunk) {
    const idx = Array.prototype.slice.call(indices, start, start + chunk);
    const logits = model.evalLogits(toModelInputs(set, idx), idx.length);
    for (let b = 0; b < idx.length; b++) {
      let best = 0;
      for (let j = 1; j < classes; j++) {
        if (logits[b * classes + j] > logits[b * classes + best]) best = j;
      }
      if (best === labels[idx[b]]) correct++;
    }
  }
  return correct / indices.length;
}

export interface TrainData {
  train: ImageSet;
  trainLabels: Uint8Array;
}

export function train(
  cfg: TrainConfig, data: TrainData,
  onEpoch?: (s: EpochStats) => void,
): TrainResult {
  const total = data.train.count;
  if (cfg.trainSize + cfg.valSize > total) {
    throw new Error(`trainSize + valSize exceeds the ${total} available images`);
  }
  const rng = createRng(cfg.seed);
  const order = new Int32Array(total);
  for (let i = 0; i < total; i++) order[i] = i;
  shuffle(order, rng);
  const trainIdx = order.slice(0, cfg.trainSize);
  const valIdx = order.slice(cfg.trainSize, cfg.trainSize + cfg.valSize);

  const model = MixerModel.initRandom(cfg.arch, cfg.activation, cfg.seed + 1);
  const opt = new AdamW({
    beta1: cfg.beta1, beta2: cfg.beta2, eps: ADAMW_DEFAULTS.eps, weightDecay: cfg.weightDecay,
  });
  const stepsPerEpoch = Math.ceil(cfg.trainSize / cfg.batchSize);
  const totalSteps = stepsPerEpoch * cfg.epochs;
  const warmupSteps = Math.max(1, Math.round(totalSteps * cfg.warmupFraction));
  const classes = cfg.arch.numClasses;
  const dLogits = new Float64Array(cfg.batchSize * classes);
  const batchLabels = new Int32Array(cfg.batchSize);

  const history: EpochStats[] = [];
  let step = 0;
  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    const t0 = Date.now();
    shuffle(trainIdx, rng);
    let lossSum = 0;
    for (let start = 0; start < cfg.trainSize; start += cfg.batchSize) {
      const idx = trainIdx.subarray(start, Math.min(start + cfg.batchSize, cfg.trainSize));
      const batch = idx.length;
      const images = toModelInputs(data.train, idx);
      for (let b = 0; b < batch; b++) batchLabels[b] = data.trainLabels[idx[b]];
      const cache = model.forwardTrain(images, batch, cfg.bnMomentum);
      const loss = softmaxCrossEntropy(cache.logits, batchLabels, batch, classes, dLogits);
      if (!Number.isFinite(loss)) {
        throw new DivergenceError(
          `loss became ${loss} at epoch ${epoch + 1}, step ${step}`, epoch + 1, step,
        );
      }
      lossSum += loss;
      const grads = model.backward(cache, dLogits);
      opt.step(model.params, grads, scheduledLr(step, totalSteps, warmupSteps, cfg.learningRate));
      step++;
    }
    const stats: EpochStats = {
      epoch: epoch + 1,
      meanLoss: lossSum / stepsPerEpoch,
      valAccuracy: cfg.valSize > 0 ? evalAccuracy(model, data.train, data.trainLabels, valIdx) : NaN,
      seconds: (Date.now() - t0) / 1000,
    };
    history.push(stats);
    if (onEpoch) onEpoch(stats);
  }
  return { model, history };
}
