/**
 * The square-activation mixer and its gradients.
 *
 * Training runs in float64 with live per-position batch statistics at
 * every normalization site. The evaluation pass instead mirrors the
 * inference engine exactly: parameters and running statistics rounded
 * to float32 as they will sit in the exported file, normalization
 * folded into per-element (scale, bias), all arithmetic in float64.
 * That is what makes the exported reference logits reproducible by
 * the engine to within float64 summation-order noise.
 *
 * One block, in program order:
 *   X -> pre_norm -> dconv3x3 + bias -> post_norm1 * gamma -> (+X) = U
 *   U -> tokens -> mix_in + bias -> square -> mix_out + bias
 *     -> grid -> post_norm2 * gamma -> (+U)
 * with an affine-free pre_norm and a mean pool plus linear head at
 * the end. Statistics are per grid position over (batch, channels).
 */

import {
  ModelArch, expectedShapes, grid as archGrid, numel, patchDim, tokens as archTokens,
  validateArch,
} from "./arch.js";
import { ExportError, FileFormatError } from "./errors.js";
import { createGaussian, createRng } from "./rng.js";
import { accumColumnSums, accumTN, addBiasRows, matmulNN, matmulNT } from "./tensor.js";

export const NORM_EPS = 1e-5;

export type Activation = "square" | "relu";

interface NormCache {
  xhat: Float64Array;
  inv: Float64Array;
}

interface BlockCache {
  pre: NormCache;
  post1: NormCache;
  post2: NormCache;
  tokens: Float64Array;
  z: Float64Array;
  act: Float64Array;
}

export interface ForwardCache {
  batch: number;
  patches: Float64Array;
  blocks: BlockCache[];
  pooled: Float64Array;
  logits: Float64Array;
}

/** Buffers reused across batches of the same size. */
interface Workspace {
  batch: number;
  cache: ForwardCache;
  gridA: Float64Array;
  gridB: Float64Array;
  gridC: Float64Array;
  tokScratch: Float64Array;
  dGridA: Float64Array;
  dGridB: Float64Array;
  dTokens: Float64Array;
  dZ: Float64Array;
  dPooled: Float64Array;
}

const STAT_SUFFIXES = [".mean", ".var"];

function isStatName(name: string): boolean {
  return /\.(pre_norm|post_norm[12])\.(mean|var)$/.test(name);
}

export class MixerModel {
  readonly arch: ModelArch;
  readonly activation: Activation;
  /** Learnable tensors, keyed by their exported names. */
  readonly params: Map<string, Float64Array>;
  /** Running normalization statistics, keyed by their exported names. */
  readonly stats: Map<string, Float64Array>;

  private ws: Workspace | null = null;
  private grads: Map<string, Float64Array> | null = null;

  private constructor(arch: ModelArch, activation: Activation) {
    validateArch(arch);
    this.arch = arch;
    this.activation = activation;
    this.params = new Map();
    this.stats = new Map();
  }

  static initRandom(arch: ModelArch, activation: Activation, seed: number): MixerModel {
    const m = new MixerModel(arch, activation);
    const gauss = createGaussian(createRng(seed));
    const fill = (dims: number[], std: number) => {
      const t = new Float64Array(numel(dims));
      if (std > 0) for (let i = 0; i < t.length; i++) t[i] = gauss() * std;
      return t;
    };
    const ones = (count: number) => new Float64Array(count).fill(1);
    const d = arch.embedDim;
    const cm = arch.channelMixDim;
    const n2 = archTokens(arch);
    m.params.set("patch_embed.weight", fill([d, patchDim(arch)], Math.sqrt(2 / patchDim(arch))));
    m.params.set("patch_embed.bias", fill([d], 0));
    for (let i = 0; i < arch.depth; i++) {
      const p = `layers.${i}`;
      m.stats.set(`${p}.pre_norm.mean`, new Float64Array(n2));
      m.stats.set(`${p}.pre_norm.var`, ones(n2));
      m.params.set(`${p}.conv.weight`, fill([d, 3, 3], 1 / 3));
      m.params.set(`${p}.conv.bias`, fill([d], 0));
      m.stats.set(`${p}.post_norm1.mean`, new Float64Array(n2));
      m.stats.set(`${p}.post_norm1.var`, ones(n2));
      m.params.set(`${p}.post_norm1.gamma`, ones(d));
      m.params.set(`${p}.mix_in.weight`, fill([cm, d], Math.sqrt(2 / d)));
      m.params.set(`${p}.mix_in.bias`, fill([cm], 0));
      m.params.set(`${p}.mix_out.weight`, fill([d, cm], Math.sqrt(2 / cm)));
      m.params.set(`${p}.mix_out.bias`, fill([d], 0));
      m.stats.set(`${p}.post_norm2.mean`, new Float64Array(n2));
      m.stats.set(`${p}.post_norm2.var`, ones(n2));
      m.params.set(`${p}.post_norm2.gamma`, ones(d));
    }
    m.params.set("head.weight", fill([arch.numClasses, d], Math.sqrt(1 / d)));
    m.params.set("head.bias", fill([arch.numClasses], 0));
    return m;
  }

  /** Rebuild a model from file tensors (float32, exported layout). */
  static fromTensors(
    arch: ModelArch, activation: Activation, tensors: Map<string, Float32Array>,
  ): MixerModel {
    const m = new MixerModel(arch, activation);
    for (const [name, dims] of expectedShapes(arch)) {
      const t = tensors.get(name);
      if (t === undefined) throw new FileFormatError(`missing tensor ${name}`);
      if (t.length !== numel(dims)) {
        throw new FileFormatError(`tensor ${name} has ${t.length} elements, expected ${numel(dims)}`);
      }
      const dst = isStatName(name) ? m.stats : m.params;
      dst.set(name, Float64Array.from(t));
    }
    return m;
  }

  // ---- layout helpers -------------------------------------------------

  /** (batch, 3, s, s) images -> (batch*tokens, patchDim) rows, channel-major per patch. */
  private extractPatches(images: Float64Array, batch: number, out: Float64Array): void {
    const { imageSize: s, patchSize: p } = this.arch;
    const n = archGrid(this.arch);
    const pd = patchDim(this.arch);
    for (let b = 0; b < batch; b++) {
      for (let y = 0; y < n; y++) {
        for (let x = 0; x < n; x++) {
          const row = ((b * n + y) * n + x) * pd;
          for (let c = 0; c < 3; c++) {
            const plane = (b * 3 + c) * s * s;
            for (let py = 0; py < p; py++) {
              const src = plane + (y * p + py) * s + x * p;
              const dst = row + (c * p + py) * p;
              for (let px = 0; px < p; px++) out[dst + px] = images[src + px];
            }
          }
        }
      }
    }
  }

  /** (batch*tokens, d) rows -> (batch, d, n, n) grid. */
  private toGrid(tok: Float64Array, batch: number, out: Float64Array): void {
    const d = this.arch.embedDim;
    const n = archGrid(this.arch);
    const n2 = n * n;
    for (let b = 0; b < batch; b++) {
      for (let t = 0; t < n2; t++) {
        const row = (b * n2 + t) * d;
        const base = b * d * n2 + t;
        for (let c = 0; c < d; c++) out[base + c * n2] = tok[row + c];
      }
    }
  }

  /** (batch, d, n, n) grid -> (batch*tokens, d) rows. */
  private toTokens(g: Float64Array, batch: number, out: Float64Array): void {
    const d = this.arch.embedDim;
    const n2 = archTokens(this.arch);
    for (let b = 0; b < batch; b++) {
      for (let t = 0; t < n2; t++) {
        const row = (b * n2 + t) * d;
        const base = b * d * n2 + t;
        for (let c = 0; c < d; c++) out[row + c] = g[base + c * n2];
      }
    }
  }

  // ---- depthwise 3x3, zero padded ------------------------------------

  private dconvForward(x: Float64Array, kern: Float64Array, batch: number, out: Float64Array): void {
    const d = this.arch.embedDim;
    const n = archGrid(this.arch);
    for (let b = 0; b < batch; b++) {
      for (let c = 0; c < d; c++) {
        const plane = (b * d + c) * n * n;
        const kc = c * 9;
        for (let i = 0; i < n; i++) {
          for (let j = 0; j < n; j++) {
            let s = 0;
            for (let u = 0; u < 3; u++) {
              const ii = i + u - 1;
              if (ii < 0 || ii >= n) continue;
              for (let v = 0; v < 3; v++) {
                const jj = j + v - 1;
                if (jj < 0 || jj >= n) continue;
                s += kern[kc + u * 3 + v] * x[plane + ii * n + jj];
              }
            }
            out[plane + i * n + j] = s;
          }
        }
      }
    }
  }

  private dconvBackward(
    dY: Float64Array, x: Float64Array, kern: Float64Array, batch: number,
    dX: Float64Array, dKern: Float64Array,
  ): void {
    const d = this.arch.embedDim;
    const n = archGrid(this.arch);
    dX.fill(0, 0, batch * d * n * n);
    for (let b = 0; b < batch; b++) {
      for (let c = 0; c < d; c++) {
        const plane = (b * d + c) * n * n;
        const kc = c * 9;
        for (let i = 0; i < n; i++) {
          for (let j = 0; j < n; j++) {
            const g = dY[plane + i * n + j];
            if (g === 0) continue;
            for (let u = 0; u < 3; u++) {
              const ii = i + u - 1;
              if (ii < 0 || ii >= n) continue;
              for (let v = 0; v < 3; v++) {
                const jj = j + v - 1;
                if (jj < 0 || jj >= n) continue;
                dKern[kc + u * 3 + v] += g * x[plane + ii * n + jj];
                dX[plane + ii * n + jj] += g * kern[kc + u * 3 + v];
              }
            }
          }
        }
      }
    }
  }

  // ---- per-position batch normalization -------------------------------

  /**
   * Normalize over (batch, channels) at each grid position with live
   * batch statistics; optionally scale by a per-channel gamma and fold
   * the batch statistics into the running averages.
   */
  private normForward(
    x: Float64Array, batch: number, gamma: Float64Array | null,
    out: Float64Array, cache: NormCache,
    running: { mean: Float64Array; var: Float64Array } | null, momentum: number,
  ): void {
    const d = this.arch.embedDim;
    const n2 = archTokens(this.arch);
    const m = batch * d;
    const stride = n2;
    for (let p = 0; p < n2; p++) {
      let sum = 0;
      let sumsq = 0;
      for (let bc = 0; bc < m; bc++) {
        const v = x[bc * stride + p];
        sum += v;
        sumsq += v * v;
      }
      const mu = sum / m;
      let variance = sumsq / m - mu * mu;
      if (variance < 0) variance = 0; // f.p. cancellation guard
      const inv = 1 / Math.sqrt(variance + NORM_EPS);
      cache.inv[p] = inv;
      for (let bc = 0; bc < m; bc++) {
        const idx = bc * stride + p;
        const xh = (x[idx] - mu) * inv;
        cache.xhat[idx] = xh;
        out[idx] = gamma === null ? xh : xh * gamma[bc % d];
      }
      if (running !== null) {
        running.mean[p] = (1 - momentum) * running.mean[p] + momentum * mu;
        running.var[p] = (1 - momentum) * running.var[p] + momentum * variance;
      }
    }
  }

  private normBackward(
    dY: Float64Array, batch: number, gamma: Float64Array | null,
    cache: NormCache, dX: Float64Array, dGamma: Float64Array | null,
  ): void {
    const d = this.arch.embedDim;
    const n2 = archTokens(this.arch);
    const m = batch * d;
    const stride = n2;
    if (gamma !== null && dGamma !== null) {
      for (let bc = 0; bc < m; bc++) {
        const c = bc % d;
        let s = 0;
        for (let p = 0; p < n2; p++) {
          const idx = bc * stride + p;
          s += dY[idx] * cache.xhat[idx];
        }
        dGamma[c] += s;
      }
    }
    for (let p = 0; p < n2; p++) {
      let s1 = 0;
      let s2 = 0;
      for (let bc = 0; bc < m; bc++) {
        const idx = bc * stride + p;
        const g = gamma === null ? dY[idx] : dY[idx] * gamma[bc % d];
        s1 += g;
        s2 += g * cache.xhat[idx];
      }
      const inv = cache.inv[p];
      const k1 = s1 / m;
      const k2 = s2 / m;
      for (let bc = 0; bc < m; bc++) {
        const idx = bc * stride + p;
        const g = gamma === null ? dY[idx] : dY[idx] * gamma[bc % d];
        dX[idx] = inv * (g - k1 - cache.xhat[idx] * k2);
      }
    }
  }

  // ---- workspace -------------------------------------------------------

  private workspace(batch: number): Workspace {
    if (this.ws !== null && this.ws.batch === batch) return this.ws;
    const a = this.arch;
    const d = a.embedDim;
    const cm = a.channelMixDim;
    const n2 = archTokens(a);
    const gridLen = batch * d * n2;
    const rows = batch * n2;
    const mkNorm = (): NormCache => ({
      xhat: new Float64Array(gridLen),
      inv: new Float64Array(n2),
    });
    const blocks: BlockCache[] = [];
    for (let i = 0; i < a.depth; i++) {
      blocks.push({
        pre: mkNorm(),
        post1: mkNorm(),
        post2: mkNorm(),
        tokens: new Float64Array(rows * d),
        z: new Float64Array(rows * cm),
        act: new Float64Array(rows * cm),
      });
    }
    this.ws = {
      batch,
      cache: {
        batch,
        patches: new Float64Array(rows * patchDim(a)),
        blocks,
        pooled: new Float64Array(batch * d),
        logits: new Float64Array(batch * a.numClasses),
      },
      gridA: new Float64Array(gridLen),
      gridB: new Float64Array(gridLen),
      gridC: new Float64Array(gridLen),
      tokScratch: new Float64Array(rows * Math.max(d, cm)),
      dGridA: new Float64Array(gridLen),
      dGridB: new Float64Array(gridLen),
      dTokens: new Float64Array(rows * d),
      dZ: new Float64Array(rows * cm),
      dPooled: new Float64Array(batch * d),
    };
    return this.ws;
  }

  private gradBuffers(): Map<string, Float64Array> {
    if (this.grads === null) {
      this.grads = new Map();
      for (const [name, t] of this.params) this.grads.set(name, new Float64Array(t.length));
    }
    for (const g of this.grads.values()) g.fill(0);
    return this.grads;
  }

  // ---- training forward/backward ---------------------------------------

  forwardTrain(images: Float64Array, batch: number, momentum: number): ForwardCache {
    const a = this.arch;
    const d = a.embedDim;
    const cm = a.channelMixDim;
    const n2 = archTokens(a);
    const rows = batch * n2;
    const ws = this.workspace(batch);
    const cache = ws.cache;
    const P = (name: string) => this.params.get(name)!;
    const S = (name: string) => this.stats.get(name)!;

    this.extractPatches(images, batch, cache.patches);
    matmulNT(ws.tokScratch, cache.patches, P("patch_embed.weight"), rows, patchDim(a), d);
    addBiasRows(ws.tokScratch, P("patch_embed.bias"), rows, d);
    let cur = ws.gridA; // the stream value X
    this.toGrid(ws.tokScratch, batch, cur);

    for (let i = 0; i < a.depth; i++) {
      const p = `layers.${i}`;
      const blk = cache.blocks[i];
      // patch branch: pre_norm out doubles as the conv input in the cache
      this.normForward(
        cur, batch, null, blk.pre.xhat, blk.pre,
        { mean: S(`${p}.pre_norm.mean`), var: S(`${p}.pre_norm.var`) }, momentum,
      );
      this.dconvForward(blk.pre.xhat, P(`${p}.conv.weight`), batch, ws.gridB);
      const convBias = P(`${p}.conv.bias`);
      for (let b = 0; b < batch; b++) {
        for (let c = 0; c < d; c++) {
          const plane = (b * d + c) * n2;
          const cb = convBias[c];
          for (let t = 0; t < n2; t++) ws.gridB[plane + t] += cb;
        }
      }
      this.normForward(
        ws.gridB, batch, P(`${p}.post_norm1.gamma`), ws.gridC, blk.post1,
        { mean: S(`${p}.post_norm1.mean`), var: S(`${p}.post_norm1.var`) }, momentum,
      );
      const u = ws.gridB; // U = post_norm1 out + X, reusing the conv buffer
      for (let k = 0; k < batch * d * n2; k++) u[k] = ws.gridC[k] + cur[k];

      // channel branch
      this.toTokens(u, batch, blk.tokens);
      matmulNT(blk.z, blk.tokens, P(`${p}.mix_in.weight`), rows, d, cm);
      addBiasRows(blk.z, P(`${p}.mix_in.bias`), rows, cm);
      if (this.activation === "square") {
        for (let k = 0; k < rows * cm; k++) blk.act[k] = blk.z[k] * blk.z[k];
      } else {
        for (let k = 0; k < rows * cm; k++) blk.act[k] = blk.z[k] > 0 ? blk.z[k] : 0;
      }
      matmulNT(ws.tokScratch, blk.act, P(`${p}.mix_out.weight`), rows, cm, d);
      addBiasRows(ws.tokScratch, P(`${p}.mix_out.bias`), rows, d);
      this.toGrid(ws.tokScratch, batch, ws.gridC);
      this.normForward(
        ws.gridC, batch, P(`${p}.post_norm2.gamma`), ws.gridC, blk.post2,
        { mean: S(`${p}.post_norm2.mean`), var: S(`${p}.post_norm2.var`) }, momentum,
      );
      for (let k = 0; k < batch * d * n2; k++) cur[k] = ws.gridC[k] + u[k];
    }

    for (let b = 0; b < batch; b++) {
      for (let c = 0; c < d; c++) {
        const plane = (b * d + c) * n2;
        let s = 0;
        for (let t = 0; t < n2; t++) s += cur[plane + t];
        cache.pooled[b * d + c] = s / n2;
      }
    }
    matmulNT(cache.logits, cache.pooled, P("head.weight"), batch, d, a.numClasses);
    addBiasRows(cache.logits, P("head.bias"), batch, a.numClasses);
    return cache;
  }

  /** Gradient of the loss w.r.t. every parameter; buffers are reused per call. */
  backward(cache: ForwardCache, dLogits: Float64Array): Map<string, Float64Array> {
    const a = this.arch;
    const d = a.embedDim;
    const cm = a.channelMixDim;
    const n2 = archTokens(a);
    const batch = cache.batch;
    const rows = batch * n2;
    const gridLen = batch * d * n2;
    const ws = this.workspace(batch);
    const grads = this.gradBuffers();
    const P = (name: string) => this.params.get(name)!;
    const G = (name: string) => grads.get(name)!;

    accumTN(G("head.weight"), dLogits, cache.pooled, batch, a.numClasses, d);
    accumColumnSums(G("head.bias"), dLogits, batch, a.numClasses);
    matmulNN(ws.dPooled, dLogits, P("head.weight"), batch, a.numClasses, d);

    let dX = ws.dGridA; // gradient w.r.t. the stream value
    for (let b = 0; b < batch; b++) {
      for (let c = 0; c < d; c++) {
        const plane = (b * d + c) * n2;
        const g = ws.dPooled[b * d + c] / n2;
        for (let t = 0; t < n2; t++) dX[plane + t] = g;
      }
    }

    for (let i = a.depth - 1; i >= 0; i--) {
      const p = `layers.${i}`;
      const blk = cache.blocks[i];
      // Y = post_norm2(mix path) + U: dU starts as dY, plus the norm branch below
      this.normBackward(dX, batch, P(`${p}.post_norm2.gamma`), blk.post2, ws.dGridB, G(`${p}.post_norm2.gamma`));
      this.toTokens(ws.dGridB, batch, ws.dTokens);
      accumTN(G(`${p}.mix_out.weight`), ws.dTokens, blk.act, rows, d, cm);
      accumColumnSums(G(`${p}.mix_out.bias`), ws.dTokens, rows, d);
      matmulNN(ws.dZ, ws.dTokens, P(`${p}.mix_out.weight`), rows, d, cm);
      if (this.activation === "square") {
        for (let k = 0; k < rows * cm; k++) ws.dZ[k] *= 2 * blk.z[k];
      } else {
        for (let k = 0; k < rows * cm; k++) if (blk.z[k] <= 0) ws.dZ[k] = 0;
      }
      accumTN(G(`${p}.mix_in.weight`), ws.dZ, blk.tokens, rows, cm, d);
      accumColumnSums(G(`${p}.mix_in.bias`), ws.dZ, rows, cm);
      matmulNN(ws.dTokens, ws.dZ, P(`${p}.mix_in.weight`), rows, cm, d);
      this.toGrid(ws.dTokens, batch, ws.dGridB);
      for (let k = 0; k < gridLen; k++) ws.dGridB[k] += dX[k]; // dU total

      // U = post_norm1(conv path) + X
      this.normBackward(ws.dGridB, batch, P(`${p}.post_norm1.gamma`), blk.post1, dX, G(`${p}.post_norm1.gamma`));
      const dConvBias = G(`${p}.conv.bias`);
      for (let b = 0; b < batch; b++) {
        for (let c = 0; c < d; c++) {
          const plane = (b * d + c) * n2;
          let s = 0;
          for (let t = 0; t < n2; t++) s += dX[plane + t];
          dConvBias[c] += s;
        }
      }
      this.dconvBackward(dX, blk.pre.xhat, P(`${p}.conv.weight`), batch, ws.gridC, G(`${p}.conv.weight`));
      this.normBackward(ws.gridC, batch, null, blk.pre, dX, null);
      for (let k = 0; k < gridLen; k++) dX[k] += ws.dGridB[k]; // + residual path
    }

    this.toTokens(dX, batch, ws.dTokens);
    accumTN(G("patch_embed.weight"), ws.dTokens, cache.patches, rows, d, patchDim(a));
    accumColumnSums(G("patch_embed.bias"), ws.dTokens, rows, d);
    return grads;
  }

  // ---- engine-mirroring evaluation -------------------------------------

  /**
   * Inference logits over float32-rounded tensors with folded
   * normalization, in float64 arithmetic, as the engine computes them
   * from the exported file. Inputs are rounded to float32 as well,
   * matching what a vectors file stores.
   */
  evalLogits(images: Float64Array | Float32Array, batch: number): Float64Array {
    const a = this.arch;
    const d = a.embedDim;
    const cm = a.channelMixDim;
    const n = archGrid(a);
    const n2 = n * n;
    const rows = batch * n2;
    const gridLen = batch * d * n2;
    const fr = Math.fround;
    const P32 = (name: string) => {
      const t = this.params.get(name)!;
      const o = new Float64Array(t.length);
      for (let i = 0; i < t.length; i++) o[i] = fr(t[i]);
      return o;
    };

    const imgs = new Float64Array(images.length);
    for (let i = 0; i < imgs.length; i++) imgs[i] = fr(images[i]);

    // scale = gamma / sqrt(var + eps), bias = -mean * scale, per (c, position)
    const fold = (prefix: string, withGamma: boolean) => {
      const mean = this.stats.get(`${prefix}.mean`)!;
      const variance = this.stats.get(`${prefix}.var`)!;
      const gamma = withGamma ? this.params.get(`${prefix}.gamma`)! : null;
      const scale = new Float64Array(d * n2);
      const bias = new Float64Array(d * n2);
      for (let p = 0; p < n2; p++) {
        const inv = 1 / Math.sqrt(fr(variance[p]) + NORM_EPS);
        const mu = fr(mean[p]);
        for (let c = 0; c < d; c++) {
          const s = (gamma === null ? 1 : fr(gamma[c])) * inv;
          scale[c * n2 + p] = s;
          bias[c * n2 + p] = -mu * s;
        }
      }
      return { scale, bias };
    };
    const applyAffine = (g: Float64Array, f: { scale: Float64Array; bias: Float64Array }) => {
      for (let b = 0; b < batch; b++) {
        const off = b * d * n2;
        for (let k = 0; k < d * n2; k++) g[off + k] = g[off + k] * f.scale[k] + f.bias[k];
      }
    };

    const patches = new Float64Array(rows * patchDim(a));
    this.extractPatches(imgs, batch, patches);
    let tok = new Float64Array(rows * Math.max(d, cm));
    matmulNT(tok, patches, P32("patch_embed.weight"), rows, patchDim(a), d);
    addBiasRows(tok, P32("patch_embed.bias"), rows, d);
    let cur = new Float64Array(gridLen);
    this.toGrid(tok, batch, cur);
    const scratch = new Float64Array(gridLen);
    const u = new Float64Array(gridLen);

    for (let i = 0; i < a.depth; i++) {
      const p = `layers.${i}`;
      scratch.set(cur);
      applyAffine(scratch, fold(`${p}.pre_norm`, false));
      this.dconvForward(scratch, P32(`${p}.conv.weight`), batch, u);
      const convBias = P32(`${p}.conv.bias`);
      for (let b = 0; b < batch; b++) {
        for (let c = 0; c < d; c++) {
          const plane = (b * d + c) * n2;
          for (let t = 0; t < n2; t++) u[plane + t] += convBias[c];
        }
      }
      applyAffine(u, fold(`${p}.post_norm1`, true));
      for (let k = 0; k < gridLen; k++) u[k] += cur[k];

      this.toTokens(u, batch, tok);
      const z = new Float64Array(rows * cm);
      matmulNT(z, tok, P32(`${p}.mix_in.weight`), rows, d, cm);
      addBiasRows(z, P32(`${p}.mix_in.bias`), rows, cm);
      if (this.activation === "square") {
        for (let k = 0; k < rows * cm; k++) z[k] = z[k] * z[k];
      } else {
        for (let k = 0; k < rows * cm; k++) if (z[k] < 0) z[k] = 0;
      }
      matmulNT(tok, z, P32(`${p}.mix_out.weight`), rows, cm, d);
      addBiasRows(tok, P32(`${p}.mix_out.bias`), rows, d);
      this.toGrid(tok, batch, scratch);
      applyAffine(scratch, fold(`${p}.post_norm2`, true));
      for (let k = 0; k < gridLen; k++) cur[k] = scratch[k] + u[k];
    }

    const pooled = new Float64Array(batch * d);
    for (let b = 0; b < batch; b++) {
      for (let c = 0; c < d; c++) {
        const plane = (b * d + c) * n2;
        let s = 0;
        for (let t = 0; t < n2; t++) s += cur[plane + t];
        pooled[b * d + c] = s / n2;
      }
    }
    const logits = new Float64Array(batch * a.numClasses);
    matmulNT(logits, pooled, P32("head.weight"), batch, d, a.numClasses);
    addBiasRows(logits, P32("head.bias"), batch, a.numClasses);
    return logits;
  }

  // ---- export -----------------------------------------------------------

  /**
   * The full float32 tensor inventory for the weights file. Only
   * square-activation models run on the engine, so anything else is
   * refused rather than silently exported.
   */
  exportTensors(): Map<string, Float32Array> {
    if (this.activation !== "square") {
      throw new ExportError(
        `cannot export a ${this.activation}-activation model; the engine evaluates squares only`,
      );
    }
    const out = new Map<string, Float32Array>();
    for (const [name, dims] of expectedShapes(this.arch)) {
      const src = (isStatName(name) ? this.stats : this.params).get(name);
      if (src === undefined) throw new ExportError(`missing tensor ${name}`);
      if (src.length !== numel(dims)) {
        throw new ExportError(`tensor ${name} has ${src.length} elements, expected ${numel(dims)}`);
      }
      const t = Float32Array.from(src);
      for (let i = 0; i < t.length; i++) {
        if (!Number.isFinite(t[i])) throw new ExportError(`tensor ${name} has a non-finite entry`);
      }
      out.set(name, t);
    }
    return out;
  }
}
