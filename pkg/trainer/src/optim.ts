/** AdamW with decoupled weight decay and a warmup-cosine schedule. */

export interface AdamWConfig {
  beta1: number;
  beta2: number;
  eps: number;
  weightDecay: number;
}

export const ADAMW_DEFAULTS: AdamWConfig = {
  beta1: 0.9,
  beta2: 0.99,
  eps: 1e-8,
  weightDecay: 0.05,
};

export class AdamW {
  private readonly cfg: AdamWConfig;
  private readonly m = new Map<string, Float64Array>();
  private readonly v = new Map<string, Float64Array>();
  private t = 0;

  constructor(cfg: AdamWConfig) {
    this.cfg = cfg;
  }

  /** Decay applies to weight matrices and kernels, not biases or gains. */
  static decays(name: string): boolean {
    return name.endsWith(".weight");
  }

  step(params: Map<string, Float64Array>, grads: Map<string, Float64Array>, lr: number): void {
    const { beta1, beta2, eps, weightDecay } = this.cfg;
    this.t += 1;
    const bc1 = 1 - Math.pow(beta1, this.t);
    const bc2 = 1 - Math.pow(beta2, this.t);
    for (const [name, p] of params) {
      const g = grads.get(name);
      if (g === undefined) throw new Error(`no gradient for ${name}`);
      let m = this.m.get(name);
      let v = this.v.get(name);
      if (m === undefined || v === undefined) {
        m = new Float64Array(p.length);
        v = new Float64Array(p.length);
        this.m.set(name, m);
        this.v.set(name, v);
      }
      const wd = AdamW.decays(name) ? weightDecay : 0;
      for (let i = 0; i < p.length; i++) {
        const gi = g[i];
        m[i] = beta1 * m[i] + (1 - beta1) * gi;
        v[i] = beta2 * v[i] + (1 - beta2) * gi * gi;
        const update = (m[i] / bc1) / (Math.sqrt(v[i] / bc2) + eps);
        p[i] -= lr * (update + wd * p[i]);
      }
    }
  }
}

/** Linear warmup to lrMax, then cosine decay to zero over the rest. */
export function scheduledLr(step: number, totalSteps: number, warmupSteps: number, lrMax: number): number {
  if (step < warmupSteps) return (lrMax * (step + 1)) / warmupSteps;
  if (totalSteps <= warmupSteps) return lrMax;
  const progress = (step - warmupSteps) / (totalSteps - warmupSteps);
  return lrMax * 0.5 * (1 + Math.cos(Math.PI * progress));
}
