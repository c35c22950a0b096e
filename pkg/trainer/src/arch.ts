/**
 * Architecture description shared by the trainer, the exporter, and
 * the file formats. Matches the inference engine's configuration
 * tuple (image, patch, embed, channel-mix, depth, classes).
 */

export interface ModelArch {
  imageSize: number;
  patchSize: number;
  embedDim: number;
  channelMixDim: number;
  depth: number;
  numClasses: number;
}

export function grid(a: ModelArch): number {
  return a.imageSize / a.patchSize;
}

export function tokens(a: ModelArch): number {
  const n = grid(a);
  return n * n;
}

export function patchDim(a: ModelArch): number {
  return 3 * a.patchSize * a.patchSize;
}

export function validateArch(a: ModelArch): void {
  for (const [k, v] of Object.entries(a)) {
    if (!Number.isInteger(v) || v <= 0) {
      throw new Error(`${k} must be a positive integer, got ${v}`);
    }
  }
  if (a.imageSize % a.patchSize !== 0) {
    throw new Error(`imageSize ${a.imageSize} is not a multiple of patchSize ${a.patchSize}`);
  }
}

export function archTuple(a: ModelArch): [number, number, number, number, number, number] {
  return [a.imageSize, a.patchSize, a.embedDim, a.channelMixDim, a.depth, a.numClasses];
}

/** The full tensor inventory of a weights file, name -> dims. */
export function expectedShapes(a: ModelArch): Map<string, number[]> {
  const n = grid(a);
  const d = a.embedDim;
  const cm = a.channelMixDim;
  const shapes = new Map<string, number[]>();
  shapes.set("patch_embed.weight", [d, patchDim(a)]);
  shapes.set("patch_embed.bias", [d]);
  for (let i = 0; i < a.depth; i++) {
    const p = `layers.${i}`;
    shapes.set(`${p}.pre_norm.mean`, [n, n]);
    shapes.set(`${p}.pre_norm.var`, [n, n]);
    shapes.set(`${p}.conv.weight`, [d, 3, 3]);
    shapes.set(`${p}.conv.bias`, [d]);
    shapes.set(`${p}.post_norm1.mean`, [n, n]);
    shapes.set(`${p}.post_norm1.var`, [n, n]);
    shapes.set(`${p}.post_norm1.gamma`, [d]);
    shapes.set(`${p}.mix_in.weight`, [cm, d]);
    shapes.set(`${p}.mix_in.bias`, [cm]);
    shapes.set(`${p}.mix_out.weight`, [d, cm]);
    shapes.set(`${p}.mix_out.bias`, [d]);
    shapes.set(`${p}.post_norm2.mean`, [n, n]);
    shapes.set(`${p}.post_norm2.var`, [n, n]);
    shapes.set(`${p}.post_norm2.gamma`, [d]);
  }
  shapes.set("head.weight", [a.numClasses, d]);
  shapes.set("head.bias", [a.numClasses]);
  return shapes;
}

export function numel(dims: number[]): number {
  return dims.reduce((acc, v) => acc * v, 1);
}

/** MNIST architecture used throughout: 7x7 grid of 4x4 patches, 64-wide, 4 blocks. */
export function mnistArch(): ModelArch {
  return {
    imageSize: 28,
    patchSize: 4,
    embedDim: 64,
    channelMixDim: 64,
    depth: 4,
    numClasses: 10,
  };
}
