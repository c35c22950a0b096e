/**
 * Flat Float64Array kernels. The matmuls use 2x2 register blocking,
 * which roughly halves wall time in V8 over the naive loops; inner
 * loops always walk both operands contiguously.
 */

/** out[M,N] = a[M,K] · b[N,K]^T  (b holds one row per output). */
export function matmulNT(
  out: Float64Array, a: Float64Array, b: Float64Array,
  M: number, K: number, N: number,
): void {
  const M2 = M & ~1;
  const N2 = N & ~1;
  for (let i = 0; i < M2; i += 2) {
    const a0 = i * K;
    const a1 = a0 + K;
    const o0 = i * N;
    const o1 = o0 + N;
    for (let j = 0; j < N2; j += 2) {
      const b0 = j * K;
      const b1 = b0 + K;
      let s00 = 0, s01 = 0, s10 = 0, s11 = 0;
      for (let k = 0; k < K; k++) {
        const x0 = a[a0 + k];
        const x1 = a[a1 + k];
        const y0 = b[b0 + k];
        const y1 = b[b1 + k];
        s00 += x0 * y0;
        s01 += x0 * y1;
        s10 += x1 * y0;
        s11 += x1 * y1;
      }
      out[o0 + j] = s00;
      out[o0 + j + 1] = s01;
      out[o1 + j] = s10;
      out[o1 + j + 1] = s11;
    }
    for (let j = N2; j < N; j++) {
      const bj = j * K;
      let s0 = 0, s1 = 0;
      for (let k = 0; k < K; k++) {
        s0 += a[a0 + k] * b[bj + k];
        s1 += a[a1 + k] * b[bj + k];
      }
      out[o0 + j] = s0;
      out[o1 + j] = s1;
    }
  }
  for (let i = M2; i < M; i++) {
    const ai = i * K;
    const oi = i * N;
    for (let j = 0; j < N; j++) {
      const bj = j * K;
      let s = 0;
      for (let k = 0; k < K; k++) s += a[ai + k] * b[bj + k];
      out[oi + j] = s;
    }
  }
}

/** out[M,N] = a[M,K] · b[K,N]. */
export function matmulNN(
  out: Float64Array, a: Float64Array, b: Float64Array,
  M: number, K: number, N: number,
): void {
  out.fill(0, 0, M * N);
  const K2 = K & ~1;
  for (let i = 0; i < M; i++) {
    const ai = i * K;
    const oi = i * N;
    for (let k = 0; k < K2; k += 2) {
      const v0 = a[ai + k];
      const v1 = a[ai + k + 1];
      const b0 = k * N;
      const b1 = b0 + N;
      if (v0 === 0 && v1 === 0) continue;
      for (let j = 0; j < N; j++) out[oi + j] += v0 * b[b0 + j] + v1 * b[b1 + j];
    }
    for (let k = K2; k < K; k++) {
      const v = a[ai + k];
      if (v === 0) continue;
      const bk = k * N;
      for (let j = 0; j < N; j++) out[oi + j] += v * b[bk + j];
    }
  }
}

/** out[K,N] += a[M,K]^T · b[M,N]; caller zeroes out first. */
export function accumTN(
  out: Float64Array, a: Float64Array, b: Float64Array,
  M: number, K: number, N: number,
): void {
  const M2 = M & ~1;
  for (let i = 0; i < M2; i += 2) {
    const a0 = i * K;
    const a1 = a0 + K;
    const b0 = i * N;
    const b1 = b0 + N;
    for (let k = 0; k < K; k++) {
      const v0 = a[a0 + k];
      const v1 = a[a1 + k];
      if (v0 === 0 && v1 === 0) continue;
      const ok = k * N;
      for (let j = 0; j < N; j++) out[ok + j] += v0 * b[b0 + j] + v1 * b[b1 + j];
    }
  }
  for (let i = M2; i < M; i++) {
    const ai = i * K;
    const bi = i * N;
    for (let k = 0; k < K; k++) {
      const v = a[ai + k];
      if (v === 0) continue;
      const ok = k * N;
      for (let j = 0; j < N; j++) out[ok + j] += v * b[bi + j];
    }
  }
}

/** rows[i] += bias, for an (M, N) tensor. */
export function addBiasRows(x: Float64Array, bias: Float64Array, M: number, N: number): void {
  for (let i = 0; i < M; i++) {
    const oi = i * N;
    for (let j = 0; j < N; j++) x[oi + j] += bias[j];
  }
}

/** out[j] += column sums of an (M, N) tensor. */
export function accumColumnSums(out: Float64Array, x: Float64Array, M: number, N: number): void {
  for (let i = 0; i < M; i++) {
    const oi = i * N;
    for (let j = 0; j < N; j++) out[j] += x[oi + j];
  }
}
