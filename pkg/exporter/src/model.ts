// Self-contained causal transformer LM used as the export backbone.
//
// The sandbox has no pretrained-weight source, so the exporter ships a
// deterministic stand-in: a character-level GPT-style decoder whose weights
// derive from the seed in the model identifier ("builtin:<d_model>x<layers>
// :<seed>"). Everything the export pipeline needs from a real backbone is
// exposed: per-position logits and the residual stream entering every
// block, so mid-layer states come from the same place they would with a
// hosted model.

import { Rng } from "./rng.js";

export const CHARSET =
  "\n !\"#$%&'()*+,-./0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ[\\]^_`" +
  "abcdefghijklmnopqrstuvwxyz{|}~";

export interface ModelConfig {
  vocabSize: number;
  dModel: number;
  nLayers: number;
  nHeads: number;
  contextLen: number;
  seed: number;
}

type Matrix = Float64Array; // row-major

function matrix(rng: Rng, rows: number, cols: number, scale: number): Matrix {
  const out = new Float64Array(rows * cols);
  for (let i = 0; i < out.length; i++) out[i] = rng.normal() * scale;
  return out;
}

interface BlockWeights {
  ln1Gain: Float64Array;
  ln1Bias: Float64Array;
  wq: Matrix;
  wk: Matrix;
  wv: Matrix;
  wo: Matrix;
  ln2Gain: Float64Array;
  ln2Bias: Float64Array;
  wUp: Matrix;
  bUp: Float64Array;
  wDown: Matrix;
  bDown: Float64Array;
}

export class TinyCausalLM {
  readonly config: ModelConfig;
  private wte: Matrix;
  private wpe: Matrix;
  private blocks: BlockWeights[];
  private lnfGain: Float64Array;
  private lnfBias: Float64Array;
  private head: Matrix;

  constructor(config: ModelConfig) {
    if (config.dModel % config.nHeads !== 0) {
      throw new Error(`dModel ${config.dModel} not divisible by nHeads ${config.nHeads}`);
    }
    this.config = config;
    const rng = new Rng(config.seed);
    const d = config.dModel;
    const scale = 0.08;
    this.wte = matrix(rng, config.vocabSize, d, scale);
    this.wpe = matrix(rng, config.contextLen, d, scale);
    this.blocks = [];
    for (let l = 0; l < config.nLayers; l++) {
      this.blocks.push({
        ln1Gain: new Float64Array(d).fill(1),
        ln1Bias: new Float64Array(d),
        wq: matrix(rng, d, d, scale),
        wk: matrix(rng, d, d, scale),
        wv: matrix(rng, d, d, scale),
        wo: matrix(rng, d, d, scale),
        ln2Gain: new Float64Array(d).fill(1),
        ln2Bias: new Float64Array(d),
        wUp: matrix(rng, d, 4 * d, scale),
        bUp: new Float64Array(4 * d),
        wDown: matrix(rng, 4 * d, d, scale),
        bDown: new Float64Array(d),
      });
    }
    this.lnfGain = new Float64Array(d).fill(1);
    this.lnfBias = new Float64Array(d);
    this.head = matrix(rng, d, config.vocabSize, scale);
  }

  get midLayer(): number {
    return Math.ceil(this.config.nLayers / 2);
  }

  hiddenSizeAt(layer: number): number {
    if (layer < 0 || layer > this.config.nLayers) {
      throw new Error(`layer ${layer} outside depth ${this.config.nLayers}`);
    }
    return this.config.dModel;
  }

  /**
   * Full forward pass over a token sequence.
   *
   * Returns per-position logits and the residual stream entering each block
   * (index 0 = embeddings, index nLayers = final residual).
   */
  forward(tokens: number[]): { logits: Float64Array[]; resids: Float64Array[][] } {
    const { dModel: d, contextLen, vocabSize } = this.config;
    const t = tokens.length;
    if (t > contextLen) throw new Error(`context ${t} exceeds limit ${contextLen}`);
    let x: Float64Array[] = [];
    for (let p = 0; p < t; p++) {
      const row = new Float64Array(d);
      for (let i = 0; i < d; i++) {
        row[i] = this.wte[tokens[p] * d + i] + this.wpe[p * d + i];
      }
      x.push(row);
    }
    const resids: Float64Array[][] = [x.map((r) => r.slice())];
    for (const block of this.blocks) {
      x = this.applyBlock(block, x);
      resids.push(x.map((r) => r.slice()));
    }
    const logits: Float64Array[] = [];
    for (let p = 0; p < t; p++) {
      const normed = layerNorm(x[p], this.lnfGain, this.lnfBias);
      const row = new Float64Array(vocabSize);
      for (let v = 0; v < vocabSize; v++) {
        let acc = 0;
        for (let i = 0; i < d; i++) acc += normed[i] * this.head[i * vocabSize + v];
        row[v] = acc;
      }
      logits.push(row);
    }
    return { logits, resids };
  }

  private applyBlock(block: BlockWeights, x: Float64Array[]): Float64Array[] {
    const d = this.config.dModel;
    const heads = this.config.nHeads;
    const hd = d / heads;
    const t = x.length;
    const normed = x.map((row) => layerNorm(row, block.ln1Gain, block.ln1Bias));
    const q = normed.map((row) => matVec(block.wq, row, d, d));
    const k = normed.map((row) => matVec(block.wk, row, d, d));
    const v = normed.map((row) => matVec(block.wv, row, d, d));
    const afterAttn: Float64Array[] = [];
    for (let p = 0; p < t; p++) {
      const mixed = new Float64Array(d);
      for (let h = 0; h < heads; h++) {
        const off = h * hd;
        const scores = new Float64Array(p + 1);
        let max = -Infinity;
        for (let s = 0; s <= p; s++) {
          let acc = 0;
          for (let i = 0; i < hd; i++) acc += q[p][off + i] * k[s][off + i];
          scores[s] = acc / Math.sqrt(hd);
          if (scores[s] > max) max = scores[s];
        }
        let z = 0;
        for (let s = 0; s <= p; s++) {
          scores[s] = Math.exp(scores[s] - max);
          z += scores[s];
        }
        for (let s = 0; s <= p; s++) {
          const w = scores[s] / z;
          for (let i = 0; i < hd; i++) mixed[off + i] += w * v[s][off + i];
        }
      }
      const proj = matVec(block.wo, mixed, d, d);
      const out = new Float64Array(d);
      for (let i = 0; i < d; i++) out[i] = x[p][i] + proj[i];
      afterAttn.push(out);
    }
    const result: Float64Array[] = [];
    for (let p = 0; p < t; p++) {
      const normed2 = layerNorm(afterAttn[p], block.ln2Gain, block.ln2Bias);
      const up = matVec(block.wUp, normed2, d, 4 * d);
      for (let i = 0; i < up.length; i++) up[i] = gelu(up[i] + block.bUp[i]);
      const down = matVec(block.wDown, up, 4 * d, d);
      const out = new Float64Array(d);
      for (let i = 0; i < d; i++) out[i] = afterAttn[p][i] + down[i] + block.bDown[i];
      result.push(out);
    }
    return result;
  }
}

function matVec(w: Matrix, x: Float64Array, inDim: number, outDim: number): Float64Array {
  const out = new Float64Array(outDim);
  for (let i = 0; i < inDim; i++) {
    const xi = x[i];
    if (xi === 0) continue;
    const row = i * outDim;
    for (let j = 0; j < outDim; j++) out[j] += xi * w[row + j];
  }
  return out;
}

function layerNorm(x: Float64Array, gain: Float64Array, bias: Float64Array): Float64Array {
  let mean = 0;
  for (const value of x) mean += value;
  mean /= x.length;
  let variance = 0;
  for (const value of x) variance += (value - mean) ** 2;
  variance /= x.length;
  const inv = 1.0 / Math.sqrt(variance + 1e-5);
  const out = new Float64Array(x.length);
  for (let i = 0; i < x.length; i++) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
  return out;
}

function gelu(x: number): number {
  return 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x ** 3)));
}

export const encodeText = (text: string): number[] => {
  const out: number[] = [];
  for (const ch of text) {
    const idx = CHARSET.indexOf(ch);
    out.push(idx >= 0 ? idx : CHARSET.indexOf(" "));
  }
  return out;
};

export const decodeTokens = (tokens: number[]): string =>
  tokens.map((t) => CHARSET[t] ?? " ").join("");

const MODEL_ID_PATTERN = /^builtin:(\d+)x(\d+):(\d+)$/;

/** Resolve a model identifier like "builtin:32x2:7" into a loaded model. */
export function loadModel(identifier: string): TinyCausalLM {
  const match = MODEL_ID_PATTERN.exec(identifier);
  if (!match) {
    throw new Error(
      `unknown model identifier ${identifier}; expected builtin:<d_model>x<layers>:<seed>`
    );
  }
  const dModel = parseInt(match[1], 10);
  const nLayers = parseInt(match[2], 10);
  const seed = parseInt(match[3], 10);
  return new TinyCausalLM({
    vocabSize: CHARSET.length,
    dModel,
    nLayers,
    nHeads: dModel % 4 === 0 ? 4 : 2,
    contextLen: 96,
    seed,
  });
}
