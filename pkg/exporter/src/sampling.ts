// Decode loop with exact per-step statistics.
//
// Entropy and logsumexp describe the model and come from the raw
// (unit-temperature, untruncated) next-token distribution; the recorded
// log-probability describes the sampler and comes from the truncated,
// renormalized distribution the token was actually drawn from.

import { Rng } from "./rng.js";
import { TinyCausalLM, decodeTokens } from "./model.js";

export interface DecodeConfig {
  temperature: number;
  topP: number;
  topK: number;
  kSamples: number;
  maxSteps: number;
  seed: number;
  greedy: boolean;
}

export const DEFAULT_DECODE: DecodeConfig = {
  temperature: 0.5,
  topP: 0.95,
  topK: 10,
  kSamples: 10,
  maxSteps: 16,
  seed: 0,
  greedy: false,
};

export interface SampledGeneration {
  tokens: number[];
  logprob: number[];
  stepEntropy: number[];
  stepLse: number[];
  text: string;
  sentEmbed: Float64Array;
  stepStates: Float64Array[];
}

export function logSumExp(values: Float64Array): number {
  let max = -Infinity;
  for (const v of values) if (v > max) max = v;
  let acc = 0;
  for (const v of values) acc += Math.exp(v - max);
  return max + Math.log(acc);
}

export function rawEntropy(logits: Float64Array): number {
  const lse = logSumExp(logits);
  let h = 0;
  for (const v of logits) {
    const logp = v - lse;
    h -= Math.exp(logp) * logp;
  }
  return h;
}

/**
 * Log-probabilities of the temperature/top-k/top-p truncated sampler.
 * Returns -Infinity outside the kept set; kept entries renormalize to 1.
 */
export function truncatedLogProbs(
  logits: Float64Array,
  temperature: number,
  topK: number,
  topP: number
): Float64Array {
  const v = logits.length;
  const z = new Float64Array(v);
  for (let i = 0; i < v; i++) z[i] = logits[i] / temperature;
  const order = Array.from({ length: v }, (_, i) => i).sort((a, b) => z[b] - z[a]);
  const kept = order.slice(0, Math.min(topK, v));
  // Nucleus mass is relative to the (tempered) top-k distribution.
  const keptLse = logSumExp(Float64Array.from(kept.map((i) => z[i])));
  const nucleus: number[] = [];
  let mass = 0;
  for (const idx of kept) {
    nucleus.push(idx);
    mass += Math.exp(z[idx] - keptLse);
    if (mass >= topP) break;
  }
  const nucleusLse = logSumExp(Float64Array.from(nucleus.map((i) => z[i])));
  const out = new Float64Array(v).fill(-Infinity);
  for (const idx of nucleus) out[idx] = z[idx] - nucleusLse;
  return out;
}

function sampleFrom(logProbs: Float64Array, rng: Rng): number {
  const u = rng.next();
  let cdf = 0;
  let last = 0;
  for (let i = 0; i < logProbs.length; i++) {
    if (logProbs[i] === -Infinity) continue;
    cdf += Math.exp(logProbs[i]);
    last = i;
    if (u < cdf) return i;
  }
  return last;
}

function argmax(values: Float64Array): number {
  let best = 0;
  for (let i = 1; i < values.length; i++) if (values[i] > values[best]) best = i;
  return best;
}

/**
 * Sample K continuations of a prompt, recording per-step stats and the
 * residual stream at ``stateLayer`` for every generated position.
 */
export function sampleGenerations(
  model: TinyCausalLM,
  promptTokens: number[],
  decode: DecodeConfig,
  stateLayer: number,
  eosToken: number
): SampledGeneration[] {
  const { contextLen } = model.config;
  if (promptTokens.length + decode.maxSteps > contextLen) {
    throw new Error(
      `prompt ${promptTokens.length} + maxSteps ${decode.maxSteps} exceeds context ${contextLen}`
    );
  }
  const generations: SampledGeneration[] = [];
  for (let k = 0; k < decode.kSamples; k++) {
    const rng = new Rng(decode.seed).derive(k);
    const context = promptTokens.slice();
    const tokens: number[] = [];
    const logprob: number[] = [];
    const stepEntropy: number[] = [];
    const stepLse: number[] = [];
    for (let step = 0; step < decode.maxSteps; step++) {
      const { logits } = model.forward(context);
      const raw = logits[logits.length - 1];
      stepLse.push(logSumExp(raw));
      stepEntropy.push(rawEntropy(raw));
      const truncated = truncatedLogProbs(raw, decode.temperature, decode.topK, decode.topP);
      const chosen = decode.greedy ? argmax(raw) : sampleFrom(truncated, rng);
      logprob.push(truncated[chosen]);
      tokens.push(chosen);
      context.push(chosen);
      if (chosen === eosToken) break;
    }
    // One final pass gives the recorded states; causal attention makes them
    // identical to the stepwise values.
    const { resids } = model.forward(context);
    const states = resids[stateLayer].slice(promptTokens.length);
    generations.push({
      tokens,
      logprob,
      stepEntropy,
      stepLse,
      text: decodeTokens(tokens),
      sentEmbed: states[states.length - 1],
      stepStates: states,
    });
  }
  return generations;
}
