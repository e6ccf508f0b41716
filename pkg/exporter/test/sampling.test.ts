import { describe, expect, it } from "vitest";

import { CHARSET, encodeText, loadModel } from "../src/model.js";
import {
  DEFAULT_DECODE,
  logSumExp,
  rawEntropy,
  sampleGenerations,
  truncatedLogProbs,
} from "../src/sampling.js";

const model = loadModel("builtin:32x2:7");
const EOS = CHARSET.indexOf("\n");

describe("truncated sampler", () => {
  it("renormalizes to probability one", () => {
    const logits = Float64Array.from({ length: 40 }, (_, i) => Math.sin(i * 1.7) * 3);
    const lp = truncatedLogProbs(logits, 0.5, 10, 0.95);
    let mass = 0;
    let kept = 0;
    for (const value of lp) {
      if (value !== -Infinity) {
        mass += Math.exp(value);
        kept += 1;
      }
    }
    expect(mass).toBeCloseTo(1.0, 9);
    expect(kept).toBeLessThanOrEqual(10);
  });

  it("keeps the minimal nucleus prefix", () => {
    const probs = [0.5, 0.3, 0.15, 0.05];
    const logits = Float64Array.from(probs.map((p) => Math.log(p)));
    const lp = truncatedLogProbs(logits, 1.0, 4, 0.75);
    expect(lp[0]).not.toBe(-Infinity);
    expect(lp[1]).not.toBe(-Infinity);
    expect(lp[2]).toBe(-Infinity);
    expect(lp[3]).toBe(-Infinity);
    expect(Math.exp(lp[0])).toBeCloseTo(0.625, 9);
  });

  it("top-k one is a point mass at the argmax", () => {
    const logits = Float64Array.from([0.3, 2.5, -1.0, 0.9]);
    const lp = truncatedLogProbs(logits, 0.5, 1, 1.0);
    expect(lp[1]).toBeCloseTo(0.0, 12);
    expect(lp[0]).toBe(-Infinity);
  });

  it("entropy matches the raw distribution definition", () => {
    const logits = Float64Array.from([Math.log(4), Math.log(4), Math.log(4), Math.log(4)]);
    expect(rawEntropy(logits)).toBeCloseTo(Math.log(4), 10);
    expect(logSumExp(logits)).toBeCloseTo(Math.log(16), 10);
  });
});

describe("sampleGenerations", () => {
  const prompt = encodeText("12+34=");

  it("is deterministic under a fixed seed", () => {
    const decode = { ...DEFAULT_DECODE, kSamples: 3, maxSteps: 6, seed: 42 };
    const a = sampleGenerations(model, prompt, decode, model.midLayer, EOS);
    const b = sampleGenerations(model, prompt, decode, model.midLayer, EOS);
    expect(a.map((g) => g.tokens)).toEqual(b.map((g) => g.tokens));
    expect(a.map((g) => g.logprob)).toEqual(b.map((g) => g.logprob));
  });

  it("greedy yields identical generations", () => {
    const decode = { ...DEFAULT_DECODE, kSamples: 3, maxSteps: 5, greedy: true };
    const gens = sampleGenerations(model, prompt, decode, model.midLayer, EOS);
    expect(gens[1].tokens).toEqual(gens[0].tokens);
    expect(gens[2].text).toBe(gens[0].text);
  });

  it("records one state row per generated token", () => {
    const decode = { ...DEFAULT_DECODE, kSamples: 2, maxSteps: 7, seed: 3 };
    for (const gen of sampleGenerations(model, prompt, decode, model.midLayer, EOS)) {
      expect(gen.stepStates.length).toBe(gen.tokens.length);
      expect(gen.sentEmbed).toEqual(gen.stepStates[gen.stepStates.length - 1]);
      expect(gen.logprob.every((lp) => lp <= 0)).toBe(true);
      expect(gen.stepEntropy.every((h) => h >= 0)).toBe(true);
    }
  });

  it("embedding dimension equals the model hidden size at the layer", () => {
    const decode = { ...DEFAULT_DECODE, kSamples: 2, maxSteps: 3 };
    const gens = sampleGenerations(model, prompt, decode, model.midLayer, EOS);
    expect(gens[0].sentEmbed.length).toBe(model.hiddenSizeAt(model.midLayer));
    expect(gens[0].sentEmbed.length).toBe(model.config.dModel);
  });

  it("rejects prompts that overflow the context", () => {
    const long = encodeText("x".repeat(model.config.contextLen));
    expect(() =>
      sampleGenerations(model, long, { ...DEFAULT_DECODE, maxSteps: 4 }, model.midLayer, EOS)
    ).toThrow(/context/);
  });
});
