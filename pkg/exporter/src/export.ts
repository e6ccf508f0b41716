// Export pipeline: prompts file -> one bundle per prompt + a manifest CSV.

import * as fs from "node:fs";
import * as path from "node:path";

import { BundleRecord, writeBundle } from "./bundle.js";
import { CHARSET, TinyCausalLM, encodeText, loadModel } from "./model.js";
import { DEFAULT_DECODE, DecodeConfig, sampleGenerations } from "./sampling.js";

export interface ExportJob {
  model: string; // model identifier, e.g. "builtin:32x2:7"
  promptsPath: string; // one UTF-8 prompt per line
  referencesPath?: string; // parallel file, tab-separated alternatives
  decode: DecodeConfig;
  layer?: number; // residual stream index; default middle layer
  outDir: string;
  maxPrompts?: number;
}

export interface ManifestRow {
  file: string;
  promptId: string;
  k: number;
  d: number;
  tokens: number;
  status: string;
}

const EOS = CHARSET.indexOf("\n");

export function buildBundle(
  model: TinyCausalLM,
  prompt: string,
  references: string[],
  decode: DecodeConfig,
  layer: number,
  promptId: string
): BundleRecord {
  const promptTokens = encodeText(prompt);
  const generations = sampleGenerations(model, promptTokens, decode, layer, EOS);
  return {
    promptId,
    promptText: prompt,
    references,
    generations: generations.map((g) => ({
      tokens: g.tokens,
      logprob: g.logprob,
      stepEntropy: g.stepEntropy,
      stepLse: g.stepLse,
      text: g.text,
      sentEmbed: Float32Array.from(g.sentEmbed),
      stepStates: flattenStates(g.stepStates),
    })),
    embedDim: model.config.dModel,
    label: null,
    rougeToRef: null,
    meta: {
      backbone: "builtin-tiny-causal-lm",
      layer: String(layer),
      layer_norm: "pre",
      temperature: String(decode.temperature),
      top_p: String(decode.topP),
      top_k: String(decode.topK),
      greedy: decode.greedy ? "1" : "0",
      seed: String(decode.seed),
      model_id: "",
    },
  };
}

function flattenStates(states: Float64Array[]): Float32Array {
  const t = states.length;
  const d = t > 0 ? states[0].length : 0;
  const out = new Float32Array(t * d);
  for (let row = 0; row < t; row++) out.set(Float32Array.from(states[row]), row * d);
  return out;
}

export function runExport(job: ExportJob): ManifestRow[] {
  const model = loadModel(job.model);
  const layer = job.layer ?? model.midLayer;
  model.hiddenSizeAt(layer); // validates the selector against model depth
  const prompts = fs
    .readFileSync(job.promptsPath, "utf-8")
    .split("\n")
    .filter((line) => line.length > 0);
  if (prompts.length === 0) throw new Error("prompts file is empty");
  let references: string[][] = prompts.map(() => []);
  if (job.referencesPath) {
    references = fs
      .readFileSync(job.referencesPath, "utf-8")
      .split("\n")
      .slice(0, prompts.length)
      .map((line) => (line.length > 0 ? line.split("\t") : []));
    while (references.length < prompts.length) references.push([]);
  }
  const limit = job.maxPrompts ?? prompts.length;
  fs.mkdirSync(job.outDir, { recursive: true });
  const manifest: ManifestRow[] = [];
  for (let i = 0; i < Math.min(prompts.length, limit); i++) {
    const promptId = `p${String(i).padStart(5, "0")}`;
    const file = `${promptId}.hgb`;
    try {
      const decode = { ...job.decode, seed: (job.decode.seed + i) >>> 0 };
      const bundle = buildBundle(model, prompts[i], references[i], decode, layer, promptId);
      bundle.meta.model_id = job.model;
      fs.writeFileSync(path.join(job.outDir, file), writeBundle(bundle));
      manifest.push({
        file,
        promptId,
        k: bundle.generations.length,
        d: bundle.embedDim,
        tokens: bundle.generations.reduce((acc, g) => acc + g.tokens.length, 0),
        status: "ok",
      });
    } catch (err) {
      // Per-prompt failures are recorded, not fatal: the manifest is the
      // source of truth for what was exported.
      manifest.push({
        file,
        promptId,
        k: job.decode.kSamples,
        d: model.config.dModel,
        tokens: 0,
        status: `skip: ${(err as Error).message}`,
      });
    }
  }
  const manifestPath = path.join(job.outDir, "manifest.csv");
  const lines = ["file,prompt_id,K,d,tokens,status"];
  for (const row of manifest) {
    lines.push(
      [row.file, row.promptId, row.k, row.d, row.tokens, csvEscape(row.status)].join(",")
    );
  }
  fs.writeFileSync(manifestPath, lines.join("\n") + "\n");
  return manifest;
}

function csvEscape(value: string): string {
  return /[",\n]/.test(value) ? `"${value.replace(/"/g, '""')}"` : value;
}

export { DEFAULT_DECODE };
