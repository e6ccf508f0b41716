// Selfcheck: re-derive one generation's statistics with a fresh forward
// pass and compare against what the bundle stores.

import * as fs from "node:fs";

import { readBundle } from "./bundle.js";
import { encodeText, loadModel } from "./model.js";
import { logSumExp, truncatedLogProbs } from "./sampling.js";

export interface SelfcheckReport {
  ok: boolean;
  maxAbsDiff: number;
  failures: string[];
}

const TOLERANCE = 1e-3;

export function selfcheck(bundlePath: string, generationIndex = 0): SelfcheckReport {
  const failures: string[] = [];
  const bundle = readBundle(fs.readFileSync(bundlePath));

  if (bundle.generations.length < 2) failures.push(`K=${bundle.generations.length} < 2`);
  if (bundle.embedDim < 1) failures.push(`embed_dim=${bundle.embedDim}`);
  for (const [key, expected] of [["backbone", "builtin-tiny-causal-lm"]] as const) {
    if (bundle.meta[key] !== expected) {
      failures.push(`meta ${key}=${bundle.meta[key] ?? "<missing>"}`);
    }
  }

  const modelId = bundle.meta.model_id;
  if (!modelId) {
    return { ok: false, maxAbsDiff: NaN, failures: [...failures, "meta model_id missing"] };
  }
  const model = loadModel(modelId);
  const temperature = Number(bundle.meta.temperature);
  const topP = Number(bundle.meta.top_p);
  const topK = Number(bundle.meta.top_k);

  const gen = bundle.generations[generationIndex];
  const context = encodeText(bundle.promptText);
  let maxAbsDiff = 0;
  for (let step = 0; step < gen.tokens.length; step++) {
    const { logits } = model.forward(context);
    const raw = logits[logits.length - 1];
    const truncated = truncatedLogProbs(raw, temperature, topK, topP);
    const recomputedLogProb = truncated[gen.tokens[step]];
    const recomputedLse = logSumExp(raw);
    maxAbsDiff = Math.max(
      maxAbsDiff,
      Math.abs(recomputedLogProb - gen.logprob[step]),
      Math.abs(recomputedLse - gen.stepLse[step])
    );
    context.push(gen.tokens[step]);
  }
  if (!(maxAbsDiff <= TOLERANCE)) {
    failures.push(`logprob/lse recomputation off by ${maxAbsDiff}`);
  }
  return { ok: failures.length === 0, maxAbsDiff, failures };
}
