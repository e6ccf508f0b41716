#!/usr/bin/env node
// trajectory-exporter CLI: export | selfcheck

import { DEFAULT_DECODE, runExport } from "./export.js";
import { selfcheck } from "./selfcheck.js";

interface Flags {
  [key: string]: string;
}

function parseFlags(argv: string[], allowed: Set<string>): { flags: Flags; positional: string[] } {
  const flags: Flags = {};
  const positional: string[] = [];
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg.startsWith("--")) {
      const name = arg.slice(2);
      if (!allowed.has(name)) {
        throw new Error(`unknown flag --${name}`);
      }
      const value = argv[++i];
      if (value === undefined) throw new Error(`--${name} needs a value`);
      flags[name] = value;
    } else {
      positional.push(arg);
    }
  }
  return { flags, positional };
}

function usage(): string {
  return [
    "usage:",
    "  trajectory-exporter export --model builtin:32x2:7 --prompts FILE --out DIR",
    "      [--references FILE] [--layer N] [--max-prompts N] [--k N]",
    "      [--max-steps N] [--temperature F] [--top-p F] [--top-k N]",
    "      [--greedy 0|1] [--seed N]",
    "  trajectory-exporter selfcheck BUNDLE [--generation N]",
  ].join("\n");
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "export") {
      const { flags } = parseFlags(
        rest,
        new Set([
          "model", "prompts", "references", "out", "layer", "max-prompts",
          "k", "max-steps", "temperature", "top-p", "top-k", "greedy", "seed",
        ])
      );
      if (!flags.model || !flags.prompts || !flags.out) {
        throw new Error("export needs --model, --prompts and --out");
      }
      const manifest = runExport({
        model: flags.model,
        promptsPath: flags.prompts,
        referencesPath: flags.references,
        outDir: flags.out,
        layer: flags.layer !== undefined ? Number(flags.layer) : undefined,
        maxPrompts: flags["max-prompts"] !== undefined ? Number(flags["max-prompts"]) : undefined,
        decode: {
          ...DEFAULT_DECODE,
          kSamples: flags.k !== undefined ? Number(flags.k) : DEFAULT_DECODE.kSamples,
          maxSteps: flags["max-steps"] !== undefined ? Number(flags["max-steps"]) : DEFAULT_DECODE.maxSteps,
          temperature: flags.temperature !== undefined ? Number(flags.temperature) : DEFAULT_DECODE.temperature,
          topP: flags["top-p"] !== undefined ? Number(flags["top-p"]) : DEFAULT_DECODE.topP,
          topK: flags["top-k"] !== undefined ? Number(flags["top-k"]) : DEFAULT_DECODE.topK,
          greedy: flags.greedy === "1",
          seed: flags.seed !== undefined ? Number(flags.seed) : DEFAULT_DECODE.seed,
        },
      });
      const exported = manifest.filter((row) => row.status === "ok").length;
      console.log(`exported ${exported}/${manifest.length} bundles to ${flags.out}`);
      return exported === manifest.length ? 0 : 1;
    }
    if (command === "selfcheck") {
      const { flags, positional } = parseFlags(rest, new Set(["generation"]));
      if (positional.length !== 1) throw new Error("selfcheck needs exactly one bundle path");
      const report = selfcheck(positional[0], Number(flags.generation ?? "0"));
      if (report.ok) {
        console.log(`ok (max abs diff ${report.maxAbsDiff.toExponential(3)})`);
        return 0;
      }
      for (const failure of report.failures) console.error(`selfcheck failure: ${failure}`);
      console.error(`max abs diff ${report.maxAbsDiff}`);
      return 1;
    }
    console.error(usage());
    return 2;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
}

import { fileURLToPath } from "node:url";

if (process.argv[1] && fileURLToPath(import.meta.url) === process.argv[1]) {
  process.exit(main(process.argv.slice(2)));
}
