// End-to-end exporter conformance, cross-checked through the primary
// command-line interface: exported bundles must validate, score, and show
// the expected detector behavior in the primary harness.

import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { readBundle } from "../src/bundle.js";
import { DEFAULT_DECODE, runExport } from "../src/export.js";
import { selfcheck } from "../src/selfcheck.js";

const MODEL_ID = "builtin:32x2:7";
let workDir: string;

function primaryCli(args: string[]): { code: number; stdout: string } {
  try {
    const stdout = execFileSync("python3", ["-m", "halluguard.cli", ...args], {
      encoding: "utf-8",
      cwd: "/root/pkg",
    });
    return { code: 0, stdout };
  } catch (err) {
    const failure = err as { status?: number; stdout?: string };
    return { code: failure.status ?? 1, stdout: failure.stdout ?? "" };
  }
}

beforeAll(() => {
  workDir = fs.mkdtempSync(path.join(os.tmpdir(), "exporter-test-"));
});

afterAll(() => {
  fs.rmSync(workDir, { recursive: true, force: true });
});

describe("export pipeline", () => {
  it("writes bundles the primary validator accepts with zero violations", () => {
    const promptsPath = path.join(workDir, "prompts.txt");
    fs.writeFileSync(promptsPath, "what is 2+2?\nname a color\n");
    const refsPath = path.join(workDir, "refs.txt");
    fs.writeFileSync(refsPath, "4\tfour\nred\tblue\n");
    const outDir = path.join(workDir, "bundles");
    const manifest = runExport({
      model: MODEL_ID,
      promptsPath,
      referencesPath: refsPath,
      outDir,
      decode: { ...DEFAULT_DECODE, kSamples: 4, maxSteps: 8, seed: 11 },
    });
    expect(manifest.every((row) => row.status === "ok")).toBe(true);

    const files = manifest.map((row) => path.join(outDir, row.file));
    const result = primaryCli(["bundle", "validate", ...files]);
    expect(result.code).toBe(0);
    expect(result.stdout).not.toContain("violation");

    const manifestText = fs.readFileSync(path.join(outDir, "manifest.csv"), "utf-8");
    const lines = manifestText.trim().split("\n");
    expect(lines[0]).toBe("file,prompt_id,K,d,tokens,status");
    expect(lines.length).toBe(1 + manifest.length);

    // Manifest metadata agrees with the bundles on disk.
    const first = readBundle(fs.readFileSync(files[0]));
    expect(first.generations.length).toBe(4);
    expect(first.embedDim).toBe(32);
    expect(first.references).toEqual(["4", "four"]);
  });

  it("greedy export scores lexical consistency 1.0 in the primary harness", () => {
    const promptsPath = path.join(workDir, "greedy-prompts.txt");
    fs.writeFileSync(promptsPath, "say something\n");
    const outDir = path.join(workDir, "greedy");
    runExport({
      model: MODEL_ID,
      promptsPath,
      outDir,
      decode: { ...DEFAULT_DECODE, kSamples: 4, maxSteps: 6, greedy: true },
    });
    const scoresPath = path.join(workDir, "greedy-scores.csv");
    const result = primaryCli([
      "score",
      path.join(outDir, "p00000.hgb"),
      "--detectors",
      "lexical_consistency",
      "--out",
      scoresPath,
    ]);
    expect(result.code).toBe(0);
    const rows = fs
      .readFileSync(scoresPath, "utf-8")
      .split("\n")
      .filter((line) => line.length > 0 && !line.startsWith("#"));
    const value = Number(rows[1].split(",")[3]);
    expect(value).toBe(1.0);
  });

  it("exports deterministically for a fixed seed", () => {
    const promptsPath = path.join(workDir, "det-prompts.txt");
    fs.writeFileSync(promptsPath, "determinism check\n");
    const dirA = path.join(workDir, "det-a");
    const dirB = path.join(workDir, "det-b");
    const decode = { ...DEFAULT_DECODE, kSamples: 3, maxSteps: 6, seed: 99 };
    runExport({ model: MODEL_ID, promptsPath, outDir: dirA, decode });
    runExport({ model: MODEL_ID, promptsPath, outDir: dirB, decode });
    const a = fs.readFileSync(path.join(dirA, "p00000.hgb"));
    const b = fs.readFileSync(path.join(dirB, "p00000.hgb"));
    expect(Buffer.compare(a, b)).toBe(0);
  });

  it("records per-prompt failures in the manifest instead of aborting", () => {
    const promptsPath = path.join(workDir, "overflow-prompts.txt");
    fs.writeFileSync(promptsPath, "ok prompt\n" + "x".repeat(200) + "\n");
    const outDir = path.join(workDir, "overflow");
    const manifest = runExport({
      model: MODEL_ID,
      promptsPath,
      outDir,
      decode: { ...DEFAULT_DECODE, kSamples: 2, maxSteps: 4 },
    });
    expect(manifest[0].status).toBe("ok");
    expect(manifest[1].status).toMatch(/^skip:/);
  });
});

describe("selfcheck", () => {
  it("passes on a freshly exported bundle", () => {
    const promptsPath = path.join(workDir, "sc-prompts.txt");
    fs.writeFileSync(promptsPath, "selfcheck me\n");
    const outDir = path.join(workDir, "sc");
    runExport({
      model: MODEL_ID,
      promptsPath,
      outDir,
      decode: { ...DEFAULT_DECODE, kSamples: 3, maxSteps: 6, seed: 5 },
    });
    const report = selfcheck(path.join(outDir, "p00000.hgb"));
    expect(report.failures).toEqual([]);
    expect(report.ok).toBe(true);
    expect(report.maxAbsDiff).toBeLessThan(1e-3);
  });

  it("locates corrupted logprob bytes", () => {
    const promptsPath = path.join(workDir, "corrupt-prompts.txt");
    fs.writeFileSync(promptsPath, "corrupt me\n");
    const outDir = path.join(workDir, "corrupt");
    runExport({
      model: MODEL_ID,
      promptsPath,
      outDir,
      decode: { ...DEFAULT_DECODE, kSamples: 2, maxSteps: 5, seed: 6 },
    });
    const bundlePath = path.join(outDir, "p00000.hgb");
    const clean = selfcheck(bundlePath);
    expect(clean.ok).toBe(true);

    // Flip the first generation's first logprob float to a wrong value.
    const bytes = fs.readFileSync(bundlePath);
    const bundle = readBundle(bytes);
    const target = Buffer.from(new Float32Array([bundle.generations[0].logprob[0]]).buffer);
    const wrong = Buffer.from(new Float32Array([bundle.generations[0].logprob[0] - 0.5]).buffer);
    const at = bytes.indexOf(target);
    expect(at).toBeGreaterThan(0);
    wrong.copy(bytes, at);
    fs.writeFileSync(bundlePath, bytes);

    const report = selfcheck(bundlePath);
    expect(report.ok).toBe(false);
    expect(report.maxAbsDiff).toBeGreaterThan(0.4);
    expect(report.failures.some((f) => f.includes("recomputation"))).toBe(true);
  });
});
