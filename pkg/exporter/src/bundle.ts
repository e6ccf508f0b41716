// Trajectory bundle container codec (magic "HGB1", version 1).
//
// Layout, all integers little-endian, all floats IEEE-754 binary32:
//   magic "HGB1" | u32 version | u32 K | u32 d | u32 ref_count
//   u8 has_label | u8 label | f32 rouge_to_ref (NaN if absent)
//   str prompt_id | str prompt_text | ref_count * str reference
//   u32 meta_count | meta_count * (str key, str value)
//   K generation blocks:
//     u32 T | u8 has_states | T*u32 tokens | T*f32 logprob
//     T*f32 step_entropy | T*f32 step_lse | str text | d*f32 sent_embed
//     [T*d*f32 step_states, row-major]
// where str = u32 byte length + UTF-8 bytes.

const MAGIC = "HGB1";
const VERSION = 1;

export interface GenerationRecord {
  tokens: number[];
  logprob: number[];
  stepEntropy: number[];
  stepLse: number[];
  text: string;
  sentEmbed: Float32Array;
  stepStates: Float32Array | null; // T*d row-major
}

export interface BundleRecord {
  promptId: string;
  promptText: string;
  references: string[];
  generations: GenerationRecord[];
  embedDim: number;
  label: number | null;
  rougeToRef: number | null;
  meta: Record<string, string>;
}

class ByteWriter {
  private chunks: Uint8Array[] = [];
  private scratch = new DataView(new ArrayBuffer(8));
  length = 0;

  private push(bytes: Uint8Array): void {
    this.chunks.push(bytes);
    this.length += bytes.length;
  }

  u8(value: number): void {
    this.push(new Uint8Array([value & 0xff]));
  }

  u32(value: number): void {
    this.scratch.setUint32(0, value >>> 0, true);
    this.push(new Uint8Array(this.scratch.buffer.slice(0, 4)));
  }

  f32(value: number): void {
    this.scratch.setFloat32(0, value, true);
    this.push(new Uint8Array(this.scratch.buffer.slice(0, 4)));
  }

  f32Array(values: ArrayLike<number>): void {
    const buf = new ArrayBuffer(4 * values.length);
    const view = new DataView(buf);
    for (let i = 0; i < values.length; i++) view.setFloat32(4 * i, values[i], true);
    this.push(new Uint8Array(buf));
  }

  u32Array(values: ArrayLike<number>): void {
    const buf = new ArrayBuffer(4 * values.length);
    const view = new DataView(buf);
    for (let i = 0; i < values.length; i++) view.setUint32(4 * i, values[i] >>> 0, true);
    this.push(new Uint8Array(buf));
  }

  str(text: string): void {
    const bytes = new TextEncoder().encode(text);
    this.u32(bytes.length);
    this.push(bytes);
  }

  raw(bytes: Uint8Array): void {
    this.push(bytes);
  }

  concat(): Uint8Array {
    const out = new Uint8Array(this.length);
    let offset = 0;
    for (const chunk of this.chunks) {
      out.set(chunk, offset);
      offset += chunk.length;
    }
    return out;
  }
}

export function writeBundle(bundle: BundleRecord): Uint8Array {
  const w = new ByteWriter();
  w.raw(new TextEncoder().encode(MAGIC));
  w.u32(VERSION);
  w.u32(bundle.generations.length);
  w.u32(bundle.embedDim);
  w.u32(bundle.references.length);
  w.u8(bundle.label === null ? 0 : 1);
  w.u8(bundle.label ?? 0);
  w.f32(bundle.rougeToRef ?? NaN);
  w.str(bundle.promptId);
  w.str(bundle.promptText);
  for (const ref of bundle.references) w.str(ref);
  const metaKeys = Object.keys(bundle.meta);
  w.u32(metaKeys.length);
  for (const key of metaKeys) {
    w.str(key);
    w.str(bundle.meta[key]);
  }
  for (const gen of bundle.generations) {
    const t = gen.tokens.length;
    w.u32(t);
    w.u8(gen.stepStates === null ? 0 : 1);
    w.u32Array(gen.tokens);
    w.f32Array(gen.logprob);
    w.f32Array(gen.stepEntropy);
    w.f32Array(gen.stepLse);
    w.str(gen.text);
    w.f32Array(gen.sentEmbed);
    if (gen.stepStates !== null) w.f32Array(gen.stepStates);
  }
  return w.concat();
}

class ByteReader {
  private view: DataView;
  private offset = 0;

  constructor(private data: Uint8Array) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  private need(count: number, section: string): void {
    if (this.offset + count > this.data.length) {
      throw new Error(`truncated bundle while reading ${section}`);
    }
  }

  u8(section: string): number {
    this.need(1, section);
    return this.data[this.offset++];
  }

  u32(section: string): number {
    this.need(4, section);
    const value = this.view.getUint32(this.offset, true);
    this.offset += 4;
    return value;
  }

  f32(section: string): number {
    this.need(4, section);
    const value = this.view.getFloat32(this.offset, true);
    this.offset += 4;
    return value;
  }

  f32Array(count: number, section: string): Float32Array {
    this.need(4 * count, section);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) out[i] = this.view.getFloat32(this.offset + 4 * i, true);
    this.offset += 4 * count;
    return out;
  }

  u32Array(count: number, section: string): number[] {
    this.need(4 * count, section);
    const out: number[] = [];
    for (let i = 0; i < count; i++) out.push(this.view.getUint32(this.offset + 4 * i, true));
    this.offset += 4 * count;
    return out;
  }

  str(section: string): string {
    const length = this.u32(section);
    this.need(length, section);
    const text = new TextDecoder().decode(
      this.data.subarray(this.offset, this.offset + length)
    );
    this.offset += length;
    return text;
  }

  bytes(count: number, section: string): Uint8Array {
    this.need(count, section);
    const out = this.data.subarray(this.offset, this.offset + count);
    this.offset += count;
    return out;
  }
}

export function readBundle(data: Uint8Array): BundleRecord {
  const r = new ByteReader(data);
  const magic = new TextDecoder().decode(r.bytes(4, "magic"));
  if (magic !== MAGIC) throw new Error(`bad magic ${JSON.stringify(magic)}`);
  const version = r.u32("version");
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const k = r.u32("header");
  const d = r.u32("header");
  const refCount = r.u32("header");
  const hasLabel = r.u8("header");
  const label = r.u8("header");
  const rouge = r.f32("header");
  const promptId = r.str("prompt_id");
  const promptText = r.str("prompt_text");
  const references: string[] = [];
  for (let i = 0; i < refCount; i++) references.push(r.str(`reference ${i}`));
  const metaCount = r.u32("meta");
  const meta: Record<string, string> = {};
  for (let i = 0; i < metaCount; i++) {
    const key = r.str(`meta key ${i}`);
    meta[key] = r.str(`meta value ${i}`);
  }
  const generations: GenerationRecord[] = [];
  for (let g = 0; g < k; g++) {
    const section = `generation ${g}`;
    const t = r.u32(section);
    const hasStates = r.u8(section);
    const tokens = r.u32Array(t, `${section} tokens`);
    const logprob = Array.from(r.f32Array(t, `${section} logprob`));
    const stepEntropy = Array.from(r.f32Array(t, `${section} step_entropy`));
    const stepLse = Array.from(r.f32Array(t, `${section} step_lse`));
    const text = r.str(`${section} text`);
    const sentEmbed = r.f32Array(d, `${section} sent_embed`);
    const stepStates = hasStates ? r.f32Array(t * d, `${section} step_states`) : null;
    generations.push({ tokens, logprob, stepEntropy, stepLse, text, sentEmbed, stepStates });
  }
  return {
    promptId,
    promptText,
    references,
    generations,
    embedDim: d,
    label: hasLabel ? label : null,
    rougeToRef: Number.isNaN(rouge) ? null : rouge,
    meta,
  };
}
