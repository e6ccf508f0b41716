"""Trajectory bundle container: the on-disk record of one prompt's sampled generations.

A bundle stores everything the scoring core needs (per-token scalar stats,
sentence embeddings, optional per-step hidden states) so that scoring never
touches a model runtime or vocabulary-sized tensors.

Binary layout (all integers little-endian, all floats IEEE-754 binary32)::

    magic "HGB1" | u32 version=1 | u32 K | u32 d | u32 ref_count
    u8 has_label | u8 label | f32 rouge_to_ref (NaN if absent)
    str prompt_id | str prompt_text | ref_count * str reference
    u32 meta_count | meta_count * (str key, str value)
    K generation blocks:
        u32 T_k | u8 has_states
        T_k * u32 tokens | T_k * f32 logprob | T_k * f32 step_entropy
        T_k * f32 step_lse | str text | d * f32 sent_embed
        [T_k * d * f32 step_states, row-major]

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

MAGIC = b"HGB1"
VERSION = 1

_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")


class BundleError(ValueError):
    """Base class for container failures."""


class BadMagicError(BundleError):
    """Stream does not start with the container magic."""


class VersionMismatchError(BundleError):
    """Container version is not supported by this reader."""


class TruncatedBundleError(BundleError):
    """Stream ended inside the named section."""

    def __init__(self, section: str):
        super().__init__(f"truncated stream while reading {section}")
        self.section = section


class InvalidBundleError(BundleError):
    """Bundle violates a container invariant (on write or after read)."""


@dataclass
class Generation:
    """One sampled continuation with its per-step scalar statistics.

    ``tokens``, ``logprob``, ``step_entropy`` and ``step_lse`` all have
    length T.  ``sent_embed`` is the final-token mid-layer representation
    (length d).  ``step_states`` is an optional T x d matrix of per-step
    mid-layer hidden states.
    """

    tokens: np.ndarray
    logprob: np.ndarray
    step_entropy: np.ndarray
    step_lse: np.ndarray
    text: str
    sent_embed: np.ndarray
    step_states: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint32)
        self.logprob = np.asarray(self.logprob, dtype=np.float32)
        self.step_entropy = np.asarray(self.step_entropy, dtype=np.float32)
        self.step_lse = np.asarray(self.step_lse, dtype=np.float32)
        self.sent_embed = np.asarray(self.sent_embed, dtype=np.float32)
        if self.step_states is not None:
            self.step_states = np.asarray(self.step_states, dtype=np.float32)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Generation):
            return NotImplemented
        if self.text != other.text:
            return False
        for a, b in (
            (self.tokens, other.tokens),
            (self.logprob, other.logprob),
            (self.step_entropy, other.step_entropy),
            (self.step_lse, other.step_lse),
            (self.sent_embed, other.sent_embed),
        ):
            if not np.array_equal(a, b):
                return False
        if (self.step_states is None) != (other.step_states is None):
            return False
        if self.step_states is not None:
            return np.array_equal(self.step_states, other.step_states)
        return True


@dataclass
class TrajectoryBundle:
    """K sampled generations for one prompt, plus references and metadata."""

    prompt_id: str
    prompt_text: str
    references: list[str]
    generations: list[Generation]
    embed_dim: int
    label: Optional[int] = None
    rouge_to_ref: Optional[float] = None
    meta: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryBundle):
            return NotImplemented
        return (
            self.prompt_id == other.prompt_id
            and self.prompt_text == other.prompt_text
            and self.references == other.references
            and self.embed_dim == other.embed_dim
            and self.label == other.label
            and _float_eq(self.rouge_to_ref, other.rouge_to_ref)
            and self.meta == other.meta
            and self.generations == other.generations
        )

    @property
    def k(self) -> int:
        return len(self.generations)


def _float_eq(a: Optional[float], b: Optional[float]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return float(np.float32(a)) == float(np.float32(b))


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str]


def validate_bundle(bundle: TrajectoryBundle) -> ValidationReport:
    """Check every bundle invariant; the report names each violated field.

    Never raises: callers that need a hard failure check ``report.ok``.
    """
    v: list[str] = []
    k = len(bundle.generations)
    if k < 2:
        v.append(f"K < 2 (got K={k})")
    d = bundle.embed_dim
    if d <= 0:
        v.append(f"embed_dim must be positive (got {d})")
    if bundle.label is not None and bundle.label not in (0, 1):
        v.append(f"label must be 0 or 1 (got {bundle.label})")
    if bundle.rouge_to_ref is not None:
        r = bundle.rouge_to_ref
        if not math.isfinite(r) or not 0.0 <= r <= 1.0:
            v.append(f"rouge_to_ref must be in [0,1] (got {r})")

    for gi, gen in enumerate(bundle.generations):
        t = len(gen.tokens)
        if t < 1:
            v.append(f"empty generation at gen {gi}")
            continue
        for name, arr in (
            ("logprob", gen.logprob),
            ("step_entropy", gen.step_entropy),
            ("step_lse", gen.step_lse),
        ):
            if len(arr) != t:
                v.append(f"{name} length {len(arr)} != T_k {t} at gen {gi}")
            if not np.all(np.isfinite(arr)):
                v.append(f"non-finite {name} at gen {gi}")
        for ti in np.flatnonzero(gen.logprob > 0):
            v.append(f"logprob > 0 at (gen {gi}, t {ti})")
        for ti in np.flatnonzero(gen.step_entropy < 0):
            v.append(f"step_entropy < 0 at (gen {gi}, t {ti})")
        if gen.sent_embed.shape != (d,):
            v.append(f"sent_embed shape {gen.sent_embed.shape} != ({d},) at gen {gi}")
        elif not np.all(np.isfinite(gen.sent_embed)):
            v.append(f"non-finite sent_embed at gen {gi}")
        if gen.step_states is not None:
            if gen.step_states.shape != (t, d):
                v.append(
                    f"step_states shape {gen.step_states.shape} != ({t}, {d}) at gen {gi}"
                )
            elif not np.all(np.isfinite(gen.step_states)):
                v.append(f"non-finite step_states at gen {gi}")
    return ValidationReport(ok=not v, violations=v)


def _write_str(sink: BinaryIO, s: str) -> int:
    data = s.encode("utf-8")
    sink.write(_U32.pack(len(data)))
    sink.write(data)
    return 4 + len(data)


def write_bundle(bundle: TrajectoryBundle, sink: BinaryIO) -> int:
    """Serialize a valid bundle; returns the number of bytes written.

    Rejects bundles that fail :func:`validate_bundle` so that every file on
    disk round-trips bit-for-bit into a valid in-memory bundle.
    """
    report = validate_bundle(bundle)
    if not report.ok:
        raise InvalidBundleError("; ".join(report.violations))

    n = 0
    sink.write(MAGIC)
    n += 4
    sink.write(_U32.pack(VERSION))
    sink.write(_U32.pack(bundle.k))
    sink.write(_U32.pack(bundle.embed_dim))
    sink.write(_U32.pack(len(bundle.references)))
    n += 16
    has_label = bundle.label is not None
    sink.write(struct.pack("<BB", int(has_label), bundle.label or 0))
    rouge = bundle.rouge_to_ref if bundle.rouge_to_ref is not None else math.nan
    sink.write(_F32.pack(rouge))
    n += 6
    n += _write_str(sink, bundle.prompt_id)
    n += _write_str(sink, bundle.prompt_text)
    for ref in bundle.references:
        n += _write_str(sink, ref)
    sink.write(_U32.pack(len(bundle.meta)))
    n += 4
    for key in bundle.meta:
        n += _write_str(sink, key)
        n += _write_str(sink, bundle.meta[key])

    for gen in bundle.generations:
        t = len(gen.tokens)
        sink.write(_U32.pack(t))
        sink.write(struct.pack("<B", int(gen.step_states is not None)))
        n += 5
        sink.write(gen.tokens.astype("<u4").tobytes())
        n += 4 * t
        for arr in (gen.logprob, gen.step_entropy, gen.step_lse):
            sink.write(arr.astype("<f4").tobytes())
            n += 4 * t
        n += _write_str(sink, gen.text)
        data = gen.sent_embed.astype("<f4").tobytes()
        sink.write(data)
        n += len(data)
        if gen.step_states is not None:
            data = np.ascontiguousarray(gen.step_states).astype("<f4").tobytes()
            sink.write(data)
            n += len(data)
    return n


def _read_exact(source: BinaryIO, count: int, section: str) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise TruncatedBundleError(section)
    return data


def _read_u32(source: BinaryIO, section: str) -> int:
    return _U32.unpack(_read_exact(source, 4, section))[0]


def _read_str(source: BinaryIO, section: str) -> str:
    length = _read_u32(source, section)
    return _read_exact(source, length, section).decode("utf-8")


def _read_f32_array(source: BinaryIO, count: int, section: str) -> np.ndarray:
    data = _read_exact(source, 4 * count, section)
    return np.frombuffer(data, dtype="<f4", count=count).astype(np.float32)


def read_bundle(source: BinaryIO) -> TrajectoryBundle:
    """Inverse of :func:`write_bundle`; validates invariants on load."""
    magic = source.read(4)
    if len(magic) < 4:
        raise TruncatedBundleError("magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    version = _read_u32(source, "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    k = _read_u32(source, "header")
    d = _read_u32(source, "header")
    ref_count = _read_u32(source, "header")
    has_label, label = struct.unpack("<BB", _read_exact(source, 2, "header"))
    rouge = _F32.unpack(_read_exact(source, 4, "header"))[0]

    prompt_id = _read_str(source, "prompt_id")
    prompt_text = _read_str(source, "prompt_text")
    references = [_read_str(source, f"reference {i}") for i in range(ref_count)]
    meta_count = _read_u32(source, "meta")
    meta: dict[str, str] = {}
    for i in range(meta_count):
        key = _read_str(source, f"meta key {i}")
        meta[key] = _read_str(source, f"meta value {i}")

    generations: list[Generation] = []
    for gi in range(k):
        section = f"generation {gi}"
        t = _read_u32(source, section)
        (has_states,) = struct.unpack("<B", _read_exact(source, 1, section))
        tokens = np.frombuffer(
            _read_exact(source, 4 * t, f"{section} tokens"), dtype="<u4", count=t
        ).astype(np.uint32)
        logprob = _read_f32_array(source, t, f"{section} logprob")
        entropy = _read_f32_array(source, t, f"{section} step_entropy")
        lse = _read_f32_array(source, t, f"{section} step_lse")
        text = _read_str(source, f"{section} text")
        embed = _read_f32_array(source, d, f"{section} sent_embed")
        states = None
        if has_states:
            states = _read_f32_array(source, t * d, f"{section} step_states").reshape(t, d)
        generations.append(
            Generation(
                tokens=tokens,
                logprob=logprob,
                step_entropy=entropy,
                step_lse=lse,
                text=text,
                sent_embed=embed,
                step_states=states,
            )
        )

    bundle = TrajectoryBundle(
        prompt_id=prompt_id,
        prompt_text=prompt_text,
        references=references,
        generations=generations,
        embed_dim=d,
        label=int(label) if has_label else None,
        rouge_to_ref=None if math.isnan(rouge) else float(rouge),
        meta=meta,
    )
    report = validate_bundle(bundle)
    if not report.ok:
        raise InvalidBundleError("; ".join(report.violations))
    return bundle


def read_bundle_file(path) -> TrajectoryBundle:
    with open(path, "rb") as fh:
        return read_bundle(fh)


def write_bundle_file(bundle: TrajectoryBundle, path) -> int:
    with open(path, "wb") as fh:
        return write_bundle(bundle, fh)
