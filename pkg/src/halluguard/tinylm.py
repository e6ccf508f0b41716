"""Tiny instrumented autoregressive transformer.

A character-level GPT-style model small enough that every quantity the
scoring stack consumes can be checked exactly: per-step sampling statistics,
mid-layer hidden states, Jacobian-vector products of the decode step map,
and detector-guided beam search.  The model runs in float64 throughout so
finite-difference checks of analytic derivatives are meaningful.

The decode step map whose Jacobian feeds amplification analysis is the map
from the mid-layer residual at position t-1 to the mid-layer residual at
position t, with sampled tokens held fixed.  The discrete token channel is
relaxed to a softmax-weighted embedding readout, anchored so that the
recorded trajectory is a fixed point of the map (details in
:func:`step_function`).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bundle import Generation, TrajectoryBundle

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HGTM"
CHECKPOINT_VERSION = 1

# Gain converting the perturbation budget rho into a mid-layer offset,
# relative to the typical hidden-state norm.
NOISE_GAIN = 0.25
# Log-std of the per-prompt corruption severity: a long-tailed severity mix
# makes breakage track the injected drift rather than sampling luck.
NOISE_SEVERITY_SPREAD = 1.2
# Beam mini-bundles cap the perturbation set at the usual sample count.
BEAM_BUNDLE_K = 10


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


class ContextOverflowError(ValueError):
    pass


@dataclass
class TinyLMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.context_len) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass
class DecodeConfig:
    temperature: float = 0.5
    top_p: float = 0.95
    top_k: int = 10
    k_samples: int = 10
    max_steps: int = 16
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.k_samples < 2:
            raise ValueError("need K >= 2 samples")


class CharVocab:
    """Character-level vocabulary; newline doubles as end-of-sequence."""

    def __init__(self, chars: str):
        self.chars = "".join(sorted(set(chars)))
        if "\n" not in self.chars:
            self.chars = "\n" + self.chars
        self.stoi = {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    @property
    def eos_id(self) -> int:
        return self.stoi["\n"]

    def encode(self, text: str) -> list[int]:
        return [self.stoi[c] for c in text]

    def decode(self, tokens: Sequence[int]) -> str:
        return "".join(self.chars[int(t)] for t in tokens)

    @classmethod
    def from_corpus(cls, lines: Sequence[str]) -> "CharVocab":
        return cls("".join(lines))


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)

    def forward_one(self, x_own: torch.Tensor, past: torch.Tensor) -> torch.Tensor:
        """Attention output for a single query position given past inputs.

        ``x_own`` is the (normalized) block input at the query position,
        ``past`` the inputs at all earlier positions; must reproduce the
        batched forward exactly at the recorded trajectory.
        """
        seq = torch.cat([past, x_own[None]], dim=0)  # (p+1, d)
        t, d = seq.shape
        q, k, v = self.qkv(seq).split(d, dim=1)
        qh = q[-1].view(self.n_heads, self.head_dim)
        kh = k.view(t, self.n_heads, self.head_dim)
        vh = v.view(t, self.n_heads, self.head_dim)
        att = torch.einsum("hd,thd->ht", qh, kh) / math.sqrt(self.head_dim)
        att = att.softmax(dim=-1)
        out = torch.einsum("ht,thd->hd", att, vh).reshape(d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def forward_one(self, x_own: torch.Tensor, past: torch.Tensor) -> torch.Tensor:
        x_own = x_own + self.attn.forward_one(self.ln1(x_own), self.ln1(past))
        return x_own + self.mlp(self.ln2(x_own))


class TinyLM(nn.Module):
    """GPT-style decoder exposing mid-layer residual states.

    The mid layer is block ceil(n_layers / 2); ``forward_with_states``
    returns the residual stream entering every block (index 0 is the token
    plus position embedding, index L the final residual), optionally adding
    a caller-supplied offset to the mid residual, which both deeper layers
    and the recorded states then see.
    """

    def __init__(self, config: TinyLMConfig, vocab: Optional[CharVocab] = None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        torch.manual_seed(config.seed)
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.double()

    @property
    def mid_index(self) -> int:
        return math.ceil(self.config.n_layers / 2)

    def forward_with_states(
        self, tokens: torch.Tensor, mid_noise: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        b, t = tokens.shape
        if t > self.config.context_len:
            raise ContextOverflowError(f"context {t} exceeds limit {self.config.context_len}")
        pos = torch.arange(t, device=tokens.device)
        x = self.wte(tokens) + self.wpe(pos)[None]
        resids = [x]
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i + 1 == self.mid_index and mid_noise is not None:
                x = x + mid_noise[:, :t]
            resids.append(x)
        logits = self.head(self.ln_f(x))
        return logits, resids

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.forward_with_states(tokens)[0]


def train_tiny_lm(
    corpus: Sequence[str],
    config: TinyLMConfig,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> tuple[TinyLM, list[float]]:
    """Train on a line corpus; returns the model handle and the loss curve.

    Deterministic under ``config.seed``: initialization, batch sampling and
    optimizer state all derive from it.  Raises :class:`DivergenceError` if
    the loss goes non-finite.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if config.context_len < 2:
        raise ValueError("context_len must be >= 2")
    vocab = CharVocab.from_corpus(corpus)
    if config.vocab_size <= 0 or config.vocab_size < len(vocab):
        config = replace(config, vocab_size=len(vocab))
    model = TinyLM(config, vocab)
    stream = torch.tensor(
        vocab.encode("".join(line if line.endswith("\n") else line + "\n" for line in corpus)),
        dtype=torch.long,
    )
    window = min(config.context_len, 32)
    if len(stream) < window + 1:
        raise ValueError("corpus too small for one training window")
    rng = np.random.default_rng(config.seed + 1)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    losses: list[float] = []
    for step in range(steps):
        starts = rng.integers(0, len(stream) - window - 1, size=batch_size)
        x = torch.stack([stream[s : s + window] for s in starts])
        y = torch.stack([stream[s + 1 : s + window + 1] for s in starts])
        logits = model(x)
        loss = F.cross_entropy(logits.reshape(-1, config.vocab_size), y.reshape(-1))
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    model.eval()
    return model, losses


def truncated_log_probs(
    raw_logits: torch.Tensor, temperature: float, top_k: int, top_p: float
) -> torch.Tensor:
    """Log-probabilities of the temperature/top-k/top-p truncated sampler.

    Tokens outside the truncation set get -inf; the kept set is renormalized
    (rows sum to one in probability space).
    """
    z = raw_logits / temperature
    v = z.shape[-1]
    if top_k < v:
        kth = torch.topk(z, top_k, dim=-1).values[..., -1, None]
        z = z.masked_fill(z < kth, float("-inf"))
    probs = z.softmax(dim=-1)
    sorted_probs, idx = probs.sort(dim=-1, descending=True)
    cumulative = sorted_probs.cumsum(dim=-1)
    keep_sorted = (cumulative - sorted_probs) < top_p  # always keeps the top token
    keep = torch.zeros_like(keep_sorted).scatter(-1, idx, keep_sorted)
    z = z.masked_fill(~keep, float("-inf"))
    return z.log_softmax(dim=-1)


@torch.no_grad()
def sample_k(
    model: TinyLM,
    prompt_tokens: Sequence[int],
    decode: DecodeConfig,
    prompt_id: str = "prompt-0",
    prompt_text: Optional[str] = None,
    references: Sequence[str] = (),
    mid_noise: Optional[torch.Tensor] = None,
) -> TrajectoryBundle:
    """Sample K continuations and package them as a trajectory bundle.

    Per-step entropy and logsumexp come from the raw (unit-temperature,
    untruncated) next-token distribution; the recorded log-probability is
    the chosen token's probability under the truncated, renormalized
    sampling distribution.  ``mid_noise`` (K x P x d) is added to the
    mid-layer residual at the covered positions on every forward pass, so a
    prefix perturbation persists for the whole rollout.
    """
    cfg = model.config
    k = decode.k_samples
    p_len = len(prompt_tokens)
    if p_len < 1:
        raise ValueError("prompt must be non-empty")
    if p_len + decode.max_steps > cfg.context_len:
        raise ContextOverflowError(
            f"prompt {p_len} + max_steps {decode.max_steps} exceeds context {cfg.context_len}"
        )
    noise_pad = None
    if mid_noise is not None:
        noise_pad = torch.zeros(k, cfg.context_len, cfg.d_model, dtype=torch.float64)
        noise_pad[:, : mid_noise.shape[1]] = mid_noise

    gen = torch.Generator().manual_seed(decode.seed)
    ctx = torch.tensor(prompt_tokens, dtype=torch.long).repeat(k, 1)
    alive = torch.ones(k, dtype=torch.bool)
    eos = model.vocab.eos_id if model.vocab is not None else -1
    rec: list[dict[str, list[float]]] = [
        {"tokens": [], "logprob": [], "entropy": [], "lse": []} for _ in range(k)
    ]
    for _ in range(decode.max_steps):
        logits, _ = model.forward_with_states(ctx, mid_noise=noise_pad)
        raw = logits[:, -1, :]
        lse = torch.logsumexp(raw, dim=-1)
        logp_full = raw - lse[:, None]
        entropy = -(logp_full.exp() * logp_full).sum(dim=-1)
        trunc = truncated_log_probs(raw, decode.temperature, decode.top_k, decode.top_p)
        if decode.greedy:
            chosen = raw.argmax(dim=-1)
        else:
            chosen = torch.multinomial(trunc.exp(), 1, generator=gen).squeeze(1)
        chosen_lp = trunc.gather(1, chosen[:, None]).squeeze(1)
        for i in range(k):
            if alive[i]:
                rec[i]["tokens"].append(int(chosen[i]))
                rec[i]["logprob"].append(float(chosen_lp[i]))
                rec[i]["entropy"].append(float(entropy[i]))
                rec[i]["lse"].append(float(lse[i]))
        alive &= chosen != eos
        ctx = torch.cat([ctx, chosen[:, None]], dim=1)
        if not alive.any():
            break

    # States come from one final pass over the completed context: causal
    # attention makes them identical to the stepwise values.
    _, resids = model.forward_with_states(ctx, mid_noise=noise_pad)
    mid = resids[model.mid_index]
    generations = []
    for i in range(k):
        t_i = len(rec[i]["tokens"])
        states = mid[i, p_len : p_len + t_i].numpy().astype(np.float32)
        generations.append(
            Generation(
                tokens=np.array(rec[i]["tokens"], dtype=np.uint32),
                logprob=np.array(rec[i]["logprob"], dtype=np.float32),
                step_entropy=np.array(rec[i]["entropy"], dtype=np.float32),
                step_lse=np.array(rec[i]["lse"], dtype=np.float32),
                text=model.vocab.decode(rec[i]["tokens"]) if model.vocab else "",
                sent_embed=states[-1].copy(),
                step_states=states,
            )
        )
    return TrajectoryBundle(
        prompt_id=prompt_id,
        prompt_text=prompt_text
        if prompt_text is not None
        else (model.vocab.decode(prompt_tokens) if model.vocab else ""),
        references=list(references),
        generations=generations,
        embed_dim=cfg.d_model,
        meta={
            "backbone": "tinylm",
            "mid_layer": str(model.mid_index),
            "temperature": repr(decode.temperature),
            "seed": str(decode.seed),
        },
    )


def _cached_resids(model: TinyLM, tokens: Sequence[int]) -> list[torch.Tensor]:
    with torch.no_grad():
        _, resids = model.forward_with_states(torch.tensor(tokens, dtype=torch.long)[None])
    return [r[0] for r in resids]


def step_function(
    model: TinyLM, tokens: Sequence[int], t: int, resids: Optional[list[torch.Tensor]] = None
) -> tuple[Callable[[torch.Tensor], torch.Tensor], torch.Tensor]:
    """Differentiable decode-step map from mid state t-1 to mid state t.

    The map runs the deep half of the network at position t-1 from the
    given mid state, relaxes the sampled-token channel to the
    softmax-weighted token-embedding readout, and feeds the result through
    the shallow half at position t against the frozen context.  It is
    anchored so that the recorded states satisfy f(h_{t-1}) = h_t exactly,
    making finite differences of f the ground truth for the Jacobian.
    Returns (f, h_{t-1}).
    """
    n = len(tokens)
    if not 1 <= t < n:
        raise IndexError(f"step index t={t} out of range [1, {n})")
    if resids is None:
        resids = _cached_resids(model, tokens)
    m = model.mid_index
    n_layers = model.config.n_layers
    h_prev = resids[m][t - 1].clone()

    def deep_logits(v: torch.Tensor) -> torch.Tensor:
        x = v
        for layer in range(m, n_layers):
            x = model.blocks[layer].forward_one(x, resids[layer][: t - 1])
        return model.head(model.ln_f(x))

    def readout(v: torch.Tensor) -> torch.Tensor:
        return deep_logits(v).softmax(dim=-1) @ model.wte.weight

    e_actual = model.wte.weight[int(tokens[t])] + model.wpe.weight[t]
    with torch.no_grad():
        anchor = readout(h_prev)

    def f(v: torch.Tensor) -> torch.Tensor:
        x = e_actual + readout(v) - anchor
        for layer in range(m):
            x = model.blocks[layer].forward_one(x, resids[layer][:t])
        return x

    return f, h_prev


def jvp(model: TinyLM, tokens: Sequence[int], t: int, v: np.ndarray) -> np.ndarray:
    """J_t v for the decode-step map at position t."""
    f, h = step_function(model, tokens, t)
    tangent = torch.as_tensor(np.asarray(v, dtype=np.float64))
    _, jv = torch.autograd.functional.jvp(f, h, tangent)
    return jv.detach().numpy()


def vjp(model: TinyLM, tokens: Sequence[int], t: int, u: np.ndarray) -> np.ndarray:
    """J_t^T u for the decode-step map at position t."""
    f, h = step_function(model, tokens, t)
    cotangent = torch.as_tensor(np.asarray(u, dtype=np.float64))
    _, ju = torch.autograd.functional.vjp(f, h, cotangent)
    return ju.detach().numpy()


def make_jacobian_oracles(model: TinyLM, tokens: Sequence[int], prompt_len: int):
    """(jvp, vjp, n_steps, dim) oracles over the generated span of ``tokens``.

    Step i maps the mid state at position prompt_len+i-1 to prompt_len+i;
    residual caches are shared across calls, which is what power iteration
    needs to stay cheap.
    """
    resids = _cached_resids(model, tokens)
    n_steps = len(tokens) - prompt_len
    first = prompt_len
    if n_steps < 1:
        raise ValueError("no generated positions to analyze")

    def jvp_fn(i: int, v: np.ndarray) -> np.ndarray:
        f, h = step_function(model, tokens, first + i, resids)
        tangent = torch.as_tensor(np.asarray(v, dtype=np.float64))
        return torch.autograd.functional.jvp(f, h, tangent)[1].detach().numpy()

    def vjp_fn(i: int, u: np.ndarray) -> np.ndarray:
        f, h = step_function(model, tokens, first + i, resids)
        cotangent = torch.as_tensor(np.asarray(u, dtype=np.float64))
        return torch.autograd.functional.vjp(f, h, cotangent)[1].detach().numpy()

    return jvp_fn, vjp_fn, n_steps, model.config.d_model


def make_bundle_jacobian_factory(model: TinyLM):
    """Adapter wiring bundles to exact amplification in the spectral core."""

    def factory(bundle: TrajectoryBundle, gen_index: int):
        prompt = model.vocab.encode(bundle.prompt_text)
        gen = bundle.generations[gen_index]
        tokens = list(prompt) + [int(x) for x in gen.tokens]
        return make_jacobian_oracles(model, tokens, len(prompt))

    return factory


# ---------------------------------------------------------------------------
# Guided beam search


@dataclass
class _Candidate:
    tokens: list[int]
    sum_logprob: float
    logprobs: list[float]
    entropies: list[float]
    lses: list[float]
    states: list[np.ndarray]
    finished: bool = False

    def normalized_logprob(self) -> float:
        return self.sum_logprob / max(len(self.tokens), 1)


def _zscores(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def _candidate_bundle(
    pool: list[_Candidate], index: int, model: TinyLM, prompt_text: str
) -> TrajectoryBundle:
    """Mini-bundle with candidate ``index`` first and the rest of the pool as
    its perturbation set (capped at BEAM_BUNDLE_K generations)."""
    order = [index] + [i for i in range(len(pool)) if i != index]
    order = order[:BEAM_BUNDLE_K]
    generations = []
    for i in order:
        c = pool[i]
        states = np.stack(c.states).astype(np.float32)
        generations.append(
            Generation(
                tokens=np.array(c.tokens, dtype=np.uint32),
                logprob=np.array(c.logprobs, dtype=np.float32),
                step_entropy=np.array(c.entropies, dtype=np.float32),
                step_lse=np.array(c.lses, dtype=np.float32),
                text=model.vocab.decode(c.tokens) if model.vocab else "",
                sent_embed=states[-1].copy(),
                step_states=states,
            )
        )
    return TrajectoryBundle(
        prompt_id="beam",
        prompt_text=prompt_text,
        references=[],
        generations=generations,
        embed_dim=model.config.d_model,
    )


def _blended_ranking(
    pool: list[_Candidate],
    scorer,
    weight: float,
    model: TinyLM,
    prompt_text: str,
) -> np.ndarray:
    """Ranking keys for the pool: higher is better.

    With a scorer and weight > 0, blends z-normalized length-normalized
    log-probability with the z-normalized detector score; candidates whose
    scorer call fails fall back to their pure log-probability z-score.
    """
    lp = np.array([c.normalized_logprob() for c in pool])
    if scorer is None or weight == 0.0 or len(pool) < 2:
        return lp
    det = np.full(len(pool), np.nan)
    for i in range(len(pool)):
        try:
            value = scorer(_candidate_bundle(pool, i, model, prompt_text))
            if value is not None and math.isfinite(value):
                det[i] = value
        except Exception as exc:  # scorer failure only demotes that candidate
            logger.debug("beam scorer failed on candidate %d: %s", i, exc)
    z_lp = _zscores(lp)
    usable = np.isfinite(det)
    blended = z_lp.copy()
    if usable.any():
        z_det = np.zeros(len(pool))
        z_det[usable] = _zscores(det[usable])
        blended[usable] = (1.0 - weight) * z_lp[usable] + weight * z_det[usable]
    return blended


def guided_beam_search(
    model: TinyLM,
    prompt_tokens: Sequence[int],
    scorer=None,
    beam: int = 10,
    rerank_every: int = 1,
    weight: float = 0.5,
    max_steps: int = 16,
    seed: int = 0,
) -> list[int]:
    """Length-normalized beam search, optionally reranked by a detector.

    ``scorer`` maps a partial-trajectory mini-bundle (candidate first, the
    rest of the pool as its perturbation set) to a real trust score.  With
    weight 0 the output is exactly vanilla beam search; ties always break
    by insertion order, so results are deterministic.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if rerank_every < 1:
        raise ValueError("rerank_every must be >= 1")
    cfg = model.config
    p_len = len(prompt_tokens)
    if p_len + max_steps > cfg.context_len:
        raise ContextOverflowError(
            f"prompt {p_len} + max_steps {max_steps} exceeds context {cfg.context_len}"
        )
    eos = model.vocab.eos_id if model.vocab is not None else -1
    prompt_text = model.vocab.decode(prompt_tokens) if model.vocab else ""
    candidates = [_Candidate([], 0.0, [], [], [], [])]
    with torch.no_grad():
        for step in range(max_steps):
            alive = [c for c in candidates if not c.finished]
            done = [c for c in candidates if c.finished]
            if not alive:
                break
            ctx = torch.tensor(
                [list(prompt_tokens) + c.tokens for c in alive], dtype=torch.long
            )
            logits, resids = model.forward_with_states(ctx)
            raw = logits[:, -1, :]
            lse = torch.logsumexp(raw, dim=-1)
            logp = raw - lse[:, None]
            entropy = -(logp.exp() * logp).sum(dim=-1)
            mid = resids[model.mid_index][:, -1, :]
            width = min(beam, raw.shape[-1])
            top_lp, top_idx = torch.topk(logp, width, dim=-1)
            pool = list(done)
            for ci, cand in enumerate(alive):
                state = mid[ci].numpy()
                for bi in range(width):
                    token = int(top_idx[ci, bi])
                    child = _Candidate(
                        tokens=cand.tokens + [token],
                        sum_logprob=cand.sum_logprob + float(top_lp[ci, bi]),
                        logprobs=cand.logprobs + [float(top_lp[ci, bi])],
                        entropies=cand.entropies + [float(entropy[ci])],
                        lses=cand.lses + [float(lse[ci])],
                        states=cand.states + [state],
                        finished=token == eos,
                    )
                    pool.append(child)
            rerank = scorer is not None and weight > 0.0 and (step + 1) % rerank_every == 0
            lp = np.array([c.normalized_logprob() for c in pool])
            if rerank:
                # Detector calls are the expensive part: pre-prune the pool
                # by likelihood so only near-contenders get scored.
                shortlist = sorted(range(len(pool)), key=lambda i: (-lp[i], i))[: beam + 2]
                subset = [pool[i] for i in shortlist]
                keys = _blended_ranking(subset, scorer, weight, model, prompt_text)
                order = sorted(range(len(subset)), key=lambda i: (-keys[i], i))
                candidates = [subset[i] for i in order[:beam]]
            else:
                order = sorted(range(len(pool)), key=lambda i: (-lp[i], i))
                candidates = [pool[i] for i in order[:beam]]
    keys = _blended_ranking(candidates, scorer, weight, model, prompt_text)
    best = min(range(len(candidates)), key=lambda i: (-keys[i], i))
    return candidates[best].tokens


def make_beam_scorer(
    model: TinyLM,
    detector: str = "halluguard",
    config=None,
    k_continuations: int = 5,
    continue_steps: int = 4,
    temperature: float = 0.5,
    base_seed: int = 0,
):
    """Trust-oriented detector scorer for beam reranking.

    Scores a candidate by its local rollout neighborhood: K stochastic
    continuations are sampled from the candidate's prefix (deterministically
    seeded per prefix) and the requested detector runs on that bundle.
    Scores are flipped so that higher always means more trustworthy,
    whatever the detector's declared orientation.
    """
    import zlib

    from .detectors import LOWER_IS_HALLUCINATED, ORIENTATIONS, score_sample

    sign = 1.0 if ORIENTATIONS[detector] == LOWER_IS_HALLUCINATED else -1.0

    def scorer(bundle: TrajectoryBundle):
        prefix = model.vocab.encode(bundle.prompt_text) + [
            int(t) for t in bundle.generations[0].tokens
        ]
        if len(prefix) + continue_steps > model.config.context_len:
            return None
        seed = zlib.crc32(np.array(prefix, dtype=np.uint32).tobytes()) ^ base_seed
        decode = DecodeConfig(
            temperature=temperature,
            k_samples=k_continuations,
            max_steps=continue_steps,
            seed=seed & 0x7FFFFFFF,
        )
        neighborhood = sample_k(model, prefix, decode, prompt_text=bundle.prompt_text)
        value = score_sample(neighborhood, [detector], config).scores.get(detector)
        return None if value is None else sign * value

    return scorer


# ---------------------------------------------------------------------------
# Toy corpora and labeled datasets


def make_addition_corpus(n: int, seed: int = 0, digits: int = 2, chain: int = 3) -> list[str]:
    """Lines of ``chain`` semicolon-joined problems, e.g. "12+34=46;...".

    Chained problems give every prompt a legitimately diverse set of correct
    continuations (the follow-on problems are free), so consistent-and-right
    is distinguishable from collapsed-and-wrong.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 10 ** (digits - 1), 10**digits
    lines = []
    for _ in range(n):
        segs = []
        for _ in range(max(chain, 1)):
            a, b = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
            segs.append(f"{a}+{b}={a + b}")
        lines.append(";".join(segs) + "\n")
    return lines


def answer_span(text: str) -> str:
    """First solved segment of a generation: everything before ';' or EOS."""
    for sep in (";", "\n"):
        if sep in text:
            text = text.split(sep, 1)[0]
    return text.strip()


def make_addition_prompts(n: int, seed: int = 0, digits: int = 2) -> list[tuple[str, str]]:
    """(prompt, reference) pairs like ("12+34=", "46")."""
    rng = np.random.default_rng(seed)
    lo, hi = 10 ** (digits - 1), 10**digits
    out = []
    for _ in range(n):
        a, b = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        out.append((f"{a}+{b}=", str(a + b)))
    return out


def make_copy_corpus(
    n: int, seed: int = 0, length: int = 8, alphabet: str = "abcd"
) -> list[str]:
    """Lines "seq|seq": the model must reproduce the prefix after the bar."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        seq = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=length))
        lines.append(f"{seq}|{seq}\n")
    return lines


def _state_scale(model: TinyLM, prompt_tokens: Sequence[int]) -> float:
    with torch.no_grad():
        _, resids = model.forward_with_states(
            torch.tensor(prompt_tokens, dtype=torch.long)[None]
        )
    return float(resids[model.mid_index][0].norm(dim=-1).mean())


def make_labeled_dataset(
    model: TinyLM,
    prompts_with_refs: Sequence[tuple[str, str]],
    decode: DecodeConfig,
    corruption: str = "none",
    rho: float = 1.0,
    seed: int = 0,
    tau_r: float = 0.5,
) -> list[TrajectoryBundle]:
    """Sample, optionally corrupt, and reference-label one bundle per prompt.

    state-noise models a corrupted-context rollout: every trajectory's
    mid-layer residual is pushed along one per-prompt direction, with a
    long-tailed per-prompt severity scaled by the budget ``rho`` and a small
    per-generation magnitude jitter.  Prompts whose dynamics damp the push
    keep the right answer and their natural trajectory diversity; the rest
    drift into direction-locked wrong rollouts.  high-temp simply heats the
    sampler.  Labels compare the primary generation's answer span against
    the references.
    """
    from .detectors import rouge_l
    from .metrics import label_by_rouge

    if corruption not in ("none", "high-temp", "state-noise"):
        raise ValueError(f"unknown corruption {corruption!r}")
    rng = np.random.default_rng(seed)
    bundles = []
    for idx, (prompt, ref) in enumerate(prompts_with_refs):
        prompt_tokens = model.vocab.encode(prompt)
        dec = replace(decode, seed=int(rng.integers(0, 2**31 - 1)))
        noise = None
        if corruption == "high-temp":
            dec = replace(dec, temperature=dec.temperature * 4.0)
        elif corruption == "state-noise":
            d = model.config.d_model
            direction = rng.standard_normal(d)
            direction /= np.linalg.norm(direction)
            severity = float(np.exp(NOISE_SEVERITY_SPREAD * rng.standard_normal()))
            jitter = np.abs(1.0 + 0.1 * rng.standard_normal(dec.k_samples))
            gain = rho * NOISE_GAIN * severity * _state_scale(model, prompt_tokens)
            offsets = gain * np.outer(jitter, direction)  # (K, d)
            noise = torch.zeros(
                dec.k_samples, model.config.context_len, d, dtype=torch.float64
            )
            noise[:] = torch.from_numpy(offsets)[:, None, :]
        bundle = sample_k(
            model,
            prompt_tokens,
            dec,
            prompt_id=f"p{idx:05d}",
            prompt_text=prompt,
            references=[ref],
            mid_noise=noise,
        )
        answer = answer_span(bundle.generations[0].text)
        bundle.label = label_by_rouge(answer, [ref], tau_r)
        bundle.rouge_to_ref = max(rouge_l(answer, r) for r in [ref])
        bundle.meta["corruption"] = corruption
        bundle.meta["rho"] = repr(rho)
        bundles.append(bundle)
    return bundles


def hallucination_rate(bundles: Sequence[TrajectoryBundle]) -> float:
    labels = [b.label for b in bundles if b.label is not None]
    if not labels:
        raise ValueError("no labeled bundles")
    return sum(labels) / len(labels)


# ---------------------------------------------------------------------------
# Checkpoint container


def save_checkpoint(model: TinyLM, path) -> None:
    """Versioned binary checkpoint: config block, vocab, f32 tensors."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(
            struct.pack(
                "<6I",
                cfg.vocab_size,
                cfg.d_model,
                cfg.n_layers,
                cfg.n_heads,
                cfg.context_len,
                cfg.seed,
            )
        )
        vocab_bytes = (model.vocab.chars if model.vocab else "").encode("utf-8")
        fh.write(struct.pack("<I", len(vocab_bytes)))
        fh.write(vocab_bytes)
        state = model.state_dict()
        names = sorted(state)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = state[name].detach().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data).tobytes())


def load_checkpoint(path) -> TinyLM:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a tiny-lm checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        vocab_size, d_model, n_layers, n_heads, context_len, seed = struct.unpack(
            "<6I", fh.read(24)
        )
        (vlen,) = struct.unpack("<I", fh.read(4))
        chars = fh.read(vlen).decode("utf-8")
        config = TinyLMConfig(
            vocab_size=vocab_size,
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            context_len=context_len,
            seed=seed,
        )
        model = TinyLM(config, CharVocab(chars) if chars else None)
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            numel = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * numel), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(data.astype(np.float64))
        model.load_state_dict(state)
        model.eval()
        return model
