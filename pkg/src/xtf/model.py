"""A minimal decoder-only transformer exposing the three probes the scorers
need: per-layer/head attention maps, next-token probabilities, and the raw
context-free embedding table. Also hosts the optimizer and checkpoint IO.

Architecture: pre-norm residual blocks, learned positions, output head tied
to the embedding table (untie via config), and a terminal norm before the
head. Attention projections carry biases except the key projection, whose
bias is a softmax no-op (it shifts every score in a query row equally) and
would otherwise sit in the checkpoint as a forever-zero-gradient parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import GradientTape, Tensor


class ConfigError(ValueError):
    """Invalid model configuration."""


class InputError(ValueError):
    """Tokens that the model cannot consume (overlength, out of vocab)."""


class TrainingError(RuntimeError):
    """Optimization went non-finite or otherwise off the rails."""


MASK_FILL = -1e30  # finite stand-in for -inf; underflows to exactly 0 after softmax


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 99
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq: int = 128
    seed: int = 0
    tie_output: bool = True

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq) < 1:
            raise ConfigError("all dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class ModelParams:
    """All weights, in a fixed construction order (also the checkpoint order)."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def fingerprint(self) -> bytes:
        return b"".join(t.value.tobytes() for t in self.tensors.values())


@dataclass
class ForwardTrace:
    """Everything one causal forward pass exposes.

    attention[l, h, q, p] is the weight query position q puts on key
    position p; each row over p sums to 1 and is exactly 0 for p > q.
    """

    logits: np.ndarray  # (seq, vocab)
    attention: np.ndarray  # (n_layers, n_heads, seq, seq)
    input_embeddings: np.ndarray  # (seq, d_model)

    def validate(self) -> None:
        rows = self.attention.sum(axis=-1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise AssertionError("attention rows do not sum to 1")
        s = self.attention.shape[-1]
        upper = np.triu_indices(s, k=1)
        if np.any(self.attention[..., upper[0], upper[1]] != 0.0):
            raise AssertionError("causal mask violated")


def init(config: ModelConfig) -> ModelParams:
    """Deterministic initialization: N(0, 0.02) weights, zero biases, unit gains."""
    rng = np.random.default_rng(config.seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    t: dict[str, Tensor] = {}

    def normal(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    t["tok_emb"] = normal((v, d))
    t["pos_emb"] = normal((config.max_seq, d))
    for i in range(config.n_layers):
        p = f"layer{i}"
        t[f"{p}.ln1.gain"] = Tensor(np.ones(d))
        t[f"{p}.ln1.bias"] = Tensor(np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            t[f"{p}.attn.{name}"] = normal((d, d))
            # no key bias: it shifts every score in a query row by the same
            # constant, which softmax cancels, leaving a forever-zero gradient
            if name != "wk":
                t[f"{p}.attn.{name.replace('w', 'b')}"] = Tensor(np.zeros(d))
        t[f"{p}.ln2.gain"] = Tensor(np.ones(d))
        t[f"{p}.ln2.bias"] = Tensor(np.zeros(d))
        t[f"{p}.ff.w1"] = normal((d, dff))
        t[f"{p}.ff.b1"] = Tensor(np.zeros(dff))
        t[f"{p}.ff.w2"] = normal((dff, d))
        t[f"{p}.ff.b2"] = Tensor(np.zeros(d))
    # terminal norm: a pre-norm stack feeds an unnormalized residual stream
    # to the output head, which stalls training at this scale without it
    t["final.gain"] = Tensor(np.ones(d))
    t["final.bias"] = Tensor(np.zeros(d))
    if not config.tie_output:
        t["out_proj"] = normal((v, d))
    return ModelParams(config, t)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if ids.size > config.max_seq:
        raise InputError(f"sequence length {ids.size} exceeds max_seq {config.max_seq}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token id out of vocabulary (vocab_size={config.vocab_size})")
    return ids


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(s: int) -> np.ndarray:
    mask = _MASK_CACHE.get(s)
    if mask is None:
        mask = np.zeros((s, s))
        mask[np.triu_indices(s, k=1)] = MASK_FILL
        _MASK_CACHE[s] = mask
    return mask


def _causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Fused multi-head causal attention over (seq, d_model) projections.

    One tape record instead of a dozen; returns the mixed context and the
    per-head attention weights (heads, seq, seq) for the trace.
    """
    s, d = q.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    q3 = q.value.reshape(s, n_heads, dh).swapaxes(0, 1)
    k3 = k.value.reshape(s, n_heads, dh).swapaxes(0, 1)
    v3 = v.value.reshape(s, n_heads, dh).swapaxes(0, 1)
    scores = q3 @ k3.swapaxes(1, 2) * scale + _causal_mask(s)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    weights = e / e.sum(axis=-1, keepdims=True)
    ctx = (weights @ v3).swapaxes(0, 1).reshape(s, d)
    out = Tensor(ctx)

    def bwd(g):
        g3 = g.reshape(s, n_heads, dh).swapaxes(0, 1)
        g_w = g3 @ v3.swapaxes(1, 2)
        g_v3 = weights.swapaxes(1, 2) @ g3
        g_scores = weights * (g_w - np.sum(weights * g_w, axis=-1, keepdims=True))
        g_scores *= scale
        g_q3 = g_scores @ k3
        g_k3 = g_scores.swapaxes(1, 2) @ q3
        to_flat = lambda a: a.swapaxes(0, 1).reshape(s, d)
        return to_flat(g_q3), to_flat(g_k3), to_flat(g_v3)

    nm.record_op(out, (q, k, v), bwd)
    return out, weights


def forward_tensors(params: ModelParams, tokens) -> tuple[Tensor, list[np.ndarray], np.ndarray]:
    """Causal forward pass. Returns the logits tensor (differentiable when a
    tape is active), per-layer attention weight arrays, and the input
    embeddings that fed the first block."""
    cfg = params.config
    ids = _check_tokens(cfg, tokens)
    s = ids.size

    x = nm.embed_positions(params["tok_emb"], params["pos_emb"], ids)
    input_emb = x.value
    attn_maps: list[np.ndarray] = []

    for i in range(cfg.n_layers):
        p = f"layer{i}"
        normed = nm.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        q = nm.linear(normed, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = nm.matmul(normed, params[f"{p}.attn.wk"])
        v = nm.linear(normed, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        ctx, weights = _causal_attention(q, k, v, cfg.n_heads)
        attn_maps.append(weights)
        x = nm.add(x, nm.linear(ctx, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"]))

        normed2 = nm.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        ff_out = nm.feed_forward(
            normed2, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"], params[f"{p}.ff.w2"], params[f"{p}.ff.b2"]
        )
        x = nm.add(x, ff_out)

    x = nm.layer_norm(x, params["final.gain"], params["final.bias"])
    out_table = params["tok_emb"] if cfg.tie_output else params["out_proj"]
    logits = nm.matmul(x, nm.transpose(out_table, (1, 0)))
    return logits, attn_maps, input_emb


def forward(params: ModelParams, tokens) -> ForwardTrace:
    """Untaped forward pass packaged as a trace of plain arrays."""
    logits, attn_maps, input_emb = forward_tensors(params, tokens)
    return ForwardTrace(
        logits=logits.value,
        attention=np.stack(attn_maps),
        input_embeddings=input_emb,
    )


def next_token_probs(params: ModelParams, prefix) -> np.ndarray:
    """Softmax over the vocabulary at the final position of `prefix`."""
    trace = forward(params, prefix)
    return nm.softmax_value(trace.logits[-1])


def embed(params: ModelParams, token_id: int) -> np.ndarray:
    """Context-free embedding: the raw token-table row (no position added)."""
    if not 0 <= token_id < params.config.vocab_size:
        raise InputError(f"token id {token_id} out of vocabulary")
    return params["tok_emb"].value[token_id].copy()


def greedy_generate(params: ModelParams, prefix, max_new: int, stop_id: int | None = None) -> list[int]:
    """Argmax decoding (ties go to the lowest token id). Returns the newly
    generated tokens, excluding the stop token itself."""
    seq = list(prefix)
    out: list[int] = []
    for _ in range(max_new):
        if len(seq) >= params.config.max_seq:
            break
        trace = forward(params, seq)
        nxt = int(np.argmax(trace.logits[-1]))
        if stop_id is not None and nxt == stop_id:
            break
        seq.append(nxt)
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptState:
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    opt_state: OptState,
    lr: float,
    mode: str = "sgd",
) -> OptState:
    """One update in place. `mode` is "sgd" (θ ← θ − η·g) or "adam"."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].value.shape:
            raise TrainingError(f"gradient shape mismatch for {name!r}")
    if mode == "sgd":
        for name, g in grads.items():
            params[name].value -= lr * g
    elif mode == "adam":
        opt_state.step_count += 1
        t = opt_state.step_count
        for name, g in grads.items():
            m = opt_state.m.setdefault(name, np.zeros_like(g))
            v = opt_state.v.setdefault(name, np.zeros_like(g))
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1**t)
            v_hat = v / (1 - ADAM_BETA2**t)
            params[name].value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    else:
        raise ConfigError(f"unknown optimizer mode {mode!r}")
    return opt_state


# ---------------------------------------------------------------------------
# Checkpoint IO: little-endian binary, bitwise round-trip stable.
#
# Layout: magic "XTFM" | version u32 | config (vocab_size, d_model, n_layers,
# n_heads, d_ff, max_seq as u32; seed as i64; tie_output as u8) | tensor
# count u32 | per tensor: name length u32, name bytes, rank u32, dims u32,
# float64 payload. Tensor order is the fixed construction order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"XTFM"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks.append(
        struct.pack(
            "<6IqB",
            cfg.vocab_size,
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_ff,
            cfg.max_seq,
            cfg.seed,
            int(cfg.tie_output),
        )
    )
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", tensor.value.ndim))
        chunks.append(struct.pack(f"<{tensor.value.ndim}I", *tensor.value.shape))
        chunks.append(tensor.value.astype("<f8").tobytes())
    blob = b"".join(chunks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    import os

    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    if blob[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    vocab, d, n_layers, n_heads, d_ff, max_seq, seed, tied = take("<6IqB")
    cfg = ModelConfig(vocab, d, n_layers, n_heads, d_ff, max_seq, seed, bool(tied))
    (count,) = take("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n_items = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n_items, offset=off).reshape(dims)
        off += n_items * 8
        tensors[name] = Tensor(arr.copy())
    return ModelParams(cfg, tensors)
