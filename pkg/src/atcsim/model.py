"""Aligned encoder-decoder backbone with per-client private heads.

Parameters live in a flat ``dict[str, ndarray]``. The first dotted component
of a key is its region: ``encoder``, ``decoder`` and ``mlm_head`` form the
shared backbone, ``task_head`` and ``contrast_head`` are private.

The transformer is pre-layer-norm with sinusoidal positions, no dropout and
no weight tying. Every ``*_forward`` returns a cache consumed by the
matching ``*_backward``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import layers as nn
from .errors import ConfigError, DegenerateBatchError, UsageError, VocabError
from .tensor import Params, RngStream, truncated_normal

REGIONS = ("encoder", "decoder", "mlm_head", "task_head", "contrast_head")
BACKBONE = ("encoder", "decoder", "mlm_head")
PRIVATE = ("task_head", "contrast_head")

# special token ids; regular tokens start at NUM_SPECIAL
PAD, MASK, BOS, EOS, SEP = 0, 1, 2, 3, 4
NUM_SPECIAL = 5

TASK_KINDS = ("classification", "span_extraction", "generation")


@dataclass(frozen=True)
class ModelConfig:
    """Model shape. ``vocab_size`` counts the five special tokens."""

    vocab_size: int = 64 + NUM_SPECIAL
    d_model: int = 32
    num_heads: int = 2
    num_layers: int = 2
    ffn_dim: int = 64
    max_seq_len: int = 32
    mlp_summary_dim: int = 32
    num_classes: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}", key=name)
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads", key="num_heads")


PAPER_TINY = ModelConfig(d_model=128, num_heads=2, num_layers=2, ffn_dim=512, mlp_summary_dim=128)


def region_of(key: str) -> str:
    region = key.split(".", 1)[0]
    if region not in REGIONS:
        raise KeyError(f"parameter {key!r} has no known region")
    return region


def keys_in(params, regions) -> list[str]:
    regions = set(regions)
    return sorted(k for k in params if region_of(k) in regions)


def select(params, regions) -> Params:
    return {k: params[k] for k in keys_in(params, regions)}


def backbone_signature(params) -> list[tuple[str, tuple[int, ...], str]]:
    return [(k, params[k].shape, region_of(k)) for k in keys_in(params, BACKBONE)]


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- initialization ----------------------------------------------------------


def _linear_shapes(name, d_in, d_out):
    return {name + ".w": (d_in, d_out), name + ".b": (d_out,)}


def _ln_shapes(name, d):
    return {name + ".g": (d,), name + ".b": (d,)}


def _attn_shapes(name, d):
    shapes = {}
    for part in ("q", "k", "v", "o"):
        shapes.update(_linear_shapes(f"{name}.{part}", d, d))
    return shapes


def _ffn_shapes(name, d, f):
    return {**_linear_shapes(name + ".fc1", d, f), **_linear_shapes(name + ".fc2", f, d)}


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, F = cfg.d_model, cfg.vocab_size, cfg.ffn_dim
    s: dict[str, tuple[int, ...]] = {"encoder.embed": (V, d)}
    for i in range(cfg.num_layers):
        p = f"encoder.layers.{i}"
        s.update(_ln_shapes(p + ".ln1", d))
        s.update(_attn_shapes(p + ".attn", d))
        s.update(_ln_shapes(p + ".ln2", d))
        s.update(_ffn_shapes(p + ".ffn", d, F))
    s.update(_ln_shapes("encoder.ln_f", d))
    s["decoder.embed"] = (V, d)
    for i in range(cfg.num_layers):
        p = f"decoder.layers.{i}"
        s.update(_ln_shapes(p + ".ln1", d))
        s.update(_attn_shapes(p + ".self_attn", d))
        s.update(_ln_shapes(p + ".ln2", d))
        s.update(_attn_shapes(p + ".cross_attn", d))
        s.update(_ln_shapes(p + ".ln3", d))
        s.update(_ffn_shapes(p + ".ffn", d, F))
    s.update(_ln_shapes("decoder.ln_f", d))
    s.update(_linear_shapes("decoder.out", d, V))
    s.update(_linear_shapes("mlm_head.dense", d, d))
    s.update(_ln_shapes("mlm_head.ln", d))
    s.update(_linear_shapes("mlm_head.out", d, V))
    return s


def private_shapes(cfg: ModelConfig, task_kind: str | None) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    s = {
        **_linear_shapes("contrast_head.fc1", d, d),
        **_linear_shapes("contrast_head.fc2", d, cfg.mlp_summary_dim),
    }
    if task_kind == "classification":
        s.update(_linear_shapes("task_head", d, cfg.num_classes))
    elif task_kind == "span_extraction":
        s.update(_linear_shapes("task_head", d, 2))
    elif task_kind == "generation":
        s.update(_linear_shapes("task_head", d, cfg.vocab_size))
    elif task_kind is not None:
        raise ValueError(f"unknown task kind {task_kind!r}")
    return s


def _init_tensors(shapes, rng: RngStream) -> Params:
    gen = rng.generator()
    out = {}
    for key in sorted(shapes):
        shape = shapes[key]
        leaf = key.rsplit(".", 1)[-1]
        if leaf == "g":
            out[key] = np.ones(shape)
        elif leaf == "b":
            out[key] = np.zeros(shape)
        else:
            out[key] = truncated_normal(gen, shape, std=0.02)
    return out


def init_model(cfg: ModelConfig, rng: RngStream, task_kind: str | None = None) -> Params:
    """Random backbone plus private heads for ``task_kind``.

    Backbone and private tensors come from separate substreams, so clients
    that share ``rng`` share an identical backbone regardless of their task.
    """
    params = _init_tensors(backbone_shapes(cfg), rng.child("backbone"))
    params.update(_init_tensors(private_shapes(cfg, task_kind), rng.child("private", task_kind)))
    return params


# -- encoder -----------------------------------------------------------------


def _check_tokens(tokens, cfg: ModelConfig):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise VocabError(f"token id out of range [0, {cfg.vocab_size})")
    if tokens.shape[-1] > cfg.max_seq_len:
        raise VocabError(f"sequence length {tokens.shape[-1]} exceeds {cfg.max_seq_len}")


def _embed(params, table, tokens, cfg):
    L = tokens.shape[1]
    scale = math.sqrt(cfg.d_model)
    return params[table][tokens] * scale + sinusoidal_positions(L, cfg.d_model)[None]


def encoder_forward(params, cfg: ModelConfig, tokens, mask):
    """Batched encoder. ``tokens`` (B,L) ints, ``mask`` (B,L) True at real tokens."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    _check_tokens(tokens, cfg)
    x = _embed(params, "encoder.embed", tokens, cfg)
    bias = nn.padding_bias(mask)
    blocks = []
    for i in range(cfg.num_layers):
        p = f"encoder.layers.{i}"
        h, c_ln1 = nn.layernorm_forward(x, params, p + ".ln1")
        a, c_at = nn.attention_forward(h, h, params, p + ".attn", cfg.num_heads, bias)
        x = x + a
        h, c_ln2 = nn.layernorm_forward(x, params, p + ".ln2")
        f, c_ff = nn.ffn_forward(h, params, p + ".ffn")
        x = x + f
        blocks.append((c_ln1, c_at, c_ln2, c_ff))
    out, c_lnf = nn.layernorm_forward(x, params, "encoder.ln_f")
    cache = {"tokens": tokens, "blocks": blocks, "ln_f": c_lnf, "scale": math.sqrt(cfg.d_model), "V": cfg.vocab_size}
    return out, cache


def encoder_backward(d_out, cache):
    if cache is None:
        raise UsageError("encoder_backward called without a forward cache")
    dx, grads = nn.layernorm_backward(d_out, cache["ln_f"])
    for c_ln1, c_at, c_ln2, c_ff in reversed(cache["blocks"]):
        df, g = nn.ffn_backward(dx, c_ff)
        nn.add_grads(grads, g)
        dh, g = nn.layernorm_backward(df, c_ln2)
        nn.add_grads(grads, g)
        dx = dx + dh
        dq, dkv, g = nn.attention_backward(dx, c_at)
        nn.add_grads(grads, g)
        dh, g = nn.layernorm_backward(dq + dkv, c_ln1)
        nn.add_grads(grads, g)
        dx = dx + dh
    grads["encoder.embed"] = nn.embed_backward(dx * cache["scale"], cache["tokens"], cache["V"])
    return grads


# -- decoder -----------------------------------------------------------------


def decoder_forward(params, cfg: ModelConfig, tokens, mask, enc_out, enc_mask):
    """Batched decoder returning last-layer states (B,Lt,d) after the final norm."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    _check_tokens(tokens, cfg)
    x = _embed(params, "decoder.embed", tokens, cfg)
    self_bias = nn.causal_bias(mask)
    cross_bias = nn.padding_bias(np.asarray(enc_mask, dtype=bool))
    blocks = []
    for i in range(cfg.num_layers):
        p = f"decoder.layers.{i}"
        h, c_ln1 = nn.layernorm_forward(x, params, p + ".ln1")
        a, c_sa = nn.attention_forward(h, h, params, p + ".self_attn", cfg.num_heads, self_bias)
        x = x + a
        h, c_ln2 = nn.layernorm_forward(x, params, p + ".ln2")
        a, c_ca = nn.attention_forward(h, enc_out, params, p + ".cross_attn", cfg.num_heads, cross_bias)
        x = x + a
        h, c_ln3 = nn.layernorm_forward(x, params, p + ".ln3")
        f, c_ff = nn.ffn_forward(h, params, p + ".ffn")
        x = x + f
        blocks.append((c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_ff))
    out, c_lnf = nn.layernorm_forward(x, params, "decoder.ln_f")
    cache = {"tokens": tokens, "blocks": blocks, "ln_f": c_lnf, "scale": math.sqrt(cfg.d_model), "V": cfg.vocab_size}
    return out, cache


def decoder_backward(d_out, cache):
    """Returns ``(grads, d_enc_out)``."""
    if cache is None:
        raise UsageError("decoder_backward called without a forward cache")
    dx, grads = nn.layernorm_backward(d_out, cache["ln_f"])
    d_enc = 0.0
    for c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_ff in reversed(cache["blocks"]):
        df, g = nn.ffn_backward(dx, c_ff)
        nn.add_grads(grads, g)
        dh, g = nn.layernorm_backward(df, c_ln3)
        nn.add_grads(grads, g)
        dx = dx + dh
        dq, dkv, g = nn.attention_backward(dx, c_ca)
        nn.add_grads(grads, g)
        d_enc = d_enc + dkv
        dh, g = nn.layernorm_backward(dq, c_ln2)
        nn.add_grads(grads, g)
        dx = dx + dh
        dq, dkv, g = nn.attention_backward(dx, c_sa)
        nn.add_grads(grads, g)
        dh, g = nn.layernorm_backward(dq + dkv, c_ln1)
        nn.add_grads(grads, g)
        dx = dx + dh
    grads["decoder.embed"] = nn.embed_backward(dx * cache["scale"], cache["tokens"], cache["V"])
    return grads, d_enc


# -- heads -------------------------------------------------------------------


def mlm_head_forward(params, states):
    h, c1 = nn.linear_forward(states, params, "mlm_head.dense")
    a, cg = nn.gelu_forward(h)
    n, cl = nn.layernorm_forward(a, params, "mlm_head.ln")
    logits, c2 = nn.linear_forward(n, params, "mlm_head.out")
    return logits, (c1, cg, cl, c2)


def mlm_head_backward(d_logits, cache):
    c1, cg, cl, c2 = cache
    dn, grads = nn.linear_backward(d_logits, c2)
    da, g = nn.layernorm_backward(dn, cl)
    nn.add_grads(grads, g)
    dh = nn.gelu_backward(da, cg)
    ds, g = nn.linear_backward(dh, c1)
    nn.add_grads(grads, g)
    return ds, grads


def contrast_head_forward(params, states):
    h, c1 = nn.linear_forward(states, params, "contrast_head.fc1")
    a, ct = nn.tanh_forward(h)
    out, c2 = nn.linear_forward(a, params, "contrast_head.fc2")
    return out, (c1, ct, c2)


def contrast_head_backward(d_out, cache):
    c1, ct, c2 = cache
    da, grads = nn.linear_backward(d_out, c2)
    dh = nn.tanh_backward(da, ct)
    ds, g = nn.linear_backward(dh, c1)
    nn.add_grads(grads, g)
    return ds, grads


linear_head_forward = nn.linear_forward
linear_head_backward = nn.linear_backward


# -- single-sequence convenience API -----------------------------------------


def pad_batch(seqs, length: int | None = None, fill: int = PAD):
    """Right-pad token sequences into ``(tokens, mask)`` arrays.

    Width is ``length``, or the longest sequence when ``length`` is None.
    """
    if length is None:
        length = max((len(s) for s in seqs), default=0)
    tokens = np.full((len(seqs), length), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise VocabError(f"sequence length {len(s)} exceeds {length}")
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


def encode(params, cfg: ModelConfig, tokens, pad_mask=None) -> np.ndarray:
    """Encoder states (L, d_model) for one sequence padded to ``max_seq_len``."""
    tokens = list(tokens)
    if pad_mask is None:
        tok, mask = pad_batch([tokens], cfg.max_seq_len)
    else:
        tok, mask = pad_batch([tokens], cfg.max_seq_len)
        mask[0, : len(tokens)] = np.asarray(pad_mask, dtype=bool)
    out, _ = encoder_forward(params, cfg, tok, mask)
    return out[0]


def decode(params, cfg: ModelConfig, enc_states, target_tokens, enc_mask=None) -> np.ndarray:
    """Output-projection logits (L_t, V) for teacher-forced ``target_tokens``."""
    target = list(target_tokens)
    if not target:
        return np.zeros((0, cfg.vocab_size))
    if enc_mask is None:
        enc_mask = np.ones(enc_states.shape[0], dtype=bool)
    tok, mask = pad_batch([target], len(target))
    h, _ = decoder_forward(params, cfg, tok, mask, enc_states[None], np.asarray(enc_mask, dtype=bool)[None])
    logits, _ = nn.linear_forward(h, params, "decoder.out")
    return logits[0]


# -- summarized representation -----------------------------------------------


def summary_inputs(batch, cfg: ModelConfig):
    """Encoder and teacher-forced decoder inputs for synthetic instances."""
    L = cfg.max_seq_len
    src = [list(s)[:L] for s in batch]
    dec = [[BOS] + list(s)[: L - 1] for s in batch]
    src_tok, src_mask = pad_batch(src)
    dec_tok, dec_mask = pad_batch(dec)
    return src_tok, src_mask, dec_tok, dec_mask


def summary_forward(params, cfg: ModelConfig, inputs):
    """Mean contrast-head output over positions, then over instances."""
    src_tok, src_mask, dec_tok, dec_mask = inputs
    if src_tok.shape[0] == 0:
        raise DegenerateBatchError("empty synthetic batch")
    enc, c_enc = encoder_forward(params, cfg, src_tok, src_mask)
    dec, c_dec = decoder_forward(params, cfg, dec_tok, dec_mask, enc, src_mask)
    z, c_head = contrast_head_forward(params, dec)
    w = dec_mask / dec_mask.sum(axis=1, keepdims=True)
    per_instance = (z * w[..., None]).sum(axis=1)
    h = per_instance.mean(axis=0)
    cache = {"enc": c_enc, "dec": c_dec, "head": c_head, "w": w}
    return h, cache


def summary_backward(d_h, cache):
    w = cache["w"]
    B = w.shape[0]
    dz = (d_h[None, None, :] / B) * w[..., None]
    d_dec, grads = contrast_head_backward(dz, cache["head"])
    g_dec, d_enc = decoder_backward(d_dec, cache["dec"])
    nn.add_grads(grads, g_dec)
    nn.add_grads(grads, encoder_backward(d_enc, cache["enc"]))
    return grads


def summary_representation(params, cfg: ModelConfig, synthetic_batch) -> np.ndarray:
    """Summarized representation ``h`` over a batch of synthetic token sequences."""
    if len(synthetic_batch) == 0:
        raise DegenerateBatchError("empty synthetic batch")
    h, _ = summary_forward(params, cfg, summary_inputs(synthetic_batch, cfg))
    return h


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params, path) -> None:
    """Text listing ``key<TAB>region<TAB>shape<TAB>hex floats``; bit-exact."""
    lines = []
    for k in sorted(params):
        arr = np.asarray(params[k], dtype=np.float64)
        shape = "x".join(str(s) for s in arr.shape)
        data = " ".join(float(v).hex() for v in arr.ravel())
        lines.append(f"{k}\t{region_of(k)}\t{shape}\t{data}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Params:
    params = {}
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        key, region, shape, data = line.split("\t")
        if region_of(key) != region:
            raise ValueError(f"region mismatch for {key}")
        dims = tuple(int(s) for s in shape.split("x")) if shape else ()
        values = [float.fromhex(t) for t in data.split()] if data else []
        params[key] = np.array(values, dtype=np.float64).reshape(dims)
    return params
