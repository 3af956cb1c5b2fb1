"""Decoder-only transformer in double-precision numpy.

Everything is explicit: forward caches every intermediate, backward
consumes them in reverse, and the gradients are exact for the graph (no
stochastic layers), which is what lets the finite-difference check hold
to 1e-4.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigInvalid, ContextOverflow, EmptyTarget
from ..scorers import TokenLikelihoods
from ..seeding import derive_np_rng
from .tokenizer import EOS, PAD, Tokenizer

LN_EPS = 1e-5
MASK_NEG = -1e30
PROB_FLOOR = 1e-300
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigInvalid(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.context_len) < 1:
            raise ConfigInvalid("model dimensions must be positive")

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = derive_np_rng(cfg.seed, "init")
    d, v, hidden = cfg.d_model, cfg.vocab_size, 4 * cfg.d_model

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    params: dict[str, np.ndarray] = {
        "tok_emb": w(v, d),
        "pos_emb": w(cfg.context_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = w(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + name] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "mlp.w1"] = w(d, hidden)
        params[p + "mlp.b1"] = np.zeros(hidden)
        params[p + "mlp.w2"] = w(hidden, d)
        params[p + "mlp.b2"] = np.zeros(d)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    params["head.w"] = w(d, v)
    params["head.b"] = np.zeros(v)
    return params


# --- primitive layers ---

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dims = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(dims)
    db = dy.sum(dims)
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention(x, params, prefix, cfg):
    b, t, d = x.shape
    pr = {n: params[prefix + n] for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
    q = _split_heads(x @ pr["wq"] + pr["bq"], cfg.n_heads)
    k = _split_heads(x @ pr["wk"] + pr["bk"], cfg.n_heads)
    v = _split_heads(x @ pr["wv"] + pr["bv"], cfg.n_heads)
    dh = d // cfg.n_heads
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    mask = np.triu(np.full((t, t), MASK_NEG), k=1)
    scores = scores + mask
    scores -= scores.max(-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(-1, keepdims=True)
    ctx = att @ v
    merged = _merge_heads(ctx)
    out = merged @ pr["wo"] + pr["bo"]
    return out, (x, q, k, v, att, merged, pr)


def _attention_backward(dout, cache, cfg, grads, prefix):
    x, q, k, v, att, merged, pr = cache
    b, t, d = x.shape
    dh = d // cfg.n_heads
    grads[prefix + "wo"] += merged.reshape(-1, d).T @ dout.reshape(-1, d)
    grads[prefix + "bo"] += dout.sum((0, 1))
    dmerged = dout @ pr["wo"].T
    dctx = _split_heads(dmerged, cfg.n_heads)
    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    dscores = att * (datt - (datt * att).sum(-1, keepdims=True))
    dscores /= math.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
        flat = _merge_heads(dproj).reshape(-1, d)
        grads[prefix + name] += x.reshape(-1, d).T @ flat
        grads[prefix + "b" + name[1]] += flat.sum(0)
        dx += (flat @ pr[name].T).reshape(b, t, d)
    return dx


def forward_batch(params: dict, cfg: ModelConfig, ids: np.ndarray, *, need_cache: bool = False):
    """Probabilities (B, T, V) for every position; optionally the full cache."""
    b, t = ids.shape
    if t > cfg.context_len:
        raise ContextOverflow(f"sequence length {t} exceeds context {cfg.context_len}")
    x = params["tok_emb"][ids] + params["pos_emb"][:t]
    layers = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        normed1, ln1_cache = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        attn_out, attn_cache = _attention(normed1, params, p + "attn.", cfg)
        x = x + attn_out
        normed2, ln2_cache = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h1 = normed2 @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        act, gelu_cache = _gelu(h1)
        mlp_out = act @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        x = x + mlp_out
        layers.append((ln1_cache, attn_cache, normed1, ln2_cache, gelu_cache, normed2, act))
    hf, lnf_cache = _layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = hf @ params["head.w"] + params["head.b"]
    logits -= logits.max(-1, keepdims=True)
    logz = np.log(np.exp(logits).sum(-1, keepdims=True))
    logp = logits - logz
    probs = np.exp(logp)
    if not need_cache:
        return probs, None
    return probs, {"ids": ids, "layers": layers, "lnf": lnf_cache, "hf": hf, "logp": logp}


def pad_batch(pairs: list[tuple[list[int], list[int]]], cfg: ModelConfig):
    """Right-pad (prompt, target) id pairs into ids/labels/loss-mask arrays.

    Padding sits after the sequence end; with causal attention it cannot
    influence any masked-in position.
    """
    if not pairs:
        raise ConfigInvalid("empty batch")
    lengths = []
    for prompt_ids, target_ids in pairs:
        if not prompt_ids:
            raise ConfigInvalid("prompt token sequence is empty")
        if not target_ids:
            raise EmptyTarget("target token sequence is empty")
        total = len(prompt_ids) + len(target_ids)
        if total > cfg.context_len:
            raise ContextOverflow(f"sequence of {total} tokens exceeds context {cfg.context_len}")
        lengths.append(total)
    t_max = max(lengths)
    b = len(pairs)
    ids = np.full((b, t_max), PAD, dtype=np.int64)
    labels = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    for row, (prompt_ids, target_ids) in enumerate(pairs):
        seq = list(prompt_ids) + list(target_ids)
        ids[row, : len(seq)] = seq
        start = len(prompt_ids) - 1            # row t predicts token t+1
        stop = len(seq) - 1
        labels[row, start:stop] = seq[start + 1:]
        mask[row, start:stop] = 1.0
    return ids, labels, mask


def loss_and_grads(params: dict, cfg: ModelConfig, pairs: list[tuple[list[int], list[int]]]):
    """Mean NLL over target-span positions and exact parameter gradients."""
    ids, labels, mask = pad_batch(pairs, cfg)
    probs, cache = forward_batch(params, cfg, ids, need_cache=True)
    n_selected = mask.sum()
    logp = cache["logp"]
    b, t, v = logp.shape
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n_selected

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    dlogits = probs.copy()
    rows = np.arange(b)[:, None], np.arange(t)[None, :]
    dlogits[rows[0], rows[1], labels] -= 1.0
    dlogits *= (mask / n_selected)[..., None]

    hf = cache["hf"]
    grads["head.w"] += hf.reshape(-1, cfg.d_model).T @ dlogits.reshape(-1, v)
    grads["head.b"] += dlogits.sum((0, 1))
    dhf = dlogits @ params["head.w"].T
    dx, dg, db = _layer_norm_backward(dhf, cache["lnf"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        ln1_cache, attn_cache, normed1, ln2_cache, gelu_cache, normed2, act = cache["layers"][i]
        # mlp branch
        dmlp_out = dx
        grads[p + "mlp.w2"] += act.reshape(-1, act.shape[-1]).T @ dmlp_out.reshape(-1, cfg.d_model)
        grads[p + "mlp.b2"] += dmlp_out.sum((0, 1))
        dact = dmlp_out @ params[p + "mlp.w2"].T
        dh1 = _gelu_backward(dact, gelu_cache)
        grads[p + "mlp.w1"] += normed2.reshape(-1, cfg.d_model).T @ dh1.reshape(-1, dh1.shape[-1])
        grads[p + "mlp.b1"] += dh1.sum((0, 1))
        dnormed2 = dh1 @ params[p + "mlp.w1"].T
        dres, dg, db = _layer_norm_backward(dnormed2, ln2_cache)
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dres
        # attention branch
        dattn_out = dx
        dnormed1 = _attention_backward(dattn_out, attn_cache, cfg, grads, p + "attn.")
        dres, dg, db = _layer_norm_backward(dnormed1, ln1_cache)
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + dres

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:t] += dx.sum(0)
    return float(loss), grads


class MicroLM:
    """Model bundle: config + tokenizer + parameters, with scoring helpers."""

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer, params: dict | None = None):
        cfg.validate()
        if cfg.vocab_size != tokenizer.vocab_size:
            raise ConfigInvalid(
                f"config vocab {cfg.vocab_size} != tokenizer vocab {tokenizer.vocab_size}"
            )
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.params = init_params(cfg) if params is None else params

    def forward(self, ids: list[int]) -> np.ndarray:
        """Next-token probability rows (T, V) for one sequence."""
        if not ids:
            raise ConfigInvalid("forward needs at least one token")
        probs, _ = forward_batch(self.params, self.cfg, np.asarray([ids], dtype=np.int64))
        return probs[0]

    def sequence_likelihood(self, prompt: str, target: str) -> TokenLikelihoods:
        return self.sequence_likelihood_many([(prompt, target)])[0]

    def sequence_likelihood_many(self, pairs: list[tuple[str, str]]) -> list[TokenLikelihoods]:
        """Teacher-forced target-token probabilities, batched over pairs."""
        encoded = []
        token_texts = []
        for prompt, target in pairs:
            prompt_ids = self.tokenizer.encode(prompt)
            target_ids = self.tokenizer.encode(target)
            if not target_ids:
                raise EmptyTarget("cannot score an empty target")
            if not prompt_ids:
                raise ConfigInvalid("cannot score under an empty prompt")
            encoded.append((prompt_ids, target_ids))
            token_texts.append(target.split())
        ids, labels, mask = pad_batch(encoded, self.cfg)
        probs, _ = forward_batch(self.params, self.cfg, ids)
        out = []
        for row, (prompt_ids, target_ids) in enumerate(encoded):
            start = len(prompt_ids) - 1
            positions = np.arange(start, start + len(target_ids))
            p = probs[row, positions, target_ids]
            p = np.maximum(p, PROB_FLOOR)
            out.append(TokenLikelihoods.from_probs(token_texts[row], [float(x) for x in p]))
        return out

    def greedy_decode(self, prompt: str, max_len: int = 16, stop_id: int = EOS) -> str:
        ids = self.tokenizer.encode(prompt)
        if not ids:
            raise ConfigInvalid("cannot decode from an empty prompt")
        if len(ids) > self.cfg.context_len:
            raise ContextOverflow(f"prompt of {len(ids)} tokens exceeds context")
        generated: list[int] = []
        while len(generated) < max_len and len(ids) < self.cfg.context_len:
            row = self.forward(ids)[-1]
            nxt = int(np.argmax(row))
            if nxt == stop_id:
                break
            generated.append(nxt)
            ids.append(nxt)
        return self.tokenizer.decode(generated)

    # --- persistence ---

    def save(self, path: str | Path) -> None:
        blob = {
            "format": "microlm-checkpoint-v1",
            "config": self.cfg.to_json(),
            "tokenizer": self.tokenizer.to_json(),
            "params": {
                name: {
                    "shape": list(arr.shape),
                    "data": base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode("ascii"),
                }
                for name, arr in self.params.items()
            },
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(blob, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_checkpoint(path: str | Path) -> MicroLM:
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != "microlm-checkpoint-v1":
        raise ConfigInvalid(f"unrecognized checkpoint format in {path}")
    cfg = ModelConfig.from_json(blob["config"])
    tokenizer = Tokenizer.from_json(blob["tokenizer"])
    params = {}
    for name, entry in blob["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
        params[name] = arr.reshape(entry["shape"]).copy()
    return MicroLM(cfg, tokenizer, params)
