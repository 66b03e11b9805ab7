"""The network: per-feature tokenizer, attention encoder, decoder, outcome heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    n_outcomes: int = 6
    n_groups: int = 4
    d_tok: int = 2
    n_attn: int = 2
    d1: int = 16
    d2: int = 16
    enc_hidden: int = 64
    dec_hidden: int = 64
    head_hidden: int = 32
    seed: int = 0

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    def validate(self):
        dims = (self.n_features, self.n_outcomes, self.n_groups, self.d_tok, self.d1, self.d2,
                self.enc_hidden, self.dec_hidden, self.head_hidden)
        if min(dims) <= 0 or self.n_attn < 0:
            raise UsageError("model dimensions must be positive")

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, t, d = cfg.n_features, cfg.d_tok, cfg.d
    shapes = {"tok_w": (F, t), "tok_b": (F, t)}
    for b in range(cfg.n_attn):
        for m in ("q", "k", "v", "o", "ff"):
            shapes[f"attn{b}_{m}_w"] = (t, t)
            # a key bias shifts every score in a row equally; softmax ignores it
            if m != "k":
                shapes[f"attn{b}_{m}_b"] = (t,)
    shapes.update(
        enc_w=(F * t, cfg.enc_hidden), enc_b=(cfg.enc_hidden,),
        mu_w=(cfg.enc_hidden, d), mu_b=(d,),
        lv_w=(cfg.enc_hidden, d), lv_b=(d,),
        dec1_w=(d, cfg.dec_hidden), dec1_b=(cfg.dec_hidden,),
        dec2_w=(cfg.dec_hidden, cfg.dec_hidden), dec2_b=(cfg.dec_hidden,),
        dec3_w=(cfg.dec_hidden, F), dec3_b=(F,),
    )
    h = cfg.head_hidden
    for c in range(cfg.n_outcomes):
        shapes.update({
            f"head{c}_1_w": (d, h), f"head{c}_1_b": (h,),
            f"head{c}_2_w": (h, h), f"head{c}_2_b": (h,),
            f"head{c}_3_w": (h, 1), f"head{c}_3_b": (1,),
        })
    return shapes


def _fans(name, shape):
    if name == "tok_w":
        return 1, shape[1]
    return shape[0], shape[1]


class Parameters:
    """Named float64 weight arrays for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(values) != set(shapes):
            missing = sorted(set(shapes) - set(values))
            extra = sorted(set(values) - set(shapes))
            raise DimensionError(f"parameter names mismatch; missing={missing} extra={extra}")
        self.cfg = cfg
        self.values = {}
        for name, shape in shapes.items():
            arr = np.array(values[name], dtype=np.float64)
            if arr.size != math.prod(shape):
                raise DimensionError(f"parameter {name} has {arr.size} values, shape {shape} needs {math.prod(shape)}")
            arr = arr.reshape(shape)
            if not np.isfinite(arr).all():
                raise DimensionError(f"parameter {name} is not finite")
            self.values[name] = arr

    def __getitem__(self, name):
        return self.values[name]

    def names(self):
        return list(self.values)

    def copy(self) -> "Parameters":
        return Parameters(self.cfg, {k: v.copy() for k, v in self.values.items()})

    def bind(self, graph: ad.Graph, trainable: bool = True) -> dict[str, ad.Node]:
        make = graph.param if trainable else graph.const
        return {k: make(v, name=k) for k, v in self.values.items()}


def init_params(cfg: ModelConfig) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    values = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b"):
            values[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values[name] = rng.uniform(-bound, bound, size=shape)
    return Parameters(cfg, values)


@dataclass
class EncoderOutput:
    mu: ad.Node
    logvar: ad.Node
    z: ad.Node
    z1: ad.Node
    z2: ad.Node


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def tokenize(x: ad.Node, P: dict[str, ad.Node]) -> ad.Node:
    """token[i, f] = x[i, f] * w_f + b_f, shape (n, F, d_tok)."""
    n, F = x.shape
    if P["tok_w"].shape[0] != F:
        raise DimensionError(f"input has {F} features, tokenizer expects {P['tok_w'].shape[0]}")
    x3 = ad.reshape(x, (n, F, 1))
    return ad.add(ad.mul(x3, P["tok_w"]), P["tok_b"])


def _attention_block(tok, P, b):
    n, F, t = tok.shape
    flat = ad.reshape(tok, (n * F, t))

    def proj(m, inp):
        w = P[f"attn{b}_{m}_w"]
        out = _affine(inp, w, P[f"attn{b}_{m}_b"]) if m != "k" else ad.matmul(inp, w)
        return ad.reshape(out, (n, F, t))

    mixed = ad.attention(proj("q", flat), proj("k", flat), proj("v", flat))
    h = ad.add(tok, proj("o", ad.reshape(mixed, (n * F, t))))
    ff = ad.relu(proj("ff", ad.reshape(h, (n * F, t))))
    return ad.add(h, ff)


def encode(x: ad.Node, P: dict[str, ad.Node], cfg: ModelConfig, eps=None) -> EncoderOutput:
    """Tokens -> attention blocks -> hidden layer -> (mu, logvar) -> reparameterized z."""
    n = x.shape[0]
    tok = tokenize(x, P)
    for b in range(cfg.n_attn):
        tok = _attention_block(tok, P, b)
    flat = ad.reshape(tok, (n, cfg.n_features * cfg.d_tok))
    hidden = ad.relu(_affine(flat, P["enc_w"], P["enc_b"]))
    mu = _affine(hidden, P["mu_w"], P["mu_b"])
    logvar = ad.clip(_affine(hidden, P["lv_w"], P["lv_b"]), -10.0, 10.0)
    if eps is None:
        z = mu
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (n, cfg.d):
            raise DimensionError(f"eps must have shape {(n, cfg.d)}, got {eps.shape}")
        z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))
    return EncoderOutput(mu, logvar, z, ad.slice_cols(z, 0, cfg.d1), ad.slice_cols(z, cfg.d1, cfg.d))


def decode(z: ad.Node, P: dict[str, ad.Node]) -> ad.Node:
    h = ad.relu(_affine(z, P["dec1_w"], P["dec1_b"]))
    h = ad.relu(_affine(h, P["dec2_w"], P["dec2_b"]))
    return _affine(h, P["dec3_w"], P["dec3_b"])


def predict_heads(latent: ad.Node, P: dict[str, ad.Node], n_outcomes: int) -> ad.Node:
    """One independent three-layer stack per outcome; returns n x C logits."""
    cols = []
    for c in range(n_outcomes):
        h = ad.relu(_affine(latent, P[f"head{c}_1_w"], P[f"head{c}_1_b"]))
        h = ad.relu(_affine(h, P[f"head{c}_2_w"], P[f"head{c}_2_b"]))
        cols.append(_affine(h, P[f"head{c}_3_w"], P[f"head{c}_3_b"]))
    return ad.concat_cols(cols)


def infer(params: Parameters, x: np.ndarray, chunk: int = 512) -> dict[str, np.ndarray]:
    """Deterministic forward pass (eps = 0, heads on mu) in row chunks."""
    cfg = params.cfg
    mus, lvs, probs = [], [], []
    for start in range(0, x.shape[0], chunk):
        g = ad.Graph()
        P = params.bind(g, trainable=False)
        enc = encode(g.const(x[start : start + chunk]), P, cfg)
        logits = predict_heads(enc.mu, P, cfg.n_outcomes)
        mus.append(enc.mu.value)
        lvs.append(enc.logvar.value)
        probs.append(ad._sigmoid(logits.value))
    return {"mu": np.concatenate(mus), "logvar": np.concatenate(lvs), "prob": np.concatenate(probs)}
