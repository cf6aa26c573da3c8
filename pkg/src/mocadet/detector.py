"""Query-based encoder/decoder detector with modality-context attention.

A small DETR-style stack: non-overlapping patch embedding with fixed 2-d
sinusoidal positions, optional encoder self-attention blocks, and a decoder
whose self-attention can run over an augmented query set: the N object
queries plus one projected modality token appended as the last row. The
token contributes keys and values only; its own attention output is never
consumed (the next layer's query set is always the first N rows), so query
count is preserved through every layer.

The augmented attention is assembled from block scores (query-query and
query-token). Masking the token column therefore reuses the exact
query-query nodes, which is what makes the masked forward bitwise equal to
a token-free forward -- the reduction property the tests pin down.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError, ValidationError


@dataclass
class DetectorConfig:
    n_classes: int
    d_model: int = 64
    n_queries: int = 25
    n_decoder_layers: int = 6
    n_heads: int = 4
    patch_size: int = 8
    n_encoder_layers: int = 1
    ffn_width: int = 128
    moca_enabled: bool = True
    qra_layer: int = 5

    def validate(self) -> "DetectorConfig":
        if self.d_model % self.n_heads != 0:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.d_model % 4 != 0:
            raise ValidationError("d_model must be divisible by 4 (2-d positions)")
        if self.n_queries < 1:
            raise ValidationError("need at least one query")
        if self.n_decoder_layers < 2:
            raise ValidationError("need >= 2 decoder layers (alignment layer must be > 1)")
        if not (2 <= self.qra_layer <= self.n_decoder_layers):
            raise ValidationError(
                f"qra_layer must be in [2, {self.n_decoder_layers}], got {self.qra_layer}")
        if self.n_classes < 1:
            raise ValidationError("need at least one class")
        return self

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_classes", "d_model", "n_queries", "n_decoder_layers", "n_heads",
            "patch_size", "n_encoder_layers", "ffn_width", "moca_enabled", "qra_layer")}

    @staticmethod
    def from_json(doc: dict) -> "DetectorConfig":
        return DetectorConfig(**doc).validate()


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        s = 1.0 / math.sqrt(d_in)
        self.W = ad.param(rng.uniform(-s, s, size=(d_in, d_out)))
        self.b = ad.param(rng.uniform(-s, s, size=d_out)) if bias else None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        out = ad.matmul(x, self.W)
        return ad.add(out, self.b) if self.b is not None else out

    def parameters(self, prefix: str) -> list:
        out = [(f"{prefix}.W", self.W)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ad.param(np.ones(d))
        self.beta = ad.param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.mul(ad.layernorm(x, self.eps), self.gamma), self.beta)

    def parameters(self, prefix: str) -> list:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class MultiHeadAttention:
    """Scaled dot-product attention with head split/concat and output proj."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _heads(self, x: ad.Tensor) -> list:
        return [ad.slice_cols(x, h * self.d_head, (h + 1) * self.d_head)
                for h in range(self.n_heads)]

    def attend(self, q_in: ad.Tensor, kv_in: ad.Tensor,
               extra_kv: ad.Tensor | None = None, mask_extra: bool = False) -> ad.Tensor:
        """Rows of ``q_in`` attend to rows of ``kv_in`` (+ optional extra row).

        ``extra_kv`` appends one key/value row whose scores form a separate
        block column. With ``mask_extra`` the column is still computed but
        excluded from the softmax and the value mix, which must reproduce
        plain attention exactly: the in-set blocks are the same nodes.
        """
        scale = 1.0 / math.sqrt(self.d_head)
        q = self._heads(self.wq(q_in))
        k = self._heads(self.wk(kv_in))
        v = self._heads(self.wv(kv_in))
        if extra_kv is not None:
            k_x = self._heads(self.wk(extra_kv))
            v_x = self._heads(self.wv(extra_kv))
        outs = []
        for h in range(self.n_heads):
            scores = ad.matmul(q[h], ad.transpose(k[h]))
            values = v[h]
            if extra_kv is not None:
                token_col = ad.matmul(q[h], ad.transpose(k_x[h]))
                if not mask_extra:
                    scores = ad.concat_cols([scores, token_col])
                    values = ad.concat_rows([values, v_x[h]])
            attn = ad.softmax_rows(scores, scale)
            outs.append(ad.matmul(attn, values))
        return self.wo(ad.concat_cols(outs))

    def parameters(self, prefix: str) -> list:
        out = []
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend(lin.parameters(f"{prefix}.{name}"))
        return out


class FeedForward:
    def __init__(self, d_model: int, width: int, rng: np.random.Generator):
        self.lin1 = Linear(d_model, width, rng)
        self.lin2 = Linear(width, d_model, rng)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.lin2(ad.relu(self.lin1(x)))

    def parameters(self, prefix: str) -> list:
        return self.lin1.parameters(f"{prefix}.lin1") + self.lin2.parameters(f"{prefix}.lin2")


def sinusoidal_positions_2d(n_rows: int, n_cols: int, d_model: int) -> np.ndarray:
    """Fixed 2-d sine/cosine grid encoding; first half encodes y, second x."""
    if d_model % 4 != 0:
        raise ShapeError("d_model must be divisible by 4 for 2-d positions")
    half = d_model // 2

    def encode_1d(positions: np.ndarray) -> np.ndarray:
        out = np.zeros((positions.size, half))
        div = np.exp(np.arange(0, half, 2) * (-math.log(10000.0) / half))
        out[:, 0::2] = np.sin(positions[:, None] * div[None, :])
        out[:, 1::2] = np.cos(positions[:, None] * div[None, :])
        return out

    ys, xs = np.mgrid[0:n_rows, 0:n_cols]
    return np.concatenate([encode_1d(ys.reshape(-1).astype(np.float64)),
                           encode_1d(xs.reshape(-1).astype(np.float64))], axis=1)


class EncoderLayer:
    def __init__(self, cfg: DetectorConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ln2 = LayerNorm(cfg.d_model)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        x = self.ln1(ad.add(x, self.attn.attend(x, x)))
        return self.ln2(ad.add(x, self.ffn(x)))

    def parameters(self, prefix: str) -> list:
        return (self.attn.parameters(f"{prefix}.attn") + self.ffn.parameters(f"{prefix}.ffn")
                + self.ln1.parameters(f"{prefix}.ln1") + self.ln2.parameters(f"{prefix}.ln2"))


class DecoderLayer:
    def __init__(self, cfg: DetectorConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ln3 = LayerNorm(cfg.d_model)

    def __call__(self, queries: ad.Tensor, memory: ad.Tensor, query_pos: ad.Tensor,
                 token_row: ad.Tensor | None, mask_token: bool = False) -> ad.Tensor:
        x = ad.add(queries, query_pos)  # token row carries zero position
        attn = self.self_attn.attend(x, x, extra_kv=token_row, mask_extra=mask_token)
        queries = self.ln1(ad.add(queries, attn))
        cross = self.cross_attn.attend(ad.add(queries, query_pos), memory)
        queries = self.ln2(ad.add(queries, cross))
        return self.ln3(ad.add(queries, self.ffn(queries)))

    def parameters(self, prefix: str) -> list:
        return (self.self_attn.parameters(f"{prefix}.self_attn")
                + self.cross_attn.parameters(f"{prefix}.cross_attn")
                + self.ffn.parameters(f"{prefix}.ffn")
                + self.ln1.parameters(f"{prefix}.ln1")
                + self.ln2.parameters(f"{prefix}.ln2")
                + self.ln3.parameters(f"{prefix}.ln3"))


@dataclass
class DetectorOutput:
    layers: list  # per decoder layer: (class logits [N x C], boxes [N x 4] cxcywh)
    query_states: list = field(default_factory=list)  # Q^(1..L), each [N x d]

    def state(self, layer: int) -> ad.Tensor:
        """Q^(l) for 1-indexed decoder layer l."""
        if not 1 <= layer <= len(self.query_states):
            raise ContractError(f"no query state for layer {layer}")
        return self.query_states[layer - 1]


class Detector:
    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        cfg = config.validate()
        self.config = cfg
        d = cfg.d_model
        self.patch_proj = Linear(cfg.patch_size * cfg.patch_size, d, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_encoder_layers)]
        self.query_embed = ad.param(rng.normal(0.0, 0.5, size=(cfg.n_queries, d)))
        self.query_pos = ad.param(rng.normal(0.0, 0.5, size=(cfg.n_queries, d)))
        self.token_proj = Linear(d, d, rng)  # projects the modality token into query space
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_decoder_layers)]
        self.cls_head = Linear(d, cfg.n_classes, rng)
        self.box_hidden = Linear(d, d, rng)
        self.box_out = Linear(d, 4, rng)

    # -- parameters ------------------------------------------------------
    def parameters(self) -> list:
        out = self.patch_proj.parameters("patch_proj")
        for i, layer in enumerate(self.encoder):
            out.extend(layer.parameters(f"encoder.{i}"))
        out.append(("query_embed", self.query_embed))
        out.append(("query_pos", self.query_pos))
        out.extend(self.token_proj.parameters("token_proj"))
        for i, layer in enumerate(self.decoder):
            out.extend(layer.parameters(f"decoder.{i}"))
        out.extend(self.cls_head.parameters("cls_head"))
        out.extend(self.box_hidden.parameters("box_hidden"))
        out.extend(self.box_out.parameters("box_out"))
        return out

    # -- forward ----------------------------------------------------------
    def encode(self, image: np.ndarray) -> ad.Tensor:
        img = np.asarray(image, dtype=np.float64)
        p = self.config.patch_size
        if img.ndim != 2 or img.shape[0] % p or img.shape[1] % p:
            raise ShapeError(f"image shape {img.shape} not divisible by patch size {p}")
        gh, gw = img.shape[0] // p, img.shape[1] // p
        patches = img.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
        x = self.patch_proj(ad.constant(patches))
        x = ad.add(x, ad.constant(sinusoidal_positions_2d(gh, gw, self.config.d_model)))
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, memory: ad.Tensor, token: ad.Tensor | None,
               mask_token_column: bool = False) -> DetectorOutput:
        cfg = self.config
        token_row = None
        if cfg.moca_enabled and token is not None:
            if token.shape != (cfg.d_model,):
                raise ShapeError(f"token shape {token.shape} != ({cfg.d_model},)")
            token_row = self.token_proj(ad.reshape(token, (1, cfg.d_model)))
        queries = self.query_embed
        out = DetectorOutput(layers=[])
        for layer in self.decoder:
            queries = layer(queries, memory, self.query_pos, token_row,
                            mask_token=mask_token_column)
            out.query_states.append(queries)
            logits = self.cls_head(queries)
            boxes = ad.sigmoid(self.box_out(ad.relu(self.box_hidden(queries))))
            out.layers.append((logits, boxes))
        return out

    def forward(self, image: np.ndarray, token: ad.Tensor | None = None,
                mask_token_column: bool = False) -> DetectorOutput:
        return self.decode(self.encode(image), token, mask_token_column)


def moca_augment(queries: ad.Tensor, token: ad.Tensor, token_proj: Linear) -> ad.Tensor:
    """Augmented query set: N query rows followed by one projected token row."""
    d = queries.shape[1]
    if token.shape != (d,):
        raise ShapeError(f"token shape {token.shape} incompatible with queries {queries.shape}")
    row = ad.reshape(token_proj(ad.reshape(token, (1, d))), (1, d))
    return ad.concat_rows([queries, row])


def latency_bench(config: DetectorConfig, n_trials: int = 100, seed: int = 0,
                  warmup: int = 5) -> tuple:
    """Mean decoder-forward wall clock (ms) without and with the token row.

    Same weights and memory for both arms; only the appended token differs.
    """
    if n_trials < 100:
        raise ValidationError("latency bench needs n_trials >= 100")
    rng = np.random.default_rng(seed)
    model = Detector(config, rng)
    size = config.patch_size * 8
    image = rng.uniform(0, 1, size=(size, size))
    with ad.no_grad():
        memory = model.encode(image)
        token = ad.constant(rng.normal(size=config.d_model))

        def run(tok):
            t0 = time.perf_counter()
            model.decode(memory, tok)
            return (time.perf_counter() - t0) * 1e3

        for _ in range(warmup):
            run(None)
            run(token)
        base = [run(None) for _ in range(n_trials)]
        moca = [run(token) for _ in range(n_trials)]
    return float(np.mean(base)), float(np.mean(moca))
