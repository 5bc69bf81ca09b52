"""Post-LN transformer encoder (BERT layout) with a CLS classification head."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, softmax_rows, take_rows

CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 2
    d_hidden: int = 8
    d_ff: int = 16
    vocab_size: int = 16
    max_len: int = 8
    num_classes: int = 2

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_hidden % self.num_heads:
            raise ValueError(f"d_hidden={self.d_hidden} not divisible by num_heads={self.num_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for CLS plus one token")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.num_heads

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerWeights:
    w_q: Tensor   # [d, h*d_head]; head t owns columns t*d_head:(t+1)*d_head
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor   # [h*d_head, d]
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EncodedSequence:
    """Hidden states ``[B, n, d]``; position 0 of every row is the CLS slot.

    ``positions`` holds the original token position of each slot (coarse units
    carry the mean position of the tokens they pool) and ``mask`` is False on
    padding.
    """
    hidden: Tensor
    positions: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.hidden.shape[1]


class EncoderModel:
    def __init__(self, config: EncoderConfig, token_emb: Tensor, pos_emb: Tensor,
                 layers: list[LayerWeights], head_w: Tensor, head_b: Tensor):
        self.config = config
        self.token_emb = token_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, std: float = 0.02) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        d, f = config.d_hidden, config.d_ff

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=True)

        layers = [
            LayerWeights(w_q=normal(d, d), w_k=normal(d, d), w_v=normal(d, d), w_o=normal(d, d),
                         w_1=normal(d, f), b_1=const(0.0, f), w_2=normal(f, d), b_2=const(0.0, d),
                         ln1_gain=const(1.0, d), ln1_bias=const(0.0, d),
                         ln2_gain=const(1.0, d), ln2_bias=const(0.0, d))
            for _ in range(config.num_layers)
        ]
        return cls(config, normal(config.vocab_size, d), normal(config.max_len, d), layers,
                   normal(d, config.num_classes), const(0.0, config.num_classes))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"token_emb": self.token_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for name, t in layer.tensors().items():
                out[f"layers.{i}.{name}"] = t
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def copy(self) -> "EncoderModel":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.grad = None
            p._tape = None
        return clone


def expected_shapes(config: EncoderConfig) -> dict[str, tuple]:
    d, f, c = config.d_hidden, config.d_ff, config.num_classes
    layer = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
             "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
             "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,)}
    shapes = {"token_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for i in range(config.num_layers):
        shapes.update({f"layers.{i}.{k}": v for k, v in layer.items()})
    shapes.update({"head_w": (d, c), "head_b": (c,)})
    return shapes


# --- forward pieces ------------------------------------------------------

def embed(model: EncoderModel, token_ids, positions=None) -> EncodedSequence:
    """Token plus position embedding. Accepts ``[n]`` or ``[B, n]`` ids."""
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    cfg = model.config
    if ids.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
    if not np.all(ids[:, 0] == CLS_ID):
        raise ValueError("every sequence must start with the CLS id")
    if positions is None:
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
    positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
    hidden = take_rows(model.token_emb, ids) + take_rows(model.pos_emb, positions)
    return EncodedSequence(hidden, positions.astype(np.float64), ids != PAD_ID)


def attend(q_in: Tensor, kv_in: Tensor, w: LayerWeights, num_heads: int,
           key_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Multi-head attention of ``q_in`` over ``kv_in``; returns (output, maps)."""
    B, nq, d = q_in.shape
    nk = kv_in.shape[1]
    dk = d // num_heads

    def heads(x, weight, n):
        return matmul(x, weight).reshape(B, n, num_heads, dk).transpose(0, 2, 1, 3)

    q = heads(q_in, w.w_q, nq)
    k = heads(kv_in, w.w_k, nk)
    v = heads(kv_in, w.w_v, nk)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    maps = softmax_rows(scores, key_mask[:, None, None, :])
    ctx = matmul(maps, v).transpose(0, 2, 1, 3).reshape(B, nq, d)
    return matmul(ctx, w.w_o), maps


def multi_head_attention(x: EncodedSequence, w: LayerWeights,
                         num_heads: int) -> tuple[EncodedSequence, Tensor]:
    out, maps = attend(x.hidden, x.hidden, w, num_heads, x.mask)
    return EncodedSequence(out, x.positions, x.mask), maps


def ffn(x: EncodedSequence, w: LayerWeights) -> EncodedSequence:
    return EncodedSequence(_ffn(x.hidden, w), x.positions, x.mask)


def _ffn(h: Tensor, w: LayerWeights) -> Tensor:
    return matmul(gelu(matmul(h, w.w_1) + w.b_1), w.w_2) + w.b_2


def attention_block(x: EncodedSequence, w: LayerWeights,
                    num_heads: int) -> tuple[EncodedSequence, Tensor]:
    """LN(x + MHA(x))."""
    out, maps = attend(x.hidden, x.hidden, w, num_heads, x.mask)
    h = layer_norm(x.hidden + out, w.ln1_gain, w.ln1_bias)
    return EncodedSequence(h, x.positions, x.mask), maps


def ffn_block(x: EncodedSequence, w: LayerWeights) -> EncodedSequence:
    """LN(x + FFN(x))."""
    h = layer_norm(x.hidden + _ffn(x.hidden, w), w.ln2_gain, w.ln2_bias)
    return EncodedSequence(h, x.positions, x.mask)


def encoder_layer(x: EncodedSequence, w: LayerWeights,
                  num_heads: int) -> tuple[EncodedSequence, Tensor]:
    h, maps = attention_block(x, w, num_heads)
    return ffn_block(h, w), maps


def classify(x: EncodedSequence, model: EncoderModel) -> Tensor:
    """Logits ``[B, num_classes]`` from the CLS row."""
    return matmul(x.hidden[:, 0, :], model.head_w) + model.head_b


def encode(model: EncoderModel, token_ids) -> tuple[EncodedSequence, list[Tensor]]:
    seq = embed(model, token_ids)
    maps_per_layer = []
    for w in model.layers:
        seq, maps = encoder_layer(seq, w, model.config.num_heads)
        maps_per_layer.append(maps)
    return seq, maps_per_layer


def forward(model: EncoderModel, token_ids) -> Tensor:
    seq, _ = encode(model, token_ids)
    return classify(seq, model)


# --- checkpoints ---------------------------------------------------------

def checkpoint_dict(model: EncoderModel, extra: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "params": {name: t.data.tolist() for name, t in model.named_parameters().items()},
        "extra": extra or {},
    }


def model_from_dict(doc: dict) -> tuple[EncoderModel, dict]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = EncoderConfig.from_dict(doc["config"])
    shapes = expected_shapes(config)
    params = doc["params"]
    missing, extra_keys = set(shapes) - set(params), set(params) - set(shapes)
    if missing or extra_keys:
        raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} "
                              f"unexpected={sorted(extra_keys)}")
    arrays = {}
    for name, shape in shapes.items():
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, expected {shape}")
        arrays[name] = Tensor(arr, requires_grad=True)
    layers = []
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        layers.append(LayerWeights(**{k[len(prefix):]: v for k, v in arrays.items()
                                      if k.startswith(prefix)}))
    model = EncoderModel(config, arrays["token_emb"], arrays["pos_emb"], layers,
                         arrays["head_w"], arrays["head_b"])
    return model, doc.get("extra", {})


def save_checkpoint(model: EncoderModel, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra)))


def load_checkpoint(path) -> tuple[EncoderModel, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({e})") from None
    return model_from_dict(doc)

