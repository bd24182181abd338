"""Twin-decoder captioning network over a small convolutional encoder.

A strided-conv encoder turns an SxS grayscale image into a G*G grid of
features, linearly projected to the decoder width. Two independent causal
transformer decoders (forward and backward over the report tokens) attend to
the text through masked self-attention and to the visual sequence through
cross-attention. The output projection shares storage with the token
embedding matrix. The backward decoder consumes the reversed sequence under
an ordinary causal mask, which is equivalent to masking out preceding
positions in the original order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor
from .textpipe import TokenSequence, Vocabulary

FORWARD = "forward"
BACKWARD = "backward"


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 64
    embed_dim: int = 128
    layers: int = 2
    heads: int = 4
    ff_dim: int = 512
    dropout: float = 0.1
    encoder_channels: tuple = (8, 16, 32, 64)
    image_size: int = 64

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.vocab_size < 6:
            raise ValueError("vocabulary too small (needs specials plus content)")
        stride_total = 2 ** len(self.encoder_channels)
        if self.image_size % stride_total != 0:
            raise ValueError("image_size must be divisible by 2**len(encoder_channels)")
        self.grid_size = self.image_size // stride_total

    @property
    def visual_len(self) -> int:
        return self.grid_size * self.grid_size

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_len": self.context_len,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
            "encoder_channels": list(self.encoder_channels),
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "encoder_channels": tuple(d["encoder_channels"])})


@dataclass
class ModelParams:
    """Named parameter tensors. Encoder names start with "enc.", the token
    embedding "embed" doubles as the output projection (shared storage)."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )


def _normal(rng, shape, std, dtype):
    return rng.standard_normal(shape).astype(dtype) * dtype(std)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled random weights, deterministic in (config, seed)."""
    dtype = np.dtype(dtype).type
    rng = make_rng(seed, "init")
    p = {}

    cin = 1
    for i, cout in enumerate(config.encoder_channels):
        p[f"enc.stage{i}.down.w"] = _normal(rng, (cout, cin, 3, 3), 1.0 / math.sqrt(cin * 9), dtype)
        p[f"enc.stage{i}.down.b"] = np.zeros(cout, dtype=dtype)
        for j in (1, 2):
            p[f"enc.stage{i}.res{j}.w"] = _normal(rng, (cout, cout, 3, 3), 1.0 / math.sqrt(cout * 9), dtype)
            p[f"enc.stage{i}.res{j}.b"] = np.zeros(cout, dtype=dtype)
        cin = cout
    p["enc.proj.w"] = _normal(rng, (cin, config.embed_dim), 1.0 / math.sqrt(cin), dtype)
    p["enc.proj.b"] = np.zeros(config.embed_dim, dtype=dtype)

    d = config.embed_dim
    p["embed"] = _normal(rng, (config.vocab_size, d), 1.0 / math.sqrt(d), dtype)
    p["pos_text"] = _normal(rng, (config.context_len, d), 0.01, dtype)
    p["pos_vis"] = _normal(rng, (config.visual_len, d), 0.01, dtype)

    for dec in ("dec_f", "dec_b"):
        for layer in range(config.layers):
            base = f"{dec}.layer{layer}"
            for block in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    p[f"{base}.{block}.{w}"] = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
            p[f"{base}.ff.w1"] = _normal(rng, (d, config.ff_dim), 1.0 / math.sqrt(d), dtype)
            p[f"{base}.ff.b1"] = np.zeros(config.ff_dim, dtype=dtype)
            p[f"{base}.ff.w2"] = _normal(rng, (config.ff_dim, d), 1.0 / math.sqrt(config.ff_dim), dtype)
            p[f"{base}.ff.b2"] = np.zeros(d, dtype=dtype)
            for ln in ("ln1", "ln2", "ln3"):
                p[f"{base}.{ln}.g"] = np.ones(d, dtype=dtype)
                p[f"{base}.{ln}.b"] = np.zeros(d, dtype=dtype)

    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}
    return ModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# encoder


def encode_image_batch(params: ModelParams, images: np.ndarray) -> Tensor:
    """(B, S, S) normalized images -> (B, G*G, d) visual feature sequences."""
    cfg = params.config
    if images.ndim != 3 or images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise T.ShapeError(f"expected images (B, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    x = Tensor(images[:, None, :, :])
    for i in range(len(cfg.encoder_channels)):
        x = T.relu(T.conv2d(x, params[f"enc.stage{i}.down.w"], params[f"enc.stage{i}.down.b"], stride=2, padding=1))
        h = T.relu(T.conv2d(x, params[f"enc.stage{i}.res1.w"], params[f"enc.stage{i}.res1.b"], stride=1, padding=1))
        h = T.conv2d(h, params[f"enc.stage{i}.res2.w"], params[f"enc.stage{i}.res2.b"], stride=1, padding=1)
        x = T.relu(T.add(x, h))
    b = images.shape[0]
    grid = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, cfg.visual_len, cfg.encoder_channels[-1]))
    return T.add(T.matmul(grid, params["enc.proj.w"]), params["enc.proj.b"])


def encode_image(params: ModelParams, image: np.ndarray) -> Tensor:
    """Single SxS image -> (G*G, d) feature sequence."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise T.ShapeError(f"expected a 2-d grayscale image, got shape {image.shape}")
    feats = encode_image_batch(params, image[None])
    return T.reshape(feats, (params.config.visual_len, params.config.embed_dim))


# ---------------------------------------------------------------------------
# decoder


@lru_cache(maxsize=None)
def _causal_mask_cached(n: int, dtype_name: str) -> np.ndarray:
    mask = np.zeros((n, n), dtype=np.dtype(dtype_name))
    mask[np.triu_indices(n, k=1)] = T.MASK_FILL
    mask.flags.writeable = False
    return mask


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """(n, n) additive mask: 0 where key <= query position, MASK_FILL above."""
    return _causal_mask_cached(n, np.dtype(dtype).name)


def _attention(x_q: Tensor, x_kv: Tensor, wq, wk, wv, wo, heads: int, mask: np.ndarray | None) -> Tensor:
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // heads
    q = T.transpose(T.reshape(T.matmul(x_q, wq), (b, tq, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(x_kv, wk), (b, tk, heads, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(T.matmul(x_kv, wv), (b, tk, heads, dh)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, mask)
    attn = T.softmax(scores, axis=-1)
    ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
    return T.matmul(T.reshape(ctx, (b, tq, d)), wo)


def _sublayer(x: Tensor, out: Tensor, gamma, beta, drop: float, rng) -> Tensor:
    """Residual add, then layer norm, then dropout (train mode only)."""
    h = T.layer_norm(T.add(x, out), gamma, beta)
    if drop > 0.0 and rng is not None:
        h = T.dropout(h, drop, rng)
    return h


def decoder_forward_batch(
    params: ModelParams,
    x_vis: Tensor,
    token_ids: np.ndarray,
    direction: str,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Token logits for a batch: (B, T) ids -> (B, T, V).

    ``direction`` picks the forward or backward decoder stack; the caller is
    responsible for feeding reversed sequences to the backward stack.
    Dropout fires only when ``train`` is set and a generator is supplied.
    """
    cfg = params.config
    if direction == FORWARD:
        dec = "dec_f"
    elif direction == BACKWARD:
        dec = "dec_b"
    else:
        raise ValueError(f"direction must be {FORWARD!r} or {BACKWARD!r}, got {direction!r}")
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise T.ShapeError("token_ids must be (B, T)")
    t_len = token_ids.shape[1]
    if t_len > cfg.context_len:
        raise T.ShapeError(f"sequence length {t_len} exceeds context length {cfg.context_len}")

    drop = cfg.dropout if train else 0.0
    drop_rng = rng if train else None
    x = T.add(T.embedding(params["embed"], token_ids), T.narrow(params["pos_text"], 0, 0, t_len))
    if drop > 0.0 and drop_rng is not None:
        x = T.dropout(x, drop, drop_rng)
    mem = T.add(x_vis, params["pos_vis"])
    mask = causal_mask(t_len, dtype=x.data.dtype)

    for layer in range(cfg.layers):
        base = f"{dec}.layer{layer}"
        attn = _attention(
            x, x,
            params[f"{base}.self.wq"], params[f"{base}.self.wk"],
            params[f"{base}.self.wv"], params[f"{base}.self.wo"],
            cfg.heads, mask,
        )
        x = _sublayer(x, attn, params[f"{base}.ln1.g"], params[f"{base}.ln1.b"], drop, drop_rng)
        cross = _attention(
            x, mem,
            params[f"{base}.cross.wq"], params[f"{base}.cross.wk"],
            params[f"{base}.cross.wv"], params[f"{base}.cross.wo"],
            cfg.heads, None,
        )
        x = _sublayer(x, cross, params[f"{base}.ln2.g"], params[f"{base}.ln2.b"], drop, drop_rng)
        ff = T.matmul(T.relu(T.add(T.matmul(x, params[f"{base}.ff.w1"]), params[f"{base}.ff.b1"])), params[f"{base}.ff.w2"])
        ff = T.add(ff, params[f"{base}.ff.b2"])
        x = _sublayer(x, ff, params[f"{base}.ln3.g"], params[f"{base}.ln3.b"], drop, drop_rng)

    return T.matmul(x, T.transpose(params["embed"], (1, 0)))


def decoder_forward(params: ModelParams, x_vis: Tensor, tokens: TokenSequence, direction: str, train: bool = False, rng=None) -> Tensor:
    """Single-sequence wrapper: TokenSequence -> (T, V) logits."""
    ids = np.asarray(tokens.ids, dtype=np.int64)[None]
    vis = T.reshape(x_vis, (1,) + tuple(x_vis.shape)) if x_vis.ndim == 2 else x_vis
    logits = decoder_forward_batch(params, vis, ids, direction, train=train, rng=rng)
    return T.reshape(logits, (ids.shape[1], params.config.vocab_size))


# ---------------------------------------------------------------------------
# loss


def reverse_sequences(token_ids: np.ndarray, lengths: np.ndarray, pad_id: int) -> np.ndarray:
    """Reverse each valid prefix in place-order, keeping [PAD] at the tail."""
    rev = np.full_like(token_ids, pad_id)
    for row, n in enumerate(lengths):
        rev[row, :n] = token_ids[row, :n][::-1]
    return rev


def _direction_loss(params, x_vis, token_ids, lengths, direction, train, rng) -> Tensor:
    logits = decoder_forward_batch(params, x_vis, token_ids, direction, train=train, rng=rng)
    b, t_len = token_ids.shape
    targets = np.zeros((b, t_len), dtype=np.int64)
    targets[:, :-1] = token_ids[:, 1:]
    positions = np.arange(t_len)[None, :]
    ignore = positions >= (np.asarray(lengths)[:, None] - 1)
    return T.cross_entropy_masked(logits, targets, ignore)


def bicaption_loss_batch(
    params: ModelParams,
    images: np.ndarray,
    token_ids: np.ndarray,
    lengths: np.ndarray,
    pad_id: int,
    forward_only: bool = False,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Per-token mean NLL, forward plus backward direction (Eq.-style sum).

    Each direction predicts every non-initial token of the valid prefix from
    the tokens on its conditioning side plus the visual sequence; padding
    positions contribute nothing.
    """
    x_vis = encode_image_batch(params, images)
    loss = _direction_loss(params, x_vis, token_ids, lengths, FORWARD, train, rng)
    if forward_only:
        return loss
    rev = reverse_sequences(token_ids, lengths, pad_id)
    return T.add(loss, _direction_loss(params, x_vis, rev, lengths, BACKWARD, train, rng))


def bicaption_loss(
    params: ModelParams,
    image: np.ndarray,
    report_tokens: TokenSequence,
    vocab: Vocabulary,
    forward_only: bool = False,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Single-pair loss; the sequence must carry [SOS]...[SEP] framing."""
    ids = np.asarray(report_tokens.ids, dtype=np.int64)
    n = report_tokens.length
    if ids[0] != vocab.sos_id or ids[n - 1] != vocab.sep_id:
        raise ValueError("sequence must start with [SOS] and end with [SEP]")
    return bicaption_loss_batch(
        params,
        np.asarray(image)[None],
        ids[None],
        np.asarray([n]),
        vocab.pad_id,
        forward_only=forward_only,
        train=train,
        rng=rng,
    )


def parameter_groups(params: ModelParams) -> dict:
    """Map each parameter name to its LR group ("encoder" or "decoder")."""
    return {name: ("encoder" if name.startswith("enc.") else "decoder") for name in params.tensors}
