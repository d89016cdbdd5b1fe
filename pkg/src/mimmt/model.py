"""Tiny transformer encoder-decoder with gated fusion of a global image vector.

The source is encoded by a pre-LN transformer, mean-pooled into F(x), and the
image feature is mapped to the model width by one affine projection, R(z).
A gate computed from both decides how much of R(z) is added to F(x):

    lam = sigmoid(W_gate @ [F(x); R(z)])
    H_fusion = F(x) + lam * R(z)

H_fusion is added onto every encoder token state, and the decoder cross-attends
to that fused memory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

_NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size_src: int
    vocab_size_tgt: int
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 2
    d_ffn: int = 128
    d_image: int = 64
    dropout_p: float = 0.1
    max_len: int = 64
    init_scale: float = 0.08
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size_src", "vocab_size_tgt", "d_model", "n_layers_enc",
                     "n_layers_dec", "n_heads", "d_ffn", "d_image", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")

    @classmethod
    def full_scale(cls, vocab_size_src: int, vocab_size_tgt: int, **overrides) -> "ModelConfig":
        """4+4 layers, width 1024, FFN 4096, 4 heads, 2048-d ResNet features."""
        base = dict(d_model=1024, n_layers_enc=4, n_layers_dec=4, n_heads=4,
                    d_ffn=4096, d_image=2048, dropout_p=0.3, max_len=256)
        base.update(overrides)
        return cls(vocab_size_src, vocab_size_tgt, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncodedSource:
    token_states: Tensor  # (B, S, d)
    pooled: Tensor  # (B, d), F(x)
    pad_mask: np.ndarray  # (B, S) bool, True at padding


@dataclass
class ImageRepr:
    projected: Tensor  # (B, d), R(z)


@dataclass
class FusedMemory:
    pooled: Tensor  # (B, d), H_fusion
    memory: Tensor  # (B, S, d), token states + H_fusion
    gate: Tensor  # (B, d), lambda
    pad_mask: np.ndarray


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    if p >= 1.0:
        return nx.apply_mask(x, np.zeros(x.shape))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return nx.apply_mask(x, keep)


class GatedFusionTransformer:
    """Parameters live in ``self.params`` (name -> leaf Tensor), in creation order."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        c = config
        d = c.d_model
        self._uniform("src_embed", (c.vocab_size_src, d))
        self._uniform("tgt_embed", (c.vocab_size_tgt, d))
        self._uniform("src_pos", (c.max_len, d))
        self._uniform("tgt_pos", (c.max_len, d))
        for i in range(c.n_layers_enc):
            p = f"enc.{i}"
            self._layer_norm(f"{p}.ln_attn")
            self._attention(f"{p}.attn")
            self._layer_norm(f"{p}.ln_ffn")
            self._ffn(f"{p}.ffn")
        self._layer_norm("enc.ln_out")
        self._uniform("img_proj.w", (c.d_image, d))
        self._zeros("img_proj.b", (d,))
        self._uniform("gate.w", (2 * d, d))
        for i in range(c.n_layers_dec):
            p = f"dec.{i}"
            self._layer_norm(f"{p}.ln_self")
            self._attention(f"{p}.self_attn")
            self._layer_norm(f"{p}.ln_cross")
            self._attention(f"{p}.cross_attn")
            self._layer_norm(f"{p}.ln_ffn")
            self._ffn(f"{p}.ffn")
        self._layer_norm("dec.ln_out")
        self._uniform("out_proj.w", (d, c.vocab_size_tgt))
        self._zeros("out_proj.b", (c.vocab_size_tgt,))

    # ------------------------------------------------------------------ init

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _uniform(self, name, shape):
        s = self.config.init_scale
        self._add(name, self._rng.uniform(-s, s, size=shape))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _layer_norm(self, prefix):
        self._add(f"{prefix}.g", np.ones(self.config.d_model))
        self._zeros(f"{prefix}.b", (self.config.d_model,))

    def _attention(self, prefix):
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._uniform(f"{prefix}.w{proj}", (d, d))
            self._zeros(f"{prefix}.b{proj}", (d,))

    def _ffn(self, prefix):
        c = self.config
        self._uniform(f"{prefix}.w1", (c.d_model, c.d_ffn))
        self._zeros(f"{prefix}.b1", (c.d_ffn,))
        self._uniform(f"{prefix}.w2", (c.d_ffn, c.d_model))
        self._zeros(f"{prefix}.b2", (c.d_model,))

    # ---------------------------------------------------------- param access

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def fingerprint(self) -> str:
        return config_fingerprint(self.config, {k: v.shape for k, v in self.params.items()})

    # --------------------------------------------------------------- blocks

    def _linear(self, x: Tensor, prefix: str, w="w", b="b") -> Tensor:
        return nx.add(nx.matmul(x, self.params[f"{prefix}.{w}"]), self.params[f"{prefix}.{b}"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        y = nx.mul(nx.layer_norm(x), self.params[f"{prefix}.g"])
        return nx.add(y, self.params[f"{prefix}.b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.config.n_heads
        return nx.swap_axes(nx.reshape(x, (b, t, h, d // h)), 1, 2)

    def _attend(self, prefix: str, xq: Tensor, xkv: Tensor, bias: np.ndarray, rng) -> Tensor:
        """Multi-head attention; ``bias`` is a constant broadcastable to (B, H, Tq, Tk)."""
        b, tq, d = xq.shape
        q = self._split_heads(self._linear(xq, prefix, "wq", "bq"))
        k = self._split_heads(self._linear(xkv, prefix, "wk", "bk"))
        v = self._split_heads(self._linear(xkv, prefix, "wv", "bv"))
        scores = nx.scale(nx.matmul(q, nx.swap_axes(k, 2, 3)), 1.0 / np.sqrt(d // self.config.n_heads))
        probs = _dropout(nx.softmax(nx.add_constant(scores, bias)), self.config.dropout_p, rng)
        ctx = nx.reshape(nx.swap_axes(nx.matmul(probs, v), 1, 2), (b, tq, d))
        return self._linear(ctx, prefix, "wo", "bo")

    def _ffn_block(self, x: Tensor, prefix: str, rng) -> Tensor:
        hidden = nx.relu(self._linear(x, prefix, "w1", "b1"))
        hidden = _dropout(hidden, self.config.dropout_p, rng)
        return self._linear(hidden, prefix, "w2", "b2")

    def _embed(self, ids: np.ndarray, table: str, pos: str, vocab: int, side: str) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"{side} ids must be a (batch, length) array, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"{side} id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")
        t = ids.shape[1]
        if t > self.config.max_len:
            raise ValueError(f"{side} length {t} exceeds max_len {self.config.max_len}")
        tok = nx.embedding(self.params[table], ids)
        positions = nx.embedding(self.params[pos], np.broadcast_to(np.arange(t), ids.shape))
        return nx.add(tok, positions)

    # ----------------------------------------------------------- public ops

    def encode_source(self, src_ids: np.ndarray, rng: np.random.Generator | None = None) -> EncodedSource:
        c = self.config
        src_ids = np.asarray(src_ids)
        pad = src_ids == PAD_ID
        x = _dropout(self._embed(src_ids, "src_embed", "src_pos", c.vocab_size_src, "source"),
                     c.dropout_p, rng)
        bias = np.where(pad, _NEG_INF, 0.0)[:, None, None, :]
        for i in range(c.n_layers_enc):
            p = f"enc.{i}"
            h_in = self._ln(x, f"{p}.ln_attn")
            h = self._attend(f"{p}.attn", h_in, h_in, bias, rng)
            x = nx.add(x, _dropout(h, c.dropout_p, rng))
            h = self._ffn_block(self._ln(x, f"{p}.ln_ffn"), f"{p}.ffn", rng)
            x = nx.add(x, _dropout(h, c.dropout_p, rng))
        states = self._ln(x, "enc.ln_out")
        pooled = nx.masked_mean(states, ~pad)
        return EncodedSource(states, pooled, pad)

    def project_image(self, features: np.ndarray | Tensor) -> ImageRepr:
        feats = features if isinstance(features, Tensor) else Tensor(features)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_image:
            raise ValueError(
                f"image features must have width d_image={self.config.d_image}, got shape {feats.shape}"
            )
        return ImageRepr(self._linear(feats, "img_proj"))

    def fuse(self, src: EncodedSource, img: ImageRepr) -> FusedMemory:
        f_x, r_z = src.pooled, img.projected
        if f_x.shape != r_z.shape:
            raise nx.ShapeError("fuse", f_x.shape, r_z.shape)
        gate = nx.sigmoid(nx.matmul(nx.concat([f_x, r_z]), self.params["gate.w"]))
        fused = nx.add(f_x, nx.mul(gate, r_z))
        seq_len = src.token_states.shape[1]
        memory = nx.add(src.token_states, nx.expand(fused, 1, seq_len))
        return FusedMemory(fused, memory, gate, src.pad_mask)

    def decode_logits(self, fused: FusedMemory, tgt_in: np.ndarray,
                      rng: np.random.Generator | None = None) -> Tensor:
        """Logits (B, T, V) for every position of the teacher-forced prefix ``tgt_in``."""
        c = self.config
        tgt_in = np.asarray(tgt_in)
        t = tgt_in.shape[1]
        if fused.memory.shape[0] != tgt_in.shape[0]:
            raise nx.ShapeError("decode_logits", fused.memory.shape, tgt_in.shape)
        y = _dropout(self._embed(tgt_in, "tgt_embed", "tgt_pos", c.vocab_size_tgt, "target"),
                     c.dropout_p, rng)
        # trailing pads only follow real tokens, so the causal mask alone suffices
        self_bias = np.triu(np.full((t, t), _NEG_INF), k=1)[None, None, :, :]
        cross_bias = np.where(fused.pad_mask, _NEG_INF, 0.0)[:, None, None, :]
        for i in range(c.n_layers_dec):
            p = f"dec.{i}"
            h_in = self._ln(y, f"{p}.ln_self")
            y = nx.add(y, _dropout(self._attend(f"{p}.self_attn", h_in, h_in, self_bias, rng),
                                   c.dropout_p, rng))
            h = self._attend(f"{p}.cross_attn", self._ln(y, f"{p}.ln_cross"), fused.memory,
                             cross_bias, rng)
            y = nx.add(y, _dropout(h, c.dropout_p, rng))
            h = self._ffn_block(self._ln(y, f"{p}.ln_ffn"), f"{p}.ffn", rng)
            y = nx.add(y, _dropout(h, c.dropout_p, rng))
        return self._linear(self._ln(y, "dec.ln_out"), "out_proj")

    def forward(self, src_ids, img, tgt_in, rng=None) -> Tensor:
        enc = self.encode_source(src_ids, rng)
        return self.decode_logits(self.fuse(enc, self.project_image(img)), tgt_in, rng)

    # -------------------------------------------------------------- decoding

    def start_decode(self, src_ids: np.ndarray, img: np.ndarray) -> "DecodeContext":
        with nx.no_grad():
            enc = self.encode_source(src_ids)
            fused = self.fuse(enc, self.project_image(img))
        return DecodeContext(self, fused)


class DecodeContext:
    """Encoded batch held fixed while a search extends target prefixes."""

    def __init__(self, model: GatedFusionTransformer, fused: FusedMemory):
        self.model = model
        self.fused = fused
        self.vocab_size = model.config.vocab_size_tgt

    def logprobs(self, rows: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        """Next-token log-probs (n, V) for prefixes (n, t) belonging to sentences ``rows``."""
        rows = np.asarray(rows)
        sub = FusedMemory(
            Tensor(self.fused.pooled.data[rows]),
            Tensor(self.fused.memory.data[rows]),
            Tensor(self.fused.gate.data[rows]),
            self.fused.pad_mask[rows],
        )
        with nx.no_grad():
            logits = self.model.decode_logits(sub, prefixes)
            return nx.log_softmax(logits).data[:, -1, :]


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

_MAGIC = b"MIMMTCK1"


def config_fingerprint(config: ModelConfig, shapes: dict[str, tuple[int, ...]]) -> str:
    cfg = {k: v for k, v in config.to_dict().items() if k not in ("seed", "dropout_p", "init_scale")}
    blob = json.dumps({"config": cfg, "shapes": {k: list(v) for k, v in sorted(shapes.items())}},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], manifest: dict) -> None:
    """Write ``params`` to ``path`` and ``manifest`` to ``path`` + ``.json``.

    Archive layout: magic, uint32 count, then per entry a uint32-length-prefixed
    UTF-8 name, uint32 ndim, uint32 dims, and raw little-endian float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint archive")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64)
            params[name] = data.reshape(shape)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return params, manifest


def model_from_checkpoint(path: str | Path) -> tuple[GatedFusionTransformer, dict]:
    params, manifest = load_checkpoint(path)
    if "model_config" not in manifest:
        raise ValueError(f"{path}: manifest has no model_config")
    model = GatedFusionTransformer(ModelConfig.from_dict(manifest["model_config"]))
    expected = manifest.get("fingerprint")
    if expected is not None and expected != model.fingerprint():
        raise ValueError(f"{path}: fingerprint {expected} does not match config ({model.fingerprint()})")
    model.load_state_dict(params)
    return model, manifest
