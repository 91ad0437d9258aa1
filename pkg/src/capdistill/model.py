"""Teacher and student encoder-decoder captioners.

The encoder is a stack of strided 1-d conv + ReLU blocks over (frames, mels)
features, with a learned additive position map on the *input* so temporal
order can reach the decoder (cross-attention itself is order-agnostic: no
positional encoding is ever added to encoder frames).

The decoder is a standard pre-norm transformer: causal self-attention,
cross-attention over encoder frames, feed-forward, learned token + position
embeddings, untied output projection.

Students may carry knowledge-distillation heads:

* contrastive mode: two linear heads projecting pooled teacher/student
  embeddings to a shared space; training-only, inference uses raw frames.
* mse mode: one linear head mapping student frames into the teacher's
  embedding dimension; the decoder consumes projected frames at training and
  inference time.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ShapeError
from .synthworld import VocabularyError
from .utils import derive_rng, sha256_bytes

CHECKPOINT_VERSION = 1
_MASK_CACHE: dict = {}


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int = 16            # feature bins per frame
    frames: int = 100           # input length T
    channels: tuple = (64, 160, 256, 128)
    strides: tuple = (2, 2, 1, 1)
    kernel_size: int = 5

    @property
    def blocks(self):
        return len(self.channels)

    @property
    def out_dim(self):
        return self.channels[-1]

    @property
    def downsample(self):
        out = 1
        for s in self.strides:
            out *= s
        return out

    @property
    def out_frames(self):
        t = self.frames
        for s in self.strides:
            t = (t - 1) // s + 1
        return t

    def validate(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if self.out_frames < 4:
            raise ValueError(f"downsampling leaves {self.out_frames} frames, need >= 4")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    ff_dim: int = 512
    vocab_size: int = 23
    max_len: int = 20
    enc_dim: int = 128          # dimension of the frames cross-attention consumes

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    kd_mode: str = "none"       # none | contrastive | mse
    kd_dim: int = 64            # shared space for the contrastive heads
    kd_teacher_dim: int = 128   # teacher encoder output dim seen by the heads

    def validate(self):
        self.encoder.validate()
        self.decoder.validate()
        if self.kd_mode not in ("none", "contrastive", "mse"):
            raise ValueError(f"unknown kd_mode {self.kd_mode!r}")
        if self.kd_mode == "mse":
            if self.decoder.enc_dim != self.kd_teacher_dim:
                raise ValueError("mse mode: decoder.enc_dim must equal kd_teacher_dim")
        elif self.decoder.enc_dim != self.encoder.out_dim:
            raise ValueError("decoder.enc_dim must equal encoder.out_dim")

    def to_dict(self):
        return {
            "encoder": {k: getattr(self.encoder, k) for k in EncoderConfig.__dataclass_fields__},
            "decoder": {k: getattr(self.decoder, k) for k in DecoderConfig.__dataclass_fields__},
            "kd_mode": self.kd_mode,
            "kd_dim": self.kd_dim,
            "kd_teacher_dim": self.kd_teacher_dim,
        }

    @staticmethod
    def from_dict(d):
        enc = dict(d["encoder"])
        enc["channels"] = tuple(enc["channels"])
        enc["strides"] = tuple(enc["strides"])
        return ModelConfig(
            encoder=EncoderConfig(**enc),
            decoder=DecoderConfig(**d["decoder"]),
            kd_mode=d["kd_mode"],
            kd_dim=d["kd_dim"],
            kd_teacher_dim=d["kd_teacher_dim"],
        )


def default_teacher_config(vocab_size, frames=100, in_dim=16):
    return ModelConfig(
        encoder=EncoderConfig(in_dim=in_dim, frames=frames),
        decoder=DecoderConfig(vocab_size=vocab_size),
        kd_mode="none",
    )


def default_student_config(vocab_size, kd_mode="none", frames=100, in_dim=16,
                           kd_teacher_dim=128):
    enc = EncoderConfig(in_dim=in_dim, frames=frames, channels=(48, 64), strides=(5, 1))
    enc_dim = kd_teacher_dim if kd_mode == "mse" else enc.out_dim
    dec = DecoderConfig(layers=2, d_model=64, n_heads=4, ff_dim=256,
                        vocab_size=vocab_size, enc_dim=enc_dim)
    return ModelConfig(encoder=enc, decoder=dec, kd_mode=kd_mode,
                       kd_teacher_dim=kd_teacher_dim)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearP:
    w: Tensor
    b: Tensor


@dataclass
class NormP:
    g: Tensor
    b: Tensor


@dataclass
class AttnP:
    q: LinearP
    k: LinearP
    v: LinearP
    o: LinearP


@dataclass
class DecLayerP:
    ln_self: NormP
    self_attn: AttnP
    ln_cross: NormP
    cross_attn: AttnP
    ln_ff: NormP
    ff1: LinearP
    ff2: LinearP


@dataclass
class ConvBlockP:
    kernel: Tensor
    bias: Tensor


def _iter_params(obj, prefix):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _iter_params(item, f"{prefix}.{i}")
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            yield from _iter_params(getattr(obj, name), f"{prefix}.{name}")
    elif obj is None:
        return
    else:
        raise TypeError(f"cannot walk parameters of {type(obj)} at {prefix}")


class _Init:
    """Sequential parameter initializer over one named RNG stream."""

    def __init__(self, seed):
        self.rng = derive_rng(seed, "model-init")

    def normal(self, shape, std):
        return nm.tensor(self.rng.normal(0.0, std, shape), requires_grad=True)

    def zeros(self, shape):
        return nm.tensor(np.zeros(shape), requires_grad=True)

    def ones(self, shape):
        return nm.tensor(np.ones(shape), requires_grad=True)

    def linear(self, d_in, d_out, bias=True, bias_init=0.0):
        b = None
        if bias:
            b = self.zeros((d_out,)) if bias_init == 0.0 else nm.tensor(
                np.full(d_out, bias_init), requires_grad=True)
        return LinearP(w=self.normal((d_in, d_out), 1.0 / np.sqrt(d_in)), b=b)

    def norm(self, d):
        return NormP(g=self.ones((d,)), b=self.zeros((d,)))

    def attn(self, d_q, d_kv, d_model):
        # key bias omitted: softmax scores are invariant to it, so it would
        # be an untrainable direction
        return AttnP(q=self.linear(d_q, d_model), k=self.linear(d_kv, d_model, bias=False),
                     v=self.linear(d_kv, d_model), o=self.linear(d_model, d_model))


class CaptionerModel:
    """Encoder-decoder captioner with optional KD projection heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        enc, dec = cfg.encoder, cfg.decoder
        init = _Init(seed)

        self.enc_pos = init.normal((enc.frames, enc.in_dim), 0.05)
        self.enc_blocks = []
        c_in = enc.in_dim
        for c_out in enc.channels:
            kern = init.normal((c_out, c_in, enc.kernel_size),
                               1.0 / np.sqrt(c_in * enc.kernel_size))
            # small positive bias keeps ReLU units off the exact kink at init
            bias = nm.tensor(np.full(c_out, 0.01), requires_grad=True)
            self.enc_blocks.append(ConvBlockP(kernel=kern, bias=bias))
            c_in = c_out

        self.tok_emb = init.normal((dec.vocab_size, dec.d_model), 0.1)
        self.pos_emb = init.normal((dec.max_len + 1, dec.d_model), 0.1)
        self.layers = []
        for _ in range(dec.layers):
            self.layers.append(DecLayerP(
                ln_self=init.norm(dec.d_model),
                self_attn=init.attn(dec.d_model, dec.d_model, dec.d_model),
                ln_cross=init.norm(dec.d_model),
                cross_attn=init.attn(dec.d_model, dec.enc_dim, dec.d_model),
                ln_ff=init.norm(dec.d_model),
                ff1=init.linear(dec.d_model, dec.ff_dim, bias_init=0.01),
                ff2=init.linear(dec.ff_dim, dec.d_model),
            ))
        self.ln_final = init.norm(dec.d_model)
        self.out_proj = init.linear(dec.d_model, dec.vocab_size)

        self.proj_stu = None
        self.proj_tea = None
        if cfg.kd_mode == "contrastive":
            self.proj_stu = init.linear(enc.out_dim, cfg.kd_dim)
            self.proj_tea = init.linear(cfg.kd_teacher_dim, cfg.kd_dim)
        elif cfg.kd_mode == "mse":
            self.proj_stu = init.linear(enc.out_dim, cfg.kd_teacher_dim)

        self.frozen = {"encoder": False, "decoder": False}
        self._registry = None

    # -- parameter registry -------------------------------------------------

    def named_parameters(self):
        if self._registry is None:
            groups = [
                ("encoder.pos", self.enc_pos),
                ("encoder.blocks", self.enc_blocks),
                ("decoder.tok_emb", self.tok_emb),
                ("decoder.pos_emb", self.pos_emb),
                ("decoder.layers", self.layers),
                ("decoder.ln_final", self.ln_final),
                ("decoder.out_proj", self.out_proj),
            ]
            if self.proj_stu is not None:
                groups.append(("proj.stu", self.proj_stu))
            if self.proj_tea is not None:
                groups.append(("proj.tea", self.proj_tea))
            reg = []
            for prefix, obj in groups:
                reg.extend(_iter_params(obj, prefix))
            self._registry = reg
        return self._registry

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def set_frozen(self, component: str, frozen: bool):
        """Freeze or thaw a component; frozen parameters get no gradient."""
        if component not in ("encoder", "decoder"):
            raise ValueError(f"unknown component {component!r}")
        self.frozen[component] = bool(frozen)
        prefix = component + "."
        for name, t in self.named_parameters():
            if name.startswith(prefix):
                t.requires_grad = not frozen

    @property
    def dtype(self):
        return self.enc_pos.data.dtype

    @property
    def inference_projection_enabled(self):
        return self.cfg.kd_mode == "mse"

    # -- forward paths -------------------------------------------------------

    def encode(self, features):
        """Raw encoder frames for (T, F) or (B, T, F) input features."""
        arr = features.data if isinstance(features, Tensor) else np.asarray(features)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        enc = self.cfg.encoder
        if arr.shape[1:] != (enc.frames, enc.in_dim):
            raise ShapeError(
                f"encoder expects (*, {enc.frames}, {enc.in_dim}), got {arr.shape}")
        x = Tensor(arr.astype(self.dtype, copy=False))
        x = nm.add(x, self.enc_pos)
        pad = enc.kernel_size // 2
        for block, stride in zip(self.enc_blocks, enc.strides):
            x = nm.conv1d(x, block.kernel, block.bias, stride=stride, padding=pad)
            x = nm.relu(x)
        return nm.reshape(x, x.shape[1:]) if single else x

    def project_frames(self, emb):
        """Frames as the decoder consumes them (mse mode projects per frame)."""
        if self.cfg.kd_mode == "mse":
            return nm.linear(emb, self.proj_stu.w, self.proj_stu.b)
        return emb

    def apply_inference_projection(self, emb):
        """Per-frame projection into the teacher dimension (mse mode only).

        Identity pass-through otherwise; calling it on a contrastive-mode
        model warns, since that head is train-only by design.
        """
        if self.cfg.kd_mode == "mse":
            return self.project_frames(emb)
        if self.cfg.kd_mode == "contrastive":
            warnings.warn("inference projection is a no-op in contrastive mode",
                          stacklevel=2)
        return emb

    def decoder_probs(self, emb, token_inputs):
        """Next-token distributions for every prefix position.

        `emb` is the raw encoder output (T', d) or (B, T', d); `token_inputs`
        is an int array (N,) or (B, N) of BOS-prefixed input tokens. Returns
        probabilities of shape (B, N, vocab) (or (N, vocab) if unbatched).
        """
        dec = self.cfg.decoder
        ids = np.asarray(token_inputs)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.min() < 0 or ids.max() >= dec.vocab_size:
            raise VocabularyError(
                f"token id outside vocabulary of size {dec.vocab_size}")
        n = ids.shape[1]
        if n > dec.max_len + 1:
            raise ShapeError(f"sequence length {n} exceeds position table")

        frames = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb))
        if frames.ndim == 2:
            frames = nm.reshape(frames, (1,) + frames.shape)
        frames = self.project_frames(frames)
        if frames.shape[0] == 1 and ids.shape[0] > 1:
            if frames.requires_grad:
                raise ShapeError("frame broadcasting is decode-only; batch the embeddings")
            frames = Tensor(np.broadcast_to(
                frames.data, (ids.shape[0],) + frames.shape[1:]).copy())

        x = nm.add(nm.embedding(self.tok_emb, ids),
                   nm.embedding(self.pos_emb, np.arange(n)[None, :]))
        mask = _causal_mask(n, self.dtype)
        for layer in self.layers:
            h = nm.layer_norm(x, layer.ln_self.g, layer.ln_self.b)
            x = nm.add(x, _mha(h, h, layer.self_attn, dec.n_heads, mask))
            h = nm.layer_norm(x, layer.ln_cross.g, layer.ln_cross.b)
            x = nm.add(x, _mha(h, frames, layer.cross_attn, dec.n_heads))
            h = nm.layer_norm(x, layer.ln_ff.g, layer.ln_ff.b)
            h = nm.relu(nm.linear(h, layer.ff1.w, layer.ff1.b))
            x = nm.add(x, nm.linear(h, layer.ff2.w, layer.ff2.b))
        x = nm.layer_norm(x, self.ln_final.g, self.ln_final.b)
        logits = nm.linear(x, self.out_proj.w, self.out_proj.b)
        probs = nm.softmax(logits, axis=-1)
        return nm.reshape(probs, probs.shape[1:]) if single else probs

    # -- persistence ---------------------------------------------------------

    def serialize(self) -> bytes:
        names = sorted(n for n, _ in self.named_parameters())
        by_name = dict(self.named_parameters())
        payload = bytearray()
        table = {}
        for name in names:
            arr = np.ascontiguousarray(by_name[name].data, dtype="<f4")
            table[name] = {"shape": list(arr.shape), "dtype": "f32",
                           "offset": len(payload)}
            payload.extend(arr.tobytes())
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "model": self.cfg.to_dict(),
            "seed": self.seed,
            "frozen": self.frozen,
            "tensors": table,
        }
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        return struct.pack("<Q", len(head)) + head + bytes(payload)

    def save(self, path):
        from .utils import atomic_write_bytes

        atomic_write_bytes(path, self.serialize())

    def param_hash(self) -> str:
        return sha256_bytes(self.serialize())

    @classmethod
    def deserialize(cls, blob: bytes) -> "CaptionerModel":
        (head_len,) = struct.unpack("<Q", blob[:8])
        manifest = json.loads(blob[8 : 8 + head_len].decode())
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
        payload = blob[8 + head_len :]
        model = cls(ModelConfig.from_dict(manifest["model"]), seed=manifest["seed"])
        by_name = dict(model.named_parameters())
        if set(by_name) != set(manifest["tensors"]):
            raise ValueError("checkpoint tensor table does not match model config")
        for name, meta in manifest["tensors"].items():
            start = meta["offset"]
            arr = np.frombuffer(payload, dtype="<f4",
                                count=int(np.prod(meta["shape"]) if meta["shape"] else 1),
                                offset=start).reshape(meta["shape"])
            by_name[name].assign_(arr.astype(model.dtype))
        for comp, fr in manifest["frozen"].items():
            model.set_frozen(comp, fr)
        return model

    @classmethod
    def load(cls, path) -> "CaptionerModel":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())


def _causal_mask(n, dtype):
    key = (n, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
        _MASK_CACHE[key] = Tensor(m[None, None])
    return _MASK_CACHE[key]


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return nm.transpose(nm.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _mha(q_in, kv_in, attn: AttnP, n_heads, mask=None):
    """Multi-head attention; no positional signal is added to keys/values."""
    d_model = attn.q.w.shape[1]
    q = _split_heads(nm.linear(q_in, attn.q.w, attn.q.b), n_heads)
    k = _split_heads(nm.linear(kv_in, attn.k.w, attn.k.b), n_heads)
    v = _split_heads(nm.linear(kv_in, attn.v.w, attn.v.b), n_heads)
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(d_model // n_heads))
    if mask is not None:
        scores = nm.add(scores, mask)
    ctx = nm.matmul(nm.softmax(scores, axis=-1), v)
    b, _, n, _ = ctx.shape
    merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, n, d_model))
    return nm.linear(merged, attn.o.w, attn.o.b)


def teacher_forcing_probs(model: CaptionerModel, emb, tokens):
    """Distributions over each next token of a full BOS...EOS sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size < 2:
        raise ShapeError("tokens must be a 1-d BOS...EOS sequence")
    return model.decoder_probs(emb, tokens[:-1])


def teacher_forcing_probs_batch(model: CaptionerModel, emb, token_matrix):
    """Batched teacher forcing; rows are PAD-aligned full sequences."""
    token_matrix = np.asarray(token_matrix)
    return model.decoder_probs(emb, token_matrix[:, :-1])
