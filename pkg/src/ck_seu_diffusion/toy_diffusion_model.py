#!/usr/bin/env python3
"""
Desk-scale text-to-image diffuser with the block structure of a latent
diffusion UNet.

Pipeline: embed_prompt -> denoise_loop (L calls of unet_forward on a fixed
noise latent) -> decode_latent. Every weight the UNet uses lives in a
CkCheckpointStore as binary16, so a flipped bit in the store is a flipped
bit in the model for every denoising step of that generation.

UNet layout, levels counted from the top (full latent resolution):

    down CAB  : (ResNet, Transformer) x transformers_per_down_block, 2x2 average pool
    down DRB  : 2 ResNets at the deepest level, no pooling
    mid       : ResNet, (Transformer, ResNet) x transformers_per_mid_block
    up URB    : concat skip, 3 ResNets, nearest 2x upsample
    up CAB    : concat skip, (ResNet, Transformer) x transformers_per_up_block, upsample

A transformer is SA -> CA -> FFN, each pre-normalised with a residual add.
"""
from dataclasses import asdict, dataclass, fields
import hashlib
import logging
import math
from typing import Mapping, NamedTuple

import numpy as np

from .checkpoint_store import CkCheckpointStore
from .errors import ShapeError, TopologyMismatch, ValidationError
from .naming_scheme import BlockKind, NamingScheme, UNetTopology
from .util import check_integer

PAD_TOKEN = '<pad>'

# SeedSequence tags keeping the seeded streams of one master seed apart
INIT_TAG = 1
NOISE_TAG = 2
TEXT_TAG = 3
DECODER_TAG = 4

DRB_RESNETS = 2
URB_RESNETS = 3


@dataclass(frozen=True)
class DiffuserConfig:
    latent_size: int = 16
    image_size: int = 64
    latent_channels: int = 4
    channels: tuple[int, ...] = (16, 32, 32)
    transformers_per_down_block: int = 2
    transformers_per_up_block: int = 3
    transformers_per_mid_block: int = 1
    heads: int = 2
    embedding_width: int = 32
    text_length: int = 8
    steps: int = 10
    seed: int = 2024
    groups: int = 4
    time_embedding_width: int = 16
    ffn_multiplier: int = 4
    schedule_start: float = 0.1
    schedule_end: float = 0.02
    decoder_scale: float = 0.1
    compute_dtype: str = 'float32'

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))

    @property
    def num_down_levels(self) -> int:
        return len(self.channels)

    @property
    def topology(self) -> UNetTopology:
        return UNetTopology(
            num_levels=self.num_down_levels,
            attention_levels=self.num_down_levels - 1,
            transformers_per_down_block=self.transformers_per_down_block,
            transformers_per_up_block=self.transformers_per_up_block,
            transformers_per_mid_block=self.transformers_per_mid_block)

    @property
    def patch_size(self) -> int:
        return self.image_size // self.latent_size

    def validate(self) -> 'DiffuserConfig':
        positive = ['latent_size', 'image_size', 'latent_channels', 'heads', 'embedding_width', 'text_length',
                    'groups', 'time_embedding_width', 'ffn_multiplier', 'transformers_per_down_block',
                    'transformers_per_up_block', 'transformers_per_mid_block']
        for name in positive:
            check_integer(getattr(self, name), f"model.{name}", 1)
        check_integer(self.steps, 'model.steps', 0)
        check_integer(self.seed, 'model.seed', 0)
        for name in ('schedule_start', 'schedule_end', 'decoder_scale'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(f"model.{name}", f"expected a finite number, got {value!r}")
        if not self.channels:
            raise ValidationError('model.channels', 'needs at least one level')
        for i, c in enumerate(self.channels):
            check_integer(c, f"model.channels[{i}]", 1)
        if self.latent_size >= self.image_size:
            raise ValidationError('model.latent_size', 'latent must be smaller than the image')
        if self.image_size % self.latent_size:
            raise ValidationError('model.image_size', 'must be a multiple of latent_size')
        if self.latent_size % 2 ** (self.num_down_levels - 1):
            raise ValidationError('model.latent_size', f"must be divisible by {2 ** (self.num_down_levels - 1)}")
        for c in self.channels:
            if c % self.heads or c % self.groups:
                raise ValidationError('model.channels', f"{c} must be divisible by heads and groups")
        if self.time_embedding_width % 2:
            raise ValidationError('model.time_embedding_width', 'must be even')
        if self.compute_dtype not in ('float32', 'float64'):
            raise ValidationError('model.compute_dtype', 'must be float32 or float64')
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data['channels'] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping, path: str = 'model') -> 'DiffuserConfig':
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValidationError(f"{path}.{key}", 'unknown key')
        try:
            return cls(**data).validate()
        except TypeError as e:
            raise ValidationError(path, str(e)) from e


class AttentionWeights(NamedTuple):
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class Generation:
    image: np.ndarray
    latent: np.ndarray
    finite: bool


# building blocks
def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1 + np.exp(-x))


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _group_norm(x: np.ndarray, groups: int, eps: float = 1e-5) -> np.ndarray:
    c, h, w = x.shape
    groups = math.gcd(groups, c)
    g = x.reshape(groups, -1)
    g = (g - g.mean(axis=1, keepdims=True)) / np.sqrt(g.var(axis=1, keepdims=True) + eps)
    return g.reshape(c, h, w)


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution, x (C, H, W), w (O, C, 3, 3)"""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4]))


def _conv1x1(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.tensordot(w, x, axes=([1], [0]))


def _downsample(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _timestep_embedding(t: int, width: int, dtype) -> np.ndarray:
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(dtype)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention(x: np.ndarray, context: np.ndarray, w: AttentionWeights, heads: int = 1) -> np.ndarray:
    """
    Multi-head scaled dot-product attention, row-vector convention.

    Self-attention passes context=x; cross-attention passes the text tokens.
    Returns the sublayer output before the residual add.
    """
    if x.ndim != 2 or context.ndim != 2:
        raise ShapeError(f"tokens must be 2-D, got {x.shape} and {context.shape}")
    wq, wk, wv, wo = w
    if wq.shape[0] != x.shape[1] or wk.shape[0] != context.shape[1] or wv.shape[0] != context.shape[1]:
        raise ShapeError(f"projection inputs {wq.shape}, {wk.shape}, {wv.shape} do not fit x {x.shape} / context {context.shape}")
    if wq.shape[1] != wk.shape[1] or wo.shape[0] != wv.shape[1] or wo.shape[1] != x.shape[1]:
        raise ShapeError(f"projection widths {wq.shape}, {wk.shape}, {wv.shape}, {wo.shape} disagree")
    if wq.shape[1] % heads or wv.shape[1] % heads:
        raise ShapeError(f"width {wq.shape[1]} is not divisible by {heads} heads")
    n, m = x.shape[0], context.shape[0]
    d = wq.shape[1] // heads
    q = (x @ wq).reshape(n, heads, d).transpose(1, 0, 2)
    k = (context @ wk).reshape(m, heads, d).transpose(1, 0, 2)
    v = (context @ wv).reshape(m, heads, -1).transpose(1, 0, 2)
    probs = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d).astype(x.dtype))
    merged = (probs @ v).transpose(1, 0, 2).reshape(n, -1)
    return merged @ wo


def ffn(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Two fully-connected layers with a GELU between them, per token"""
    if x.ndim != 2 or w1.shape[0] != x.shape[1] or w2.shape[0] != w1.shape[1] or w2.shape[1] != x.shape[1]:
        raise ShapeError(f"ffn shapes do not fit: x {x.shape}, w1 {w1.shape}, w2 {w2.shape}")
    return _gelu(x @ w1) @ w2


def _tokenize(prompt: str, length: int) -> list[str]:
    tokens = prompt.split()
    if len(tokens) > length:
        # the last slot carries the remainder so no part of the prompt is dropped
        tokens = tokens[:length - 1] + [' '.join(tokens[length - 1:])]
    return tokens + [PAD_TOKEN] * (length - len(tokens))


class CkToyDiffuser:

    def __init__(self, cfg: DiffuserConfig | None = None) -> None:
        """
        Build the model description for cfg. Weights are not held here; they
        come from a checkpoint store on every call, see load_weights.
        """
        self.cfg = (cfg or DiffuserConfig()).validate()
        self.topology = self.cfg.topology
        self.scheme = NamingScheme.canonical(self.topology)
        self.dtype = np.dtype(self.cfg.compute_dtype)
        self.logger = logging.getLogger('CkToyDiffuser')
        self.layout = self._build_layout()
        f = self.cfg.patch_size
        decoder_rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, DECODER_TAG]))
        self._decoder = decoder_rng.normal(0.0, self.cfg.decoder_scale,
                                           (3, f, f, self.cfg.latent_channels)).astype(self.dtype)
        self._schedule = np.linspace(self.cfg.schedule_start, self.cfg.schedule_end, self.cfg.steps)

    # weight layout
    def _resnet_shapes(self, prefix: str, c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
        shapes = {
            f"{prefix}.conv1": (c_out, c_in, 3, 3),
            f"{prefix}.temb": (self.cfg.time_embedding_width, c_out),
            f"{prefix}.conv2": (c_out, c_out, 3, 3),
        }
        if c_in != c_out:
            shapes[f"{prefix}.skip"] = (c_out, c_in)
        return shapes

    def _transformer_shapes(self, block: BlockKind, level: int, index: int, c: int) -> dict[str, tuple[int, ...]]:
        prefix = self.scheme.prefixes[str(block)].format(level=level, index=index, up_level=0)
        width = self.cfg.embedding_width
        hidden = c * self.cfg.ffn_multiplier
        return {
            f"{prefix}.sa.wq": (c, c), f"{prefix}.sa.wk": (c, c),
            f"{prefix}.sa.wv": (c, c), f"{prefix}.sa.wo": (c, c),
            f"{prefix}.ca.wq": (c, c), f"{prefix}.ca.wk": (width, c),
            f"{prefix}.ca.wv": (width, c), f"{prefix}.ca.wo": (c, c),
            f"{prefix}.ffn.w1": (c, hidden), f"{prefix}.ffn.w2": (hidden, c),
        }

    def _build_layout(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        channels = cfg.channels
        deepest = cfg.num_down_levels - 1
        layout = {'conv_in.w': (channels[0], cfg.latent_channels, 3, 3)}
        c_prev = channels[0]
        for level, c in enumerate(channels):
            count = self.topology.transformer_count(BlockKind.DOWN, level)
            for i in range(count or DRB_RESNETS):
                layout |= self._resnet_shapes(f"down.{level}.r{i}", c_prev if i == 0 else c, c)
                if count:
                    layout |= self._transformer_shapes(BlockKind.DOWN, level, i, c)
            c_prev = c
        c_mid = channels[deepest]
        n_mid = cfg.transformers_per_mid_block
        for i in range(n_mid + 1):
            layout |= self._resnet_shapes(f"mid.r{i}", c_mid, c_mid)
            if i < n_mid:
                layout |= self._transformer_shapes(BlockKind.MID, 0, i, c_mid)
        for level in range(deepest, -1, -1):
            c = channels[level]
            c_below = channels[min(level + 1, deepest)]
            count = self.topology.transformer_count(BlockKind.UP, level)
            for i in range(count or URB_RESNETS):
                layout |= self._resnet_shapes(f"up.{level}.r{i}", c_below + c if i == 0 else c, c)
                if count:
                    layout |= self._transformer_shapes(BlockKind.UP, level, i, c)
        layout['conv_out.w'] = (cfg.latent_channels, channels[0], 3, 3)
        return layout

    def transformer_tensor_names(self) -> list[str]:
        return self.scheme.tensor_names()

    def init_checkpoint(self) -> CkCheckpointStore:
        """
        Seeded untrained weights. Each tensor is uniform on [-b, b] with b the
        largest power of two not above sqrt(3 / fan_in) and 0.5. Every magnitude
        stays below 1, so the exponent MSB of every stored pattern is 0, and
        whole binades are covered, so the mantissa bits are set half the time.
        """
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, INIT_TAG]))
        arrays = {}
        for name, shape in self.layout.items():
            fan_in = shape[0] if len(shape) == 2 and not name.endswith('.skip') else math.prod(shape[1:])
            bound = 2.0 ** math.floor(math.log2(min(math.sqrt(3.0 / fan_in), 0.5)))
            arrays[name] = rng.uniform(-bound, bound, shape).astype(np.float16)
        store = CkCheckpointStore.from_arrays(arrays, metadata={'format': 'ck-seu-toy', 'seed': str(self.cfg.seed)})
        self.logger.debug(f"initialised {len(arrays)} tensors, {sum(a.size for a in arrays.values())} weights")
        return store

    def load_weights(self, store: CkCheckpointStore) -> dict[str, np.ndarray]:
        weights = {}
        for name, shape in self.layout.items():
            if name not in store.header.entries:
                raise TopologyMismatch(f"checkpoint has no tensor {name}")
            if store.shape(name) != shape:
                raise TopologyMismatch(f"{name}: checkpoint shape {store.shape(name)} != model shape {shape}")
            weights[name] = store.as_array(name, self.dtype)
        return weights

    def _weights(self, weights) -> Mapping[str, np.ndarray]:
        if isinstance(weights, CkCheckpointStore):
            return self.load_weights(weights)
        return weights

    # text and noise
    def embed_prompt(self, prompt: str) -> np.ndarray:
        """M x W matrix; each row is seeded by (seed, position, token)"""
        rows = []
        for position, token in enumerate(_tokenize(prompt, self.cfg.text_length)):
            digest = int.from_bytes(hashlib.blake2b(token.encode('utf-8'), digest_size=8).digest(), 'little')
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, TEXT_TAG, position, digest]))
            rows.append(rng.standard_normal(self.cfg.embedding_width))
        return np.stack(rows).astype(self.dtype)

    def initial_latent(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, NOISE_TAG]))
        n = self.cfg.latent_size
        return rng.standard_normal((self.cfg.latent_channels, n, n)).astype(self.dtype)

    # UNet
    def _resnet(self, x: np.ndarray, temb: np.ndarray, w: Mapping, prefix: str) -> np.ndarray:
        groups = self.cfg.groups
        h = _conv3x3(_silu(_group_norm(x, groups)), w[f"{prefix}.conv1"])
        h = h + (temb @ w[f"{prefix}.temb"])[:, None, None]
        h = _conv3x3(_silu(_group_norm(h, groups)), w[f"{prefix}.conv2"])
        skip = w.get(f"{prefix}.skip")
        return (x if skip is None else _conv1x1(x, skip)) + h

    def _transformer(self, h: np.ndarray, context: np.ndarray, w: Mapping, prefix: str) -> np.ndarray:
        c, height, width = h.shape
        heads = self.cfg.heads
        x = h.reshape(c, height * width).T
        n = _layer_norm(x)
        x = x + attention(n, n, AttentionWeights(*(w[f"{prefix}.sa.{m}"] for m in ('wq', 'wk', 'wv', 'wo'))), heads)
        x = x + attention(_layer_norm(x), context,
                          AttentionWeights(*(w[f"{prefix}.ca.{m}"] for m in ('wq', 'wk', 'wv', 'wo'))), heads)
        x = x + ffn(_layer_norm(x), w[f"{prefix}.ffn.w1"], w[f"{prefix}.ffn.w2"])
        return np.ascontiguousarray(x.T).reshape(c, height, width)

    def unet_forward(self,
                     latent: np.ndarray,
                     text_embedding: np.ndarray,
                     weights,
                     t: int,
                     trace: dict | None = None,
                     bypass_transformers: bool = False) -> np.ndarray:
        """
        Noise estimate for latent at step t.

        trace, when given, receives the input and output of every block and
        the skip tensors (keys down.<l>.in/out, skip.<l>, mid.in/out,
        up.<l>.in/out, out). bypass_transformers runs the ResNet-and-sampler
        path alone.
        """
        w = self._weights(weights)
        record = trace.__setitem__ if trace is not None else (lambda key, value: None)
        deepest = self.cfg.num_down_levels - 1
        temb = _timestep_embedding(t, self.cfg.time_embedding_width, self.dtype)

        def run_block(h, block, level, prefix, resnets):
            count = self.topology.transformer_count(block, level)
            for i in range(resnets):
                h = self._resnet(h, temb, w, f"{prefix}.r{i}")
                if i < count and not bypass_transformers:
                    t_prefix = self.scheme.prefixes[str(block)].format(level=level, index=i, up_level=0)
                    h = self._transformer(h, text_embedding, w, t_prefix)
            return h

        h = _conv3x3(latent, w['conv_in.w'])
        skips = []
        for level in range(deepest + 1):
            record(f"down.{level}.in", h)
            count = self.topology.transformer_count(BlockKind.DOWN, level)
            h = run_block(h, BlockKind.DOWN, level, f"down.{level}", count or DRB_RESNETS)
            record(f"down.{level}.out", h)
            record(f"skip.{level}", h)
            skips.append(h)
            if level < deepest:
                h = _downsample(h)

        record('mid.in', h)
        h = run_block(h, BlockKind.MID, 0, 'mid', self.cfg.transformers_per_mid_block + 1)
        record('mid.out', h)

        for level in range(deepest, -1, -1):
            h = np.concatenate([h, skips[level]], axis=0)
            record(f"up.{level}.in", h)
            count = self.topology.transformer_count(BlockKind.UP, level)
            h = run_block(h, BlockKind.UP, level, f"up.{level}", count or URB_RESNETS)
            record(f"up.{level}.out", h)
            if level > 0:
                h = _upsample(h)

        out = _conv3x3(_silu(_group_norm(h, self.cfg.groups)), w['conv_out.w'])
        record('out', out)
        return out

    def denoise_loop(self, initial: np.ndarray, text_embedding: np.ndarray, weights) -> np.ndarray:
        """
        L fixed-coefficient updates latent -= alpha_k * eps. Non-finite values
        are carried through untouched; only decode_latent clamps.
        """
        w = self._weights(weights)
        latent = np.array(initial, dtype=self.dtype, copy=True)
        with np.errstate(all='ignore'):
            for k, alpha in enumerate(self._schedule):
                t = self.cfg.steps - 1 - k
                eps = self.unet_forward(latent, text_embedding, w, t)
                latent = latent - self.dtype.type(alpha) * eps
        return latent

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        """
        Fixed seeded patch decoder: each latent pixel drives one
        patch_size x patch_size RGB patch and nothing else. +inf clamps to 1,
        -inf and NaN to 0.
        """
        n, f = self.cfg.latent_size, self.cfg.patch_size
        with np.errstate(all='ignore'):
            patches = np.tensordot(self._decoder, np.asarray(latent, dtype=self.dtype), axes=([3], [0]))
            image = 0.5 + patches.transpose(0, 3, 1, 4, 2).reshape(3, n * f, n * f)
        image = np.nan_to_num(image, nan=0.0, posinf=1.0, neginf=0.0)
        return np.clip(image, 0.0, 1.0).astype(np.float32)

    def generate(self, prompt: str, weights, text_embedding: np.ndarray | None = None) -> Generation:
        w = self._weights(weights)
        if text_embedding is None:
            text_embedding = self.embed_prompt(prompt)
        latent = self.denoise_loop(self.initial_latent(), text_embedding, w)
        finite = bool(np.isfinite(latent).all())
        if not finite:
            self.logger.warning(f"non-finite latent for prompt {prompt!r}")
        return Generation(image=self.decode_latent(latent), latent=latent, finite=finite)
