"""Surrogate/victim encoders.

A backend maps images and texts into a shared embedding space and exposes the
per-layer token embeddings of the image tower. Everything differentiable runs
through torch in float64; public ``encode_*`` methods hand back numpy arrays.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageSample, TextSample, cosine, read_blob, write_blob

DTYPE = torch.float64


class CapabilityError(RuntimeError):
    """Raised when a backend lacks a feature an operation needs."""


@dataclass
class EncoderOutput:
    """Per-layer tokens ``(L_p, D_p, dim)`` and the pooled retrieval feature.

    Token 0 is the [CLS] position. Arrays are numpy from ``encode_*`` and
    torch tensors (possibly with a leading batch axis) inside objectives.
    """

    layer_tokens: Any
    final_feature: Any

    @property
    def num_layers(self) -> int:
        return self.layer_tokens.shape[-3]

    @property
    def num_tokens(self) -> int:
        return self.layer_tokens.shape[-2]

    def cls(self, layer: int):
        """[CLS] embedding of a 1-based layer index."""
        return self.layer_tokens[..., layer - 1, 0, :]


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    num_layers: int
    tokens_per_layer: int
    embed_dim: int
    supports_layer_skip: bool
    thread_safety: str = "concurrent-read-safe"
    options: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def as_tensor(pixels) -> torch.Tensor:
    if isinstance(pixels, ImageSample):
        pixels = pixels.pixels
    if isinstance(pixels, torch.Tensor):
        return pixels.to(DTYPE)
    return torch.from_numpy(np.array(pixels, dtype=np.float64))


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Differentiable bilinear resampling of ``(..., H, W, C)`` images.

    Uses half-pixel centres without antialiasing. Same-size input is
    returned untouched.
    """
    if tuple(x.shape[-3:-1]) == tuple(size):
        return x
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    y = x.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    y = F.interpolate(y, size=tuple(size), mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1).reshape(*lead, size[0], size[1], c)


def torch_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis, 0 where either side has zero norm."""
    dot = (a * b).sum(-1)
    denom = ((a * a).sum(-1) * (b * b).sum(-1)).sqrt()
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, dot / safe, torch.zeros_like(dot))


def value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor], pixels) -> tuple[float, np.ndarray]:
    """Evaluate a scalar pixel objective and its gradient.

    The gradient comes back in the dtype of ``pixels`` (float32 for stored
    images, float64 for double-precision checks).
    """
    arr = pixels.pixels if isinstance(pixels, ImageSample) else np.asarray(pixels)
    x = as_tensor(arr).requires_grad_(True)
    out = fn(x)
    if not isinstance(out, torch.Tensor) or not out.requires_grad:
        return float(out), np.zeros_like(arr)
    (g,) = torch.autograd.grad(out, x)
    return float(out.detach()), g.numpy().astype(arr.dtype, copy=False)


class Backend:
    """Base encoder pair.

    Subclasses implement :meth:`forward_images` and :meth:`forward_texts` on
    torch tensors; everything else is derived.
    """

    descriptor: BackendDescriptor
    supports_gradients = True

    def forward_images(self, x: torch.Tensor, skip_layer: int | None = None) -> EncoderOutput:
        raise NotImplementedError

    def forward_texts(self, tokens: Sequence[Sequence[str]]) -> EncoderOutput:
        raise NotImplementedError

    def require(self, *, gradients=False, layer_skip=False):
        if gradients and not self.supports_gradients:
            raise CapabilityError(f"backend {self.descriptor.name!r} has no gradient access")
        if layer_skip and not self.descriptor.supports_layer_skip:
            raise CapabilityError(f"backend {self.descriptor.name!r} cannot skip layers")

    # -- images

    def encode_image(self, v: ImageSample | np.ndarray) -> EncoderOutput:
        with torch.no_grad():
            out = self.forward_images(as_tensor(v)[None])
        return EncoderOutput(out.layer_tokens[0].numpy(), out.final_feature[0].numpy())

    def encode_image_skipping_layer(self, v: ImageSample | np.ndarray, layer: int) -> EncoderOutput:
        self.require(layer_skip=True)
        if not 1 <= layer <= self.descriptor.num_layers:
            raise ValueError(f"layer {layer} outside 1..{self.descriptor.num_layers}")
        with torch.no_grad():
            out = self.forward_images(as_tensor(v)[None], skip_layer=layer)
        return EncoderOutput(out.layer_tokens[0].numpy(), out.final_feature[0].numpy())

    def image_features(self, images: Sequence[ImageSample]) -> np.ndarray:
        if not images:
            return np.zeros((0, self.descriptor.embed_dim))
        shapes = {im.shape for im in images}
        with torch.no_grad():
            if len(shapes) == 1:
                x = torch.stack([as_tensor(im) for im in images])
                return self.forward_images(x).final_feature.numpy()
            return np.stack([self.forward_images(as_tensor(im)[None]).final_feature[0].numpy()
                             for im in images])

    def image_gradient(self, v: ImageSample | np.ndarray, objective: Callable[[EncoderOutput], torch.Tensor]) -> np.ndarray:
        """Gradient of ``objective(encoder output)`` with respect to the pixels."""
        self.require(gradients=True)

        def fn(x):
            out = self.forward_images(x[None])
            return objective(EncoderOutput(out.layer_tokens[0], out.final_feature[0]))

        return value_and_grad(fn, v)[1]

    # -- texts

    def encode_text(self, t: TextSample | Sequence[str]) -> EncoderOutput:
        toks = t.tokens if isinstance(t, TextSample) else list(t)
        with torch.no_grad():
            out = self.forward_texts([toks])
        return EncoderOutput(out.layer_tokens[0].numpy(), out.final_feature[0].numpy())

    def text_features(self, texts: Sequence[TextSample | Sequence[str]]) -> np.ndarray:
        """Final features for many texts, batched by token length."""
        toks = [t.tokens if isinstance(t, TextSample) else tuple(t) for t in texts]
        out = np.zeros((len(toks), self.descriptor.embed_dim))
        groups: dict[int, list[int]] = {}
        for i, tk in enumerate(toks):
            groups.setdefault(len(tk), []).append(i)
        with torch.no_grad():
            for _, idx in sorted(groups.items()):
                feats = self.forward_texts([toks[i] for i in idx]).final_feature.numpy()
                out[idx] = feats
        return out


# --- toy transformer ----------------------------------------------------------

@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 8
    patch_size: int = 2
    channels: int = 3
    num_layers: int = 3
    dim: int = 32
    heads: int = 2
    embed_dim: int = 32
    vocab: tuple[str, ...] = ()
    oov_buckets: int = 64
    max_text_len: int = 32
    seed: int = 0
    identity_layers: bool = False
    # words in one group share most of their embedding, like synonyms in a trained encoder
    word_groups: tuple[tuple[str, ...], ...] = ()
    group_spread: float = 0.5
    weight_noise: float = 0.0
    noise_seed: int = 1

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        d["word_groups"] = [list(g) for g in self.word_groups]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyConfig":
        d = dict(d)
        d["vocab"] = tuple(d.get("vocab", ()))
        d["word_groups"] = tuple(tuple(g) for g in d.get("word_groups", ()))
        return cls(**d)


def _layer_norm(x):
    return F.layer_norm(x, x.shape[-1:], eps=1e-5)


def init_toy_weights(cfg: ToyConfig) -> dict[str, np.ndarray]:
    """Seeded float32 weights; ``identity_layers`` zeroes every residual branch."""
    if cfg.image_size % cfg.patch_size:
        raise ValueError("image_size must be a multiple of patch_size")
    if cfg.dim % cfg.heads:
        raise ValueError("dim must be divisible by heads")
    rng = np.random.default_rng(cfg.seed)
    d, pdim = cfg.dim, cfg.patch_size ** 2 * cfg.channels

    def lin(fan_in, *shape):
        return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)

    w = {
        "img.patch": lin(pdim, pdim, d) * np.float32(4.0),
        "img.patch_b": lin(1, d) * np.float32(0.01),
        "img.cls": lin(1, d) * np.float32(0.1),
        "img.pos": lin(1, cfg.num_patches + 1, d) * np.float32(0.05),
        "img.head": lin(d, d, cfg.embed_dim),
        "txt.embed": lin(1, len(cfg.vocab) + cfg.oov_buckets, d),
        "txt.cls": lin(1, d) * np.float32(0.1),
        "txt.pos": lin(1, cfg.max_text_len + 1, d) * np.float32(0.05),
        "txt.head": lin(d, d, cfg.embed_dim),
    }
    if cfg.word_groups:
        vocab = {wd: i for i, wd in enumerate(cfg.vocab)}
        emb = w["txt.embed"]
        for group in cfg.word_groups:
            rows = [vocab[x] for x in group if x in vocab]
            shared = rng.standard_normal(d).astype(np.float32)
            emb[rows] = (shared + np.float32(cfg.group_spread) * emb[rows]) / np.float32(math.hypot(1, cfg.group_spread))
    for tower in ("img", "txt"):
        for l in range(1, cfg.num_layers + 1):
            p = f"{tower}.{l}."
            for m in ("q", "k", "v", "o"):
                w[p + m] = lin(d, d, d)
            w[p + "fc1"] = lin(d, d, 2 * d)
            w[p + "fc1_b"] = lin(1, 2 * d) * np.float32(0.01)
            w[p + "fc2"] = lin(2 * d, 2 * d, d)
            w[p + "fc2_b"] = lin(1, d) * np.float32(0.01)
            if cfg.identity_layers:
                for m in ("o", "fc2", "fc2_b"):
                    w[p + m] = np.zeros_like(w[p + m])
    if cfg.weight_noise:
        w = add_weight_noise(w, cfg.weight_noise, cfg.noise_seed)
    return w


def add_weight_noise(weights: dict[str, np.ndarray], scale: float, seed: int) -> dict[str, np.ndarray]:
    """Gaussian jitter proportional to each tensor's spread: a same-architecture sibling model."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, arr in weights.items():
        spread = float(np.std(arr)) if arr.size > 1 else 0.0
        out[k] = (arr + scale * spread * rng.standard_normal(arr.shape)).astype(np.float32)
    return out


class ToyBackend(Backend):
    """Small pre-norm ViT-style image tower and a matching text tower.

    Patch embedding, ``num_layers`` transformer blocks, [CLS] pooled through a
    layer norm and a linear head. Words outside ``vocab`` share hash buckets.
    Weights are frozen after construction, so instances are safe to share.
    """

    def __init__(self, config: ToyConfig | None = None, weights: dict[str, np.ndarray] | None = None, **kwargs):
        cfg = config or ToyConfig.from_json(kwargs)
        self.config = cfg
        self.weights_np = weights if weights is not None else init_toy_weights(cfg)
        self.w = {k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in self.weights_np.items()}
        self._vocab = {word: i for i, word in enumerate(cfg.vocab)}
        self.descriptor = BackendDescriptor(
            name="toy",
            num_layers=cfg.num_layers,
            tokens_per_layer=cfg.num_patches + 1,
            embed_dim=cfg.embed_dim,
            supports_layer_skip=True,
            options=cfg.to_json(),
        )

    # -- serialization

    def save(self, path: str | Path):
        header = {"format": "vlattack-toy", "version": 1, "seed": self.config.seed,
                  "config": self.config.to_json()}
        write_blob(path, header, self.weights_np)

    @classmethod
    def load(cls, path: str | Path, weight_noise: float = 0.0, noise_seed: int = 1) -> "ToyBackend":
        """Read a weight blob; a nonzero ``weight_noise`` yields a jittered sibling."""
        header, arrays = read_blob(path)
        if header.get("format") != "vlattack-toy":
            raise ValueError(f"{path}: not a toy backend blob")
        cfg = header["config"]
        if weight_noise:
            arrays = add_weight_noise(arrays, weight_noise, noise_seed)
            cfg = dict(cfg, weight_noise=weight_noise, noise_seed=noise_seed)
        return cls(ToyConfig.from_json(cfg), weights=arrays)

    # -- forward passes

    def _block(self, x, prefix):
        w, heads = self.w, self.config.heads
        n, t, d = x.shape
        dh = d // heads
        h = _layer_norm(x)
        q = (h @ w[prefix + "q"]).reshape(n, t, heads, dh).transpose(1, 2)
        k = (h @ w[prefix + "k"]).reshape(n, t, heads, dh).transpose(1, 2)
        v = (h @ w[prefix + "v"]).reshape(n, t, heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(n, t, d)
        x = x + o @ w[prefix + "o"]
        h = _layer_norm(x)
        m = F.gelu(h @ w[prefix + "fc1"] + w[prefix + "fc1_b"], approximate="tanh")
        return x + m @ w[prefix + "fc2"] + w[prefix + "fc2_b"]

    def _tower(self, x, tower, skip_layer):
        layers = []
        for l in range(1, self.config.num_layers + 1):
            if l != skip_layer:
                x = self._block(x, f"{tower}.{l}.")
            layers.append(x)
        tokens = torch.stack(layers, dim=1)
        final = _layer_norm(x[:, 0]) @ self.w[f"{tower}.head"]
        return EncoderOutput(tokens, final)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        n, h, w_, c = x.shape
        if c != cfg.channels:
            raise ValueError(f"expected {cfg.channels} channels, got {c}")
        p = cfg.patch_size
        g = h // p
        x = x.reshape(n, g, p, w_ // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, g * (w_ // p), p * p * c)

    def forward_images(self, x: torch.Tensor, skip_layer: int | None = None) -> EncoderOutput:
        cfg, w = self.config, self.w
        x = x.to(DTYPE)
        if x.ndim != 4:
            raise ValueError(f"expected N x H x W x C input, got shape {tuple(x.shape)}")
        x = resize_bilinear(x, (cfg.image_size, cfg.image_size))
        tok = self.patchify(2 * x - 1) @ w["img.patch"] + w["img.patch_b"]
        cls = w["img.cls"].expand(tok.shape[0], 1, -1)
        tok = torch.cat([cls, tok], dim=1) + w["img.pos"]
        return self._tower(tok, "img", skip_layer)

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        base = len(self.config.vocab)
        ids = []
        for t in list(tokens)[: self.config.max_text_len]:
            t = t.lower()
            if t in self._vocab:
                ids.append(self._vocab[t])
            else:
                ids.append(base + zlib.crc32(t.encode("utf-8")) % self.config.oov_buckets)
        return ids

    def forward_texts(self, tokens: Sequence[Sequence[str]], skip_layer: int | None = None) -> EncoderOutput:
        w = self.w
        ids = torch.tensor([self.token_ids(t) for t in tokens], dtype=torch.long)
        emb = w["txt.embed"][ids]
        cls = w["txt.cls"].expand(emb.shape[0], 1, -1)
        tok = torch.cat([cls, emb], dim=1)
        tok = tok + w["txt.pos"][: tok.shape[1]]
        return self._tower(tok, "txt", skip_layer)


class LinearBackend(Backend):
    """Image feature = flattened pixels times a fixed matrix.

    A single "layer" holding the feature as its only token. Used where a
    closed-form gradient is wanted.
    """

    def __init__(self, image_shape: tuple[int, int, int], embed_dim: int = 8, seed: int = 0, matrix=None):
        rng = np.random.default_rng(seed)
        n = int(np.prod(image_shape))
        self.image_shape = tuple(image_shape)
        self.matrix = np.asarray(matrix if matrix is not None else rng.standard_normal((n, embed_dim)), dtype=np.float64)
        self._A = torch.from_numpy(self.matrix)
        self._seed = seed
        self.descriptor = BackendDescriptor("linear", 1, 1, self.matrix.shape[1], False)

    def forward_images(self, x, skip_layer=None):
        if skip_layer is not None:
            raise CapabilityError("linear backend cannot skip layers")
        x = x.to(DTYPE)
        x = resize_bilinear(x, self.image_shape[:2])
        feat = x.reshape(x.shape[0], -1) @ self._A
        return EncoderOutput(feat[:, None, None, :], feat)

    def forward_texts(self, tokens, skip_layer=None):
        feats = []
        for toks in tokens:
            acc = np.zeros(self.matrix.shape[1])
            for t in toks:
                r = np.random.default_rng([self._seed, zlib.crc32(t.lower().encode("utf-8"))])
                acc += r.standard_normal(self.matrix.shape[1])
            feats.append(acc)
        feat = torch.from_numpy(np.array(feats))
        return EncoderOutput(feat[:, None, None, :], feat)


def layer_diagnostics(v: ImageSample | np.ndarray, backend: Backend) -> list[dict]:
    """Per layer: [CLS]-vs-top-layer cosine and final feature cosine with that layer skipped."""
    backend.require(layer_skip=True)
    out = backend.encode_image(v)
    top = out.cls(out.num_layers)
    rows = []
    for l in range(1, out.num_layers + 1):
        skipped = backend.encode_image_skipping_layer(v, l)
        rows.append({
            "layer": l,
            "cls_similarity": cosine(out.cls(l), top),
            "skip_similarity": cosine(out.final_feature, skipped.final_feature),
        })
    return rows


def build_backend(spec: dict | None) -> Backend:
    """Construct a backend from a ``{"kind": ..., **options}`` mapping."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "toy")
    if kind == "toy":
        blob = spec.pop("weights", None)
        if blob:
            unknown = set(spec) - {"weight_noise", "noise_seed"}
            if unknown:
                raise ValueError(f"options {sorted(unknown)} cannot be combined with a weights file")
            return ToyBackend.load(blob, **spec)
        return ToyBackend(ToyConfig.from_json(spec))
    if kind == "linear":
        return LinearBackend(**spec)
    raise ValueError(f"unknown backend kind {kind!r}")
