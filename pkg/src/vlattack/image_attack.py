"""Image perturbation: layer-weighted initialization then contrastive refinement.

Both stages run sign-gradient PGD projected onto the same L-infinity ball
around the clean image.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .backend import Backend, as_tensor, resize_bilinear, torch_cosine, value_and_grad
from .core import AttackConfig, ImageSample, PairBatch, TextSample, cosine

Objective = Callable[[torch.Tensor], torch.Tensor]


class PgdError(FloatingPointError):
    pass


@dataclass
class ContrastSets:
    positives: list[TextSample]
    negatives: list[TextSample]

    def __post_init__(self):
        if not self.positives:
            raise ValueError("positive set must not be empty")


@dataclass
class PgdProblem:
    center: np.ndarray
    epsilon: float
    alpha: float
    steps: int
    objective: Objective
    direction: str = "descend"
    init: np.ndarray | None = None

    def __post_init__(self):
        if isinstance(self.center, ImageSample):
            self.center = self.center.pixels
        if isinstance(self.init, ImageSample):
            self.init = self.init.pixels
        if self.direction not in ("ascend", "descend"):
            raise ValueError(f"direction must be 'ascend' or 'descend', not {self.direction!r}")
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError("epsilon and steps must be >= 0")


@dataclass
class ImageAttackResult:
    image: ImageSample
    init_trace: list[float] = field(default_factory=list)
    refine_trace: list[float] = field(default_factory=list)
    layer_weights: np.ndarray | None = None
    start: ImageSample | None = None
    after_init: ImageSample | None = None


def image_seed(seed: int, image_id: str) -> list[int]:
    """Per-image RNG seed, independent of batch layout."""
    return [int(seed), zlib.crc32(image_id.encode("utf-8"))]


# --- layer importance ---------------------------------------------------------

def layer_importance(v: ImageSample, backend: Backend) -> np.ndarray:
    """Cosine of each layer's [CLS] embedding with the top layer's [CLS]."""
    out = backend.encode_image(v)
    top = out.cls(out.num_layers)
    w = np.array([cosine(out.cls(l), top) for l in range(1, out.num_layers + 1)])
    w[-1] = 1.0
    return w


def random_init(v: ImageSample, epsilon: float, seed) -> ImageSample:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    px = v.pixels
    delta = rng.uniform(-epsilon, epsilon, size=px.shape).astype(px.dtype)
    return v.with_pixels(np.clip(px + delta, 0, 1))


def layer_loss_objective(v: ImageSample, weights: Sequence[float], backend: Backend) -> Objective:
    ref = backend.forward_images(as_tensor(v)[None]).layer_tokens[0].detach()
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64))

    def objective(x):
        tokens = backend.forward_images(x[None]).layer_tokens[0]
        per_layer = torch_cosine(ref, tokens).mean(-1)
        return (w * per_layer).sum()

    return objective


def weighted_layer_loss(v: ImageSample, v_adv: ImageSample, weights: Sequence[float], backend: Backend) -> float:
    """Importance-weighted mean token cosine between clean and perturbed images, summed over layers."""
    with torch.no_grad():
        return float(layer_loss_objective(v, weights, backend)(as_tensor(v_adv)))


# --- contrastive refinement ---------------------------------------------------

def build_contrast_sets(batch: PairBatch, adv_texts: dict[str, TextSample], image_index: int,
                        config: AttackConfig | None = None) -> ContrastSets:
    """Positives: this image's adversarial and original captions. Negatives: every other image's adversarial captions."""
    m = config.m_captions if config else None
    pos, neg = [], []
    for i, pair in enumerate(batch.pairs):
        caps = pair.captions[:m]
        if i == image_index:
            pos.extend(adv_texts[c.id] for c in caps)
            pos.extend(caps)
        else:
            neg.extend(adv_texts[c.id] for c in caps)
    return ContrastSets(pos, neg)


def scaled_size(h: int, w: int, s: float) -> tuple[int, int]:
    size = (math.ceil(round(s * h, 9)), math.ceil(round(s * w, 9)))
    if min(size) < 1:
        raise ValueError(f"scale {s} collapses a {h}x{w} image")
    return size


def trans_scales(v: ImageSample, scales: Sequence[float]) -> list[ImageSample]:
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be nonempty and positive")
    h, w = v.shape[:2]
    x = as_tensor(v)
    out = []
    for s in scales:
        y = resize_bilinear(x, scaled_size(h, w, s)).numpy().astype(v.pixels.dtype)
        out.append(v.with_pixels(np.clip(y, 0, 1)))
    return out


def contrastive_objective(sets: ContrastSets, scales: Sequence[float], lam: float, backend: Backend,
                          text_cache: dict | None = None) -> Objective:
    def feats(texts):
        if not texts:
            return torch.zeros((0, backend.descriptor.embed_dim), dtype=torch.float64)
        if text_cache is None:
            return torch.from_numpy(backend.text_features(texts))
        missing = [t for t in texts if (t.id, t.raw) not in text_cache]
        if missing:
            for t, f in zip(missing, backend.text_features(missing)):
                text_cache[(t.id, t.raw)] = f
        return torch.from_numpy(np.stack([text_cache[(t.id, t.raw)] for t in texts]))

    pos = feats(sets.positives)
    neg = feats(sets.negatives)
    scales = list(scales)

    def objective(x):
        h, w = x.shape[:2]
        total = x.new_zeros(())
        for s in scales:
            f = backend.forward_images(resize_bilinear(x, scaled_size(h, w, s))[None]).final_feature[0]
            total = total + lam * torch_cosine(pos, f).sum() + torch_cosine(neg, f).sum()
        return total

    return objective


def contrastive_loss(v_adv: ImageSample, sets: ContrastSets, scales: Sequence[float], lam: float,
                     backend: Backend) -> float:
    with torch.no_grad():
        return float(contrastive_objective(sets, scales, lam, backend)(as_tensor(v_adv)))


# --- PGD ----------------------------------------------------------------------

def project(x: np.ndarray, center: np.ndarray, epsilon: float) -> np.ndarray:
    eps = np.asarray(epsilon, dtype=x.dtype)
    return np.clip(center + np.clip(x - center, -eps, eps), 0, 1).astype(x.dtype)


def pgd_optimize(problem: PgdProblem) -> tuple[np.ndarray, list[float]]:
    """Sign-gradient PGD.

    Returns the final iterate and the objective at every iterate, so the
    trace has ``steps + 1`` entries.
    """
    center = np.asarray(problem.center)
    x = np.array(problem.init if problem.init is not None else center, dtype=center.dtype)
    sign = 1.0 if problem.direction == "ascend" else -1.0
    step = np.asarray(problem.alpha * sign, dtype=x.dtype)
    trace = []
    for k in range(problem.steps):
        val, g = value_and_grad(problem.objective, x)
        if not np.all(np.isfinite(g)) or not math.isfinite(val):
            raise PgdError(f"non-finite objective or gradient at PGD step {k}")
        trace.append(val)
        x = project(x + step * np.sign(g).astype(x.dtype), center, problem.epsilon)
    with torch.no_grad():
        trace.append(float(problem.objective(as_tensor(x))))
    return x, trace


def attack_image(v: ImageSample, sets: ContrastSets, config: AttackConfig, backend: Backend,
                 text_cache: dict | None = None) -> ImageAttackResult:
    """Random start, layer-weighted descent, then contrastive ascent."""
    backend.require(gradients=True)
    eps = config.budget.epsilon_v
    rng = np.random.default_rng(image_seed(config.seed, v.id))
    weights = None
    if "no_ig" not in config.ablation:
        weights = (np.ones(backend.descriptor.num_layers) if "no_li" in config.ablation
                   else layer_importance(v, backend))
    refine_obj = None
    if "no_io" not in config.ablation:
        refine_obj = contrastive_objective(sets, config.scales, config.lambda_, backend, text_cache)
    layer_obj = layer_loss_objective(v, weights, backend) if weights is not None else None

    result = ImageAttackResult(v, layer_weights=weights)
    x = v
    for r in range(config.rounds):
        x = random_init(x, eps, rng)
        if r:
            x = x.with_pixels(project(x.pixels, v.pixels, eps))
        if result.start is None:
            result.start = x
        if layer_obj is not None:
            px, trace = pgd_optimize(PgdProblem(v.pixels, eps, config.alpha, config.steps_init,
                                                layer_obj, "descend", init=x.pixels))
            x = x.with_pixels(px)
            result.init_trace.extend(trace)
        if result.after_init is None:
            result.after_init = x
        if refine_obj is not None:
            px, trace = pgd_optimize(PgdProblem(v.pixels, eps, config.alpha, config.steps_contrastive,
                                                refine_obj, "ascend", init=x.pixels))
            x = x.with_pixels(px)
            result.refine_trace.extend(trace)
    result.image = x
    return result
