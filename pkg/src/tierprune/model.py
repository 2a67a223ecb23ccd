"""Mini Vision Transformer built from numbered, maskable linear groups.

Every prunable linear layer in the network is a :class:`LinearGroup`
carrying a stable integer id, an ablation switch, and a boolean keep
mask over its weight matrix.  A depth-L model exposes exactly 4L groups
(per block: fused qkv projection, attention output projection, mlp fc1,
mlp fc2).  Patch embedding, norms, the class/position embeddings, and
the classifier head are trainable but never pruned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_heads",
                     "depth", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class LinearGroup:
    """One maskable linear layer: y = x W^T + b, or all zeros when skipped.

    ``mask`` marks kept weights; entries masked out are pinned to zero
    and stay zero through training (``apply_mask`` is the pin).
    Flipping ``is_skip`` realizes full ablation of the layer: the output
    is exactly the zero tensor, bit-identical to zeroing weight and bias.
    """

    __slots__ = ("layer_number", "is_skip", "weight", "bias", "mask")

    def __init__(self, layer_number: int, weight: Tensor, bias: Tensor):
        if weight.values.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"linear group needs out×in weight and out bias, got {weight.shape}/{bias.shape}"
            )
        self.layer_number = layer_number
        self.is_skip = False
        self.weight = weight
        self.bias = bias
        self.mask = np.ones(weight.shape, dtype=bool)

    def __call__(self, x: Tensor) -> Tensor:
        if self.is_skip:
            shape = x.shape[:-1] + (self.weight.shape[0],)
            return Tensor(np.zeros(shape, dtype=x.values.dtype), dtype=x.values.dtype)
        return T.add(T.matmul(x, T.transpose(self.weight, (1, 0))), self.bias)

    def apply_mask(self) -> None:
        self.weight.values[~self.mask] = 0.0

    @property
    def kept_count(self) -> int:
        return int(self.mask.sum())


class MiniViT:
    """Pre-norm ViT whose prunable linears are numbered LinearGroups."""

    def __init__(self, config: ViTConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.embed_dim
        patch_dim = 3 * config.patch_size**2

        def glorot(out_dim, in_dim):
            a = math.sqrt(6.0 / (in_dim + out_dim))
            vals = rng.uniform(-a, a, size=(out_dim, in_dim)).astype(np.float32)
            return Tensor(vals, requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

        def small_uniform(*shape):
            vals = rng.uniform(-0.02, 0.02, size=shape).astype(np.float32)
            return Tensor(vals, requires_grad=True)

        self.patch_weight = glorot(d, patch_dim)
        self.patch_bias = zeros(d)
        self.cls_token = small_uniform(1, 1, d)
        self.pos_embed = small_uniform(1, config.num_patches + 1, d)

        self.blocks = []
        next_id = 0
        hidden = config.mlp_ratio * d
        for _ in range(config.depth):
            blk = {
                "ln1_gain": ones(d), "ln1_bias": zeros(d),
                "qkv": LinearGroup(next_id, glorot(3 * d, d), zeros(3 * d)),
                "proj": LinearGroup(next_id + 1, glorot(d, d), zeros(d)),
                "ln2_gain": ones(d), "ln2_bias": zeros(d),
                "fc1": LinearGroup(next_id + 2, glorot(hidden, d), zeros(hidden)),
                "fc2": LinearGroup(next_id + 3, glorot(d, hidden), zeros(d)),
            }
            next_id += 4
            self.blocks.append(blk)

        self.final_gain = ones(d)
        self.final_bias = zeros(d)
        # near-zero head keeps untrained logits close to uniform
        self.head_weight = small_uniform(config.num_classes, d)
        self.head_bias = zeros(config.num_classes)

    # ----------------------------------------------------------- registry

    def linear_groups(self) -> list[LinearGroup]:
        out = []
        for blk in self.blocks:
            out.extend([blk["qkv"], blk["proj"], blk["fc1"], blk["fc2"]])
        return out

    def group_by_number(self, layer_number: int) -> LinearGroup:
        groups = self.linear_groups()
        if not 0 <= layer_number < len(groups):
            raise ConfigError(f"no linear group numbered {layer_number}")
        return groups[layer_number]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items = [
            ("patch_embed.weight", self.patch_weight),
            ("patch_embed.bias", self.patch_bias),
            ("cls_token", self.cls_token),
            ("pos_embed", self.pos_embed),
        ]
        for i, blk in enumerate(self.blocks):
            items += [
                (f"blocks.{i}.ln1.gain", blk["ln1_gain"]),
                (f"blocks.{i}.ln1.bias", blk["ln1_bias"]),
                (f"blocks.{i}.qkv.weight", blk["qkv"].weight),
                (f"blocks.{i}.qkv.bias", blk["qkv"].bias),
                (f"blocks.{i}.proj.weight", blk["proj"].weight),
                (f"blocks.{i}.proj.bias", blk["proj"].bias),
                (f"blocks.{i}.ln2.gain", blk["ln2_gain"]),
                (f"blocks.{i}.ln2.bias", blk["ln2_bias"]),
                (f"blocks.{i}.fc1.weight", blk["fc1"].weight),
                (f"blocks.{i}.fc1.bias", blk["fc1"].bias),
                (f"blocks.{i}.fc2.weight", blk["fc2"].weight),
                (f"blocks.{i}.fc2.bias", blk["fc2"].bias),
            ]
        items += [
            ("final_norm.gain", self.final_gain),
            ("final_norm.bias", self.final_bias),
            ("head.weight", self.head_weight),
            ("head.bias", self.head_bias),
        ]
        return items

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_counts(self) -> tuple[int, int, int]:
        """(total, prunable, non_prunable); prunable = group weight entries."""
        total = sum(p.numel for p in self.parameters())
        prunable = sum(g.weight.numel for g in self.linear_groups())
        return total, prunable, total - prunable

    def apply_masks(self) -> None:
        for g in self.linear_groups():
            g.apply_mask()

    def clone(self) -> "MiniViT":
        """Independent deep copy: parameters, masks, and skip flags."""
        other = MiniViT(self.config)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst.values[...] = src.values
        for g_src, g_dst in zip(self.linear_groups(), other.linear_groups()):
            g_dst.mask[...] = g_src.mask
            g_dst.is_skip = g_src.is_skip
        return other

    def __call__(self, images: Tensor) -> Tensor:
        return forward(self, images)


def build_model(config: ViTConfig) -> MiniViT:
    """Deterministically initialized model; all groups live, masks full."""
    return MiniViT(config)


def enumerate_linear_groups(model: MiniViT) -> list[int]:
    """Stable group ids: block-major, within block [qkv, attn-out, fc1, fc2]."""
    return [g.layer_number for g in model.linear_groups()]


def _patchify(values: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = values.shape
    gh, gw = h // patch, w // patch
    x = values.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)
    return np.ascontiguousarray(x)


def forward(model: MiniViT, images: Tensor) -> Tensor:
    """Logits for a batch of images shaped B×3×S×S."""
    cfg = model.config
    vals = images.values if isinstance(images, Tensor) else np.asarray(images)
    if vals.ndim != 4 or vals.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"expected B×3×{cfg.image_size}×{cfg.image_size} images, got {vals.shape}"
        )
    b = vals.shape[0]
    d, nh, hd = cfg.embed_dim, cfg.num_heads, cfg.head_dim

    x = Tensor(_patchify(vals, cfg.patch_size), dtype=vals.dtype)
    x = T.add(T.matmul(x, T.transpose(model.patch_weight, (1, 0))), model.patch_bias)
    cls = T.broadcast_to(model.cls_token, (b, 1, d))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, model.pos_embed)
    tokens = x.shape[1]

    for blk in model.blocks:
        h = T.layer_norm(x, blk["ln1_gain"], blk["ln1_bias"])
        qkv = blk["qkv"](h)  # B×T×3d
        q = T.narrow(qkv, 2, 0, d)
        k = T.narrow(qkv, 2, d, d)
        v = T.narrow(qkv, 2, 2 * d, d)
        # B×T×d -> B×nh×T×hd
        q = T.transpose(T.reshape(q, (b, tokens, nh, hd)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, tokens, nh, hd)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, tokens, nh, hd)), (0, 2, 1, 3))
        att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        att = T.softmax(att, axis=-1)
        ctx = T.matmul(att, v)  # B×nh×T×hd
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tokens, d))
        x = T.add(x, blk["proj"](ctx))

        h2 = T.layer_norm(x, blk["ln2_gain"], blk["ln2_bias"])
        x = T.add(x, blk["fc2"](T.gelu(blk["fc1"](h2))))

    x = T.layer_norm(x, model.final_gain, model.final_bias)
    cls_out = T.reshape(T.narrow(x, 1, 0, 1), (b, d))
    return T.add(T.matmul(cls_out, T.transpose(model.head_weight, (1, 0))), model.head_bias)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def dataset_loss(model: MiniViT, dataset, batch_size: int = 256) -> float:
    """Mean cross-entropy over the whole dataset, fixed iteration order.

    Per-example negative log-likelihoods are accumulated in float64, so
    the value is independent of how examples fall into batches up to
    rounding and identical across repeat calls.
    """
    n = dataset.num_examples
    if n == 0:
        raise DataError("dataset_loss on empty dataset")
    labels = dataset.labels
    total = 0.0
    with T.no_grad():
        for idx in _batches(n, batch_size):
            logits = forward(model, Tensor(dataset.images.values[idx])).values
            z = logits.astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            total += float(np.sum(lse - z[np.arange(len(idx)), labels[idx]]))
    return total / n


def accuracy(model: MiniViT, dataset, batch_size: int = 256) -> float:
    """Fraction of examples whose argmax logit matches the label.

    Ties break toward the lowest class index.
    """
    n = dataset.num_examples
    if n == 0:
        raise DataError("accuracy on empty dataset")
    hits = 0
    with T.no_grad():
        for idx in _batches(n, batch_size):
            logits = forward(model, Tensor(dataset.images.values[idx])).values
            hits += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[idx]))
    return hits / n


def train(
    model: MiniViT,
    dataset,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
) -> list[dict]:
    """Plain SGD with seeded shuffling; returns per-epoch loss/accuracy.

    Keep masks are re-applied after every optimizer step, so weights a
    pruner has zeroed stay zero throughout fine-tuning.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    n = dataset.num_examples
    if n == 0:
        raise DataError("train on empty dataset")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            logits = forward(model, Tensor(dataset.images.values[idx]))
            loss = T.cross_entropy(logits, dataset.labels[idx])
            T.backward(loss)
            T.sgd_step(params, [p.grad for p in params], lr)
            T.zero_grads(params)
            model.apply_masks()
            loss_sum += loss.item() * len(idx)
        history.append({
            "epoch": epoch,
            "loss": loss_sum / n,
            "accuracy": accuracy(model, dataset),
        })
    return history
