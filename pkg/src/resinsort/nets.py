"""Siamese and triplet embedding networks built on :mod:`resinsort.tensor`.

Both networks share one trunk design: four conv layers (ReLU after each,
2x2 max-pool after the first three) followed by a fully-connected
embedding layer. The Siamese head maps the componentwise L1 distance of two
embeddings to a single logit; the triplet network compares embeddings
directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvLayer,
    DimensionError,
    FcLayer,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    l1_distance,
    l1_distance_backward,
    maxpool_backward,
    maxpool_forward,
    maxpool_output_shape,
    relu,
    relu_backward,
)

SIAMESE_WIDTH = 4096
TRIPLET_WIDTH = 128
DEFAULT_MARGIN = 0.4
PROB_CLAMP = 1e-12


def _conv(filters, kernel):
    return {"type": "conv", "filters": filters, "kernel": kernel, "stride": 1, "padding": 0}


_RELU = {"type": "relu"}
_POOL = {"type": "pool", "window": 2, "stride": 2}

# (input extents, conv stack) per profile
PROFILES = {
    "full": ((105, 105, 3), [
        _conv(64, 10), _RELU, _POOL,
        _conv(128, 7), _RELU, _POOL,
        _conv(128, 4), _RELU, _POOL,
        _conv(256, 4), _RELU,
    ]),
    "mini": ((32, 32, 3), [
        _conv(16, 5), _RELU, _POOL,
        _conv(32, 3), _RELU, _POOL,
        _conv(32, 3), _RELU, _POOL,
        _conv(64, 2), _RELU,
    ]),
}


@dataclass
class TrunkConfig:
    input_shape: tuple
    layers: list
    embedding_width: int

    @classmethod
    def profile(cls, name, embedding_width):
        try:
            shape, convs = PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown trunk profile {name!r}; choose from {sorted(PROFILES)}") from None
        layers = [dict(spec) for spec in convs]
        layers.append({"type": "fc", "units": embedding_width})
        return cls(tuple(shape), layers, embedding_width)

    def shapes(self):
        """Output shape after each layer; raises DimensionError if they do not compose."""
        shape = tuple(self.input_shape)
        out = []
        for spec in self.layers:
            kind = spec["type"]
            if kind == "conv":
                h, w, _ = shape
                k, s, p = spec["kernel"], spec.get("stride", 1), spec.get("padding", 0)
                oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if oh < 1 or ow < 1:
                    raise DimensionError(f"conv kernel {k} does not fit {shape}")
                shape = (oh, ow, spec["filters"])
            elif kind == "pool":
                shape = maxpool_output_shape(shape, spec["window"], spec["stride"])
            elif kind == "fc":
                shape = (spec["units"],)
            elif kind != "relu":
                raise ValueError(f"unknown layer type {kind!r}")
            out.append(shape)
        if out[-1] != (self.embedding_width,):
            raise DimensionError(
                f"final layer width {out[-1]} != embedding width {self.embedding_width}")
        return out

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": self.layers,
                "embedding_width": self.embedding_width}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), [dict(x) for x in d["layers"]], int(d["embedding_width"]))


class Trunk:
    """Shared convolutional embedding network."""

    def __init__(self, config: TrunkConfig, rng):
        self.config = config
        shapes = config.shapes()
        self.layers = []
        shape = tuple(config.input_shape)
        for spec, out_shape in zip(config.layers, shapes):
            kind = spec["type"]
            if kind == "conv":
                layer = ConvLayer.init(spec["filters"], spec["kernel"], shape[2], rng,
                                       spec.get("stride", 1), spec.get("padding", 0))
            elif kind == "fc":
                layer = FcLayer.init(int(np.prod(shape)), spec["units"], rng)
            else:
                layer = spec
            self.layers.append(layer)
            shape = out_shape

    def params(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, (ConvLayer, FcLayer)):
                out.extend(layer.params())
        return out

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != tuple(self.config.input_shape):
            raise DimensionError(
                f"expected a batch of {tuple(self.config.input_shape)} images, got {x.shape}")

    def forward(self, x):
        """Embed a batch (N,H,W,C). Returns (embeddings (N,D), cache)."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        cache = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out, cols = conv2d_forward(x, layer, return_cols=True)
                cache.append((x, cols))
                x = out
            elif isinstance(layer, FcLayer):
                cache.append(x)
                x = fc_forward(x, layer, batched=True)
            elif layer["type"] == "relu":
                cache.append(x)
                x = relu(x)
            else:
                pooled, arg = maxpool_forward(x, layer["window"], layer["stride"])
                cache.append((x.shape, arg))
                x = pooled
        return x, cache

    def embed(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_emb):
        """Parameter gradients aligned with :meth:`params`.

        Also returns the input gradient, or None when the first layer is a conv.
        """
        g = grad_emb
        grads = []
        first = self.layers[0]
        for layer, saved in zip(reversed(self.layers), reversed(cache)):
            if isinstance(layer, ConvLayer):
                x, cols = saved
                g, gw, gb = conv2d_backward(x, layer, g, input_grad=layer is not first, cols=cols)
                grads.append(gb)
                grads.append(gw)
            elif isinstance(layer, FcLayer):
                g, gw, gb = fc_backward(saved, layer, g, batched=True)
                grads.append(gb)
                grads.append(gw)
            elif layer["type"] == "relu":
                g = relu_backward(saved, g)
            else:
                shape, arg = saved
                g = maxpool_backward(shape, arg, g, layer["window"], layer["stride"])
        grads.reverse()
        return grads, g


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def siamese_loss(p, y):
    """Binary cross-entropy with target 1 - y.

    ``y`` follows the pair-label convention (0 = same class, 1 = different),
    so ``p`` is the predicted probability that the pair is the same class.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = 1.0 - np.asarray(y, dtype=np.float64)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def siamese_loss_grad_logit(p, y):
    """d siamese_loss / d logit, where p = sigmoid(logit)."""
    p = np.asarray(p, dtype=np.float64)
    t = 1.0 - np.asarray(y, dtype=np.float64)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return np.where(inside, p - t, 0.0)


def triplet_loss(fa, fp, fn, margin=DEFAULT_MARGIN):
    """max(0, |fa - fp|^2 - |fa - fn|^2 + margin), per row for batched input."""
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    if not fa.shape == fp.shape == fn.shape:
        raise DimensionError(f"embedding shapes differ: {fa.shape}, {fp.shape}, {fn.shape}")
    d_ap = np.sum((fa - fp) ** 2, axis=-1)
    d_an = np.sum((fa - fn) ** 2, axis=-1)
    loss = np.maximum(0.0, d_ap - d_an + margin)
    return float(loss) if loss.ndim == 0 else loss


def triplet_loss_backward(fa, fp, fn, margin=DEFAULT_MARGIN, grad_out=1.0):
    """Gradients of :func:`triplet_loss` w.r.t. (fa, fp, fn)."""
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    d_ap = np.sum((fa - fp) ** 2, axis=-1)
    d_an = np.sum((fa - fn) ** 2, axis=-1)
    active = ((d_ap - d_an + margin) > 0).astype(np.float64) * grad_out
    active = np.asarray(active)[..., None]
    g_a = 2.0 * (fn - fp) * active
    g_p = -2.0 * (fa - fp) * active
    g_n = 2.0 * (fa - fn) * active
    return g_a, g_p, g_n


@dataclass
class SiameseModel:
    trunk: Trunk
    head: FcLayer
    kind: str = field(default="siamese", init=False)

    @classmethod
    def create(cls, profile="full", seed=0, embedding_width=SIAMESE_WIDTH, config=None):
        rng = np.random.default_rng(seed)
        config = config or TrunkConfig.profile(profile, embedding_width)
        trunk = Trunk(config, rng)
        return cls(trunk, FcLayer.init(config.embedding_width, 1, rng))

    @property
    def config(self):
        return self.trunk.config

    def params(self):
        return self.trunk.params() + self.head.params()

    def embed(self, x):
        return self.trunk.embed(x)

    def logits(self, e1, e2):
        return fc_forward(l1_distance(e1, e2), self.head, batched=True)[:, 0]

    def forward(self, x1, x2):
        """p(same) for a batch of pairs; each side is embedded by the same trunk."""
        e1 = self.trunk.embed(x1)
        e2 = self.trunk.embed(x2)
        return sigmoid(self.logits(e1, e2))

    def loss_and_grads(self, x1, x2, y, scale=None):
        """Summed loss over the pairs and parameter gradients of ``scale * sum``."""
        n = len(y)
        scale = 1.0 / n if scale is None else scale
        emb, cache = self.trunk.forward(np.concatenate([x1, x2]))
        e1, e2 = emb[:n], emb[n:]
        dist = l1_distance(e1, e2)
        z = fc_forward(dist, self.head, batched=True)[:, 0]
        p = sigmoid(z)
        losses = siamese_loss(p, y)
        gz = (siamese_loss_grad_logit(p, y) * scale)[:, None]
        gdist, gw, gb = fc_backward(dist, self.head, gz, batched=True)
        g1, g2 = l1_distance_backward(e1, e2, gdist)
        grads, _ = self.trunk.backward(cache, np.concatenate([g1, g2]))
        return float(np.sum(losses)), grads + [gw, gb]

    def batch_loss(self, x1, x2, y):
        return siamese_loss(self.forward(x1, x2), y)


def siamese_forward(model: SiameseModel, x1, x2):
    """Probability that two single images (H,W,C) show the same class."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return float(model.forward(x1[None], x2[None])[0])


@dataclass
class TripletModel:
    trunk: Trunk
    margin: float = DEFAULT_MARGIN
    kind: str = field(default="triplet", init=False)

    @classmethod
    def create(cls, profile="full", seed=0, margin=DEFAULT_MARGIN,
               embedding_width=TRIPLET_WIDTH, config=None):
        rng = np.random.default_rng(seed)
        config = config or TrunkConfig.profile(profile, embedding_width)
        return cls(Trunk(config, rng), margin)

    @property
    def config(self):
        return self.trunk.config

    def params(self):
        return self.trunk.params()

    def embed(self, x):
        return self.trunk.embed(x)

    def loss_and_grads(self, xa, xp, xn, scale=None):
        n = len(xa)
        scale = 1.0 / n if scale is None else scale
        emb, cache = self.trunk.forward(np.concatenate([xa, xp, xn]))
        fa, fp, fn = emb[:n], emb[n:2 * n], emb[2 * n:]
        losses = triplet_loss(fa, fp, fn, self.margin)
        ga, gp, gn = triplet_loss_backward(fa, fp, fn, self.margin, grad_out=scale)
        grads, _ = self.trunk.backward(cache, np.concatenate([ga, gp, gn]))
        return float(np.sum(losses)), grads

    def batch_loss(self, xa, xp, xn):
        emb = self.trunk.embed(np.concatenate([xa, xp, xn]))
        n = len(xa)
        return triplet_loss(emb[:n], emb[n:2 * n], emb[2 * n:], self.margin)


def triplet_embed(model: TripletModel, x):
    """Embedding of a single image (H,W,C)."""
    return model.embed(np.asarray(x, dtype=np.float64)[None])[0]
