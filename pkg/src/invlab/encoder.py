"""Small MLP encoder with hand-written backprop and unit-norm outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import IMAGE_SIZE, CHANNELS, crop, resize_nearest

NORM_EPS = 1e-12
# fixed pixel normalisation applied before the first layer
PIXEL_MEAN = 0.2
PIXEL_STD = 0.25


@dataclass
class EncoderParams:
    """Weights of a ``[pixels -> H -> ... -> D]`` MLP.

    ``weights[l]`` has shape ``(in_dim, out_dim)``. Hidden layers use ReLU,
    the output layer is linear and followed by L2 normalisation.
    """

    weights: list
    biases: list
    image_size: int = IMAGE_SIZE
    channels: int = CHANNELS

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match weight {w.shape}")
            if l > 0 and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {l}: input dim {w.shape[0]} does not chain")
        if self.weights[0].shape[0] != self.input_dim_expected:
            raise ValueError("first layer does not match image_size * image_size * channels")

    @property
    def input_dim_expected(self):
        return self.image_size * self.image_size * self.channels

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def dim(self):
        return self.weights[-1].shape[1]

    @property
    def shapes(self):
        return [list(w.shape) for w in self.weights]

    def arrays(self):
        """All parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays, image_size=IMAGE_SIZE, channels=CHANNELS):
        return cls(list(arrays[0::2]), list(arrays[1::2]), image_size, channels)

    def copy(self):
        return EncoderParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.image_size,
            self.channels,
        )

    def zeros_like(self):
        return EncoderParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.image_size,
            self.channels,
        )

    def allclose(self, other, atol=0.0):
        return all(
            a.shape == b.shape and np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.arrays(), other.arrays())
        )


def init_params(
    rng,
    hidden=(64, 64),
    dim=32,
    image_size=IMAGE_SIZE,
    channels=CHANNELS,
    input_scale=0.1,
    hidden_bias=0.1,
):
    """He-normal weights; the first layer is shrunk by ``input_scale`` and hidden
    biases start at ``hidden_bias`` so a fresh encoder maps all images to
    nearly the same direction (near-uniform contrastive logits)."""
    sizes = [image_size * image_size * channels, *hidden, dim]
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if l == 0:
            w *= input_scale
        weights.append(w)
        last = l == len(sizes) - 2
        biases.append(np.zeros(fan_out) if last else np.full(fan_out, float(hidden_bias)))
    return EncoderParams(weights, biases, image_size, channels)


@dataclass
class ActivationCache:
    params: EncoderParams
    inputs: np.ndarray
    pre: list  # pre-activation of every layer
    post: list  # ReLU output of hidden layers
    norms: np.ndarray
    degenerate: np.ndarray
    embeddings: np.ndarray

    @property
    def raw(self):
        """Final-layer activations before normalisation."""
        return self.pre[-1]


def as_batch(params, batch):
    """Stack images (or accept an already flat ``(N, input_dim)`` array)."""
    if isinstance(batch, np.ndarray) and batch.ndim == 2:
        x = batch.astype(np.float64, copy=False)
    else:
        x = np.stack([np.asarray(img, dtype=np.float64).reshape(-1) for img in batch])
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dim {x.shape[1]} does not match encoder input {params.input_dim}")
    return x


def forward(params, batch):
    """Embed a batch. Returns ``(embeddings, cache)`` with unit-norm rows.

    Rows whose pre-normalisation norm is below 1e-12 map to the first basis
    vector and pass no gradient.
    """
    x = as_batch(params, batch)
    pre, post = [], []
    last = len(params.weights) - 1
    a = inputs = (x - PIXEL_MEAN) / PIXEL_STD
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        if l < last:
            a = np.maximum(z, 0.0)
            post.append(a)
    z = pre[-1]
    norms = np.linalg.norm(z, axis=1)
    degenerate = norms < NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    emb = z / safe[:, None]
    if degenerate.any():
        emb[degenerate] = 0.0
        emb[degenerate, 0] = 1.0
    return emb, ActivationCache(params, inputs, pre, post, norms, degenerate, emb)


def backward(params, cache, grad_embeddings):
    """Gradient of a scalar loss wrt every parameter, given dL/d(embeddings)."""
    if cache.params is not params:
        raise ValueError("activation cache was produced by different parameters")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != cache.embeddings.shape:
        raise ValueError(f"gradient shape {g.shape} != embedding shape {cache.embeddings.shape}")
    f = cache.embeddings
    safe = np.where(cache.degenerate, 1.0, cache.norms)
    # (I - f f^T) / |z|
    dz = (g - f * np.sum(f * g, axis=1, keepdims=True)) / safe[:, None]
    dz[cache.degenerate] = 0.0

    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a_in = cache.inputs if l == 0 else cache.post[l - 1]
        grads_w[l] = a_in.T @ dz
        grads_b[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ params.weights[l].T
            dz = da * (cache.pre[l - 1] > 0.0)
    return EncoderParams(grads_w, grads_b, params.image_size, params.channels)


def sgd_step(params, grads, lr, weight_decay=0.0, momentum=0.0, buffer=None):
    """SGD with momentum (``v <- mu v + g + wd p``; ``p <- p - lr v``).

    ``buffer`` is an :class:`EncoderParams` of velocities, updated in place;
    pass ``None`` to start from zero. Returns ``(new_params, buffer)``.
    """
    if buffer is None:
        buffer = params.zeros_like()
    new = []
    for p, g, v in zip(params.arrays(), grads.arrays(), buffer.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter, gradient and buffer shapes differ")
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        new.append(p - lr * v)
    return EncoderParams.from_arrays(new, params.image_size, params.channels), buffer


def prepare(params, images):
    """Resize arbitrary-size images to the encoder input (nearest neighbour)."""
    s = params.image_size
    return [resize_nearest(np.asarray(img, dtype=np.float64), s, s) for img in images]


def embed(params, images, layer="embedding", batch_size=512):
    """Encode images of any size; ``layer`` is ``embedding``, ``raw`` or ``hidden<k>``."""
    out = []
    imgs = prepare(params, images)
    for start in range(0, len(imgs), batch_size):
        emb, cache = forward(params, imgs[start : start + batch_size])
        if layer == "embedding":
            out.append(emb)
        elif layer == "raw":
            out.append(cache.raw)
        elif layer.startswith("hidden"):
            out.append(cache.post[int(layer[6:])])
        else:
            raise ValueError(f"unknown layer {layer!r}")
    if not out:
        return np.zeros((0, params.dim))
    return np.concatenate(out)


def check_box(frame, box, min_area=4):
    x, y, w, h = box
    fh, fw = frame.shape[:2]
    if w <= 0 or h <= 0 or w * h < min_area:
        raise ValueError(f"degenerate box {box}")
    if x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise ValueError(f"box {box} outside frame {fw}x{fh}")


def crop_region(params, frame, box):
    check_box(frame, box)
    return resize_nearest(crop(frame, box), params.image_size, params.image_size)


def region_embed(params, frame, box):
    """Crop ``box`` from ``frame``, resize to the encoder input and embed it."""
    emb, _ = forward(params, [crop_region(params, frame, box)])
    return emb[0]


def region_embed_many(params, frame, boxes):
    if not boxes:
        return np.zeros((0, params.dim))
    emb, _ = forward(params, [crop_region(params, frame, b) for b in boxes])
    return emb
