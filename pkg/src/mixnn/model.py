"""Desk-scale encoder stack with hand-rolled forward/backward.

The stack mirrors the usual backbone/projector/predictor topology at MLP
scale: backbone f maps inputs to feature space, projector g maps features
into the small embedding space the loss lives in, and the predictor h exists
only on the student side. The teacher holds copies of f and g that are
updated purely by exponential moving average, never by gradients.

Each layer applies affine -> activation -> optional row-wise unit
normalization. Row-wise L2 normalization (rather than a batch-coupled norm)
keeps every sample's forward/backward independent, so batched matmuls with
fixed index order reproduce the per-sample math bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "none")

DEFAULT_HIDDEN = 128
DEFAULT_FEATURE_DIM = 64
DEFAULT_PROJ_DIM = 16


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"
    normalize_after: bool = False

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match output dimension")


@dataclass
class Tape:
    """Activation record from one forward pass, consumed by backward."""

    net_id: int
    version: int
    inputs: list  # per-layer input X (N, in)
    pre: list  # per-layer pre-activation (N, out)
    post: list  # per-layer post-activation, pre-normalization (N, out)
    norms: list  # per-layer row norms (N,) or None when not normalized


class MlpNetwork:
    """A chain of Layers with exact reverse-mode differentiation.

    `version` increments on every parameter mutation; a Tape recorded before
    a mutation is stale and backward() refuses it.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        self.layers = layers
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in fixed (layer, weight-then-bias) order."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def bump_version(self) -> None:
        self.version += 1

    def copy_params_from(self, other: "MlpNetwork") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs
        self.bump_version()


def init_mlp(dims: list[int], activations: list[str], normalize_flags: list[bool], rng) -> MlpNetwork:
    """Build an MLP with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""
    if not (len(dims) - 1 == len(activations) == len(normalize_flags)):
        raise ValueError("need one activation and normalize flag per layer")
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    layers = []
    for fan_in, fan_out, act, norm in zip(dims, dims[1:], activations, normalize_flags):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(
            Layer(
                weight=gen.uniform(-bound, bound, size=(fan_out, fan_in)),
                bias=gen.uniform(-bound, bound, size=fan_out),
                activation=act,
                normalize_after=norm,
            )
        )
    return MlpNetwork(layers)


def clone_network(net: MlpNetwork) -> MlpNetwork:
    """Independent deep copy of a network's layers and parameters."""
    return MlpNetwork(
        [
            Layer(
                weight=layer.weight.copy(),
                bias=layer.bias.copy(),
                activation=layer.activation,
                normalize_after=layer.normalize_after,
            )
            for layer in net.layers
        ]
    )


def forward(net: MlpNetwork, x):
    """Run the chain on a vector (C,) or batch (N, C).

    Returns (output, tape); output matches the input's rank.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != net.input_dim:
        raise ValueError(f"input dim {arr.shape[1]} != network input dim {net.input_dim}")
    inputs, pres, posts, norms = [], [], [], []
    h = arr
    for layer in net.layers:
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        pres.append(pre)
        post = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        posts.append(post)
        if layer.normalize_after:
            n = np.linalg.norm(post, axis=1)
            if np.any(n == 0.0):
                raise ValueError("cannot normalize a zero activation row")
            norms.append(n)
            h = post / n[:, None]
        else:
            norms.append(None)
            h = post
    tape = Tape(net_id=id(net), version=net.version, inputs=inputs, pre=pres, post=posts, norms=norms)
    out = h[0] if single else h
    return out, tape


def backward(net: MlpNetwork, tape: Tape, grad_out):
    """Exact reverse-mode gradients for all parameters and the input.

    grad_out must match forward's output shape. Returns (param_grads,
    grad_in) where param_grads aligns with net.parameters().
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise ValueError("stale tape: network parameters changed since forward")
    g = np.asarray(grad_out, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    param_grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        if layer.normalize_after:
            n = tape.norms[li]
            out_rows = tape.post[li] / n[:, None]
            g = (g - np.einsum("nc,nc->n", g, out_rows)[:, None] * out_rows) / n[:, None]
        if layer.activation == "relu":
            g = g * (tape.pre[li] > 0.0)
        param_grads[2 * li] = g.T @ tape.inputs[li]
        param_grads[2 * li + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return param_grads, (g[0] if single else g)


def sgd_step(params, grads, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, velocity=None):
    """In-place heavy-ball SGD: v <- m*v + g + wd*p; p <- p - lr*v.

    Returns the velocity list (created zeroed on first use).
    """
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return velocity


@dataclass
class EncoderPair:
    """Student (f, g, h) plus an EMA teacher mirror of (f, g)."""

    student_backbone: MlpNetwork
    student_projector: MlpNetwork
    student_predictor: MlpNetwork
    teacher_backbone: MlpNetwork
    teacher_projector: MlpNetwork
    momentum: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        for s, t in ((self.student_backbone, self.teacher_backbone), (self.student_projector, self.teacher_projector)):
            for ps, pt in zip(s.parameters(), t.parameters()):
                if ps.shape != pt.shape:
                    raise ValueError("teacher parameter shapes must mirror the student")

    def student_params(self) -> list[np.ndarray]:
        return (
            self.student_backbone.parameters()
            + self.student_projector.parameters()
            + self.student_predictor.parameters()
        )

    def bump_student_versions(self) -> None:
        self.student_backbone.bump_version()
        self.student_projector.bump_version()
        self.student_predictor.bump_version()


def ema_update(pair: EncoderPair) -> EncoderPair:
    """teacher <- m*teacher + (1-m)*student, elementwise; student untouched."""
    m = pair.momentum
    for s_net, t_net in (
        (pair.student_backbone, pair.teacher_backbone),
        (pair.student_projector, pair.teacher_projector),
    ):
        for ps, pt in zip(s_net.parameters(), t_net.parameters()):
            pt *= m
            pt += (1.0 - m) * ps
        t_net.bump_version()
    return pair


def build_encoder_pair(
    input_dim: int,
    rng,
    momentum: float = 0.99,
    hidden: int = DEFAULT_HIDDEN,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    proj_dim: int = DEFAULT_PROJ_DIM,
) -> EncoderPair:
    """Student/teacher stack: f [in->hidden->feature] relu, g and h two-layer
    heads with unit normalization + relu between their layers.

    The teacher starts as an exact parameter copy of the student.
    """
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    f = init_mlp([input_dim, hidden, feature_dim], ["relu", "relu"], [False, False], gen)
    g = init_mlp([feature_dim, hidden, proj_dim], ["relu", "none"], [True, False], gen)
    h = init_mlp([proj_dim, hidden, proj_dim], ["relu", "none"], [True, False], gen)
    f_t = clone_network(f)
    g_t = clone_network(g)
    return EncoderPair(
        student_backbone=f,
        student_projector=g,
        student_predictor=h,
        teacher_backbone=f_t,
        teacher_projector=g_t,
        momentum=momentum,
    )


@dataclass
class AugmentPolicy:
    """Vector-domain augmentation: additive noise, coordinate dropout, scaling.

    The weak policy must not be noisier than the strong one and never drops
    coordinates, preserving the strong/weak asymmetry the teacher relies on.
    """

    strength: str
    noise_sigma: float
    dropout_prob: float
    scale_range: tuple[float, float]

    def __post_init__(self) -> None:
        if self.strength not in ("strong", "weak"):
            raise ValueError(f"unknown strength {self.strength!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.strength == "weak" and self.dropout_prob != 0.0:
            raise ValueError("weak policy must not drop coordinates")
        lo, hi = self.scale_range
        if lo > hi:
            raise ValueError("scale_range low must not exceed high")


def strong_policy() -> AugmentPolicy:
    return AugmentPolicy("strong", noise_sigma=0.25, dropout_prob=0.2, scale_range=(0.8, 1.25))


def weak_policy() -> AugmentPolicy:
    return AugmentPolicy("weak", noise_sigma=0.05, dropout_prob=0.0, scale_range=(0.95, 1.05))


def policy_for(tag: str) -> AugmentPolicy:
    if tag == "strong":
        return strong_policy()
    if tag == "weak":
        return weak_policy()
    raise ValueError(f"unknown augmentation tag {tag!r}")


def augment_batch(x, policy: AugmentPolicy, rng) -> np.ndarray:
    """Apply noise, dropout (strong only), then a per-row global scale.

    Deterministic under the seed/Generator: draws happen in a fixed order
    (noise, dropout mask, scales).
    """
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    out = arr + policy.noise_sigma * gen.standard_normal(arr.shape)
    if policy.dropout_prob > 0.0:
        keep = gen.uniform(size=arr.shape) >= policy.dropout_prob
        out = out * keep
    lo, hi = policy.scale_range
    scales = gen.uniform(lo, hi, size=arr.shape[0])
    out = out * scales[:, None]
    return out[0] if single else out


def augment(x, policy: AugmentPolicy, rng) -> np.ndarray:
    """Single-vector convenience wrapper over augment_batch."""
    return augment_batch(np.asarray(x, dtype=np.float64), policy, rng)


@dataclass
class LrSchedule:
    """Linear warmup to base_lr, then cosine decay toward zero."""

    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch <= 0:
            raise ValueError("steps_per_epoch must be positive")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: LrSchedule, global_step: int) -> float:
    """Learning rate at a step: (s+1)/W ramp, then 0.5*(1+cos(pi*t)) decay."""
    if not 0 <= global_step < schedule.total_steps:
        raise ValueError(f"step {global_step} outside [0, {schedule.total_steps})")
    w = schedule.warmup_steps
    if global_step < w:
        return schedule.base_lr * (global_step + 1) / w
    t = (global_step - w) / (schedule.total_steps - w)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
