"""Training objectives: l1 reconstruction, perceptual distance through a
fixed feature net, two-scale hinge adversarial losses, and an R1 gradient
penalty built on symbolic input gradients.

Loss reductions are means over elements so the scale is invariant to crop
size; the published weights (1, 1e-4, 1e-6) are kept as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .rng import RngState
from .tensor import Tensor

# fixed seeds make the frozen nets a stable measurement instrument,
# independent of the training seed
_PERCEPTUAL_SEED = 171717
_DISCRIMINATOR_SEED = 555001


@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_per: float = 1e-4
    w_adv: float = 1e-6

    def validate(self) -> None:
        if self.w_rec < 0 or self.w_per < 0 or self.w_adv < 0:
            raise ConfigurationError(
                f"loss weights must be non-negative, got "
                f"({self.w_rec}, {self.w_per}, {self.w_adv})")


def combine(weights: LossWeights, rec: Tensor, per: Tensor | None = None,
            adv: Tensor | None = None) -> Tensor:
    """total = w_rec*rec + w_per*per + w_adv*adv, skipping absent terms."""
    weights.validate()
    total = T.scale(rec, weights.w_rec)
    if per is not None:
        total = T.add(total, T.scale(per, weights.w_per))
    if adv is not None:
        total = T.add(total, T.scale(adv, weights.w_adv))
    return total


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    if sr.shape != hr.shape:
        raise DimensionError(f"l1 shapes differ: {sr.shape} vs {hr.shape}")
    return T.mean(T.absval(T.sub(sr, hr)))


class PerceptualNet:
    """Frozen three-conv feature net standing in for a pretrained encoder.

    Two stride-2 stages then a 3x3 head: one 64-channel feature map at a
    quarter of the input resolution. Weights come from a dedicated seed so
    the measurement does not drift with the training seed.
    """

    def __init__(self):
        reg = B.ParamRegistry()
        rng = RngState(_PERCEPTUAL_SEED)
        self.c1 = B.Conv2d(reg, "c1", 3, 32, 4, rng, stride=2, padding=1,
                           trainable=False)
        self.c2 = B.Conv2d(reg, "c2", 32, 64, 4, rng, stride=2, padding=1,
                           trainable=False)
        self.c3 = B.Conv2d(reg, "c3", 64, 64, 3, rng, padding=1, trainable=False)
        self.registry = reg

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"feature net expects (B, 3, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(
                f"feature net needs extents divisible by 4, got {x.shape}")
        return self.c3(T.gelu(self.c2(T.gelu(self.c1(x)))))


def perceptual_loss(sr: Tensor, hr: Tensor, feat_net) -> Tensor:
    """Mean over batch of (1/V) * sum_c ||f(sr)_c - f(hr)_c||_F with V the
    feature-map volume C*H*W. Exactly zero for identical inputs."""
    fs, fh = feat_net(sr), feat_net(hr)
    if fs.shape != fh.shape:
        raise DimensionError(
            f"feature net output shapes differ: {fs.shape} vs {fh.shape}")
    _, C, H, W = fs.shape
    d = T.sub(fs, fh)
    per_channel = T.sqrt(T.sum_(T.mul(d, d), axis=(2, 3)))
    return T.scale(T.mean(T.sum_(per_channel, axis=1)), 1.0 / (C * H * W))


class Discriminator:
    """Two-scale hinge classifier: the same trunk shape at full and half
    resolution (separate weights), each ending in a mean-pooled logit.

    Built from ops with symbolic adjoints throughout, so the R1 penalty
    can differentiate the input gradient a second time.
    """

    def __init__(self, seed: int = _DISCRIMINATOR_SEED):
        reg = B.ParamRegistry()
        rng = RngState(seed)
        self.scales = []
        for s in range(2):
            p = f"s{s}"
            self.scales.append({
                "c1": B.Conv2d(reg, f"{p}.c1", 3, 32, 4, rng, stride=2, padding=1),
                "c2": B.Conv2d(reg, f"{p}.c2", 32, 64, 4, rng, stride=2, padding=1),
                "c3": B.Conv2d(reg, f"{p}.c3", 64, 64, 4, rng, stride=2, padding=1),
                "head": B.Conv2d(reg, f"{p}.head", 64, 1, 3, rng, padding=1),
            })
        self.registry = reg

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"discriminator expects (B, 3, H, W), got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise DimensionError(
                f"discriminator needs extents divisible by 16, got {x.shape}")

    def _scale_logit(self, layers: dict, x: Tensor) -> Tensor:
        h = T.leaky_relu(layers["c1"](x), 0.2)
        h = T.leaky_relu(layers["c2"](h), 0.2)
        h = T.leaky_relu(layers["c3"](h), 0.2)
        return T.mean(layers["head"](h), axis=(1, 2, 3))

    def logits(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, 2): one logit per scale."""
        self._check(x)
        l0 = self._scale_logit(self.scales[0], x)
        l1 = self._scale_logit(self.scales[1], T.avg_pool2x(x))
        n = x.shape[0]
        return T.concat([T.reshape(l0, (n, 1)), T.reshape(l1, (n, 1))], axis=1)

    def logit_sum(self, x: Tensor) -> Tensor:
        """Scalar sum of all logits; stays on the symbolic-adjoint op set."""
        self._check(x)
        l0 = self._scale_logit(self.scales[0], x)
        l1 = self._scale_logit(self.scales[1], T.avg_pool2x(x))
        return T.add(T.sum_(l0), T.sum_(l1))


def adversarial_losses(d_real: Tensor, d_fake: Tensor):
    """Hinge pair: loss_D = mean(relu(1-d_real)) + mean(relu(1+d_fake)),
    loss_G = -mean(d_fake). Means run over every logit (batch and scale).

    The discriminator step should receive logits of detached fakes; the
    generator step uses only loss_G.
    """
    one_r = Tensor(np.ones(d_real.shape, dtype=d_real.data.dtype))
    one_f = Tensor(np.ones(d_fake.shape, dtype=d_fake.data.dtype))
    loss_d = T.add(T.mean(T.relu(T.sub(one_r, d_real))),
                   T.mean(T.relu(T.add(one_f, d_fake))))
    loss_g = T.neg(T.mean(d_fake))
    return loss_d, loss_g


def r1_penalty(d_fn, real: Tensor, gamma: float = 10.0) -> Tensor:
    """(gamma/2) * mean_b ||grad_x d(x)||^2 on real images.

    d_fn maps a batch to per-sample logits (or their sum); samples must
    not interact, so the gradient of the summed logit recovers each
    sample's own gradient. Raises CapabilityError if d_fn uses an op
    without a symbolic adjoint.
    """
    if not real.requires_grad:
        # recording only happens along grad-requiring paths; make the
        # input such a path without touching the caller's tensor
        real = Tensor(real.data, requires_grad=True, dtype=real.data.dtype)
    out = d_fn(real)
    if out.size != 1:
        out = T.sum_(out)
    g = T.input_gradient(out, real)
    per_sample = T.sum_(T.mul(g, g), axis=tuple(range(1, real.ndim)))
    return T.scale(T.mean(per_sample), gamma / 2.0)
