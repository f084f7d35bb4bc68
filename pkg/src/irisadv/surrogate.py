"""U-Net surrogate of the Gabor iris-code generator.

The network takes the normalized iris and its mask stacked in depth and
emits one soft code plane per filter, squashed to [0, 1] with
``(tanh + 1) / 2`` and reshaped plane-major to ``(F*H, W)``.

Every layer is a depthwise-separable 4x4 convolution followed by batch
norm and ReLU (tanh on the last layer). Encoder layers use stride 2;
decoder layers upsample by two and convolve with stride 1, after
concatenating the matching encoder output in depth. Padding is zero
along the radial axis and, by default, periodic along the angular one.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Adam, BatchNormStats, Tensor, backward, ops
from .codec import IrisCode, IrisSample

log = logging.getLogger(__name__)

# full-scale channel schedule: encoder conv1..conv5, decoder deconv1..deconv4
ENCODER_CHANNELS = (64, 128, 256, 256, 512)
DECODER_CHANNELS = {1: 64, 2: 128, 3: 256, 4: 512}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    height: int = 16
    width: int = 128
    n_filters: int = 2
    levels: int = 4
    channel_divisor: int = 8
    kernel: int = 4
    batch_size: int = 16
    lr: float = 5e-3
    epochs: int = 20
    # pad the angular (width) axis periodically, as the Gabor encoder does
    wrap_width: bool = True

    @classmethod
    def full(cls, **overrides) -> "SurrogateConfig":
        base = cls(height=64, width=512, n_filters=6, levels=5, channel_divisor=1,
                   batch_size=64, lr=1e-4)
        return replace(base, **overrides)

    @classmethod
    def desk(cls, **overrides) -> "SurrogateConfig":
        return replace(cls(), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def channels(self, layer: str) -> tuple[int, int]:
        """(input, output) channel counts of a named layer."""
        div = self.channel_divisor
        enc = [max(1, c // div) for c in ENCODER_CHANNELS]
        dec = {k: max(1, c // div) for k, c in DECODER_CHANNELS.items()}
        if layer.startswith("conv"):
            i = int(layer[4:])
            return (2 if i == 1 else enc[i - 2]), enc[i - 1]
        i = int(layer[6:])
        out = self.n_filters if i == 0 else dec[i]
        if i == self.levels - 1:
            return enc[self.levels - 1], out
        return dec[i + 1] + enc[i], out

    def layer_names(self) -> list[str]:
        return ([f"conv{i}" for i in range(1, self.levels + 1)]
                + [f"deconv{i}" for i in range(self.levels - 1, -1, -1)])

    def validate(self) -> None:
        if not 1 <= self.levels <= len(ENCODER_CHANNELS):
            raise ValueError(f"levels must be in 1..{len(ENCODER_CHANNELS)}, got {self.levels}")
        if self.kernel != 4:
            raise ValueError("only 4x4 kernels are supported (stride-2 halving with padding 1)")
        h, w = self.height, self.width
        for i in range(1, self.levels + 1):
            if h % 2 or w % 2:
                raise ValueError(f"conv{i}: input extent {h}x{w} cannot be halved "
                                 f"({self.height}x{self.width} not divisible by 2^{self.levels})")
            h, w = h // 2, w // 2


class Surrogate:
    """Parameters, batch-norm statistics and the forward pass of the U-Net."""

    # decoder "same" padding for an even kernel after upsampling
    _DECODER_PAD = (1, 2, 1, 2)

    def __init__(self, config: SurrogateConfig, params: dict[str, Tensor],
                 stats: dict[str, BatchNormStats]):
        self.config = config
        self.params = params
        self.stats = stats

    @classmethod
    def build(cls, config: SurrogateConfig, seed: int = 0, dtype=np.float32) -> "Surrogate":
        config.validate()
        rng = np.random.default_rng(seed)
        k = config.kernel
        params: dict[str, Tensor] = {}
        stats: dict[str, BatchNormStats] = {}
        for name in config.layer_names():
            cin, cout = config.channels(name)
            # fan-in scaled uniform (He) initialisation
            b_dw = np.sqrt(6.0 / (k * k))
            b_pw = np.sqrt(6.0 / cin)
            params[f"{name}.dw"] = Tensor(rng.uniform(-b_dw, b_dw, (cin, 1, k, k)).astype(dtype),
                                          requires_grad=True, name=f"{name}.dw")
            params[f"{name}.pw"] = Tensor(rng.uniform(-b_pw, b_pw, (cout, cin, 1, 1)).astype(dtype),
                                          requires_grad=True, name=f"{name}.pw")
            params[f"{name}.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
            params[f"{name}.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.beta")
            stats[name] = BatchNormStats.fresh(cout, dtype=dtype)
        return cls(config, params, stats)

    # ------------------------------------------------------------ state

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "Surrogate":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.config.layer_names():
            for part in ("dw", "pw", "gamma", "beta"):
                out[f"{name}.{part}"] = self.params[f"{name}.{part}"].data
            out[f"{name}.running_mean"] = self.stats[name].running_mean
            out[f"{name}.running_var"] = self.stats[name].running_var
        return out

    @classmethod
    def from_state_dict(cls, config: SurrogateConfig, state: dict[str, np.ndarray]) -> "Surrogate":
        ref = cls.build(config, seed=0)
        expected = ref.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for key, arr in state.items():
            if arr.shape != expected[key].shape:
                raise ValueError(f"{key}: shape {arr.shape}, expected {expected[key].shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{key}: non-finite values")
        for name in config.layer_names():
            for part in ("dw", "pw", "gamma", "beta"):
                ref.params[f"{name}.{part}"].data = np.array(state[f"{name}.{part}"])
            ref.stats[name].running_mean = np.array(state[f"{name}.running_mean"])
            ref.stats[name].running_var = np.array(state[f"{name}.running_var"])
        return ref

    def astype(self, dtype) -> "Surrogate":
        """Copy with every parameter and statistic cast to ``dtype``."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=v.name)
                  for k, v in self.params.items()}
        stats = {k: BatchNormStats(s.running_mean.astype(dtype), s.running_var.astype(dtype),
                                   s.momentum, s.eps) for k, s in self.stats.items()}
        return Surrogate(self.config, params, stats)

    # ------------------------------------------------------------ forward

    def _block(self, name: str, x: Tensor, training: bool, last: bool = False) -> Tensor:
        p = self.params
        wrap = self.config.wrap_width
        if name.startswith("conv"):
            h = ops.separable_conv2d(ops.pad2d(x, 1, wrap), p[f"{name}.dw"], p[f"{name}.pw"], stride=2)
        else:
            h = ops.pad2d(ops.upsample2x(x), self._DECODER_PAD, wrap)
            h = ops.separable_conv2d(h, p[f"{name}.dw"], p[f"{name}.pw"], stride=1)
        h = ops.batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], self.stats[name], training)
        return ops.tanh(h) if last else ops.relu(h)

    def forward(self, iris: Tensor, mask: Tensor, training: bool = False,
                return_activations: bool = False):
        """Soft codes of shape (N, F*H, W) for a batch of (N, H, W) irises and masks."""
        cfg = self.config
        if iris.data.ndim != 3 or iris.shape != mask.shape or iris.shape[1:] != (cfg.height, cfg.width):
            raise ValueError(f"expected iris and mask of shape (N, {cfg.height}, {cfg.width}), "
                             f"got {iris.shape} and {mask.shape}")
        n = iris.shape[0]
        x = ops.concat([ops.reshape(iris, (n, 1, cfg.height, cfg.width)),
                        ops.reshape(mask, (n, 1, cfg.height, cfg.width))], axis=1)
        acts = {}
        skips = []
        h = x
        for i in range(1, cfg.levels + 1):
            h = self._block(f"conv{i}", h, training)
            acts[f"conv{i}"] = h.shape
            skips.append(h)
        for i in range(cfg.levels - 1, -1, -1):
            if i < cfg.levels - 1:
                h = ops.concat([h, skips[i]], axis=1)
            h = self._block(f"deconv{i}", h, training, last=(i == 0))
            acts[f"deconv{i}"] = h.shape
        soft = ops.affine(h, 0.5, 0.5)
        out = ops.reshape(soft, (n, cfg.n_filters * cfg.height, cfg.width))
        return (out, acts) if return_activations else out

    def soft_codes(self, iris: np.ndarray, mask: np.ndarray, batch: int = 64) -> np.ndarray:
        """Eval-mode soft codes for stacked (N, H, W) arrays."""
        dtype = self.params["conv1.dw"].dtype
        outs = []
        for s in range(0, iris.shape[0], batch):
            out = self.forward(Tensor(iris[s:s + batch].astype(dtype)),
                               Tensor(mask[s:s + batch].astype(dtype)), training=False)
            outs.append(out.data)
        return np.concatenate(outs, axis=0)

    def soft_code(self, sample: IrisSample) -> np.ndarray:
        return self.soft_codes(sample.iris[None], sample.mask[None])[0]


def build_surrogate(config: SurrogateConfig, seed: int = 0) -> Surrogate:
    return Surrogate.build(config, seed)


def binarize(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (soft > threshold).astype(np.uint8)


def reconstruction_loss(target: Tensor, soft: Tensor) -> Tensor:
    """Batch mean of the per-sample Euclidean distance between codes."""
    return ops.mean(ops.l2_norm(ops.sub(target, soft), axes=(1, 2)))


def _stack(samples: Sequence[IrisSample], codes: Sequence[IrisCode] | None = None):
    iris = np.stack([s.iris for s in samples]).astype(np.float32)
    mask = np.stack([s.mask for s in samples]).astype(np.float32)
    if codes is None:
        return iris, mask
    return iris, mask, np.stack([c.bits for c in codes]).astype(np.float32)


def train_surrogate(config: SurrogateConfig, samples: Sequence[IrisSample], codes: Sequence[IrisCode],
                    seed: int = 0, net: Surrogate | None = None,
                    callback=None) -> tuple[Surrogate, list[float]]:
    """Fit the surrogate to conventional codes with ADAM; returns the net and per-epoch mean loss."""
    if len(samples) == 0 or len(samples) != len(codes):
        raise ValueError("need a nonempty dataset with one code per sample")
    net = build_surrogate(config, seed) if net is None else net
    iris, mask, target = _stack(samples, codes)
    expected = (config.n_filters * config.height, config.width)
    if iris.shape[1:] != (config.height, config.width) or target.shape[1:] != expected:
        raise ValueError(f"dataset extents {iris.shape[1:]} / codes {target.shape[1:]} "
                         f"do not match the config {(config.height, config.width)} / {expected}")
    opt = Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            opt.zero_grad()
            out = net.forward(Tensor(iris[idx]), Tensor(mask[idx]), training=True)
            loss = reconstruction_loss(Tensor(target[idx]), out)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss)
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        log.info("epoch %d: mean loss %.5f", epoch, curve[-1])
        if callback is not None:
            callback(epoch, curve[-1], net)
    return net, curve


def per_sample_bit_errors(net: Surrogate, samples: Sequence[IrisSample], codes: Sequence[IrisCode],
                          threshold: float = 0.5) -> tuple[np.ndarray, list[int]]:
    """Masked bit error per sample; samples with an empty code mask are skipped and listed."""
    iris, mask = _stack(samples)
    soft = net.soft_codes(iris, mask)
    errors, skipped = [], []
    for i, code in enumerate(codes):
        valid = code.code_mask.astype(bool)
        n = int(valid.sum())
        if n == 0:
            skipped.append(i)
            continue
        errors.append(float((binarize(soft[i], threshold) != code.bits)[valid].sum()) / n)
    return np.array(errors), skipped


def bit_error_rate(net: Surrogate, samples: Sequence[IrisSample], codes: Sequence[IrisCode],
                   threshold: float = 0.5) -> float:
    errors, skipped = per_sample_bit_errors(net, samples, codes, threshold)
    if skipped:
        log.warning("skipped %d sample(s) with empty code masks: %s", len(skipped), skipped)
    if errors.size == 0:
        raise ValueError("no sample has a nonempty code mask")
    return float(errors.mean())
