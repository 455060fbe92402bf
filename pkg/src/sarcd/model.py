"""Siamese adaptive-fusion network for patch-pair change classification.

Each branch is three CondConv blocks (16, 32, 64 channels at 28, 14 and 7
pixels) joined by 1x1 stride-2 transitions. The three block outputs are
projected to 64 channels at 7x7, fused by channel attention, and the two
branch results are combined by a per-channel spatial inner product before a
two-way softmax classifier. Trunk and fusion weights are shared by both
branches; only the two projection kernels used by the contrastive loss
differ.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    channel_scale,
    concat,
    conv2d,
    fully_connected,
    global_avg_pool,
    mix_kernels,
    relu,
    reshape,
    sigmoid,
    softmax,
    tsum,
)

INPUT_SIZE = 28


@dataclass
class ModelConfig:
    experts: int = 4
    reduction: int = 8
    channels: tuple[int, int, int] = (16, 32, 64)
    input_size: int = INPUT_SIZE
    classes: int = 2
    seed: int = 0
    use_af: bool = True
    use_correlation: bool = True
    # "gap" pools the 1x1 projection to a 64-vector; "flatten" keeps all 7x7 positions
    projection: str = "gap"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.experts < 1:
            raise ValueError(f"number of CondConv experts must be >= 1, got {self.experts}")
        if len(self.channels) != 3:
            raise ValueError("channels must list three block widths")
        if self.channels[-1] % self.reduction:
            raise ValueError(f"reduction {self.reduction} must divide {self.channels[-1]}")
        if self.input_size != INPUT_SIZE:
            raise ValueError(f"input size is fixed at {INPUT_SIZE}")
        if self.projection not in ("gap", "flatten"):
            raise ValueError(f"unknown projection mode {self.projection!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Branch(NamedTuple):
    fv: Tensor
    levels: tuple[Tensor, Tensor, Tensor]
    attention: tuple[Tensor, Tensor, Tensor] | None


class Output(NamedTuple):
    probs: Tensor
    feat0: Tensor
    feat1: Tensor
    branch1: Branch
    branch2: Branch


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, dtype=np.float32) -> tuple[dict[str, Tensor], dict[str, BatchNormState]]:
    """He-uniform kernels, zero biases, unit BN scale."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    bn: dict[str, BatchNormState] = {}
    c1, c2, c3 = config.channels
    k = config.experts

    def conv(name, o, i, ksz, bias=True):
        params[f"{name}.weight"] = _he_uniform(rng, (o, i, ksz, ksz), i * ksz * ksz, dtype)
        if bias:
            params[f"{name}.bias"] = np.zeros(o, dtype)

    def fc(name, o, i, bias=True):
        params[f"{name}.weight"] = _he_uniform(rng, (o, i), i, dtype)
        if bias:
            params[f"{name}.bias"] = np.zeros(o, dtype)

    for b, (cin, cout) in enumerate(((1, c1), (c2, c2), (c3, c3)), start=1):
        conv(f"block{b}.conv", cout, cin, 3)
        params[f"block{b}.bn.gamma"] = np.ones(cout, dtype)
        params[f"block{b}.bn.beta"] = np.zeros(cout, dtype)
        bn[f"block{b}.bn"] = BatchNormState(cout, dtype)
        params[f"block{b}.experts"] = _he_uniform(rng, (k, cout, cout, 3, 3), cout * 9, dtype)
        fc(f"block{b}.route", k, cout)
    conv("trans1", c2, c1, 1)
    conv("trans2", c3, c2, 1)
    conv("dim1", c3, c1, 1)
    conv("dim2", c3, c2, 1)
    conv("dim3", c3, c3, 1)
    fc("af.squeeze", c3 // config.reduction, c3)
    for h in (1, 2, 3):
        fc(f"af.head{h}", c3, c3 // config.reduction)
    conv("proj1", c3, c3, 1, bias=False)
    conv("proj2", c3, c3, 1, bias=False)
    if config.use_correlation:
        fc("cls", config.classes, c3)
    else:
        side = config.input_size // 4
        fc("concat_fc", c3, 2 * c3 * side * side)
        fc("cls", config.classes, c3)
    return {n: Tensor(v, requires_grad=True, name=n) for n, v in params.items()}, bn


# building blocks -------------------------------------------------------------

def condconv_block(x: Tensor, params: dict[str, Tensor], prefix: str, bn_state: BatchNormState,
                   training: bool, momentum: float = 0.9, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """One CondConv block; returns the block output and routing weights (N, k)."""
    p = lambda s: params[f"{prefix}.{s}"]  # noqa: E731
    experts = p("experts")
    if experts.shape[0] < 1:
        raise ValueError("CondConv needs at least one expert")
    f = conv2d(x, p("conv.weight"), p("conv.bias"), stride=1, pad=1)
    f = relu(batch_norm(f, p("bn.gamma"), p("bn.beta"), bn_state, training, momentum, eps))
    alpha = sigmoid(fully_connected(global_avg_pool(f), p("route.weight"), p("route.bias")))
    n, c, h, w = f.shape
    cout = experts.shape[1]
    mixed = mix_kernels(alpha, experts)  # n, cout, c, 3, 3
    y = conv2d(reshape(f, (1, n * c, h, w)), reshape(mixed, (n * cout, c, 3, 3)), pad=1, groups=n)
    return relu(reshape(y, (n, cout, h, w))) + f, alpha


def trunk_forward(x: Tensor, params: dict[str, Tensor], bn: dict[str, BatchNormState], training: bool,
                  momentum: float = 0.9, eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 4 or x.shape[1:] != (1, INPUT_SIZE, INPUT_SIZE):
        raise ValueError(f"trunk expects N x 1 x {INPUT_SIZE} x {INPUT_SIZE} patches, got {x.shape}")
    f1, _ = condconv_block(x, params, "block1", bn["block1.bn"], training, momentum, eps)
    t = conv2d(f1, params["trans1.weight"], params["trans1.bias"], stride=2)
    f2, _ = condconv_block(t, params, "block2", bn["block2.bn"], training, momentum, eps)
    t = conv2d(f2, params["trans2.weight"], params["trans2.bias"], stride=2)
    f3, _ = condconv_block(t, params, "block3", bn["block3.bn"], training, momentum, eps)
    return f1, f2, f3


def dimension_match(f1: Tensor, f2: Tensor, f3: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    d1 = conv2d(f1, params["dim1.weight"], params["dim1.bias"], stride=4)
    d2 = conv2d(f2, params["dim2.weight"], params["dim2.bias"], stride=2)
    d3 = conv2d(f3, params["dim3.weight"], params["dim3.bias"], stride=1)
    if not d1.shape == d2.shape == d3.shape:
        raise ValueError(f"dimension match produced {d1.shape}, {d2.shape}, {d3.shape}")
    return d1, d2, d3


def af_fuse(d1: Tensor, d2: Tensor, d3: Tensor, params: dict[str, Tensor]):
    """Channel-attention fusion of three matched maps.

    Returns the fused map and the attention vectors (a, b, c), each N x C,
    with a + b + c = 1 per channel.
    """
    fused = d1 + d2 + d3
    z = relu(fully_connected(global_avg_pool(fused), params["af.squeeze.weight"], params["af.squeeze.bias"]))
    n, c = fused.shape[:2]
    logits = concat(
        [fully_connected(z, params[f"af.head{h}.weight"], params[f"af.head{h}.bias"]) for h in (1, 2, 3)],
        axis=1,
    )
    att = softmax(reshape(logits, (n, 3, c)), axis=1)
    a, b, cc = att[:, 0, :], att[:, 1, :], att[:, 2, :]
    fv = channel_scale(d1, a) + channel_scale(d2, b) + channel_scale(d3, cc)
    return fv, (a, b, cc)


def correlation_layer(fv1: Tensor, fv2: Tensor) -> Tensor:
    """Per-channel spatial inner product; (N, C, H, W) x 2 -> (N, C)."""
    if fv1.shape != fv2.shape:
        raise ValueError(f"correlation: {fv1.shape} vs {fv2.shape}")
    return tsum(fv1 * fv2, axis=(2, 3))


def correlation_grouped(fv1: Tensor, fv2: Tensor) -> Tensor:
    """Same quantity built as a grouped convolution, one group per (sample, channel)."""
    n, c, h, w = fv1.shape
    out = conv2d(reshape(fv1, (1, n * c, h, w)), reshape(fv2, (n * c, 1, h, w)), groups=n * c)
    return reshape(out, (n, c))


def project_features(fv1: Tensor, fv2: Tensor, params: dict[str, Tensor], mode: str = "gap") -> tuple[Tensor, Tensor]:
    p1 = conv2d(fv1, params["proj1.weight"])
    p2 = conv2d(fv2, params["proj2.weight"])
    if mode == "gap":
        return global_avg_pool(p1), global_avg_pool(p2)
    n = p1.shape[0]
    return reshape(p1, (n, -1)), reshape(p2, (n, -1))


def classify(fc: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Softmax class probabilities; column 1 is the change probability."""
    return softmax(fully_connected(fc, params["cls.weight"], params["cls.bias"]), axis=1)


# full network ---------------------------------------------------------------

@dataclass
class SAFNet:
    config: ModelConfig = field(default_factory=ModelConfig)
    dtype: type = np.float32

    def __post_init__(self):
        self.params, self.bn = init_params(self.config, self.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def branch(self, x: Tensor, training: bool) -> Branch:
        cfg = self.config
        levels = trunk_forward(x, self.params, self.bn, training, cfg.bn_momentum, cfg.bn_eps)
        d1, d2, d3 = dimension_match(*levels, self.params)
        if cfg.use_af:
            fv, att = af_fuse(d1, d2, d3, self.params)
        else:
            fv, att = d1 + d2 + d3, None
        return Branch(fv, levels, att)

    def forward(self, x1, x2, training: bool = False) -> Output:
        x1 = x1 if isinstance(x1, Tensor) else Tensor(x1, dtype=self.dtype)
        x2 = x2 if isinstance(x2, Tensor) else Tensor(x2, dtype=self.dtype)
        if x1.shape != x2.shape:
            raise ValueError(f"patch batches differ in shape: {x1.shape} vs {x2.shape}")
        b1 = self.branch(x1, training)
        b2 = self.branch(x2, training)
        feat0, feat1 = project_features(b1.fv, b2.fv, self.params, self.config.projection)
        if self.config.use_correlation:
            merged = correlation_layer(b1.fv, b2.fv)
        else:
            n = b1.fv.shape[0]
            cat = reshape(concat([b1.fv, b2.fv], axis=1), (n, -1))
            merged = relu(fully_connected(cat, self.params["concat_fc.weight"], self.params["concat_fc.bias"]))
        return Output(classify(merged, self.params), feat0, feat1, b1, b2)

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus BN running buffers, by name."""
        out = {n: t.data for n, t in self.params.items()}
        for n, s in self.bn.items():
            out[f"{n}.running_mean"] = s.running_mean
            out[f"{n}.running_var"] = s.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in self.params.items():
            if arrays[n].shape != t.shape:
                raise ValueError(f"{n}: shape {arrays[n].shape} != {t.shape}")
            t.data = np.array(arrays[n], dtype=self.dtype)
        for n, s in self.bn.items():
            s.running_mean = np.array(arrays[f"{n}.running_mean"], dtype=self.dtype)
            s.running_var = np.array(arrays[f"{n}.running_var"], dtype=self.dtype)
