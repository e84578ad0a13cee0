"""Spatio-temporal graph convolutional network.

Layout: ``n_blocks`` ST-Conv blocks, each a gated temporal convolution, a
spatial graph convolution and a second gated temporal convolution, then an
output layer whose gated temporal convolution spans the remaining time axis
and whose fully-connected map (shared by every node) emits ``horizon_steps``
values per station.

The spatial convolution defaults to the single renormalised operator ``p``
(``spatial_order = 1``).  Higher orders mix ``K`` Chebyshev terms of ``p``,
``T0 = I, T1 = p, Tk = 2 p T(k-1) - T(k-2)``, each with its own weights, which
keeps a separate self term on dense graphs.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError
from .graph import PropagationOperator


@dataclass(frozen=True)
class STGCNConfig:
    n_nodes: int
    history_steps: int = 12
    horizon_steps: int = 1
    temporal_kernel: int = 3
    channels: tuple[int, int, int, int] = (1, 32, 16, 32)
    n_blocks: int = 1
    spatial_order: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ParameterError(f"channels must be four positive ints, got {self.channels}")
        if self.n_nodes < 1 or self.horizon_steps < 1 or self.n_blocks < 1:
            raise ParameterError("n_nodes, horizon_steps and n_blocks must be >= 1")
        if self.temporal_kernel < 1:
            raise ParameterError("temporal_kernel must be >= 1")
        if self.spatial_order < 1:
            raise ParameterError("spatial_order must be >= 1")
        if self.remaining_steps < 1:
            raise ParameterError(
                f"history of {self.history_steps} steps does not survive "
                f"{self.n_blocks} block(s) with temporal kernel {self.temporal_kernel}"
            )

    @property
    def remaining_steps(self) -> int:
        """Time length entering the output layer."""
        return self.history_steps - self.n_blocks * 2 * (self.temporal_kernel - 1)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def param_shapes(config: STGCNConfig) -> OrderedDict[str, tuple[int, ...]]:
    """Every learnable tensor in checkpoint order."""
    c_in, c_t1, c_s, c_t2 = config.channels
    kt = config.temporal_kernel
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for k in range(config.n_blocks):
        first_in = c_in if k == 0 else c_t2
        shapes[f"block{k}.temporal1.kernel"] = (kt, first_in, 2 * c_t1)
        shapes[f"block{k}.temporal1.bias"] = (2 * c_t1,)
        if config.spatial_order == 1:
            shapes[f"block{k}.spatial.theta"] = (c_t1, c_s)
        else:
            for j in range(config.spatial_order):
                shapes[f"block{k}.spatial.theta{j}"] = (c_t1, c_s)
        shapes[f"block{k}.spatial.bias"] = (c_s,)
        shapes[f"block{k}.temporal2.kernel"] = (kt, c_s, 2 * c_t2)
        shapes[f"block{k}.temporal2.bias"] = (2 * c_t2,)
    shapes["output.temporal.kernel"] = (config.remaining_steps, c_t2, 2 * c_t2)
    shapes["output.temporal.bias"] = (2 * c_t2,)
    shapes["output.fc.weight"] = (c_t2, config.horizon_steps)
    shapes["output.fc.bias"] = (config.horizon_steps,)
    return shapes


def param_count(config: STGCNConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


ModelParams = OrderedDict  # name -> Tensor, ordered as param_shapes


def init_params(config: STGCNConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    params: ModelParams = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            if len(shape) == 3:
                fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def temporal_gated_conv(x, kernel, bias) -> Tensor:
    return ad.glu(ad.conv1d_time(x, kernel, bias))


def spatial_graph_conv(x, p, theta, bias) -> Tensor:
    """``relu(p @ x_slice @ theta + bias)`` for every (batch, time) slice.

    ``theta`` may instead be a sequence of K weight matrices, one per
    Chebyshev term of ``p``.
    """
    x = ad.as_tensor(x)
    p_data = p.p if isinstance(p, PropagationOperator) else p
    p_t = ad.as_tensor(p_data)
    if x.ndim != 4 or p_t.shape != (x.shape[2], x.shape[2]):
        raise ShapeError(f"spatial_graph_conv: operator {p_t.shape} vs input {x.shape}")
    if isinstance(theta, (list, tuple)):
        terms = [x, ad.graph_mix(p_t, x)]
        while len(terms) < len(theta):
            terms.append(ad.sub(2.0 * ad.graph_mix(p_t, terms[-1]), terms[-2]))
        mixed = ad.matmul(terms[0], theta[0])
        for term, th in zip(terms[1:len(theta)], theta[1:]):
            mixed = ad.add(mixed, ad.matmul(term, th))
    else:
        mixed = ad.matmul(ad.graph_mix(p_t, x), theta)
    return ad.relu(ad.add(mixed, bias))


def st_conv_block(x, p, params: ModelParams, k: int = 0) -> Tensor:
    pre = f"block{k}"
    h = temporal_gated_conv(x, params[f"{pre}.temporal1.kernel"], params[f"{pre}.temporal1.bias"])
    if f"{pre}.spatial.theta" in params:
        theta = params[f"{pre}.spatial.theta"]
    else:
        theta = [t for name, t in params.items() if name.startswith(f"{pre}.spatial.theta")]
    h = spatial_graph_conv(h, p, theta, params[f"{pre}.spatial.bias"])
    return temporal_gated_conv(h, params[f"{pre}.temporal2.kernel"], params[f"{pre}.temporal2.bias"])


def output_layer(x, params: ModelParams) -> Tensor:
    """Collapse time with a gated convolution, then map channels to the horizon."""
    x = ad.as_tensor(x)
    kernel = params["output.temporal.kernel"]
    if x.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(
            f"output layer: temporal kernel spans {kernel.shape[0]} steps, input has shape {x.shape}")
    h = temporal_gated_conv(x, kernel, params["output.temporal.bias"])  # [B, 1, N, C]
    b, _, n, _ = h.shape
    y = ad.add(ad.matmul(h, params["output.fc.weight"]), params["output.fc.bias"])  # [B, 1, N, H]
    horizon = y.shape[-1]
    return ad.transpose(ad.reshape(y, (b, n, horizon)), (0, 2, 1))


def forward(x, p, params: ModelParams, config: STGCNConfig) -> Tensor:
    """``[B, M, N, c_in]`` history to ``[B, H, N]`` forecast (normalised units)."""
    x = ad.as_tensor(x, dtype=params["output.fc.bias"].dtype)
    expect = (config.history_steps, config.n_nodes, config.channels[0])
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"input: expected [B, {expect[0]}, {expect[1]}, {expect[2]}], got {x.shape}")
    p_data = p.p if isinstance(p, PropagationOperator) else np.asarray(p)
    p_t = Tensor(p_data.astype(x.dtype, copy=False))
    h = x
    for k in range(config.n_blocks):
        try:
            h = st_conv_block(h, p_t, params, k)
        except ShapeError as exc:
            raise ShapeError(f"block{k}: {exc}") from None
    try:
        return output_layer(h, params)
    except ShapeError as exc:
        raise ShapeError(f"output: {exc}") from None


class STGCN:
    """Config plus parameters, with flat-vector access for checkpoints."""

    def __init__(self, config: STGCNConfig, params: ModelParams | None = None, seed: int = 0,
                 dtype=np.float64) -> None:
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        shapes = param_shapes(config)
        if list(self.params) != list(shapes) or any(
                self.params[k].shape != s for k, s in shapes.items()):
            raise ShapeError("parameter set does not match the configuration")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, x, p) -> Tensor:
        return forward(x, p, self.params, self.config)

    def predict(self, x, p) -> np.ndarray:
        return self(x, p).data

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.astype(np.float64).reshape(-1) for t in self.params.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != param_count(self.config):
            raise ShapeError(f"parameter payload has {vec.size} values, expected {param_count(self.config)}")
        off = 0
        for t in self.params.values():
            n = t.data.size
            t.data[...] = vec[off:off + n].reshape(t.shape)
            off += n

    def snapshot(self) -> ModelParams:
        return OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items())

    def restore(self, snap: ModelParams) -> None:
        for k, v in snap.items():
            self.params[k].data[...] = v.data
