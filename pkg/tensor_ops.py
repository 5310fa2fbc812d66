"""
Dense tensor kernels with hand-written backward passes.

Tensors are numpy arrays in (N, C, H, W) layout. Every kernel accumulates in
float64 and returns the dtype of its input: float32 in normal use, float64
when the gradient checks feed float64 data.

Conventions:
    - convolution is cross-correlation (no kernel flip), symmetric zero padding
    - max-pool windows are 3x3; ties go to the first (lowest flat index) element
    - batch-norm running stats: running = momentum * running + (1 - momentum) * batch
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError

Tensor = np.ndarray

ACC_DTYPE = np.float64
POOL_WINDOW = 3
BCE_CLAMP = 1e-7
MODES = ("train", "infer")


@dataclass
class ConvParams:
    """
    Convolution parameters.

    Attributes:
        weights: Kernel tensor of shape (out_ch, in_ch, kH, kW)
        bias: Per-output-channel bias of shape (out_ch,)
        stride: Step between output positions
        padding: Symmetric zero padding on both spatial axes
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class BatchNormParams:
    """
    Batch normalization parameters and running statistics.

    Running statistics are updated in place by batchnorm_forward in train mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> 'BatchNormParams':
        """Create gamma=1, beta=0, mean=0, var=1 parameters."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


@dataclass
class AdamState:
    """
    Adam optimizer state.

    Attributes:
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
        step_count: Number of completed update steps
        m: First-moment estimates keyed by parameter name
        v: Second-moment estimates keyed by parameter name
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PoolIndices:
    """Winning input position of every max-pool window, for backward routing."""

    indices: np.ndarray  # (N, C, Ho, Wo) flat index into the H*W input plane
    input_shape: Tuple[int, int, int, int]
    stride: int


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_shape(input_shape: Tuple[int, ...], p: ConvParams) -> Tuple[int, int, int, int]:
    """
    Validate a convolution and compute its output shape.

    Args:
        input_shape: Shape of the (N, C, H, W) input
        p: Convolution parameters

    Returns:
        Output shape (N, out_ch, Ho, Wo)

    Raises:
        DimensionError: On any rank, channel or extent mismatch
    """
    if len(input_shape) != 4:
        raise DimensionError(f"conv2d expects a (N, C, H, W) input, got shape {tuple(input_shape)}")
    if p.weights.ndim != 4:
        raise DimensionError(f"conv2d weights must be (out_ch, in_ch, kH, kW), got {p.weights.shape}")
    out_ch, in_ch, kh, kw = p.weights.shape
    n, c, h, w = input_shape
    if c != in_ch:
        raise DimensionError(f"conv2d input has {c} channels but weights expect {in_ch}")
    if p.bias.shape != (out_ch,):
        raise DimensionError(f"conv2d bias shape {p.bias.shape} does not match {out_ch} output channels")
    if p.stride < 1 or p.padding < 0:
        raise DimensionError(f"invalid stride {p.stride} / padding {p.padding}")
    hp, wp = h + 2 * p.padding, w + 2 * p.padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"padded input {hp}x{wp} is smaller than the {kh}x{kw} kernel"
        )
    return n, out_ch, (hp - kh) // p.stride + 1, (wp - kw) // p.stride + 1


def _im2col(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (N, C, H, W) into float64 columns of shape (N, Ho, Wo, C*kh*kw)."""
    x = x.astype(ACC_DTYPE, copy=False)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


def conv2d_forward(input: Tensor, p: ConvParams) -> Tensor:
    """
    2-D cross-correlation with bias.

    Args:
        input: Tensor of shape (N, C, H, W)
        p: Convolution parameters

    Returns:
        Tensor of shape (N, out_ch, (H+2*pad-kH)/stride+1, (W+2*pad-kW)/stride+1)
    """
    conv_output_shape(input.shape, p)
    out_ch, _, kh, kw = p.weights.shape
    cols = _im2col(input, kh, kw, p.stride, p.padding)
    kernel = p.weights.reshape(out_ch, -1).astype(ACC_DTYPE)
    out = cols @ kernel.T + p.bias.astype(ACC_DTYPE)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=input.dtype)


def conv2d_backward(
    input: Tensor,
    p: ConvParams,
    grad_out: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of sum(grad_out * conv2d_forward(input, p)).

    Args:
        input: Forward input (N, C, H, W)
        p: Forward parameters
        grad_out: Upstream gradient, same shape as the forward output

    Returns:
        Tuple of (grad_input, grad_weights, grad_bias)
    """
    expected = conv_output_shape(input.shape, p)
    if tuple(grad_out.shape) != expected:
        raise DimensionError(f"conv2d grad_out shape {grad_out.shape} != forward output {expected}")

    n, c, h, w = input.shape
    out_ch, _, kh, kw = p.weights.shape
    _, _, ho, wo = expected
    s, pad = p.stride, p.padding

    cols = _im2col(input, kh, kw, s, pad)
    g = grad_out.astype(ACC_DTYPE).transpose(0, 2, 3, 1).reshape(-1, out_ch)

    grad_w = (g.T @ cols.reshape(-1, cols.shape[-1])).reshape(p.weights.shape)
    grad_b = g.sum(axis=0)

    dcols = (g @ p.weights.reshape(out_ch, -1).astype(ACC_DTYPE)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=ACC_DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dx[:, :, pad:pad + h, pad:pad + w]

    return (
        np.ascontiguousarray(dx, dtype=input.dtype),
        grad_w.astype(p.weights.dtype),
        grad_b.astype(p.bias.dtype),
    )


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def maxpool3x3(input: Tensor, stride: int) -> Tuple[Tensor, PoolIndices]:
    """
    3x3 max pooling without padding.

    Args:
        input: Tensor of shape (N, C, H, W), H and W at least 3
        stride: Step between windows

    Returns:
        Tuple of (output with spatial extents floor((D-3)/stride)+1, PoolIndices)
    """
    if input.ndim != 4:
        raise DimensionError(f"maxpool expects a (N, C, H, W) input, got shape {input.shape}")
    if stride < 1:
        raise DimensionError(f"maxpool stride must be positive, got {stride}")
    n, c, h, w = input.shape
    if h < POOL_WINDOW or w < POOL_WINDOW:
        raise DimensionError(f"maxpool input {h}x{w} is smaller than the 3x3 window")

    windows = sliding_window_view(input, (POOL_WINDOW, POOL_WINDOW), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, POOL_WINDOW * POOL_WINDOW)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = (np.arange(ho) * stride)[:, None] + arg // POOL_WINDOW
    cols = (np.arange(wo) * stride)[None, :] + arg % POOL_WINDOW
    indices = PoolIndices(indices=rows * w + cols, input_shape=(n, c, h, w), stride=stride)
    return np.ascontiguousarray(out), indices


def maxpool_backward(argmax_indices: PoolIndices, grad_out: Tensor) -> Tensor:
    """
    Route grad_out to the recorded argmax positions, summing on collision.

    Raises:
        DimensionError: If grad_out does not match the indices (stale indices)
    """
    if tuple(grad_out.shape) != tuple(argmax_indices.indices.shape):
        raise DimensionError(
            f"maxpool grad_out shape {grad_out.shape} does not match "
            f"indices shape {argmax_indices.indices.shape}"
        )
    n, c, h, w = argmax_indices.input_shape
    plane = argmax_indices.indices.shape[2] * argmax_indices.indices.shape[3]
    grad_in = np.zeros((n * c, h * w), dtype=ACC_DTYPE)
    rows = np.repeat(np.arange(n * c), plane)
    np.add.at(grad_in, (rows, argmax_indices.indices.reshape(-1)), grad_out.reshape(-1).astype(ACC_DTYPE))
    return grad_in.reshape(n, c, h, w).astype(grad_out.dtype)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(input: Tensor, p: BatchNormParams) -> Tuple[Tuple[int, ...], list]:
    if input.ndim < 2:
        raise DimensionError(f"batchnorm expects at least (N, C), got shape {input.shape}")
    channels = p.gamma.shape[0]
    if input.shape[1] != channels:
        raise DimensionError(f"batchnorm input has {input.shape[1]} channels, parameters have {channels}")
    axes = (0,) + tuple(range(2, input.ndim))
    shape = [1, channels] + [1] * (input.ndim - 2)
    return axes, shape


def batchnorm_forward(input: Tensor, p: BatchNormParams, mode: str) -> Tensor:
    """
    Per-channel normalization followed by scale and shift.

    Train mode normalizes by batch statistics over every axis except the
    channel axis and updates p's running statistics in place. Infer mode
    normalizes by the running statistics.
    """
    if mode not in MODES:
        raise ValueError(f'Invalid batchnorm mode "{mode}"')
    axes, shape = _bn_axes(input, p)
    x = input.astype(ACC_DTYPE)

    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        p.running_mean[...] = p.momentum * p.running_mean.astype(ACC_DTYPE) + (1.0 - p.momentum) * mean
        p.running_var[...] = p.momentum * p.running_var.astype(ACC_DTYPE) + (1.0 - p.momentum) * var
    else:
        mean = p.running_mean.astype(ACC_DTYPE)
        var = p.running_var.astype(ACC_DTYPE)

    x_hat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + p.epsilon)
    out = x_hat * p.gamma.astype(ACC_DTYPE).reshape(shape) + p.beta.astype(ACC_DTYPE).reshape(shape)
    return out.astype(input.dtype)


def batchnorm_backward(
    input: Tensor,
    p: BatchNormParams,
    grad_out: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of a train-mode batchnorm_forward call.

    Returns:
        Tuple of (grad_input, grad_gamma, grad_beta)
    """
    axes, shape = _bn_axes(input, p)
    if grad_out.shape != input.shape:
        raise DimensionError(f"batchnorm grad_out shape {grad_out.shape} != input shape {input.shape}")

    x = input.astype(ACC_DTYPE)
    g = grad_out.astype(ACC_DTYPE)
    count = x.size // x.shape[1]

    mean = x.mean(axis=axes).reshape(shape)
    inv_std = 1.0 / np.sqrt(x.var(axis=axes).reshape(shape) + p.epsilon)
    x_hat = (x - mean) * inv_std

    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * x_hat).sum(axis=axes)
    d_xhat = g * p.gamma.astype(ACC_DTYPE).reshape(shape)
    dx = inv_std / count * (
        count * d_xhat
        - d_xhat.sum(axis=axes, keepdims=True)
        - x_hat * (d_xhat * x_hat).sum(axis=axes, keepdims=True)
    )
    return dx.astype(input.dtype), grad_gamma.astype(p.gamma.dtype), grad_beta.astype(p.beta.dtype)


# ---------------------------------------------------------------------------
# Dense, activations, loss
# ---------------------------------------------------------------------------

def _dense_check(input: Tensor, weights: Tensor) -> np.ndarray:
    if weights.ndim != 2:
        raise DimensionError(f"dense weights must be (out, in), got {weights.shape}")
    x = input.reshape(input.shape[0], -1)
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"dense input has {x.shape[1]} features per sample, weights expect {weights.shape[1]}"
        )
    return x


def dense_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map y = W x + b over flattened samples; weights are (out, in)."""
    x = _dense_check(input, weights)
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    out = x.astype(ACC_DTYPE) @ weights.astype(ACC_DTYPE).T + bias.astype(ACC_DTYPE)
    return out.astype(input.dtype)


def dense_backward(
    input: Tensor,
    weights: Tensor,
    grad_out: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of sum(grad_out * dense_forward(input, weights, bias)).

    Returns:
        Tuple of (grad_input shaped like input, grad_weights, grad_bias)
    """
    x = _dense_check(input, weights).astype(ACC_DTYPE)
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise DimensionError(f"dense grad_out shape {grad_out.shape} != {(x.shape[0], weights.shape[0])}")
    g = grad_out.astype(ACC_DTYPE)
    dx = (g @ weights.astype(ACC_DTYPE)).reshape(input.shape)
    return dx.astype(input.dtype), (g.T @ x).astype(weights.dtype), g.sum(axis=0).astype(weights.dtype)


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.where(input > 0, input, 0).astype(input.dtype)


def relu_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    """Mask grad_out by input > 0 (subgradient 0 at 0)."""
    return np.where(input > 0, grad_out, 0).astype(grad_out.dtype)


def softmax(logits: Tensor) -> Tensor:
    """Numerically stable softmax over axis 1 (the class axis)."""
    z = logits.astype(ACC_DTYPE)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype)


def bce_loss(probabilities: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """
    Binary cross-entropy on two-class softmax output.

    Args:
        probabilities: Softmax output of shape (N, 2)
        labels: Integer labels in {0, 1} of shape (N,)

    Returns:
        Tuple of (mean -log p(true class) with p clamped to [1e-7, 1-1e-7],
        fused softmax+BCE gradient w.r.t. the logits, (p - onehot) / N)
    """
    labels = np.asarray(labels)
    if probabilities.ndim != 2 or probabilities.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"bce_loss got probabilities {probabilities.shape} for {labels.shape[0]} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probabilities.shape[1]):
        raise DimensionError("bce_loss labels must be class indices in {0, 1}")

    n = labels.shape[0]
    idx = labels.astype(np.int64)
    p = probabilities.astype(ACC_DTYPE)
    p_true = np.clip(p[np.arange(n), idx], BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(-np.log(p_true).mean())

    onehot = np.zeros_like(p)
    onehot[np.arange(n), idx] = 1.0
    grad = (p - onehot) / n
    return loss, grad.astype(probabilities.dtype)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: AdamState
) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    One bias-corrected Adam update, applied in place to every parameter in grads.

    Args:
        params: Parameter tensors keyed by name
        grads: Gradients for the parameters to update (subset of params)
        state: Optimizer state; step_count is incremented

    Returns:
        Tuple of (params, state)
    """
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    for name in sorted(grads):
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter '{name}'")
        param = params[name]
        g = grads[name].astype(ACC_DTYPE)
        if g.shape != param.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter '{name}' shape {param.shape}")

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=ACC_DTYPE)
            v = np.zeros(param.shape, dtype=ACC_DTYPE)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v

        step = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param[...] = param.astype(ACC_DTYPE) - step

    return params, state
