"""Bit-exact functional model of fixed-point CNN training.

Arrays follow numpy (channel, y, x) order so that x varies fastest, matching
the linear order used in DRAM images; kernels are (Nof, Nif, Nky, Nkx).
Batched helpers take a leading image axis.

Every kernel accumulates in float64.  Operands are 16-bit raw integers, so all
partial sums are integers well below 2**53 and the float64 result is exact;
the accumulator range check in `fxp.exact_dot_check` guards the 48-bit limit.
The same kernels run on real-valued arrays when driven by `FloatShadow`, which
is how gradients are checked against finite differences.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fxp
from .fxp import NearestEven, QFormat, RoundingMode, SaturationCounter
from .model import LayerKind, LayerSpec, LossKind, NetworkSpec, NumericsSpec

# phase codes used in stochastic-rounding keys
FP, BP, WU, UPD = 0, 1, 2, 3


@dataclass
class FxpTensor:
    """Raw 16-bit values plus their format; `raw` is stored as int16."""

    raw: np.ndarray
    fmt: QFormat

    def __post_init__(self):
        r = np.asarray(self.raw)
        if r.dtype != np.int16:
            if r.size and (r.min() < fxp.RAW_MIN or r.max() > fxp.RAW_MAX):
                raise ValueError("tensor values do not fit in 16 bits")
            r = r.astype(np.int16)
        self.raw = r

    @property
    def dims(self) -> tuple[int, ...]:
        """Extents in (x, y, channel[, filter]) order."""
        return tuple(reversed(self.raw.shape))

    @property
    def real(self) -> np.ndarray:
        return fxp.to_real(self.raw, self.fmt)

    @classmethod
    def from_real(cls, x, fmt: QFormat, mode: RoundingMode = NearestEven()):
        return cls(fxp.quantize_real(x, fmt, mode), fmt)

    def __eq__(self, other):
        return (isinstance(other, FxpTensor) and self.fmt == other.fmt
                and self.raw.shape == other.raw.shape and np.array_equal(self.raw, other.raw))


# ---------------------------------------------------------------------------
# Numerics policies
# ---------------------------------------------------------------------------

class FixedPoint:
    """Raw-integer arithmetic with rounding and saturation at every writeback."""

    exact = True

    def __init__(self, numerics: NumericsSpec = NumericsSpec(), seed: int = 0,
                 counter: SaturationCounter | None = None):
        self.numerics = numerics
        self.mode = numerics.rounding_mode(seed)
        self.counter = counter if counter is not None else SaturationCounter()

    def frac(self, fmt: QFormat) -> int:
        return fmt.frac_bits

    def narrow(self, acc, acc_frac: int, fmt: QFormat, key=(), index=None) -> np.ndarray:
        acc = np.asarray(acc)
        if acc.dtype.kind == "f":
            fxp.exact_dot_check(acc)
            acc = acc.astype(np.int64)
        return fxp.requantize_array(acc, acc_frac, fmt, self.mode, self.counter, key, index)

    def saturate(self, raw) -> np.ndarray:
        return fxp.saturate(raw, self.counter)

    def constant(self, x: float, fmt: QFormat) -> int:
        return int(fxp.quantize_real(np.array([x]), fmt)[0])


class FloatShadow:
    """Real arithmetic through the same kernels; narrowing is the identity."""

    exact = False

    def __init__(self, numerics: NumericsSpec = NumericsSpec(), *_, **__):
        self.numerics = numerics
        self.counter = SaturationCounter()

    def frac(self, fmt: QFormat) -> int:
        return 0

    def narrow(self, acc, acc_frac, fmt, key=(), index=None):
        return np.asarray(acc, dtype=np.float64)

    def saturate(self, raw):
        return np.asarray(raw, dtype=np.float64)

    def constant(self, x, fmt):
        return float(x)


def _shift(x, bits: int):
    """Exact multiplication by 2**bits (bits >= 0) for either numerics policy."""
    return x * (1 << bits) if bits else x


# ---------------------------------------------------------------------------
# Batched accumulation kernels (return un-narrowed float64 sums)
# ---------------------------------------------------------------------------

def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def correlate(a: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """out[n,f,y,x] = sum_c,ky,kx w[f,c,ky,kx] * a[n,c,y*s+ky-pad,x*s+kx-pad]."""
    a = _pad_hw(np.asarray(a, dtype=np.float64), pad)
    w = np.asarray(w, dtype=np.float64)
    kh, kw = w.shape[2:]
    win = sliding_window_view(a, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def dilate_for_transpose(d: np.ndarray, in_hw, k_hw, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Stride-dilated gradient placed at offset (k-1-pad), clipped to (in + k - 1) extents."""
    n, f, oh, ow = d.shape
    kh, kw = k_hw
    ih, iw = in_hw
    buf = np.zeros((n, f, ih + kh - 1, iw + kw - 1))
    ys = kh - 1 - pad + stride * np.arange(oh)
    xs = kw - 1 - pad + stride * np.arange(ow)
    vy = (ys >= 0) & (ys < buf.shape[2])
    vx = (xs >= 0) & (xs < buf.shape[3])
    buf[:, :, ys[vy][:, None], xs[vx][None, :]] = np.asarray(d, dtype=np.float64)[:, :, vy][:, :, :, vx]
    return buf


def correlate_transpose(d: np.ndarray, w: np.ndarray, in_hw, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Data gradient of `correlate`: flipped kernels with input/output channels swapped."""
    buf = dilate_for_transpose(d, in_hw, w.shape[2:], stride, pad)
    return correlate(buf, flip_swap(w), 1, 0)


def correlate_weights(a: np.ndarray, d: np.ndarray, k_hw, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Per-image kernel gradients: out[n,f,c,ky,kx] = sum_y,x d[n,f,y,x] a[n,c,y*s+ky-pad,x*s+kx-pad]."""
    a = _pad_hw(np.asarray(a, dtype=np.float64), pad)
    d = np.asarray(d, dtype=np.float64)
    n, c = a.shape[:2]
    f, oh, ow = d.shape[1:]
    kh, kw = k_hw
    span_y, span_x = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    win = sliding_window_view(a, (span_y, span_x), axis=(2, 3))[:, :, :kh, :kw, ::stride, ::stride]
    cols = win.reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(d.reshape(n, f, oh * ow), cols.transpose(0, 2, 1))
    return out.reshape(n, f, c, kh, kw)


def flip_swap(w: np.ndarray) -> np.ndarray:
    """(Nof, Nif, Nky, Nkx) kernels rotated 180 degrees with channel roles swapped."""
    return np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def pool_windows(a: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def maxpool_batch(a: np.ndarray, k: int):
    win = pool_windows(a, k)
    idx = np.argmax(win, axis=-1)  # first maximum wins ties
    return np.take_along_axis(win, idx[..., None], -1)[..., 0], idx


def upsample_batch(d: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    n, c, oh, ow = d.shape
    if idx.size and (idx.min() < 0 or idx.max() >= k * k):
        raise IndexError(f"pool index outside [0, {k * k - 1}]")
    win = np.zeros((n, c, oh, ow, k * k), dtype=d.dtype)
    np.put_along_axis(win, idx[..., None], d[..., None], -1)
    return win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss_terms(scores, labels, kind: LossKind, arith, act_fmt: QFormat, grad_fmt: QFormat, key=(), index=None):
    """Per-image loss values (float) and narrowed score gradients (N, classes)."""
    scores = np.asarray(scores)
    n, k = scores.shape
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label outside [0, {k - 1}]")
    fa = arith.frac(act_fmt)
    one = 1 << fa
    onehot = np.zeros((n, k), dtype=scores.dtype)
    onehot[np.arange(n), labels] = 1
    if kind == LossKind.EUCLIDEAN:
        diff = scores - onehot * one
        grad = diff
        loss = 0.5 * np.sum(diff.astype(np.float64) ** 2, axis=1) / float(one) ** 2
    else:
        t = 2 * onehot - 1
        margin = np.maximum(0, one - t * scores)
        grad = -2 * t * margin
        loss = np.sum(margin.astype(np.float64) ** 2, axis=1) / float(one) ** 2
    return loss, arith.narrow(grad, fa, grad_fmt, key, index)


# ---------------------------------------------------------------------------
# Network state and the training step
# ---------------------------------------------------------------------------

@dataclass
class LayerState:
    weights: FxpTensor
    momentum_grad: FxpTensor


@dataclass
class LayerRecord:
    """What forward keeps for backward: saved input, ReLU mask, pool indices."""

    saved_input: np.ndarray
    output: np.ndarray | None = None
    relu_mask: np.ndarray | None = None
    pool_indices: np.ndarray | None = None


@dataclass
class TrainState:
    net: NetworkSpec
    layers: dict[int, LayerState]
    step: int = 0
    saturation: SaturationCounter = field(default_factory=SaturationCounter)

    def params(self) -> dict[int, np.ndarray]:
        return {i: s.weights.raw.astype(np.int64) for i, s in self.layers.items()}

    def momenta(self) -> dict[int, np.ndarray]:
        return {i: s.momentum_grad.raw.astype(np.int64) for i, s in self.layers.items()}

    def copy(self) -> "TrainState":
        layers = {i: LayerState(FxpTensor(s.weights.raw.copy(), s.weights.fmt),
                                FxpTensor(s.momentum_grad.raw.copy(), s.momentum_grad.fmt))
                  for i, s in self.layers.items()}
        return TrainState(self.net, layers, self.step, SaturationCounter(self.saturation.count))

    def same_weights(self, other: "TrainState") -> bool:
        return (self.layers.keys() == other.layers.keys()
                and all(self.layers[i].weights == other.layers[i].weights
                        and self.layers[i].momentum_grad == other.layers[i].momentum_grad
                        for i in self.layers))


def init_state(net: NetworkSpec, seed: int | None = None, zero: bool = False) -> TrainState:
    """He-style uniform init in +-sqrt(6 / fan_in), quantized with nearest-even."""
    seed = net.seed if seed is None else seed
    fw, fg = net.numerics.weights, net.numerics.weight_grads
    layers = {}
    for i, layer in net.trainable_layers:
        shape = layer.weight_shape
        if zero:
            w = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (layer.nif * layer.nkx * layer.nky))
            w = np.random.default_rng([seed, i]).uniform(-bound, bound, size=shape)
        layers[i] = LayerState(FxpTensor.from_real(w, fw), FxpTensor(np.zeros(shape, np.int16), fg))
    return TrainState(net, layers)


def init_float_params(state: TrainState) -> dict[int, np.ndarray]:
    return {i: s.weights.real.copy() for i, s in state.layers.items()}


def forward(net: NetworkSpec, params: dict, x: np.ndarray, arith, step: int = 0):
    """Forward pass of a batch; returns (records per layer index, scores (N, classes))."""
    num = net.numerics
    fa, fw = arith.frac(num.activations), arith.frac(num.weights)
    records: dict[int, LayerRecord] = {}
    a = x
    for i, layer in net.compute_layers:
        rec = LayerRecord(saved_input=a)
        if layer.kind in (LayerKind.CONV, LayerKind.FC):
            a_in = a.reshape(a.shape[0], *layer.in_array_shape)
            acc = correlate(a_in, params[i], layer.stride, layer.pad)
            a = arith.narrow(acc, fa + fw, num.activations, (step, i, FP))
            if layer.relu:
                rec.relu_mask = a > 0
                a = np.where(rec.relu_mask, a, 0)
        elif layer.kind == LayerKind.MAXPOOL:
            a, rec.pool_indices = maxpool_batch(a, layer.pool_window)
        elif layer.kind == LayerKind.FLATTEN:
            a = a.reshape(a.shape[0], -1, 1, 1)
        rec.output = a
        records[i] = rec
    return records, a.reshape(a.shape[0], -1)


def backward(net: NetworkSpec, params: dict, records: dict, grad_scores: np.ndarray, arith,
             step: int = 0, first_layer_bp: bool = False) -> dict[int, np.ndarray]:
    """Backward pass; returns narrowed per-image weight gradients (N, Nof, Nif, Nky, Nkx)."""
    num = net.numerics
    fa, fw, fd = arith.frac(num.activations), arith.frac(num.weights), arith.frac(num.local_grads)
    grads: dict[int, np.ndarray] = {}
    layers = net.compute_layers
    first_trainable = net.trainable_layers[0][0]
    # gradient w.r.t. the post-activation output of the current layer
    g = grad_scores.reshape(grad_scores.shape[0], *layers[-1][1].out_array_shape)
    for i, layer in reversed(layers):
        rec = records[i]
        n = g.shape[0]
        if layer.trainable:
            delta = g.reshape(n, *layer.out_array_shape)
            if layer.relu:
                delta = np.where(rec.relu_mask.reshape(delta.shape), delta, 0)
            a_in = rec.saved_input.reshape(n, *layer.in_array_shape)
            acc = correlate_weights(a_in, delta, (layer.nky, layer.nkx), layer.stride, layer.pad)
            grads[i] = arith.narrow(acc, fd + fa, num.weight_grads, (step, i, WU))
            if i == first_trainable and not first_layer_bp:
                break
            acc = correlate_transpose(delta, params[i], (layer.niy, layer.nix), layer.stride, layer.pad)
            g = arith.narrow(acc, fd + fw, num.local_grads, (step, i, BP))
        elif layer.kind == LayerKind.MAXPOOL:
            g = upsample_batch(g.reshape(n, *layer.out_array_shape), rec.pool_indices, layer.pool_window)
        elif layer.kind == LayerKind.FLATTEN:
            g = g.reshape(n, *layer.in_array_shape)
        if i == 0:
            break
    return grads


def accumulate_gradients(per_image: np.ndarray, arith, start=None) -> np.ndarray:
    """Sequential per-image accumulation with 16-bit saturation after each add."""
    total = np.zeros(per_image.shape[1:], dtype=per_image.dtype) if start is None else start
    for g in per_image:
        total = arith.saturate(total + g)
    return total


def sgd_update_arrays(w, dw_sum, dw_prev, lr, beta, batch_size, arith, numerics: NumericsSpec, key=()):
    """Batch-averaged SGD with momentum on raw arrays.

    Order: average (multiply by quantized 1/batch_size), scale by the quantized
    scalars, combine in the accumulator, round once to the gradient format.
    The stored momentum term is the applied weight change, so with beta = 0
    this is plain gradient descent.
    """
    fs = arith.frac(numerics.scalars)
    fg = arith.frac(numerics.weight_grads)
    fw = arith.frac(numerics.weights)
    if batch_size == 1:
        avg = dw_sum
    else:
        inv = arith.constant(1.0 / batch_size, numerics.scalars)
        avg = arith.narrow(np.asarray(dw_sum) * inv, fg + fs, numerics.weight_grads, key + (0,))
    alpha_q = arith.constant(lr, numerics.scalars)
    beta_q = arith.constant(beta, numerics.scalars)
    step_acc = beta_q * np.asarray(dw_prev) - alpha_q * np.asarray(avg)
    change = arith.narrow(step_acc, fg + fs, numerics.weight_grads, key + (1,))
    top = max(fw, fg)
    w_new = arith.narrow(_shift(np.asarray(w), top - fw) + _shift(change, top - fg), top, numerics.weights,
                         key + (2,))
    return w_new, change


def train_step(state: TrainState, images: np.ndarray, labels, first_layer_bp: bool = False):
    """One batch: FP/BP per image, 16-bit gradient accumulation, one update at batch end.

    `images` are raw activation-format integers (N, C, Y, X).  Returns the new
    state and the mean loss over the batch.
    """
    net = state.net
    num = net.numerics
    new = state.copy()
    arith = FixedPoint(num, net.seed, new.saturation)
    params = state.params()
    x = np.asarray(images, dtype=np.int64)
    records, scores = forward(net, params, x, arith, state.step)
    loss, gscores = loss_terms(scores, labels, net.loss_kind, arith, num.activations, num.local_grads,
                               (state.step, len(net.layers) - 1, BP))
    grads = backward(net, params, records, gscores, arith, state.step, first_layer_bp)
    for i, ls in new.layers.items():
        total = accumulate_gradients(grads[i], arith)
        w_new, change = sgd_update_arrays(params[i], total, ls.momentum_grad.raw.astype(np.int64),
                                          net.learning_rate, net.momentum, len(x), arith, num,
                                          (state.step, i, UPD))
        ls.weights = FxpTensor(w_new, num.weights)
        ls.momentum_grad = FxpTensor(change, num.weight_grads)
    new.step += 1
    return new, float(np.mean(loss))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic per-epoch sample order."""
    return np.random.default_rng([seed, epoch, 0x0DE5]).permutation(n)


def fit(state: TrainState, images: np.ndarray, labels, epochs: int, first_layer_bp: bool = False,
        start_epoch: int = 0, on_epoch=None) -> TrainState:
    """Train whole batches for epochs [start_epoch, epochs); the last partial batch is dropped.

    `on_epoch(epoch, state, batch_losses)` is called after every epoch.
    """
    bs = state.net.batch_size
    labels = np.asarray(labels)
    iters = len(labels) // bs
    for ep in range(start_epoch, epochs):
        order = epoch_order(state.net.seed, ep, len(labels))
        losses = []
        for b in range(iters):
            idx = order[b * bs:(b + 1) * bs]
            state, loss = train_step(state, images[idx], labels[idx], first_layer_bp)
            losses.append(loss)
        if on_epoch is not None:
            on_epoch(ep, state, losses)
    return state


def predict(state: TrainState, images: np.ndarray) -> np.ndarray:
    arith = FixedPoint(state.net.numerics, state.net.seed, SaturationCounter())
    _, scores = forward(state.net, state.params(), np.asarray(images, dtype=np.int64), arith)
    return np.argmax(scores, axis=1)


def evaluate(state: TrainState, images: np.ndarray, labels, chunk: int = 200):
    """(mean loss, accuracy) without updating the state."""
    net = state.net
    arith = FixedPoint(net.numerics, net.seed, SaturationCounter())
    params = state.params()
    losses, correct = [], 0
    for s in range(0, len(labels), chunk):
        x = np.asarray(images[s:s + chunk], dtype=np.int64)
        y = np.asarray(labels[s:s + chunk])
        _, scores = forward(net, params, x, arith)
        loss, _ = loss_terms(scores, y, net.loss_kind, arith, net.numerics.activations, net.numerics.local_grads)
        losses.append(loss)
        correct += int(np.sum(np.argmax(scores, axis=1) == y))
    return float(np.mean(np.concatenate(losses))), correct / max(1, len(labels))


# ---------------------------------------------------------------------------
# Single-tensor operations
# ---------------------------------------------------------------------------

def _arith(mode: RoundingMode, counter: SaturationCounter | None) -> FixedPoint:
    a = FixedPoint(NumericsSpec(), 0, counter)
    a.mode = mode
    return a


def conv_forward(a: FxpTensor, w: FxpTensor, stride: int = 1, pad: int = 0, out_fmt: QFormat | None = None,
                 mode: RoundingMode = NearestEven(), counter: SaturationCounter | None = None) -> FxpTensor:
    out_fmt = out_fmt or a.fmt
    _check_channels(a.raw.shape[0], w.raw.shape[1], "input channels vs kernel depth")
    acc = correlate(a.raw[None], w.raw, stride, pad)[0]
    return FxpTensor(_arith(mode, counter).narrow(acc, a.fmt.frac_bits + w.fmt.frac_bits, out_fmt), out_fmt)


def relu_forward(o: FxpTensor):
    mask = o.raw > 0
    return FxpTensor(np.where(mask, o.raw, 0), o.fmt), mask


def maxpool_forward(a: FxpTensor, k: int):
    if a.raw.shape[1] % k or a.raw.shape[2] % k:
        raise ValueError("pooling extents must be divisible by the window")
    out, idx = maxpool_batch(a.raw[None].astype(np.int64), k)
    return FxpTensor(out[0], a.fmt), idx[0]


@dataclass
class LossGradient:
    values: FxpTensor
    loss: float


def compute_loss(a: FxpTensor, label: int, kind: LossKind, grad_fmt: QFormat | None = None,
                 counter: SaturationCounter | None = None) -> LossGradient:
    grad_fmt = grad_fmt or a.fmt
    scores = a.raw.reshape(1, -1).astype(np.int64)
    loss, grad = loss_terms(scores, [label], LossKind(kind), _arith(NearestEven(), counter), a.fmt, grad_fmt)
    return LossGradient(FxpTensor(grad[0], grad_fmt), float(loss[0]))


def conv_backward_data(d_next: FxpTensor, w: FxpTensor, mask=None, stride: int = 1, pad: int = 0,
                       in_hw=None, out_fmt: QFormat | None = None, mode: RoundingMode = NearestEven(),
                       counter: SaturationCounter | None = None) -> FxpTensor:
    out_fmt = out_fmt or d_next.fmt
    _check_channels(d_next.raw.shape[0], w.raw.shape[0], "gradient channels vs kernel count")
    f, oh, ow = d_next.raw.shape
    kh, kw = w.raw.shape[2:]
    if in_hw is None:
        in_hw = ((oh - 1) * stride + kh - 2 * pad, (ow - 1) * stride + kw - 2 * pad)
    acc = correlate_transpose(d_next.raw[None], w.raw, in_hw, stride, pad)[0]
    d = _arith(mode, counter).narrow(acc, d_next.fmt.frac_bits + w.fmt.frac_bits, out_fmt)
    if mask is not None:
        d = np.where(np.asarray(mask, dtype=bool).reshape(d.shape), d, 0)
    return FxpTensor(d, out_fmt)


def conv_weight_gradient(a_saved: FxpTensor, d: FxpTensor, k_hw, stride: int = 1, pad: int = 0,
                         out_fmt: QFormat = fxp.Q2_14, mode: RoundingMode = NearestEven(),
                         counter: SaturationCounter | None = None) -> FxpTensor:
    acc = correlate_weights(a_saved.raw[None], d.raw[None], k_hw, stride, pad)[0]
    return FxpTensor(_arith(mode, counter).narrow(acc, a_saved.fmt.frac_bits + d.fmt.frac_bits, out_fmt), out_fmt)


def upsample_and_scale(d_pooled: FxpTensor, idx, mask, k: int) -> FxpTensor:
    up = upsample_batch(d_pooled.raw[None].astype(np.int64), np.asarray(idx)[None], k)[0]
    if mask is not None:
        up = np.where(np.asarray(mask, dtype=bool), up, 0)
    return FxpTensor(up, d_pooled.fmt)


def fc_backward(d_next: FxpTensor, w: FxpTensor, mask=None, out_fmt: QFormat | None = None,
                mode: RoundingMode = NearestEven(), counter: SaturationCounter | None = None) -> FxpTensor:
    """delta = W^T delta_next for W shaped (outputs, inputs)."""
    out_fmt = out_fmt or d_next.fmt
    W = w.raw.reshape(w.raw.shape[0], -1).astype(np.float64)
    v = d_next.raw.reshape(-1).astype(np.float64)
    if W.shape[0] != v.shape[0]:
        raise ValueError(f"shape mismatch: W has {W.shape[0]} outputs, gradient has {v.shape[0]}")
    d = _arith(mode, counter).narrow(W.T @ v, d_next.fmt.frac_bits + w.fmt.frac_bits, out_fmt)
    if mask is not None:
        d = np.where(np.asarray(mask, dtype=bool).reshape(d.shape), d, 0)
    return FxpTensor(d, out_fmt)


def fc_weight_gradient(d: FxpTensor, a_saved: FxpTensor, out_fmt: QFormat = fxp.Q2_14,
                       mode: RoundingMode = NearestEven(), counter: SaturationCounter | None = None) -> FxpTensor:
    """Outer product of the local-gradient vector with the saved input activations."""
    acc = np.outer(d.raw.reshape(-1).astype(np.int64), a_saved.raw.reshape(-1).astype(np.int64))
    return FxpTensor(_arith(mode, counter).narrow(acc, d.fmt.frac_bits + a_saved.fmt.frac_bits, out_fmt), out_fmt)


def sgd_momentum_update(w_old: FxpTensor, dw_batch_sum: FxpTensor, dw_prev: FxpTensor, lr: float, beta: float,
                        batch_size: int, numerics: NumericsSpec = NumericsSpec(),
                        counter: SaturationCounter | None = None):
    """Returns (new weights, momentum term to store for the next batch)."""
    if not (w_old.raw.shape == dw_batch_sum.raw.shape == dw_prev.raw.shape):
        raise ValueError("weight, gradient and momentum shapes differ")
    arith = FixedPoint(numerics, 0, counter)
    w_new, change = sgd_update_arrays(w_old.raw.astype(np.int64), dw_batch_sum.raw.astype(np.int64),
                                      dw_prev.raw.astype(np.int64), lr, beta, batch_size, arith, numerics)
    return FxpTensor(w_new, numerics.weights), FxpTensor(change, numerics.weight_grads)


def _check_channels(a: int, b: int, what: str):
    if a != b:
        raise ValueError(f"shape mismatch ({what}): {a} != {b}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TRCK"
CKPT_VERSION = 1
# magic, version, pof, num_layers, seed, step, saturation count
_HEADER = struct.Struct("<4sHHIqQQ")
# layer index, nof, nif, nky, nkx, weight frac, momentum frac, words per tensor
_LAYER = struct.Struct("<IIIIIBBQ")


def write_checkpoint(path, state: TrainState, pof: int = 1):
    """Little-endian dump of every layer's weights and momentum in transposable layout."""
    from .xposebuf import store_kernels

    parts = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, pof, len(state.layers), state.net.seed,
                          state.step, state.saturation.count)]
    for i in sorted(state.layers):
        ls = state.layers[i]
        nof, nif, nky, nkx = ls.weights.raw.shape
        wimg = store_kernels(ls.weights, pof).dram_image()
        mimg = store_kernels(ls.momentum_grad, pof).dram_image()
        parts.append(_LAYER.pack(i, nof, nif, nky, nkx, ls.weights.fmt.frac_bits,
                                 ls.momentum_grad.fmt.frac_bits, wimg.size))
        parts.append(wimg.astype("<i2").tobytes())
        parts.append(mimg.astype("<i2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path, net: NetworkSpec) -> TrainState:
    from .xposebuf import load_dram_image

    blob = Path(path).read_bytes()
    magic, version, pof, count, seed, step, sat = _HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    off = _HEADER.size
    layers = {}
    for _ in range(count):
        i, nof, nif, nky, nkx, fw, fm, words = _LAYER.unpack_from(blob, off)
        off += _LAYER.size
        tensors = []
        for frac in (fw, fm):
            img = np.frombuffer(blob, dtype="<i2", count=words, offset=off).astype(np.int16)
            off += 2 * words
            tensors.append(FxpTensor(load_dram_image(img, (nof, nif, nky, nkx), pof), QFormat(frac)))
        layers[i] = LayerState(*tensors)
    expected = {i: l.weight_shape for i, l in net.trainable_layers}
    if {i: s.weights.raw.shape for i, s in layers.items()} != expected:
        raise ValueError(f"{path}: checkpoint layers do not match the network")
    net = dataclasses.replace(net, seed=seed)
    return TrainState(net, layers, step, SaturationCounter(sat))
