"""
Differentiable building blocks for the detectors.

Each layer is a torch.autograd.Function with a hand-written backward pass;
torch's tape only chains them together (that is how BPTT runs across LSTM
steps). Everything is float64 so finite-difference checks stay meaningful.

Also here: the gradient reversal layer, a bias-corrected Adam optimizer,
the finite-difference gradient checker and the DAVC checkpoint format.
"""

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"DAVC"
CHECKPOINT_VERSION = 1


class ShapeMismatchError(ConfigError, ValueError):
    pass


class InvalidClassError(DataError, ValueError):
    pass


class NonFiniteGradientError(NumericError):
    pass


class LayerKind(str, Enum):
    DENSE = "dense"
    LSTM_FORWARD = "lstm_forward"
    LSTM_BACKWARD = "lstm_backward"
    RELU = "relu"
    GRL = "grl"
    SOFTMAX_CE = "softmax_ce"
    MEAN_POOL_TIME = "mean_pool_time"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    grl_lambda: float = 0.0

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError(f"{self.kind.value}: dims must be positive")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "in": self.in_dim, "out": self.out_dim}


def glorot_uniform_(tensor: torch.Tensor, fan_in: int, fan_out: int,
                    generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return tensor.uniform_(-bound, bound, generator=generator)


# ── Dense ────────────────────────────────────────────────────────

def dense_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """y = W x + b over the last axis of x."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(
            f"dense: input {tuple(x.shape)} vs weight {tuple(weight.shape)}, bias {tuple(bias.shape)}"
        )
    return x @ weight.T + bias


def dense_backward(grad_out: torch.Tensor, x: torch.Tensor, weight: torch.Tensor):
    """Returns (grad_x, grad_W, grad_b)."""
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return grad_out @ weight, g2.T @ x2, g2.sum(dim=0)


class DenseFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        return dense_forward(x, weight, bias)

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        return dense_backward(grad_out, x, weight)


class Dense(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator):
        super().__init__()
        self.spec = LayerSpec(LayerKind.DENSE, in_dim, out_dim)
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        glorot_uniform_(self.weight, in_dim, out_dim, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return DenseFunction.apply(x, self.weight, self.bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def mean_pool_time(seq: torch.Tensor) -> torch.Tensor:
    """(..., T, D) -> (..., D)."""
    return seq.mean(dim=-2)


# ── LSTM ─────────────────────────────────────────────────────────

def _lstm_gates(x, h_prev, w_ih, w_hh, bias):
    hidden = w_hh.shape[1]
    pre = x @ w_ih.T + h_prev @ w_hh.T + bias
    i = torch.sigmoid(pre[:, :hidden])
    f = torch.sigmoid(pre[:, hidden:2 * hidden])
    g = torch.tanh(pre[:, 2 * hidden:3 * hidden])
    o = torch.sigmoid(pre[:, 3 * hidden:])
    return i, f, g, o


class LstmCellFunction(torch.autograd.Function):
    """One LSTM step on a (B, D) batch; gate order i, f, g, o."""

    @staticmethod
    def forward(ctx, x, h_prev, c_prev, w_ih, w_hh, bias):
        i, f, g, o = _lstm_gates(x, h_prev, w_ih, w_hh, bias)
        c = f * c_prev + i * g
        tanh_c = torch.tanh(c)
        h = o * tanh_c
        ctx.save_for_backward(x, h_prev, c_prev, w_ih, w_hh, i, f, g, o, tanh_c)
        return h, c

    @staticmethod
    def backward(ctx, grad_h, grad_c):
        x, h_prev, c_prev, w_ih, w_hh, i, f, g, o, tanh_c = ctx.saved_tensors
        d_o = grad_h * tanh_c
        d_c = grad_c + grad_h * o * (1.0 - tanh_c ** 2)
        d_i = d_c * g
        d_f = d_c * c_prev
        d_g = d_c * i
        d_pre = torch.cat([
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_g * (1.0 - g ** 2),
            d_o * o * (1.0 - o),
        ], dim=1)
        return (
            d_pre @ w_ih,
            d_pre @ w_hh,
            d_c * f,
            d_pre.T @ x,
            d_pre.T @ h_prev,
            d_pre.sum(dim=0),
        )


class LstmCell(nn.Module):
    def __init__(self, in_dim: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.w_ih = nn.Parameter(torch.empty(4 * hidden, in_dim, dtype=DTYPE))
        self.w_hh = nn.Parameter(torch.empty(4 * hidden, hidden, dtype=DTYPE))
        bias = torch.zeros(4 * hidden, dtype=DTYPE)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = nn.Parameter(bias)
        glorot_uniform_(self.w_ih, in_dim, 4 * hidden, generator)
        glorot_uniform_(self.w_hh, hidden, 4 * hidden, generator)

    def forward(self, x_t, h_prev, c_prev):
        return LstmCellFunction.apply(x_t, h_prev, c_prev, self.w_ih, self.w_hh, self.bias)


def lstm_step(x_t: torch.Tensor, h_prev: torch.Tensor, c_prev: torch.Tensor, cell: LstmCell):
    """Single step; accepts (D,) or (B, D) inputs and returns (h_t, c_t) of matching rank."""
    squeeze = x_t.dim() == 1
    x2, h2, c2 = (t.unsqueeze(0) if squeeze else t for t in (x_t, h_prev, c_prev))
    if x2.shape[1] != cell.in_dim or h2.shape[1] != cell.hidden or c2.shape != h2.shape:
        raise ShapeMismatchError(
            f"lstm: x {tuple(x_t.shape)}, h {tuple(h_prev.shape)}, c {tuple(c_prev.shape)} "
            f"for cell {cell.in_dim}->{cell.hidden}"
        )
    h, c = cell(x2, h2, c2)
    return (h[0], c[0]) if squeeze else (h, c)


class LstmLayer(nn.Module):
    """Unrolls a cell over (B, T, D); reverse=True runs from the last frame to the first."""

    def __init__(self, in_dim: int, hidden: int, generator: torch.Generator, reverse: bool = False):
        super().__init__()
        kind = LayerKind.LSTM_BACKWARD if reverse else LayerKind.LSTM_FORWARD
        self.spec = LayerSpec(kind, in_dim, hidden)
        self.reverse = reverse
        self.cell = LstmCell(in_dim, hidden, generator)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        batch, steps, _ = seq.shape
        h = seq.new_zeros(batch, self.cell.hidden)
        c = seq.new_zeros(batch, self.cell.hidden)
        order = range(steps - 1, -1, -1) if self.reverse else range(steps)
        outputs = [None] * steps
        for t in order:
            h, c = lstm_step(seq[:, t], h, c, self.cell)
            outputs[t] = h
        return torch.stack(outputs, dim=1)


class BiLstm(nn.Module):
    def __init__(self, in_dim: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.hidden = hidden
        self.forward_layer = LstmLayer(in_dim, hidden, generator)
        self.backward_layer = LstmLayer(in_dim, hidden, generator, reverse=True)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.forward_layer(seq), self.backward_layer(seq)], dim=-1)


def bilstm_forward(seq: torch.Tensor, layer: BiLstm) -> torch.Tensor:
    """(T, d) or (B, T, d) -> (.., T, 2H)."""
    if seq.shape[-2] == 0:
        raise DataError("bilstm_forward needs at least one frame")
    if seq.dim() == 2:
        return layer(seq.unsqueeze(0))[0]
    return layer(seq)


# ── Gradient reversal ────────────────────────────────────────────

def grl_backward(grad_out: torch.Tensor, lambda_: float) -> torch.Tensor:
    return grad_out.neg() * lambda_


class GradientReversal(torch.autograd.Function):
    """Identity forward; multiplies the incoming gradient by -lambda."""

    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lambda_), None


def grl(x: torch.Tensor, lambda_: float = 1.0) -> torch.Tensor:
    return GradientReversal.apply(x, float(lambda_))


# ── Softmax cross-entropy ────────────────────────────────────────

def softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def _check_targets(targets: torch.Tensor, n_classes: int) -> None:
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= n_classes):
        raise InvalidClassError(f"target index outside [0, {n_classes})")


def softmax_cross_entropy(logits: torch.Tensor, target):
    """Mean -log softmax(logits)[target] over the batch, with its gradient.

    Accepts (C,) logits with an int target, or (B, C) logits with (B,) targets.
    Returns (loss, grad_logits).
    """
    single = logits.dim() == 1
    logits2 = logits.unsqueeze(0) if single else logits
    targets = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    n_classes = logits2.shape[1]
    if targets.shape[0] != logits2.shape[0]:
        raise ShapeMismatchError("one target per row of logits is required")
    _check_targets(targets, n_classes)

    shifted = logits2 - logits2.max(dim=1, keepdim=True).values
    log_norm = torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    log_probs = shifted - log_norm
    rows = torch.arange(targets.shape[0])
    loss = -log_probs[rows, targets].mean()

    onehot = torch.zeros_like(logits2)
    onehot[rows, targets] = 1.0
    grad = (torch.exp(log_probs) - onehot) / targets.shape[0]
    return loss, (grad[0] if single else grad)


class SoftmaxCrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, targets):
        loss, grad = softmax_cross_entropy(logits, targets)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return SoftmaxCrossEntropy.apply(logits, targets)


# ── Adam ─────────────────────────────────────────────────────────

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(named_params: Iterable[tuple[str, nn.Parameter]], state: AdamState) -> None:
    """One bias-corrected Adam update in place; parameters without grads are skipped."""
    live = [(name, p) for name, p in named_params if p.grad is not None]
    bad = [name for name, p in live if not torch.all(torch.isfinite(p.grad))]
    if bad:
        raise NonFiniteGradientError(
            f"non-finite gradient at step {state.step + 1} in: {', '.join(bad)}"
        )

    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in live:
            m = state.first_moment.get(name)
            if m is None:
                m = state.first_moment[name] = torch.zeros_like(p)
                state.second_moment[name] = torch.zeros_like(p)
            v = state.second_moment[name]
            m.mul_(state.beta1).add_(p.grad, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(p.grad, p.grad, value=1.0 - state.beta2)
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.sub_(state.lr * m_hat / (torch.sqrt(v_hat) + state.eps))


class Adam:
    """Adam over a fixed list of named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# ── Finite differences ───────────────────────────────────────────

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    vanishing: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_param(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = torch.linalg.vector_norm(analytic - numeric).item()
    scale = torch.linalg.vector_norm(analytic).item() + torch.linalg.vector_norm(numeric).item()
    return diff / max(scale, 1e-12)


def finite_difference_check(network: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                            eps: float = 1e-5,
                            objective_fn: Callable[[nn.Module], torch.Tensor] | None = None,
                            only: Iterable[str] | None = None) -> GradCheckReport:
    """
    Compare analytic grads of loss_fn(network) with central differences, per parameter tensor.

    The differences are taken of objective_fn (default loss_fn). Behind a gradient
    reversal layer the two differ: the backward pass runs on loss_fn while the
    parameters actually descend objective_fn. `only` restricts the checked names.
    """
    if eps <= 0:
        raise ConfigError("finite-difference step must be positive")
    objective_fn = objective_fn or loss_fn
    all_params = [(name, p) for name, p in network.named_parameters() if p.requires_grad]
    for _, p in all_params:
        p.grad = None
    loss_fn(network).backward()
    wanted = None if only is None else set(only)
    params = [(name, p) for name, p in all_params if wanted is None or name in wanted]
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params}

    errors, vanishing = {}, []
    with torch.no_grad():
        for name, p in params:
            numeric = torch.zeros_like(p)
            flat, num_flat = p.view(-1), numeric.view(-1)
            for k in range(flat.numel()):
                original = flat[k].item()
                flat[k] = original + eps
                plus = objective_fn(network).item()
                flat[k] = original - eps
                minus = objective_fn(network).item()
                flat[k] = original
                num_flat[k] = (plus - minus) / (2.0 * eps)
            errors[name] = relative_error(analytic[name], numeric)
            if not analytic[name].any() and not numeric.any():
                vanishing.append(name)
    for _, p in all_params:
        p.grad = None
    return GradCheckReport(errors, vanishing)


def gradient_clip(params: Iterable[nn.Parameter], max_norm: float) -> float:
    """Global-norm clip; returns the pre-clip norm."""
    live = [p for p in params if p.grad is not None]
    if not live:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(live, max_norm))


# ── Checkpoints ──────────────────────────────────────────────────

def encode_checkpoint(tensors: "OrderedDict[str, np.ndarray] | dict", header: dict) -> bytes:
    """DAVC: magic, version, JSON header, then (name, shape, float64 LE values) records."""
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_blob)),
             header_blob, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        array = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        name_blob = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_blob)))
        parts.append(name_blob)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a DAVC checkpoint")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    offset = 12
    header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        tensors[name] = values.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise DataError("trailing bytes after checkpoint records")
    return header, tensors


def save_checkpoint(path: str, tensors, header: dict) -> bytes:
    blob = encode_checkpoint(tensors, header)
    with open(path, "wb") as f:
        f.write(blob)
    logger.info("Wrote checkpoint %s (%d tensors, %d bytes).", path, len(tensors), len(blob))
    return blob


def load_checkpoint(path: str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    return decode_checkpoint(blob)
