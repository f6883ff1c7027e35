import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

from config import VERIFICATION_DTYPE
from services.errors import (
    ConfigError,
    DegenerateBatchError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
DEFAULT_GRADCHECK_EPS = 1e-3
MIN_GRADCHECK_EPS = 1e-7
# Во сколько машинных эпсилон допускается шум разности f(θ+eps) − f(θ−eps)
ROUNDOFF_FACTOR = 1e3

# Флаг записи графа вычислений
_grad_enabled: bool = True
# Журнал кусочно-линейных решений (маски ReLU, argmax), ведется только
# во время проверки градиентов
_kink_log: Optional[list[bytes]] = None


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Прямой проход без построения графа
    """

    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def record_kinks() -> Iterator[list[bytes]]:
    global _kink_log
    previous = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def _note_kink(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask.ravel()).tobytes())


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """
    Свернуть градиент обратно к форме входа (обратная операция к broadcasting)
    """

    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis: Any, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Function:
    """
    Базовый класс дифференцируемой операции.

    forward получает numpy-массивы входов, backward получает градиент по
    выходу и возвращает градиенты по каждому входу (None, если не нужен).
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.__name__}: в результате появились NaN/Inf")
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


class Tensor:
    """
    Плотный n-мерный массив с записью операций для обратного режима
    автоматического дифференцирования.
    """

    # numpy должен уступать операторам Tensor (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _ctx: Optional[Function] = None
    ) -> None:
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(VERIFICATION_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() возможен только для скаляра, форма {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _lift(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return MatMul.apply(self, self._lift(other))

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward без градиента возможен только для скаляра, форма {self.shape}")
            grad = np.ones_like(self.data)
        Graph.from_output(self).backward(np.asarray(grad, dtype=self.dtype))


class Graph:
    """
    Топологически упорядоченная запись вычислений: входы узла всегда
    предшествуют самому узлу.
    """

    def __init__(self, nodes: list[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def parameters(self) -> list[Tensor]:
        return [node for node in self.nodes if node._ctx is None and node.requires_grad]

    def backward(self, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): grad}
        for node in reversed(self.nodes):
            node_grad = grads.pop(id(node), None)
            if node._ctx is None:
                if node.requires_grad:
                    if node_grad is None:
                        node_grad = np.zeros_like(node.data)
                    node.grad = np.array(node_grad) if node.grad is None else node.grad + node_grad
                continue
            if node_grad is None:
                continue
            for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# --- Элементарные операции ---

class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (
            unbroadcast(grad * self.b, self.a.shape),
            unbroadcast(grad * self.a, self.b.shape)
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (
            unbroadcast(grad / self.b, self.a.shape),
            unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul ожидает тензоры ранга не ниже 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axis = _normalize_axis(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axis, keepdims=keepdims)

    def _expand(self, grad: np.ndarray) -> np.ndarray:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (self._expand(grad),)


class Mean(Sum):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axis = _normalize_axis(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axis]))
        return np.mean(a, axis=self.axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (self._expand(grad) / self.count,)


class Max(Sum):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axis = _normalize_axis(axis, a.ndim)
        self.keepdims = keepdims
        out = np.max(a, axis=self.axis, keepdims=True)
        mask = a == out
        _note_kink(mask)
        # при равенстве градиент делится поровну между победителями
        self.mask = mask / mask.sum(axis=self.axis, keepdims=True)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (self._expand(grad) * self.mask,)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: tuple[int, ...] = ()) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (np.transpose(grad, self.inverse),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        # в нуле производная не определена, берем 0 (std постоянной карты)
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad / (2.0 * safe), 0.0),)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        _note_kink(self.mask)
        return np.where(self.mask, a, 0.0).astype(a.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class Softmax(Function):
    def forward(self, a: np.ndarray, axis: int = -1) -> np.ndarray:
        self.axis = axis
        shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class CrossEntropy(Function):
    def forward(self, logits: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.labels = labels
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        delta = self.probs.copy()
        delta[np.arange(delta.shape[0]), self.labels] -= 1.0
        return (grad * delta / delta.shape[0],)


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :oh, :ow]


class Conv2d(Function):
    """
    Прямая взаимная корреляция через скользящие окна (im2col без копирования)
    """

    def forward(
        self,
        x: np.ndarray,
        w: np.ndarray,
        stride: int = 1,
        padding: int = 0,
        out_hw: tuple[int, int] = (0, 0)
    ) -> np.ndarray:
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.w = w
        kh, kw = w.shape[2], w.shape[3]
        oh, ow = out_hw
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.padded_shape = padded.shape
        self.windows = _conv_windows(padded, kh, kw, stride, oh, ow)
        # [N, C, OH, OW, kh, kw] x [O, C, kh, kw] -> [N, OH, OW, O]
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        kh, kw = self.w.shape[2], self.w.shape[3]
        oh, ow = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        # [N, O, OH, OW] x [O, C, kh, kw] -> [N, OH, OW, C, kh, kw]
        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        h, w = self.x_shape[2], self.x_shape[3]
        return grad_padded[:, :, p:p + h, p:p + w], grad_w


# --- Функциональный слой ---

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def gap(x: Tensor) -> Tensor:
    """
    Глобальное усреднение по пространству: [N,C,H,W] -> [N,C]
    """

    if x.ndim != 4:
        raise ShapeError(f"gap ожидает [N,C,H,W], получено {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"gap: пустая пространственная область {x.shape}")
    return x.mean(axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    out = x · Wᵀ (+ bias), x может иметь любые ведущие оси
    """

    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: вход {x.shape}, веса {weight.shape}")
    out = x @ weight.transpose()
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: смещение {bias.shape}, ожидалось ({weight.shape[0]},)")
        out = out + bias
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int, strict: bool = False) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"conv2d: ядро {kernel} больше входа {size} с отступом {padding}")
    if strict and span % stride:
        raise ShapeError(f"conv2d: нецелый выходной размер ({size}+2·{padding}-{kernel})/{stride}+1")
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    strict: bool = False
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: вход {x.shape}, ядро {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: каналы входа {x.shape[1]} != каналам ядра {weight.shape[1]}")
    oh = conv_output_size(x.shape[2], weight.shape[2], stride, padding, strict)
    ow = conv_output_size(x.shape[3], weight.shape[3], stride, padding, strict)
    out = Conv2d.apply(x, weight, stride=stride, padding=padding, out_hw=(oh, ow))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS
) -> Tensor:
    """
    Пакетная нормализация по каналу (ось 1) для [N,C] и [N,C,H,W].

    В режиме обучения используются статистики батча (с полной зависимостью
    градиента от них) и обновляются скользящие статистики; в режиме
    оценки отображение аффинно по каналу.
    """

    if x.ndim == 2:
        axes: tuple[int, ...] = (0,)
        shape: tuple[int, ...] = (1, x.shape[1])
    elif x.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, x.shape[1], 1, 1)
    else:
        raise ShapeError(f"batchnorm ожидает [N,C] или [N,C,H,W], получено {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm: параметры {gamma.shape}/{beta.shape} для {channels} каналов")

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm в режиме обучения требует батч не меньше 2")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        out = centered / (var + eps).sqrt() * gamma.reshape(shape) + beta.reshape(shape)
        count = x.size // channels
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.data.reshape(channels)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(channels) * count / (count - 1)
        return out

    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - scale * running_mean
    return x * scale.reshape(shape) + shift.reshape(shape)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm: параметры {gamma.shape} для оси {x.shape[-1]}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    raise ConfigError(f"неизвестная активация: {kind}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"cross_entropy: логиты {logits.shape}, меток {len(labels)}")
    return CrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))


def channel_scale(x: Tensor, weights: Tensor) -> Tensor:
    """
    Поканальное умножение: [N,C,H,W] ⊙ ω[N,C] или [N,T,D] ⊙ ω[N,D]
    """

    if x.ndim == 4 and weights.shape == x.shape[:2]:
        return x * weights.reshape(x.shape[0], x.shape[1], 1, 1)
    if x.ndim == 3 and weights.shape == (x.shape[0], x.shape[2]):
        return x * weights.reshape(x.shape[0], 1, x.shape[2])
    raise ShapeError(f"channel_scale: признаки {x.shape}, веса {weights.shape}")


def mhsa(
    x: Tensor,
    params: dict[str, Tensor],
    heads: int,
    return_weights: bool = False
) -> Tensor | tuple[Tensor, Tensor]:
    """
    Многоголовое внимание со скалярным произведением; params содержит
    wq/bq, wk/bk, wv/bv, wo/bo
    """

    if x.ndim != 3:
        raise ShapeError(f"mhsa ожидает [N,T,D], получено {x.shape}")
    n, t, d = x.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"mhsa: размерность {d} не делится на число голов {heads}")
    head_dim = d // heads

    def split(z: Tensor) -> Tensor:
        return z.reshape(n, t, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(linear(x, params["wq"], params.get("bq")))
    k = split(linear(x, params["wk"], params.get("bk")))
    v = split(linear(x, params["wv"], params.get("bv")))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = linear(context, params["wo"], params.get("bo"))
    if return_weights:
        return out, weights
    return out


# --- Проверка градиентов ---

@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int
    worst: str = ""

    def passed(self, threshold: float) -> bool:
        return self.checked > 0 and self.max_relative_error < threshold


def _sample_loss(loss_fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with no_grad(), record_kinks() as kinks:
        value = loss_fn().item()
    return value, kinks


def _central_difference(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    index: tuple[int, ...],
    step: float,
    baseline: list[bytes]
) -> Optional[float]:
    original = param.data[index]
    plus, minus = original + step, original - step
    try:
        param.data[index] = plus
        f_plus, kinks_plus = _sample_loss(loss_fn)
        param.data[index] = minus
        f_minus, kinks_minus = _sample_loss(loss_fn)
    finally:
        param.data[index] = original
    if kinks_plus != baseline or kinks_minus != baseline:
        return None
    return (f_plus - f_minus) / (plus - minus)


def _numeric_derivative(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    index: tuple[int, ...],
    eps: float,
    baseline: list[bytes],
    extrapolate: bool
) -> Optional[float]:
    step = eps
    while step >= MIN_GRADCHECK_EPS:
        coarse = _central_difference(loss_fn, param, index, step, baseline)
        if coarse is not None and not extrapolate:
            return coarse
        if coarse is not None:
            fine = _central_difference(loss_fn, param, index, step / 2, baseline)
            if fine is not None:
                # шаг Ричардсона убирает член O(eps²) центральной разности
                return (4.0 * fine - coarse) / 3.0
        # пробы пересекли излом ReLU/max, уменьшаем шаг
        step /= 10.0
    return None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = DEFAULT_GRADCHECK_EPS,
    coords: int = 64,
    seed: int = 0,
    extrapolate: bool = True
) -> GradCheckResult:
    """
    Сравнить градиенты обратного режима с центральными конечными
    разностями (f(θ+eps) − f(θ−eps)) / (2·eps).

    Для тензоров больше coords элементов проверяются coords координат,
    выбранных детерминированным генератором. Относительная ошибка
    |a − n| / max(|a|, |n|, 1e-8); координаты, где |a − n| не превышает
    шума округления ROUNDOFF_FACTOR·ε·max(1, |f|) / eps, считаются совпавшими.
    """

    for param in params:
        param.grad = None
    with record_kinks() as baseline:
        loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"grad_check: функция потерь должна быть скаляром, форма {loss.shape}")
    loss.backward()
    roundoff = ROUNDOFF_FACTOR * np.finfo(VERIFICATION_DTYPE).eps * max(1.0, abs(loss.item())) / eps
    analytic = [
        param.grad.copy() if param.grad is not None else np.zeros_like(param.data)
        for param in params
    ]

    rng = np.random.default_rng(seed)
    worst_error, worst_where = 0.0, ""
    checked = skipped = 0
    for position, param in enumerate(params):
        if param.size <= coords:
            picks = np.arange(param.size)
        else:
            picks = np.sort(rng.choice(param.size, size=coords, replace=False))
        for flat in picks:
            index = tuple(int(i) for i in np.unravel_index(int(flat), param.shape))
            numeric = _numeric_derivative(loss_fn, param, index, eps, baseline, extrapolate)
            if numeric is None:
                skipped += 1
                logger.debug(f"Координата {position}{index} пропущена: излом при любом шаге")
                continue
            exact = float(analytic[position][index])
            difference = abs(exact - numeric)
            error = 0.0 if difference <= roundoff else difference / max(abs(exact), abs(numeric), 1e-8)
            checked += 1
            if error > worst_error:
                worst_error = error
                worst_where = f"param[{position}]{index}: analytic={exact:.6e}, numeric={numeric:.6e}"
    return GradCheckResult(worst_error, checked, skipped, worst_where)
