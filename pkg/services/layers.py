import logging
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from config import VERIFICATION_DTYPE
from services.errors import FormatError, ShapeError
from services.tensor_core import (
    BN_EPS,
    BN_MOMENTUM,
    LN_EPS,
    Tensor,
    batchnorm,
    conv2d,
    layernorm,
    linear,
    mhsa,
)

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """
    Обучаемый тензор (лист графа с requires_grad=True)
    """

    def __init__(self, data: Any) -> None:
        super().__init__(np.array(data, dtype=VERIFICATION_DTYPE), requires_grad=True)


def uniform_parameter(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """
    Базовый класс слоя: параметры, буферы (numpy-массивы) и вложенные
    модули находятся обычными атрибутами и обходятся в порядке объявления.
    """

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item
            elif isinstance(value, (Module, Parameter, np.ndarray)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype: Any) -> "Module":
        """
        Привести параметры и буферы к заданной точности
        """

        for module in self.modules():
            for name, value in list(vars(module).items()):
                if isinstance(value, np.ndarray):
                    setattr(module, name, value.astype(dtype))
            for _, p in module._children():
                if isinstance(p, Parameter):
                    p.data = p.data.astype(dtype)
                    p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        if missing:
            raise FormatError(f"в сохраненных весах нет параметров: {', '.join(missing[:5])}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: форма {value.shape}, ожидалась {p.shape}")
            p.data = value.astype(p.dtype)
        for module_prefix, module in self._named_modules():
            for name, value in list(vars(module).items()):
                key = module_prefix + name
                if isinstance(value, np.ndarray) and key in state:
                    setattr(module, name, np.asarray(state[key]).astype(value.dtype))

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(prefix + name + ".")

    def save(self, path: Path) -> None:
        np.savez(path, **self.state_dict())
        logger.info(f"Веса сохранены: {path}")

    def load(self, path: Path) -> None:
        try:
            with np.load(path) as archive:
                state = {key: archive[key] for key in archive.files}
        except (OSError, ValueError) as e:
            raise FormatError(f"не удалось прочитать веса {path}: {e}") from e
        self.load_state_dict(state)
        logger.info(f"Веса загружены: {path}")


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_parameter(rng, (out_features, in_features), in_features)
        self.bias = uniform_parameter(rng, (out_features,), in_features) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = uniform_parameter(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = uniform_parameter(rng, (out_channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """
    Пакетная нормализация по оси каналов; работает и для [N,C], и для [N,C,H,W]
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps
        )

    def freeze_identity(self) -> None:
        """
        Сделать слой точным тождеством в режиме оценки:
        масштаб gamma/sqrt(var+eps) равен 1.0 бит в бит, сдвиг равен 0
        """

        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.ones_like(self.running_var)
        self.gamma.data = np.sqrt(self.running_var + self.eps).astype(self.gamma.dtype)
        self.beta.data = np.zeros_like(self.beta.data)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if heads < 1 or dim % heads:
            raise ShapeError(f"размерность {dim} не делится на число голов {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.q = Linear(dim, dim, rng=rng)
        # смещение ключей сдвигает все оценки строки одинаково и не влияет на softmax
        self.k = Linear(dim, dim, bias=False, rng=rng)
        self.v = Linear(dim, dim, rng=rng)
        self.o = Linear(dim, dim, rng=rng)

    def projections(self) -> dict[str, Tensor]:
        return {
            "wq": self.q.weight, "bq": self.q.bias,
            "wk": self.k.weight, "bk": self.k.bias,
            "wv": self.v.weight, "bv": self.v.bias,
            "wo": self.o.weight, "bo": self.o.bias,
        }

    def forward(self, x: Tensor, return_weights: bool = False) -> Any:
        return mhsa(x, self.projections(), self.heads, return_weights=return_weights)
