"""Dense tensors, trainable parameters, and the gradient tape.

Reverse-mode differentiation is tape-based: while a ``Tape`` is active,
every kernel in :mod:`simvit.ops` appends one record holding its output,
its inputs, and a vector-Jacobian closure. ``Tape.backward`` walks the
records in reverse (creation order is a valid topological order),
propagates upstream gradients through each closure, and adds the result
into ``Parameter.grad`` for every parameter encountered. Without an
active tape the kernels are plain numpy functions.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(np.dtype(dtype), copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    if arr.dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return np.ascontiguousarray(arr)


class Tensor:
    """Row-major dense array with a float32 or float64 payload.

    Token maps are laid out ``(H, W, C)`` or ``(batch, H, W, C)`` so a
    window gather reads contiguous channel runs.
    """

    __slots__ = ("data", "_param")

    def __init__(self, data, dtype=None):
        self.data = _coerce(data, dtype)
        self._param: Parameter | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


class Parameter:
    """A learnable tensor paired with a same-shape gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value, dtype=None):
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype)
        self.value._param = self
        self.grad = Tensor(np.zeros_like(self.value.data))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.data[...] = 0

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype.name})"


# Innermost active tape records; outer tapes are shadowed while nested.
_TAPES: list["Tape"] = []

VjpFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Recorder for one forward pass and its reverse sweep."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], VjpFn]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Run the reverse sweep from a scalar loss.

        Gradients for intermediate tensors are kept in an id-keyed map;
        gradients reaching a ``Parameter`` value are added into
        ``Parameter.grad`` (accumulating across calls until zeroed).
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if t is None or gi is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self._grads = grads
        flushed: set[int] = set()
        for _, inputs, _ in self._records:
            for t in inputs:
                if t is None or t._param is None or id(t) in flushed:
                    continue
                g = grads.get(id(t))
                if g is not None:
                    t._param.grad.data += g
                flushed.add(id(t))

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient w.r.t. a leaf tensor from the last backward call."""
        return self._grads.get(id(t))


def push(out: Tensor, inputs: Iterable["Tensor | None"], vjp: VjpFn) -> None:
    """Append one op record to the innermost active tape, if any."""
    if _TAPES:
        _TAPES[-1]._records.append((out, tuple(inputs), vjp))


def recording() -> bool:
    return bool(_TAPES)
