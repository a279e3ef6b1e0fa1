#!/usr/bin/env python3
"""
SCSA Engine - Tensor Module

The value types of the engine:

- Tensor: a dense, row-major, rank 1-4 array (float64 by default, float32
  offered for benchmarks). Operations never mutate a Tensor's data; the
  gradient checker is the only code that perturbs data in place, and it
  restores every value it touches.
- Parameter: a named learnable Tensor with a gradient accumulator of the
  same shape.
- ParamStore: ordered, uniquely named Parameters plus non-learnable buffers
  (batch-norm running statistics).
- Tape: the record of executed operations. backward() replays it in exact
  reverse order and accumulates gradients into inputs and Parameters.

Binary dump format (little-endian):
    tensor record:  b"SCST" | u8 rank | u8 dtype (0=f64, 1=f32)
                    | rank x u32 extents | row-major payload
    checkpoint:     b"SCSK" | u32 entry count
                    | per entry: u32 name length | UTF-8 name | tensor record
"""

import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    BinaryIO, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union
)

import numpy as np

from config import (
    CHECKPOINT_MAGIC,
    DEFAULT_DTYPE,
    DTYPE_CODES,
    MAX_RANK,
    SUPPORTED_DTYPES,
    TENSOR_MAGIC,
)
from exceptions import ConfigurationError, DumpFormatError, ShapeError

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    Dense row-major real array of rank 1 to 4.

    Extents are positional: (B, C, H, W) for rank 4 and (B, C, L) for rank 3.

    Attributes:
        data (np.ndarray): Contiguous float64 or float32 payload

    Raises:
        ShapeError: If the rank is outside 1-4 or an extent is zero
        ConfigurationError: If the requested dtype is unsupported

    Examples:
        >>> t = Tensor(np.ones((2, 8, 6, 5)))
        >>> t.shape
        (2, 8, 6, 5)
    """

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike, dtype: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.name if arr.dtype.name in SUPPORTED_DTYPES else DEFAULT_DTYPE
        if dtype not in SUPPORTED_DTYPES:
            raise ConfigurationError(
                f"Unsupported dtype '{dtype}'; expected one of {', '.join(SUPPORTED_DTYPES)}"
            )
        # ascontiguousarray promotes 0-d input to 1-d, so check rank first
        if not (1 <= arr.ndim <= MAX_RANK):
            raise ShapeError(f"Tensor rank must be 1-{MAX_RANK} (got {arr.ndim})")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"All extents must be >= 1 (got {arr.shape})")
        self.data = arr

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return a copy of the payload."""
        return self.data.copy()

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


# ============================================================================
# PARAMETERS
# ============================================================================

class Parameter:
    """
    A named learnable tensor with a paired gradient accumulator.

    Attributes:
        name (str): Stable dotted path, e.g. "smsa.conv.0.weight"
        value (Tensor): Current value
        grad (Tensor): Accumulated gradient, zero-initialized, same shape
    """

    def __init__(self, name: str, value: Union[Tensor, np.ndarray]):
        if not name:
            raise ConfigurationError("Parameter name cannot be empty")
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape})"


class ParamStore:
    """
    Ordered collection of uniquely named Parameters and buffers.

    Buffers are non-learnable arrays (batch-norm running statistics) that
    are mutated in place by their single owner and saved with checkpoints.
    """

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._buffers: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: Union[Tensor, np.ndarray]) -> Parameter:
        """
        Register a new parameter.

        Raises:
            ConfigurationError: If the name is already taken
        """
        if name in self._params or name in self._buffers:
            raise ConfigurationError(f"Duplicate parameter name '{name}'")
        param = Parameter(name, value)
        self._params[name] = param
        logger.debug(f"Registered parameter {name} {param.shape}")
        return param

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ConfigurationError(f"Duplicate buffer name '{name}'")
        buf = np.array(value, dtype=np.float64)
        self._buffers[name] = buf
        return buf

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    @property
    def buffers(self) -> Dict[str, np.ndarray]:
        return dict(self._buffers)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    def num_elements(self, prefix: str = "") -> int:
        """Count learnable scalars whose name starts with prefix."""
        return sum(p.value.size for n, p in self._params.items() if n.startswith(prefix))

    def cast(self, dtype: str) -> None:
        """Cast every parameter value (and gradient) to dtype in place."""
        for param in self._params.values():
            param.value = param.value.astype(dtype)
            param.grad = Tensor(np.zeros_like(param.value.data))

    def state(self) -> Dict[str, Tensor]:
        """Parameters followed by buffers, in registration order."""
        state: Dict[str, Tensor] = {n: p.value for n, p in self._params.items()}
        for name, buf in self._buffers.items():
            state[name] = Tensor(buf)
        return state


def count_parameters(store: ParamStore, prefix: str = "") -> int:
    """Number of learnable scalars under prefix (all when prefix is empty)."""
    return store.num_elements(prefix)


# ============================================================================
# TAPE
# ============================================================================

@dataclass
class TapeRecord:
    """One executed op with the closure that maps output grad to input grads."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """
    Reverse-mode record of executed operations.

    A tape is single-writer: recording and replay must happen on the thread
    that created it. Parameters are registered with watch(); after
    backward() their .grad holds the accumulated gradient.

    Examples:
        >>> tape = Tape()
        >>> y = ops.sigmoid(x, tape=tape)
        >>> tape.backward(y)
        >>> tape.grad(x)
    """
    records: List[TapeRecord] = field(default_factory=list)
    _params: Dict[int, Parameter] = field(default_factory=dict)
    _grads: Dict[int, np.ndarray] = field(default_factory=dict)
    _owner: int = field(default_factory=threading.get_ident)

    def _check_owner(self) -> None:
        if threading.get_ident() != self._owner:
            raise RuntimeError("Tape used from a thread other than its owner")

    def watch(self, param: Parameter) -> Tensor:
        """Register a parameter so backward() accumulates into its grad."""
        self._check_owner()
        self._params[id(param.value)] = param
        return param.value

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: BackwardFn) -> None:
        self._check_owner()
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))

    def backward(self, output: Tensor, cotangent: Optional[np.ndarray] = None) -> None:
        """
        Propagate cotangent from output back through every recorded op.

        Args:
            output: A tensor produced by a recorded op
            cotangent: Upstream gradient (defaults to ones)

        Raises:
            ShapeError: If the cotangent shape does not match output
        """
        self._check_owner()
        if cotangent is None:
            cotangent = np.ones_like(output.data)
        cotangent = np.asarray(cotangent, dtype=output.data.dtype)
        if cotangent.shape != output.shape:
            raise ShapeError(f"Cotangent shape {cotangent.shape} != output shape {output.shape}")

        self._grads = {id(output): cotangent.copy()}
        for rec in reversed(self.records):
            upstream = self._grads.get(id(rec.output))
            if upstream is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None:
                    continue
                key = id(tensor)
                if key in self._grads:
                    self._grads[key] = self._grads[key] + grad
                else:
                    self._grads[key] = grad

        for key, param in self._params.items():
            grad = self._grads.get(key)
            if grad is not None:
                param.grad.data += grad
        logger.debug(f"Backward replayed {len(self.records)} ops, {len(self._params)} parameters")

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Gradient accumulated for tensor by the last backward(), if any."""
        return self._grads.get(id(tensor))


# ============================================================================
# BINARY DUMP FORMAT
# ============================================================================

_CODE_TO_DTYPE = {code: name for name, code in DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, tensor: Tensor) -> None:
    """Write one SCST tensor record."""
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", tensor.rank, DTYPE_CODES[tensor.dtype]))
    fh.write(struct.pack(f"<{tensor.rank}I", *tensor.shape))
    little = "<f8" if tensor.dtype == "float64" else "<f4"
    fh.write(tensor.data.astype(little, copy=False).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise DumpFormatError(f"Truncated dump: expected {n} bytes, got {len(chunk)}")
    return chunk


def read_tensor(fh: BinaryIO) -> Tensor:
    """
    Read one SCST tensor record.

    Raises:
        DumpFormatError: On bad magic, unknown dtype code or truncation
    """
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise DumpFormatError(f"Bad tensor magic {magic!r}")
    rank, code = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_TO_DTYPE:
        raise DumpFormatError(f"Unknown dtype code {code}")
    if not (1 <= rank <= MAX_RANK):
        raise DumpFormatError(f"Bad rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    dtype = _CODE_TO_DTYPE[code]
    little = np.dtype("<f8") if dtype == "float64" else np.dtype("<f4")
    count = int(np.prod(shape))
    payload = np.frombuffer(_read_exact(fh, count * little.itemsize), dtype=little)
    return Tensor(payload.reshape(shape).astype(dtype), dtype=dtype)


def dump_tensor(path: Union[str, Path], tensor: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path: Union[str, Path]) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path: Union[str, Path], store: ParamStore) -> None:
    """Write every parameter and buffer of store with its name index."""
    state = store.state()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensor)
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Tensor]:
    """
    Read a checkpoint into an ordered name -> Tensor mapping.

    Raises:
        DumpFormatError: If the file is not a well-formed checkpoint
        OSError: If the file cannot be opened
    """
    state: Dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise DumpFormatError(f"Bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            try:
                name = _read_exact(fh, name_len).decode("utf-8")
            except UnicodeDecodeError as e:
                raise DumpFormatError(f"Parameter name is not valid UTF-8: {e}")
            state[name] = read_tensor(fh)
    logger.debug(f"Loaded checkpoint {path} with {len(state)} tensors")
    return state


def restore_checkpoint(store: ParamStore, state: Dict[str, Tensor]) -> None:
    """
    Copy checkpoint values into an existing store.

    Raises:
        ConfigurationError: If a name is missing or a shape differs
    """
    for param in store:
        if param.name not in state:
            raise ConfigurationError(f"Checkpoint is missing '{param.name}'")
        if state[param.name].shape != param.shape:
            raise ConfigurationError(
                f"Shape mismatch for '{param.name}': checkpoint {state[param.name].shape} "
                f"vs model {param.shape}"
            )
        param.value = Tensor(state[param.name].data, dtype=param.value.dtype)
    for name, buf in store.buffers.items():
        if name in state:
            store.buffer(name)[...] = state[name].data


# ============================================================================
# RANDOM STATE
# ============================================================================

def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used everywhere randomness is needed."""
    return np.random.default_rng(seed)
