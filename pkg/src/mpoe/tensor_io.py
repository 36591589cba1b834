"""TensorFile binary format and MPOE bank checkpoints.

TensorFile layout (all little-endian):

    magic   4 bytes  b"MPOT"
    version u32      1
    dtype   u8       0 = f64, 1 = f32
    ndim    u8
    extents ndim x u64
    payload prod(extents) floats, row-major
"""

import logging
import math
import struct
from pathlib import Path
from typing import Union

import numpy as np

from mpoe.errors import TensorFileError
from mpoe.gating import GateConfig
from mpoe.layer import SLOTS, MpoeExpertBank
from mpoe.models import CheckpointManifest, DType, FactorizationPlan, SlotPlans, WeightSlot
from mpoe.serialization import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

MAGIC = b"MPOT"
VERSION = 1
TENSOR_SUFFIX = ".mpot"
MANIFEST_NAME = "manifest.json"

_HEADER = struct.Struct("<4sIBB")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {DType.F64: 0, DType.F32: 1}


def encode_tensor(t: np.ndarray, dtype: DType = DType.F64) -> bytes:
    """Serialize a tensor to TensorFile bytes."""
    dtype = DType(dtype)
    code = _CODES[dtype]
    t = np.asarray(t)
    if t.ndim > 255:
        raise TensorFileError(f"cannot store a {t.ndim}-order tensor")
    header = _HEADER.pack(MAGIC, VERSION, code, t.ndim)
    extents = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes(order="C")
    return header + extents + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """
    Parse TensorFile bytes into a float64 array (f32 payloads are promoted).

    Raises:
        TensorFileError: On a bad magic, unknown version or dtype, or a
            payload whose length does not match the extents.
    """
    if len(data) < _HEADER.size:
        raise TensorFileError("file is shorter than the TensorFile header")
    magic, version, code, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported TensorFile version {version}")
    if code not in _DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    offset = _HEADER.size
    if len(data) < offset + 8 * ndim:
        raise TensorFileError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    dtype = _DTYPES[code]
    expected = math.prod(shape) * dtype.itemsize
    if len(data) - offset != expected:
        raise TensorFileError(f"payload is {len(data) - offset} bytes, extents need {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(np.float64)


def write_tensor(path: Union[str, Path], t: np.ndarray, dtype: DType = DType.F64) -> Path:
    """Atomically write one TensorFile."""
    return atomic_write_bytes(path, encode_tensor(t, dtype))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    """
    Read one TensorFile.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        TensorFileError: If the file is malformed.
    """
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(bank: MpoeExpertBank, directory: Union[str, Path], step: int = 0) -> Path:
    """
    Write a bank as one TensorFile per parameter plus ``manifest.json``.

    Returns:
        Path to the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, t in bank.to_params().items():
        filename = f"{name}{TENSOR_SUFFIX}"
        write_tensor(directory / filename, t)
        files[name] = filename
    manifest = CheckpointManifest(
        d_model=bank.d_model,
        d_ff=bank.d_ff,
        n_experts=bank.n_experts,
        plans=SlotPlans(w1=bank.plans[WeightSlot.W1], w2=bank.plans[WeightSlot.W2]),
        gate_kind=bank.gate.kind,
        k=bank.gate.k,
        noise_enabled=bank.gate.noise_enabled,
        step=step,
        files=files,
    )
    path = atomic_write_text(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    logger.info("saved checkpoint with %d tensors to %s", len(files), directory)
    return path


def load_checkpoint(directory: Union[str, Path]) -> tuple[MpoeExpertBank, CheckpointManifest]:
    """
    Rebuild a bank from a checkpoint directory.

    Raises:
        FileNotFoundError: If the directory or its manifest is missing.
        TensorFileError: If the manifest or a tensor is malformed.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise TensorFileError(f"invalid checkpoint manifest: {e}") from e
    if manifest.format_version != 1:
        raise TensorFileError(f"unsupported checkpoint version {manifest.format_version}")

    params = {name: read_tensor(directory / filename) for name, filename in manifest.files.items()}
    plans: dict[WeightSlot, FactorizationPlan] = {
        WeightSlot.W1: manifest.plans.w1,
        WeightSlot.W2: manifest.plans.w2,
    }
    n = manifest.n_experts
    try:
        gate = GateConfig(
            gate_weights=params["gate.weights"],
            k=manifest.k,
            kind=manifest.gate_kind,
            noise_weights=params.get("gate.noise_weights"),
            noise_enabled=manifest.noise_enabled,
        )
        centrals, auxiliaries, biases = {}, {}, {}
        for slot in SLOTS:
            m = plans[slot].m
            positions = [k for k in range(m) if k != m // 2]
            centrals[slot] = params[f"{slot.value}.central"]
            auxiliaries[slot] = [
                [params[f"{slot.value}.aux.{i}.{pos}"] for pos in positions] for i in range(n)
            ]
            biases[slot] = params[f"{slot.value}.bias"]
        bank = MpoeExpertBank(
            plans=plans, centrals=centrals, auxiliaries=auxiliaries, biases=biases, gate=gate
        )
    except KeyError as e:
        raise TensorFileError(f"checkpoint is missing tensor {e}") from e
    except ValueError as e:
        raise TensorFileError(f"checkpoint tensors do not fit its manifest: {e}") from e
    return bank, manifest
