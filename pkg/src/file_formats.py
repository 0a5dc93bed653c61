"""
Binary containers for spectral bases (``SVDC``) and feature trajectories (``SVCT``).

Both formats are little-endian, end with a CRC-32 of every preceding byte,
and are accompanied by a human-readable JSON sidecar at ``<path>.json``.
Writes are atomic: the payload goes to a temporary file in the target
directory and is renamed into place.
"""

import json
import os
import struct
import tempfile
import zlib
from typing import Any, Dict, List, Tuple

import numpy as np

from src.error_handler import ChecksumError, MalformedFileError, VersionMismatchError, setup_logger

logger = setup_logger('svdcache.file_formats')

BASIS_MAGIC = b"SVDC"
TRAJECTORY_MAGIC = b"SVCT"
FORMAT_VERSION = 1
GLOBAL_STEP_ID = -1

# magic, version, block_id, step_id, D, r, tau, k_default
_BASIS_HEADER = struct.Struct('<4sIiiIIdI')
# magic, version, L, T, N, D
_TRAJ_HEADER = struct.Struct('<4sIIIII')
_CRC = struct.Struct('<I')
_F8 = np.dtype('<f8')


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write bytes to path via a temporary file and ``os.replace``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_json(path: str, obj: Any) -> None:
    """Write sorted-key, indented JSON atomically."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode('utf-8'))


def sidecar_path(path: str) -> str:
    return f"{path}.json"


def _split_crc(data: bytes, magic: bytes, kind: str) -> bytes:
    """Check magic and CRC; return the payload without the trailing CRC."""
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise MalformedFileError(f"Not a {kind} file (bad magic)",
                                 {'expected_magic': magic.decode('ascii'), 'size': len(data)})
    if len(data) < len(magic) + _CRC.size:
        raise ChecksumError(f"{kind} file too short to carry a checksum", {'size': len(data)})
    payload, tail = data[:-_CRC.size], data[-_CRC.size:]
    stored = _CRC.unpack(tail)[0]
    actual = crc32(payload)
    if stored != actual:
        raise ChecksumError(f"{kind} checksum mismatch (stored {stored:#010x}, computed {actual:#010x})",
                            {'stored': stored, 'computed': actual, 'size': len(data)})
    return payload


def _check_version(version: int, kind: str) -> None:
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Unsupported {kind} format version {version} (expected {FORMAT_VERSION})",
                                   {'version': version, 'expected': FORMAT_VERSION})


def encode_basis(block_id: int, step_id: int, tau: float, k_default: int,
                 sigma: np.ndarray, V: np.ndarray) -> bytes:
    """
    Serialize basis fields into ``SVDC`` bytes.

    Args:
        block_id: Layer index
        step_id: Timestep label, ``GLOBAL_STEP_ID`` for a global basis
        tau: Energy threshold used at creation
        k_default: Rank selected for tau
        sigma: Length-r singular values
        V: D x r right singular vectors

    Returns:
        Encoded bytes including the trailing CRC
    """
    D, r = V.shape
    header = _BASIS_HEADER.pack(BASIS_MAGIC, FORMAT_VERSION, int(block_id), int(step_id),
                                D, r, float(tau), int(k_default))
    payload = (header
               + np.ascontiguousarray(sigma, dtype=_F8).tobytes()
               + np.ascontiguousarray(V, dtype=_F8).tobytes(order='C'))
    return payload + _CRC.pack(crc32(payload))


def decode_basis(data: bytes) -> Dict[str, Any]:
    """
    Parse ``SVDC`` bytes.

    Returns:
        Dictionary with block_id, step_id, tau, k_default, sigma, V

    Raises:
        MalformedFileError: Bad magic or inconsistent length
        ChecksumError: CRC mismatch (including truncation)
        VersionMismatchError: Unsupported version
    """
    payload = _split_crc(data, BASIS_MAGIC, 'basis')
    if len(payload) < _BASIS_HEADER.size:
        raise MalformedFileError("Basis header is incomplete", {'size': len(payload)})
    _, version, block_id, step_id, D, r, tau, k_default = _BASIS_HEADER.unpack_from(payload)
    _check_version(version, 'basis')

    expected = _BASIS_HEADER.size + 8 * (r + D * r)
    if len(payload) != expected:
        raise MalformedFileError(f"Basis payload length {len(payload)} does not match header (expected {expected})",
                                 {'size': len(payload), 'expected': expected, 'D': D, 'r': r})
    offset = _BASIS_HEADER.size
    sigma = np.frombuffer(payload, dtype=_F8, count=r, offset=offset).astype(np.float64)
    offset += 8 * r
    V = np.frombuffer(payload, dtype=_F8, count=D * r, offset=offset).astype(np.float64).reshape(D, r)
    return {
        'block_id': block_id,
        'step_id': step_id,
        'tau': tau,
        'k_default': k_default,
        'sigma': sigma,
        'V': V,
    }


def encode_trajectory(blocks: List[List[np.ndarray]]) -> bytes:
    """
    Serialize a trajectory laid out as ``blocks[l][t]`` (each N x D) into ``SVCT`` bytes.

    Raises:
        MalformedFileError: If blocks are ragged or shapes differ
    """
    L = len(blocks)
    T = len(blocks[0]) if L else 0
    if L == 0 or T == 0:
        raise MalformedFileError("Cannot encode an empty trajectory", {'L': L, 'T': T})
    N, D = blocks[0][0].shape
    chunks = [_TRAJ_HEADER.pack(TRAJECTORY_MAGIC, FORMAT_VERSION, L, T, N, D)]
    for l, steps in enumerate(blocks):
        if len(steps) != T:
            raise MalformedFileError(f"Block {l} has {len(steps)} steps, expected {T}")
        for F in steps:
            if F.shape != (N, D):
                raise MalformedFileError(f"Block {l} has a matrix of shape {F.shape}, expected {(N, D)}")
            chunks.append(np.ascontiguousarray(F, dtype=_F8).tobytes(order='C'))
    payload = b"".join(chunks)
    return payload + _CRC.pack(crc32(payload))


def decode_trajectory(data: bytes) -> Tuple[Tuple[int, int, int, int], List[List[np.ndarray]]]:
    """
    Parse ``SVCT`` bytes.

    Returns:
        ((L, T, N, D), blocks) with ``blocks[l][t]`` an N x D array

    Raises:
        MalformedFileError, ChecksumError, VersionMismatchError
    """
    payload = _split_crc(data, TRAJECTORY_MAGIC, 'trajectory')
    if len(payload) < _TRAJ_HEADER.size:
        raise MalformedFileError("Trajectory header is incomplete", {'size': len(payload)})
    _, version, L, T, N, D = _TRAJ_HEADER.unpack_from(payload)
    _check_version(version, 'trajectory')

    expected = _TRAJ_HEADER.size + 8 * L * T * N * D
    if len(payload) != expected:
        raise MalformedFileError(f"Trajectory payload length {len(payload)} does not match header",
                                 {'size': len(payload), 'expected': expected})
    values = np.frombuffer(payload, dtype=_F8, offset=_TRAJ_HEADER.size).astype(np.float64)
    values = values.reshape(L, T, N, D)
    blocks = [[values[l, t].copy() for t in range(T)] for l in range(L)]
    return (L, T, N, D), blocks


def read_bytes(path: str) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def read_sidecar(path: str) -> Dict[str, Any]:
    """
    Load the JSON sidecar of a binary file; an absent sidecar yields ``{}``.

    Raises:
        MalformedFileError: If the sidecar is not valid JSON
    """
    side = sidecar_path(path)
    if not os.path.exists(side):
        logger.debug(f"No sidecar for {path}")
        return {}
    try:
        with open(side, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"Invalid JSON sidecar {side}: {e}", {'path': side})
