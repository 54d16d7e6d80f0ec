"""
Checkpoint blobs for mfirl.

Provides the binary array container used for network parameters and training
state, plus HMAC signature verification so that a resumed run never loads a
truncated or foreign file.

Blob layout:
    b"MFIRLCK1" | uint32 little-endian header length | UTF-8 JSON header | float64 LE payload
"""

import hashlib
import hmac
import json
import logging
import os
import struct
from pathlib import Path
from typing import Tuple, Optional, Dict, Any

import numpy as np

from .exceptions import CheckpointIntegrityError

logger = logging.getLogger(__name__)

MAGIC = b"MFIRLCK1"
DEFAULT_KEY = "mfirl-local-checkpoint-key"
SIGNATURE_SUFFIX = ".sig"


def pack_arrays(arrays: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """
    Serialize named float arrays and a JSON-compatible metadata dict.

    Example:
        blob = pack_arrays({"reward.params": net.params}, {"iteration": 12})
        arrays, meta = unpack_arrays(blob)
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"arrays": entries, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def unpack_arrays(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Inverse of pack_arrays.

    Raises:
        CheckpointIntegrityError: If the magic, header or payload length is wrong
    """
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise CheckpointIntegrityError("not an mfirl checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"malformed checkpoint header: {e}")
    payload = np.frombuffer(blob[start + header_len:], dtype="<f8")
    expected = sum(e["count"] for e in header["arrays"])
    if payload.size != expected:
        raise CheckpointIntegrityError(f"payload holds {payload.size} values, header declares {expected}")
    arrays = {}
    for e in header["arrays"]:
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).copy()
    return arrays, header["metadata"]


def sign_blob(blob: bytes, key: str) -> str:
    """Signature header value "v1=<hex HMAC-SHA256>"."""
    digest = hmac.new(key.encode("utf-8"), blob, hashlib.sha256).hexdigest()
    return f"v1={digest}"


def verify_checkpoint_signature(blob: bytes, signature_header: str, key: str) -> Tuple[bool, str]:
    """
    Verify an HMAC-SHA256 signature produced by sign_blob.

    Returns:
        Tuple of (verified: bool, reason: str)
        - (True, "valid") if signature is valid
        - (False, reason) otherwise
    """
    if not signature_header:
        return False, "no_signature"
    parts = {}
    for part in signature_header.strip().split(","):
        if "=" in part:
            k, v = part.split("=", 1)
            parts[k] = v
    signature = parts.get("v1", "")
    if not signature:
        return False, "missing_v1_signature"
    expected = sign_blob(blob, key)[3:]
    if hmac.compare_digest(signature, expected):
        return True, "valid"
    return False, "signature_mismatch"


def verify_checkpoint_signature_strict(blob: bytes, signature_header: str, key: str) -> None:
    """
    Raises:
        CheckpointIntegrityError: If signature verification fails
    """
    verified, reason = verify_checkpoint_signature(blob, signature_header, key)
    if not verified:
        raise CheckpointIntegrityError(f"Checkpoint signature verification failed: {reason}")


def try_verify_with_keys(
    blob: bytes,
    signature_header: str,
    primary_key: str,
    previous_key: Optional[str] = None,
) -> Tuple[bool, str]:
    """
    Try the primary key, then the previous key during a key rotation.

    Returns:
        (True, "valid_primary"), (True, "valid_previous") or (False, reason)
    """
    verified, reason = verify_checkpoint_signature(blob, signature_header, primary_key)
    if verified:
        return True, "valid_primary"
    if previous_key:
        verified, _ = verify_checkpoint_signature(blob, signature_header, previous_key)
        if verified:
            return True, "valid_previous"
    return False, f"both_keys_failed (primary: {reason})"


def save_checkpoint(
    path,
    arrays: Dict[str, np.ndarray],
    metadata: Dict[str, Any],
    key: str = DEFAULT_KEY,
) -> Path:
    """Write the blob and its `.sig` sidecar; the blob is replaced atomically."""
    path = Path(path)
    blob = pack_arrays(arrays, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    Path(str(path) + SIGNATURE_SUFFIX).write_text(sign_blob(blob, key) + "\n")
    return path


def load_checkpoint(
    path,
    key: str = DEFAULT_KEY,
    previous_key: Optional[str] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read and verify a checkpoint written by save_checkpoint.

    Raises:
        CheckpointIntegrityError: If the file, its signature or its layout is invalid
    """
    path = Path(path)
    sig_path = Path(str(path) + SIGNATURE_SUFFIX)
    if not path.exists() or not sig_path.exists():
        raise CheckpointIntegrityError(f"checkpoint or signature missing for {path}")
    blob = path.read_bytes()
    verified, reason = try_verify_with_keys(blob, sig_path.read_text(), key, previous_key)
    if not verified:
        raise CheckpointIntegrityError(f"Checkpoint signature verification failed for {path}: {reason}")
    if reason == "valid_previous":
        logger.warning("checkpoint %s verified with the previous key; re-save to rotate", path)
    return unpack_arrays(blob)
