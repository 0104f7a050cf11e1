"""Base-4 integer codes for outcome vectors: ``M = sum_i m_i * 4**i`` (gene 0 least significant)."""
from __future__ import annotations

import numpy as np

MAX_CODE_GENES = 31  # 4**31 < 2**63


def encode_base4(m) -> np.ndarray | int:
    """Encode outcome vector(s); the last axis indexes genes."""
    m = np.asarray(m)
    if m.shape[-1] > MAX_CODE_GENES:
        raise ValueError(f"at most {MAX_CODE_GENES} genes can be encoded in int64")
    if np.any((m < 0) | (m > 3)):
        raise ValueError("outcome labels must lie in {0,1,2,3}")
    powers = 4 ** np.arange(m.shape[-1], dtype=np.int64)
    codes = m.astype(np.int64) @ powers
    return int(codes) if codes.ndim == 0 else codes


def decode_base4(code, n: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    if np.any(code < 0) or np.any(code >= 4**n):
        raise ValueError(f"code out of range for n={n}")
    return ((code[..., None] // 4 ** np.arange(n, dtype=np.int64)) % 4).astype(np.int64)
