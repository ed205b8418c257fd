"""
Hash utility functions for artifact integrity.

SHA-256 digests of files and of array payloads, recorded in artifact
sidecars and checked on load.
"""

import hashlib
from pathlib import Path

import numpy as np


def calculate_file_hash(file_path) -> str:
    """
    SHA-256 of a payload file, read in chunks.

    Args:
        file_path: Path to the payload

    Returns:
        SHA-256 hash as hexadecimal string, or empty string when the file is missing
    """
    file_path_obj = Path(file_path)
    if not file_path_obj.is_file():
        return ""

    file_hash = hashlib.sha256()
    with open(file_path_obj, 'rb') as f:
        chunk = f.read(8192)
        while chunk:
            file_hash.update(chunk)
            chunk = f.read(8192)

    return file_hash.hexdigest()


def calculate_array_hash(array: np.ndarray) -> str:
    """
    SHA-256 of an array's little-endian float64 bytes in C order.

    Equals calculate_file_hash of the payload file written from the array.
    """
    data = np.ascontiguousarray(array, dtype='<f8')
    return hashlib.sha256(data.tobytes()).hexdigest()
