"""Tensor container files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header and the
little-endian tensor payloads, concatenated in header order. The header lists
``format_version``, ``dtype``, the tensors (``name``, ``shape``, ``dtype``,
``offset``, ``nbytes``) and free-form ``meta`` data.
"""
import json
import logging
import pathlib
import struct
from typing import Dict, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger('moelab')

FORMAT_VERSION = 1


def save_tensors(filename: Union[str, pathlib.Path],
                 tensors: Dict[str, np.ndarray],
                 meta: Optional[Dict] = None) -> pathlib.Path:
    """Write ``tensors`` (in insertion order) and ``meta`` to ``filename``."""
    filename = pathlib.Path(filename)
    entries, payloads, offset = [], [], 0
    dtypes = set()
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        little = array.astype(array.dtype.newbyteorder('<'), copy=False)
        raw = little.tobytes()
        entries.append({'name': name,
                        'shape': list(array.shape),
                        'dtype': little.dtype.str,
                        'offset': offset,
                        'nbytes': len(raw)})
        dtypes.add(little.dtype.str)
        payloads.append(raw)
        offset += len(raw)
    header = {'format_version': FORMAT_VERSION,
              'dtype': dtypes.pop() if len(dtypes) == 1 else 'mixed',
              'tensors': entries,
              'meta': meta or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    filename.parent.mkdir(parents=True, exist_ok=True)
    with open(filename, 'wb') as f:
        f.write(struct.pack('<Q', len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)
    logger.debug(f'Wrote {len(entries)} tensors ({offset} bytes) to {filename}')
    return filename


def load_tensors(filename: Union[str, pathlib.Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Read a container written by :func:`save_tensors`. Returns ``(tensors, meta)``."""
    with open(filename, 'rb') as f:
        content = f.read()
    (header_length,) = struct.unpack('<Q', content[:8])
    header = json.loads(content[8:8 + header_length].decode('utf-8'))
    if header.get('format_version') != FORMAT_VERSION:
        raise ValueError(f'Unsupported checkpoint format version: {header.get("format_version")}')
    start = 8 + header_length
    tensors = {}
    for entry in header['tensors']:
        dtype = np.dtype(entry['dtype'])
        count = entry['nbytes'] // dtype.itemsize
        array = np.frombuffer(content, dtype=dtype, count=count, offset=start + entry['offset'])
        tensors[entry['name']] = array.reshape(entry['shape']).astype(dtype.newbyteorder('='))
    return tensors, header['meta']
