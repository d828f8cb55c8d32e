"""Byte-level corpora: files, downloads and deterministic synthetic text."""
import hashlib
import logging
import pathlib
from typing import Optional, Union

import numpy as np
import requests

from ..cache import get_cache_dir
from ..diffcore import RngState
from ..errors import ConfigurationError, EmptyBatchError

logger = logging.getLogger('moelab')

#: distinct byte values a model vocabulary must cover
BYTE_VOCAB = 256

SYNTHETIC_STYLES = ('prose', 'code', 'digits')

_WORDS = ('the', 'a', 'river', 'stone', 'light', 'over', 'under', 'quiet', 'old', 'house', 'wind',
          'carried', 'small', 'field', 'and', 'of', 'into', 'evening', 'bright', 'walked', 'slowly',
          'garden', 'morning', 'was', 'near', 'long', 'road', 'green', 'she', 'he', 'they', 'found')
_NAMES = ('x', 'y', 'n', 'value', 'total', 'item', 'count', 'acc')
_OPS = ('+', '-', '*')


def _prose(generator: np.random.Generator, n_bytes: int) -> str:
    parts, size = [], 0
    while size < n_bytes:
        words = [_WORDS[i] for i in generator.integers(0, len(_WORDS), generator.integers(4, 12))]
        sentence = ' '.join(words).capitalize() + ('.' if generator.random() < 0.8 else ',') + ' '
        parts.append(sentence)
        size += len(sentence)
    return ''.join(parts)


def _code(generator: np.random.Generator, n_bytes: int) -> str:
    parts, size = [], 0
    while size < n_bytes:
        a, b = (_NAMES[i] for i in generator.integers(0, len(_NAMES), 2))
        op = _OPS[generator.integers(0, len(_OPS))]
        k = int(generator.integers(0, 10))
        block = (f'def f{k}({a}, {b}):\n'
                 f'    if {a} > {k}:\n'
                 f'        return {a} {op} {b}\n'
                 f'    return {b}\n\n')
        parts.append(block)
        size += len(block)
    return ''.join(parts)


def _digits(generator: np.random.Generator, n_bytes: int) -> str:
    parts, size = [], 0
    while size < n_bytes:
        a, b = (int(v) for v in generator.integers(0, 1000, 2))
        line = f'{a} + {b} = {a + b}\n'
        parts.append(line)
        size += len(line)
    return ''.join(parts)


_GENERATORS = {'prose': _prose, 'code': _code, 'digits': _digits}


def synthetic_text(style: str, n_bytes: int, seed: int = 0) -> bytes:
    """``n_bytes`` of deterministic toy text in one of :data:`SYNTHETIC_STYLES`."""
    if style not in _GENERATORS:
        raise ConfigurationError(f'unknown synthetic corpus style "{style}", expected one of {SYNTHETIC_STYLES}')
    generator = RngState(seed, SYNTHETIC_STYLES.index(style)).generator
    return _GENERATORS[style](generator, n_bytes).encode('utf-8')[:n_bytes]


class Corpus:
    """Byte tokens with a disjoint train/validation split.

    Parameters
    ----------
    data : bytes
        Raw corpus content.
    valid_fraction : float
        Share of the bytes (taken from the end) used for validation.
    name : str
        Label used in reports.
    """

    def __init__(self, data: bytes, valid_fraction: float = 0.1, name: str = 'corpus'):
        if not 0 <= valid_fraction < 1:
            raise ConfigurationError(f'valid_fraction must lie in [0, 1), got {valid_fraction}')
        self.name = name
        self.tokens = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
        self.split = len(self.tokens) - int(round(len(self.tokens) * valid_fraction))

    def __repr__(self):
        return f'{self.__class__.__name__}(name={self.name}, n_bytes={len(self.tokens)}, split={self.split})'

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_file(cls, filename: Union[str, pathlib.Path], valid_fraction: float = 0.1) -> 'Corpus':
        filename = pathlib.Path(filename)
        with open(filename, 'rb') as f:
            return cls(f.read(), valid_fraction, name=filename.stem)

    @classmethod
    def synthetic(cls, style: str, n_bytes: int, seed: int = 0, valid_fraction: float = 0.1) -> 'Corpus':
        return cls(synthetic_text(style, n_bytes, seed), valid_fraction, name=style)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[:self.split]

    @property
    def valid(self) -> np.ndarray:
        return self.tokens[self.split:]

    def batch(self, step: int, batch_size: int, seq_len: int, seed: int, split: str = 'train') -> np.ndarray:
        """Token windows ``[batch_size, seq_len + 1]`` for ``step``.

        Window starts depend only on ``seed``, ``step`` and the split, so
        batches can be regenerated in any order.
        """
        source = self.train if split == 'train' else self.valid
        n_starts = len(source) - seq_len
        if n_starts < 1:
            raise EmptyBatchError(f'{split} split of {self.name} has {len(source)} bytes, '
                                  f'need more than {seq_len}')
        generator = RngState(seed, 0 if split == 'train' else 1, step).generator
        starts = generator.integers(0, n_starts, batch_size)
        return np.stack([source[s:s + seq_len + 1] for s in starts])


def load_corpus(source: str, n_bytes: int = 1 << 16, seed: int = 0, valid_fraction: float = 0.1) -> Corpus:
    """A corpus from ``'synthetic:<style>'`` or from a file path."""
    if source.startswith('synthetic:'):
        return Corpus.synthetic(source.split(':', 1)[1], n_bytes, seed, valid_fraction)
    path = pathlib.Path(source)
    if not path.exists():
        raise ConfigurationError(f'corpus file {path} does not exist')
    return Corpus.from_file(path, valid_fraction)


def fetch_corpus(url: str,
                 known_hash: Optional[str] = None,
                 dest_filename: Optional[Union[str, pathlib.Path]] = None,
                 overwrite_existing: bool = False) -> pathlib.Path:
    """Download a text corpus and check its hash.

    Parameters
    ----------
    url : str
        Location of the UTF-8 text file.
    known_hash : str, optional
        Expected sha256 of the content.
    dest_filename : str or pathlib.Path, optional
        Target file; defaults to the file name of the URL inside the cache directory.
    overwrite_existing : bool
        Replace an existing target file.

    Returns
    -------
    pathlib.Path
        The stored corpus file.

    Raises
    ------
    HTTPError if the request is not successful
    ValueError if the hash of the downloaded content does not match ``known_hash``
    """
    if dest_filename is None:
        dest_filename = get_cache_dir() / 'corpora' / url.rsplit('/', 1)[-1]
    dest_filename = pathlib.Path(dest_filename)
    if dest_filename.exists() and not overwrite_existing:
        logger.debug(f'Taking existing file {dest_filename} and returning it.')
        return dest_filename

    logger.debug(f'Performing request to {url}')
    response = requests.get(url, stream=True)
    if not response.ok:
        response.raise_for_status()
    content = response.content
    if known_hash:
        calculated_hash = hashlib.sha256(content).hexdigest()
        if calculated_hash != known_hash:
            raise ValueError(f'Corpus from {url} does not match the expected hash')

    dest_filename.parent.mkdir(parents=True, exist_ok=True)
    with open(dest_filename, 'wb') as f:
        f.write(content)
    logger.info(f'Stored corpus of {len(content)} bytes at {dest_filename}')
    return dest_filename
