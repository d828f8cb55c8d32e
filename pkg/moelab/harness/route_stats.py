"""Per-corpus routing statistics of a trained model."""
import json
import logging
import pathlib
from dataclasses import dataclass
from typing import Dict, List, Mapping, Union

import numpy as np

from .corpus import Corpus
from ..blocks.model import MoELanguageModel
from ..diffcore import no_grad
from ..routing.monitors import router_similarity

logger = logging.getLogger('moelab')

CorpusLike = Union[Corpus, bytes, str, np.ndarray]


@dataclass
class LayerRouteStats:
    mean_ffn: float
    std_ffn: float
    expert_load: np.ndarray
    router_similarity: float

    def as_dict(self) -> Dict:
        return {'mean_ffn': self.mean_ffn,
                'std_ffn': self.std_ffn,
                'expert_load': self.expert_load.tolist(),
                'router_similarity': self.router_similarity}


@dataclass
class CorpusRouteStats:
    name: str
    tokens: np.ndarray
    #: activated FFN experts per layer and token, ``[n_layers, T]``
    ffn_counts: np.ndarray
    layers: List[LayerRouteStats]

    @property
    def mean_ffn(self) -> float:
        return float(self.ffn_counts.mean())


@dataclass
class RouteStatsReport:
    corpora: Dict[str, CorpusRouteStats]

    def as_dict(self) -> Dict:
        return {name: {'mean_ffn': stats.mean_ffn,
                       'n_tokens': int(stats.tokens.size),
                       'layers': [layer.as_dict() for layer in stats.layers]}
                for name, stats in self.corpora.items()}

    def ordering(self) -> List[str]:
        """Corpus names by decreasing mean number of activated FFN experts."""
        return sorted(self.corpora, key=lambda name: -self.corpora[name].mean_ffn)

    def render_table(self) -> str:
        n_layers = max(len(s.layers) for s in self.corpora.values())
        header = f'{"corpus":<12}' + ''.join(f' {"layer " + str(i):>14}' for i in range(n_layers))
        lines = [header]
        for name, stats in self.corpora.items():
            cells = ''.join(f' {layer.mean_ffn:>6.3f}+-{layer.std_ffn:<6.3f}' for layer in stats.layers)
            lines.append(f'{name:<12}{cells}')
        return '\n'.join(lines)

    def dump_tokens(self, filename: Union[str, pathlib.Path]) -> pathlib.Path:
        """Write one JSON line per token: corpus, position, byte, character and per-layer FFN counts."""
        filename = pathlib.Path(filename)
        filename.parent.mkdir(parents=True, exist_ok=True)
        with open(filename, 'w', encoding='utf-8') as f:
            for name, stats in self.corpora.items():
                for pos, token in enumerate(stats.tokens):
                    f.write(json.dumps({'corpus': name,
                                        'position': pos,
                                        'byte': int(token),
                                        'char': chr(token) if 32 <= token < 127 else None,
                                        'ffn_counts': stats.ffn_counts[:, pos].tolist()}) + '\n')
        return filename


def _as_tokens(source: CorpusLike) -> np.ndarray:
    if isinstance(source, Corpus):
        return source.valid if len(source.valid) else source.train
    if isinstance(source, str):
        source = source.encode('utf-8')
    if isinstance(source, (bytes, bytearray)):
        return np.frombuffer(bytes(source), dtype=np.uint8).astype(np.int64)
    return np.asarray(source, dtype=np.int64).reshape(-1)


def routing_stats_report(model: MoELanguageModel,
                         corpora: Mapping[str, CorpusLike],
                         seq_len: int = 64,
                         max_tokens: int = 4096) -> RouteStatsReport:
    """Mean and standard deviation of activated FFN experts per layer for each corpus.

    Each corpus is cut into windows of ``seq_len`` tokens (at most
    ``max_tokens`` tokens in total, shorter corpora form one window). Router
    counters and biases are left unchanged.
    """
    results = {}
    similarities = [router_similarity(r).value for r in model.routers]
    for name, source in corpora.items():
        tokens = _as_tokens(source)[:max_tokens]
        if tokens.size <= seq_len:
            windows = tokens[None, :]
        else:
            n_windows = tokens.size // seq_len
            tokens = tokens[:n_windows * seq_len]
            windows = tokens.reshape(n_windows, seq_len)
        with no_grad():
            out = model(windows)
        counts = np.stack([aux.decision.ffn_counts for aux in out.aux])
        layers = []
        for i, aux in enumerate(out.aux):
            loads = aux.decision.expert_loads.astype(float)
            layers.append(LayerRouteStats(mean_ffn=float(counts[i].mean()),
                                          std_ffn=float(counts[i].std()),
                                          expert_load=loads / loads.sum(),
                                          router_similarity=similarities[i]))
        results[name] = CorpusRouteStats(name=name, tokens=tokens, ffn_counts=counts, layers=layers)
        logger.debug(f'route stats for {name}: mean activated FFN experts {results[name].mean_ffn:.3f}')
    return RouteStatsReport(results)
