"""Provenance run card: a JSON-LD description of a training run."""
import datetime
import logging
import pathlib
from typing import Dict, Optional, Union

from rdflib import BNode, Graph, Literal, URIRef
from rdflib.namespace import DefinedNamespace, Namespace, PROV, RDF, RDFS, SDO, XSD

from .config import RunConfig
from ..config import JSON_INDENT
from .._version import __version__

logger = logging.getLogger('moelab')


class M4I(DefinedNamespace):
    # uri = "http://w3id.org/nfdi4ing/metadata4ing#"
    _fail = True
    NumericalVariable: URIRef  # ['numerical variable', 'numerische Variable']
    ProcessingStep: URIRef  # ['Arbeitsschritt', 'processing step']
    TextVariable: URIRef  # ['text variable', 'textbasierte Variable']
    Tool: URIRef  # ['Werkzeug', 'tool']
    hasEmployedTool: URIRef  # ['has employed tool', 'hat eingesetztes Werkzeug']
    hasNumericalValue: URIRef  # ['has numerical value', 'hat Zahlenwert']
    hasParameter: URIRef  # ['has parameter', 'hat Parameter']
    hasStringValue: URIRef  # ['has string value', 'hat Zeichenwert']
    hasVariableDescription: URIRef  # ['has variable description', 'hat Variablenbeschreibung']

    _NS = Namespace("http://w3id.org/nfdi4ing/metadata4ing#")


def run_parameters(config: RunConfig) -> Dict[str, Union[int, float, str]]:
    """The run settings listed on the card."""
    m, loss, optim = config.model, config.loss, config.optim
    lr = optim.effective_lr()
    return {'seed': config.seed,
            'tag': config.tag,
            'corpus': config.corpus,
            'd_model': m.d_model,
            'n_layers': m.n_layers,
            'n_ffn_experts': m.n_ffn_experts,
            'n_zero_experts': m.n_zero_experts,
            'top_k': m.top_k,
            'k_expected': m.k_expected,
            'shortcut': str(m.shortcut).lower(),
            'alpha': loss.alpha,
            'zloss_lambda': loss.zloss_lambda,
            'mtp_weight': loss.mtp_weight,
            'adam_eps': optim.eps,
            'width_factor': optim.width_factor,
            **{f'lr_{c.value}': v for c, v in lr.items()},
            'steps': config.schedule.steps,
            'batch_size': config.schedule.batch_size,
            'seq_len': config.schedule.seq_len}


def build_run_graph(config: RunConfig,
                    artifacts: Dict[str, pathlib.Path],
                    started: datetime.datetime,
                    ended: Optional[datetime.datetime] = None) -> Graph:
    g = Graph()
    g.bind('m4i', M4I._NS)
    g.bind('prov', PROV)
    g.bind('schema', SDO)
    run = URIRef(f'urn:moelab:run:{config.tag}:{config.seed}')
    g.add((run, RDF.type, PROV.Activity))
    g.add((run, RDF.type, M4I.ProcessingStep))
    g.add((run, RDFS.label, Literal(config.tag)))
    g.add((run, PROV.startedAtTime, Literal(started.isoformat(), datatype=XSD.dateTime)))
    if ended is not None:
        g.add((run, PROV.endedAtTime, Literal(ended.isoformat(), datatype=XSD.dateTime)))

    tool = BNode()
    g.add((tool, RDF.type, M4I.Tool))
    g.add((tool, RDF.type, SDO.SoftwareApplication))
    g.add((tool, SDO.name, Literal('moelab')))
    g.add((tool, SDO.softwareVersion, Literal(__version__)))
    g.add((run, M4I.hasEmployedTool, tool))

    for name, value in run_parameters(config).items():
        var = BNode()
        g.add((run, M4I.hasParameter, var))
        g.add((var, M4I.hasVariableDescription, Literal(name)))
        if isinstance(value, str):
            g.add((var, RDF.type, M4I.TextVariable))
            g.add((var, M4I.hasStringValue, Literal(value)))
        else:
            g.add((var, RDF.type, M4I.NumericalVariable))
            g.add((var, M4I.hasNumericalValue, Literal(value)))

    for role, path in artifacts.items():
        entity = URIRef(pathlib.Path(path).resolve().as_uri())
        g.add((entity, RDF.type, PROV.Entity))
        g.add((entity, RDFS.label, Literal(role)))
        g.add((entity, PROV.wasGeneratedBy, run))
        g.add((run, PROV.generated, entity))
    return g


def write_run_card(filename: Union[str, pathlib.Path],
                   config: RunConfig,
                   artifacts: Dict[str, pathlib.Path],
                   started: datetime.datetime,
                   ended: Optional[datetime.datetime] = None) -> pathlib.Path:
    """Serialise the run description as JSON-LD to ``filename``."""
    filename = pathlib.Path(filename)
    graph = build_run_graph(config, artifacts, started, ended)
    with open(filename, 'w', encoding='utf-8') as f:
        f.write(graph.serialize(format='json-ld', indent=JSON_INDENT))
    logger.debug(f'Run card with {len(graph)} triples written to {filename}')
    return filename
