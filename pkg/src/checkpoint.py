"""
Persistência de modelos: manifesto JSON com a topologia mais um arquivo
binário little-endian de float64 por array de parâmetros.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .core.errors import CheckpointError
from .core.graph import GraphModel, SpecificNode
from .core.nnkit import DenseLayer, Parameter
from .core.vae import BasicNode, HierVae, VaeComponent

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = 'manifest.json'
BLOB_DTYPE = '<f8'

Model = Union[GraphModel, VaeComponent, HierVae]


def _vae_topology(vae: VaeComponent) -> Dict[str, Any]:
    return {'input_dim': vae.input_dim, 'latent_dim': vae.latent_dim, 'hidden_dim': vae.hidden_dim,
            'likelihood': vae.likelihood, 'sigma': vae.sigma, 'name': vae.name}


def _vae_from_topology(topo: Dict[str, Any]) -> VaeComponent:
    return VaeComponent(topo['input_dim'], topo['latent_dim'], topo['hidden_dim'], topo['likelihood'],
                        topo['sigma'], name=topo['name'], zero_init=True)


def _graph_topology(graph: GraphModel) -> Dict[str, Any]:
    nodes: List[Dict[str, Any]] = []
    for node in graph.nodes:
        if isinstance(node, BasicNode):
            nodes.append({'kind': 'basic', 'task_id': node.task_id, 'reference_elbo': node.reference_elbo,
                          'vae': _vae_topology(node.vae)})
        else:
            nodes.append({'kind': 'specific', 'task_id': node.task_id, 'sources': node.sources,
                          'weights': node.weights.tolist(), 'likelihood': node.likelihood,
                          'sigma': node.sigma, 'input_dim': node.input_dim,
                          'hidden_dim': node.enc_lower_new.out_dim,
                          'out_activation': node.dec_upper_new.activation,
                          'enc_name': node.enc_lower_new.name, 'dec_name': node.dec_upper_new.name})
    return {'tau': graph.tau, 'config': graph.config, 'gi': graph.gi, 'nodes': nodes,
            'v_rows': [[task_id, {str(k): w for k, w in row.items()}] for task_id, row in graph.v_rows]}


def _graph_from_topology(topo: Dict[str, Any]) -> GraphModel:
    graph = GraphModel(topo['tau'], topo['config'])
    for spec in topo['nodes']:
        if spec['kind'] == 'basic':
            graph.nodes.append(BasicNode(_vae_from_topology(spec['vae']), spec['task_id'], spec['reference_elbo']))
        else:
            enc = DenseLayer(spec['input_dim'], spec['hidden_dim'], 'leaky_relu', name=spec['enc_name'],
                             zero_init=True)
            dec = DenseLayer(spec['hidden_dim'], spec['input_dim'], spec['out_activation'],
                             name=spec['dec_name'], zero_init=True)
            graph.nodes.append(SpecificNode(enc, dec, np.array(spec['weights']), spec['sources'],
                                            spec['task_id'], spec['likelihood'], spec['sigma']))
    graph.gi = [int(i) for i in topo['gi']]
    graph.v_rows = [(task_id, {int(k): float(w) for k, w in row.items()}) for task_id, row in topo['v_rows']]
    return graph


def _parameters(model: Model) -> Dict[str, Parameter]:
    if isinstance(model, GraphModel):
        params: Dict[str, Parameter] = {}
        for i in range(len(model.nodes)):
            params.update(model.node_parameters(i))
        return params
    return model.parameters()


def save_checkpoint(model: Model, directory: Union[str, Path]) -> Path:
    """
    Grava o modelo em ``directory``.

    Args:
        model: GraphModel, VaeComponent ou HierVae
        directory: diretório de destino (criado se necessário)

    Returns:
        caminho do manifesto
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(model, GraphModel):
        kind, topology = 'graph', _graph_topology(model)
    elif isinstance(model, HierVae):
        kind = 'hier'
        topology = {**_vae_topology(model.base), 'name': model.name,
                    'use_second_layer': model.use_second_layer,
                    'latent_dims': [model.base.latent_dim,
                                    model.second['enc2_mu'].out_dim if model.use_second_layer else 1]}
    elif isinstance(model, VaeComponent):
        kind, topology = 'vae', _vae_topology(model)
    else:
        raise CheckpointError(f"Cannot checkpoint {type(model).__name__}")

    arrays = []
    for name, param in sorted(_parameters(model).items()):
        filename = f"{name}.f8"
        (directory / filename).write_bytes(param.data.astype(BLOB_DTYPE).tobytes())
        arrays.append({'name': name, 'file': filename, 'shape': list(param.shape), 'frozen': param.frozen})
    manifest = {'format_version': FORMAT_VERSION, 'kind': kind, 'topology': topology, 'arrays': arrays}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    logger.info("checkpoint (%s, %d arrays) written to %s", kind, len(arrays), directory)
    return path


def load_checkpoint(directory: Union[str, Path]) -> Model:
    """
    Reconstrói um modelo gravado por ``save_checkpoint``.

    Raises:
        CheckpointError: manifesto ausente, versão desconhecida ou array inconsistente
    """
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"No checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"Corrupted manifest {path}: {exc}") from exc
    if manifest.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {manifest.get('format_version')}")

    kind, topo = manifest['kind'], manifest['topology']
    if kind == 'graph':
        model: Model = _graph_from_topology(topo)
    elif kind == 'hier':
        model = HierVae(topo['input_dim'], tuple(topo['latent_dims']), topo['hidden_dim'], topo['likelihood'],
                        topo['sigma'], name=topo['name'], use_second_layer=topo['use_second_layer'],
                        zero_init=True)
    elif kind == 'vae':
        model = _vae_from_topology(topo)
    else:
        raise CheckpointError(f"Unknown checkpoint kind '{kind}'")

    params = _parameters(model)
    if sorted(params) != sorted(a['name'] for a in manifest['arrays']):
        raise CheckpointError(f"{directory}: parameter names do not match the topology")
    for entry in manifest['arrays']:
        blob = directory / entry['file']
        if not blob.is_file():
            raise CheckpointError(f"Missing array file {blob}")
        data = np.frombuffer(blob.read_bytes(), dtype=BLOB_DTYPE)
        if data.size != int(np.prod(entry['shape'])):
            raise CheckpointError(f"{blob}: expected {int(np.prod(entry['shape']))} values, got {data.size}")
        param = params[entry['name']]
        param.data[...] = data.reshape(entry['shape'])
        if entry.get('frozen', False):
            param.freeze()
    return model


def save_snapshots(snapshots: List[Model], directory: Union[str, Path]) -> None:
    """Um checkpoint por geração: ``generation_1``, ``generation_2``, …"""
    for g, snap in enumerate(snapshots, start=1):
        save_checkpoint(snap, Path(directory) / f"generation_{g}")


def load_snapshots(directory: Union[str, Path]) -> List[Model]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointError(f"No snapshot directory at {directory}")
    found = sorted((int(p.name.split('_')[1]), p) for p in directory.glob('generation_*') if p.is_dir())
    return [load_checkpoint(p) for _, p in found]
