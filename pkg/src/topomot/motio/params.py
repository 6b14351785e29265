"""Model parameter files: a versioned ``.npz`` archive under any file name."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..assoc import Models
from ..numkit import DimensionError, FeedForwardLayer
from ..providers import AppearanceMatcher, MotionScorer, Providers
from ..topognn import GcnStack

FORMAT_VERSION = 1


class ParamsError(ValueError):
    """Parameter file is unreadable, from another version, or inconsistent."""


def _put_layer(store: dict, name: str, layer: FeedForwardLayer, meta: dict) -> None:
    store[f"{name}.weight"] = layer.weight
    store[f"{name}.bias"] = layer.bias
    meta["activations"][name] = layer.activation


def _get_layer(arrays, name: str, meta: dict) -> FeedForwardLayer:
    try:
        return FeedForwardLayer(arrays[f"{name}.weight"], arrays[f"{name}.bias"], meta["activations"][name])
    except KeyError as exc:
        raise ParamsError(f"missing array or metadata for layer {name!r}") from exc
    except DimensionError as exc:
        raise ParamsError(f"layer {name!r}: {exc}") from exc


def save_params(path, models: Models) -> Path:
    meta = {"version": FORMAT_VERSION, "activations": {}, "parts": []}
    store: dict[str, np.ndarray] = {}
    if models.providers is not None:
        p = models.providers
        meta["parts"].append("providers")
        _put_layer(store, "app.hidden", p.matcher.hidden, meta)
        _put_layer(store, "app.out", p.matcher.out, meta)
        for i, layer in enumerate(p.scorer.trunk):
            _put_layer(store, f"mot.trunk{i}", layer, meta)
        _put_layer(store, "mot.score", p.scorer.score_head, meta)
        _put_layer(store, "mot.state", p.scorer.state_head, meta)
        meta["trunk_depth"] = len(p.scorer.trunk)
        meta["position_scale"] = p.scorer.position_scale
    if models.gnn is not None:
        if models.edge_layer is None:
            raise ValueError("a GNN needs its edge-weight layer to be saved alongside")
        meta["parts"].append("gnn")
        for i, w in enumerate(models.gnn.weights):
            store[f"gnn.W{i}"] = w
        meta["gnn_layers"] = models.gnn.num_layers
        meta["gnn_nonlinear"] = models.gnn.use_nonlinearity
        _put_layer(store, "edge", models.edge_layer, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **store)
    return path


def load_params(path) -> Models:
    """Inverse of :func:`save_params`; parts that were not saved come back as ``None``."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParamsError(f"{path}: not a parameter archive ({exc})") from exc
    if "__meta__" not in arrays:
        raise ParamsError(f"{path}: missing metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != FORMAT_VERSION:
        raise ParamsError(f"{path}: format version {meta.get('version')}, expected {FORMAT_VERSION}")

    providers: Optional[Providers] = None
    gnn: Optional[GcnStack] = None
    edge: Optional[FeedForwardLayer] = None
    if "providers" in meta["parts"]:
        matcher = AppearanceMatcher(_get_layer(arrays, "app.hidden", meta), _get_layer(arrays, "app.out", meta))
        trunk = [_get_layer(arrays, f"mot.trunk{i}", meta) for i in range(meta["trunk_depth"])]
        scorer = MotionScorer(trunk, _get_layer(arrays, "mot.score", meta), _get_layer(arrays, "mot.state", meta),
                              float(meta["position_scale"]))
        h = scorer.hidden_dim
        if trunk[0].n_in != 8 + h or matcher.hidden.n_in % 2 or matcher.out.n_in != matcher.hidden.n_out:
            raise ParamsError(f"{path}: provider layer shapes are inconsistent")
        providers = Providers(matcher, scorer)
    if "gnn" in meta["parts"]:
        try:
            gnn = GcnStack([arrays[f"gnn.W{i}"] for i in range(meta["gnn_layers"])], bool(meta["gnn_nonlinear"]))
        except (KeyError, DimensionError) as exc:
            raise ParamsError(f"{path}: bad GNN weights ({exc})") from exc
        edge = _get_layer(arrays, "edge", meta)
        if edge.n_in != 2 * gnn.in_dim + 8:
            raise ParamsError(f"{path}: edge layer expects {edge.n_in} inputs for {gnn.in_dim}-d features")
    if providers is not None and gnn is not None and providers.matcher.feature_dim != gnn.in_dim:
        raise ParamsError(f"{path}: descriptor size differs between providers and GNN")
    return Models(providers, gnn, edge)


def merge(base: Models, extra: Models) -> Models:
    """Parts present in ``extra`` replace those in ``base``."""
    return Models(
        extra.providers if extra.providers is not None else base.providers,
        extra.gnn if extra.gnn is not None else base.gnn,
        extra.edge_layer if extra.gnn is not None else base.edge_layer,
    )
