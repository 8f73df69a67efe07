from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from condopt.core import CondOptPrior, PosteriorTree
from condopt.dataset import atomic_write_text
from condopt.errors import ModelFormatError
from condopt.lattice import Lattice, lookup
from condopt.space import Region, SampleSpace

logger = logging.getLogger(__name__)

MODEL_FORMAT = "cond-opt-model"
MODEL_VERSION = 1


def _hex(value: float) -> str:
    return float(value).hex()


def _hex_rows(values: np.ndarray) -> list[list[str]]:
    return [[_hex(v) for v in row] for row in values.tolist()]


def _children(tree: PosteriorTree) -> list[dict[str, list[int]]]:
    """Stored children of every node, keyed by the split's position among the node's candidates."""
    lattice = tree.lattice
    levels = lattice.levels_of(tree.keys)
    candidates = levels < lattice.caps
    found_by_dim = []
    for j in range(lattice.dims):
        sides = []
        for side in (0, 1):
            pos, found = lookup(tree.keys, lattice.child_keys(tree.keys, j, side))
            sides.append(np.where(found & candidates[:, j], pos, -1))
        found_by_dim.append(sides)
    out = []
    for i in range(tree.size):
        entry: dict[str, list[int]] = {}
        for split_index, j in enumerate(np.flatnonzero(candidates[i])):
            left, right = int(found_by_dim[j][0][i]), int(found_by_dim[j][1][i])
            if left >= 0 or right >= 0:
                entry[str(split_index)] = [left, right]
        out.append(entry)
    return out


def tree_to_dict(tree: PosteriorTree) -> dict[str, Any]:
    lattice = tree.lattice
    levels = lattice.levels_of(tree.keys)
    candidates = levels < lattice.caps
    children = _children(tree)
    nodes = []
    for i in range(tree.size):
        region = lattice.region_of(int(tree.keys[i]))
        node: dict[str, Any] = {
            "path": [list(step) for step in region.path],
            "levels": list(region.levels),
            "index": list(region.index),
            "n": int(tree.n[i]),
            "log_phi": _hex(tree.log_phi[i]),
            "log_m": _hex(tree.log_m[i]),
            "rho_post": _hex(tree.rho_post[i]),
            "lambda_post": [_hex(tree.lambda_post[i, j]) for j in np.flatnonzero(candidates[i])],
            "children": children[i],
        }
        if tree.rep[i] >= 0:
            node["point"] = int(tree.rep[i])
        nodes.append(node)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "space_x": tree.space_x.to_dict(),
        "space_y": tree.space_y.to_dict(),
        "prior": tree.prior.to_dict(),
        "data": {"x": _hex_rows(tree.x), "y": _hex_rows(tree.y)},
        "nodes": nodes,
    }


def _rows(payload: list[list[str]], dims: int) -> np.ndarray:
    values = np.array([[float.fromhex(v) for v in row] for row in payload], dtype=float)
    return values.reshape(len(payload), dims)


def tree_from_dict(payload: dict[str, Any]) -> PosteriorTree:
    try:
        if payload.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a {MODEL_FORMAT} document")
        if payload.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {payload.get('version')!r}")
        space_x = SampleSpace.from_dict(payload["space_x"])
        space_y = SampleSpace.from_dict(payload["space_y"])
        prior = CondOptPrior.from_dict(payload["prior"])
        x = _rows(payload["data"]["x"], len(space_x))
        y = _rows(payload["data"]["y"], len(space_y))
        lattice = Lattice(space_x, prior.max_depth_x)
        nodes = payload["nodes"]
        count = len(nodes)
        keys = np.empty(count, dtype=np.int64)
        n = np.empty(count, dtype=np.int64)
        log_phi = np.empty(count)
        log_m = np.empty(count)
        rho_post = np.empty(count)
        lambda_post = np.zeros((count, len(space_x)))
        rep = np.full(count, -1, dtype=np.int64)
        for i, node in enumerate(nodes):
            levels = [int(k) for k in node["levels"]]
            index = [int(v) for v in node["index"]]
            keys[i] = lattice.key_of(Region.from_address(space_x, levels, index))
            n[i] = int(node["n"])
            log_phi[i] = float.fromhex(node["log_phi"])
            log_m[i] = float.fromhex(node["log_m"])
            rho_post[i] = float.fromhex(node["rho_post"])
            dims = np.flatnonzero(np.asarray(levels) < lattice.caps)
            if len(dims) != len(node["lambda_post"]):
                raise ModelFormatError(f"node {i}: lambda_post does not match the candidate splits")
            for j, value in zip(dims, node["lambda_post"]):
                lambda_post[i, j] = float.fromhex(value)
            if "point" in node:
                rep[i] = int(node["point"])
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as error:
        raise ModelFormatError(f"malformed model: {error}") from error
    if count > 1 and np.any(np.diff(keys) <= 0):
        raise ModelFormatError("nodes are not in key order")
    return PosteriorTree(
        space_x=space_x,
        space_y=space_y,
        prior=prior,
        x=x,
        y=y,
        keys=keys,
        n=n,
        log_phi=log_phi,
        log_m=log_m,
        rho_post=rho_post,
        lambda_post=lambda_post,
        rep=rep,
    )


def dumps(tree: PosteriorTree) -> str:
    return json.dumps(tree_to_dict(tree), separators=(",", ":"), sort_keys=True) + "\n"


def save_model(tree: PosteriorTree, path: str | Path) -> None:
    atomic_write_text(path, dumps(tree))
    logger.debug("saved %d nodes to %s", tree.size, path)


def load_model(path: str | Path) -> PosteriorTree:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as error:
        raise ModelFormatError(f"{path}: invalid JSON ({error})") from error
    if not isinstance(payload, dict):
        raise ModelFormatError(f"{path}: expected a JSON object")
    return tree_from_dict(payload)
