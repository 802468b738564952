"""YAML file format for layered MDPs, with line-precise validation errors.

Schema::

    name: T1                       # optional
    horizon: 2
    actions: 2
    feature_dim: 8
    layers: [2, 2]                 # state count per layer
    init: [0.5, 0.5]
    transitions:                   # H-1 entries, transitions[h][x][a] -> next-layer distribution
      - [[[0.3, 0.7], [1.0, 0.0]], [[0.5, 0.5], [0.0, 1.0]]]
    rewards:                       # H entries, rewards[h][x][a]
      - [[0.1, 0.2], [0.0, 0.4]]
    features:                      # H entries, features[h][x][a] -> d numbers
      - [[[1, 0, ...], ...], ...]
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import yaml

from opsdp.mdp import FEATURE_NORM_TOL, ROW_SUM_TOL, LayeredMdp


class MdpFormatError(ValueError):
    """Malformed MDP document; the message starts with ``line N:``."""


def _fail(node: yaml.Node, msg: str) -> MdpFormatError:
    return MdpFormatError(f"line {node.start_mark.line + 1}: {msg}")


def _mapping(node: yaml.Node) -> dict[str, yaml.Node]:
    if not isinstance(node, yaml.MappingNode):
        raise _fail(node, "expected a mapping at the top level")
    out = {}
    for k, v in node.value:
        out[str(k.value)] = v
    return out


def _int(node: yaml.Node, what: str, minimum: int = 1) -> int:
    if not isinstance(node, yaml.ScalarNode):
        raise _fail(node, f"{what} must be an integer")
    try:
        val = int(node.value)
    except ValueError:
        raise _fail(node, f"{what} must be an integer, got {node.value!r}") from None
    if val < minimum:
        raise _fail(node, f"{what} must be >= {minimum}, got {val}")
    return val


def _seq(node: yaml.Node, what: str, length: int | None = None) -> list[yaml.Node]:
    if not isinstance(node, yaml.SequenceNode):
        raise _fail(node, f"{what} must be a list")
    if length is not None and len(node.value) != length:
        raise _fail(node, f"{what} must have {length} entries, got {len(node.value)}")
    return node.value


def _num(node: yaml.Node, what: str) -> float:
    if not isinstance(node, yaml.ScalarNode):
        raise _fail(node, f"{what} must be a number")
    try:
        return float(node.value)
    except ValueError:
        raise _fail(node, f"{what} must be a number, got {node.value!r}") from None


def _vector(node: yaml.Node, what: str, length: int) -> np.ndarray:
    return np.array([_num(n, what) for n in _seq(node, what, length)])


def _distribution(node: yaml.Node, what: str, length: int) -> np.ndarray:
    p = _vector(node, what, length)
    if np.any(p < 0):
        raise _fail(node, f"{what} has a negative probability")
    if abs(p.sum() - 1.0) > ROW_SUM_TOL:
        raise _fail(node, f"{what} sums to {p.sum():.15g}, not 1")
    return p


def parse_mdp(text: str, source: str = "<string>") -> LayeredMdp:
    """Parse and validate an MDP document."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise MdpFormatError(f"line {line}: invalid YAML ({exc})") from None
    if root is None:
        raise MdpFormatError("line 1: empty document")
    top = _mapping(root)
    for key in ("horizon", "actions", "feature_dim", "layers", "init", "rewards", "features"):
        if key not in top:
            raise _fail(root, f"missing required key {key!r}")
    H = _int(top["horizon"], "horizon")
    A = _int(top["actions"], "actions")
    d = _int(top["feature_dim"], "feature_dim")
    sizes = [_int(n, "layer size") for n in _seq(top["layers"], "layers", H)]
    init = _distribution(top["init"], "init", sizes[0])

    rewards = []
    for h, layer in enumerate(_seq(top["rewards"], "rewards", H)):
        r = np.zeros((sizes[h], A))
        for x, row in enumerate(_seq(layer, f"rewards[{h}]", sizes[h])):
            r[x] = _vector(row, f"rewards[{h}][{x}]", A)
            if np.any(r[x] < 0) or np.any(r[x] > 1):
                raise _fail(row, f"rewards[{h}][{x}] must lie in [0, 1]")
        rewards.append(r)

    features = []
    for h, layer in enumerate(_seq(top["features"], "features", H)):
        f = np.zeros((sizes[h], A, d))
        for x, row in enumerate(_seq(layer, f"features[{h}]", sizes[h])):
            for a, vec in enumerate(_seq(row, f"features[{h}][{x}]", A)):
                f[x, a] = _vector(vec, f"features[{h}][{x}][{a}]", d)
                if np.linalg.norm(f[x, a]) > 1 + FEATURE_NORM_TOL:
                    raise _fail(vec, f"features[{h}][{x}][{a}] has norm > 1")
        features.append(f)

    transitions = []
    trans_node = top.get("transitions")
    if H > 1 and trans_node is None:
        raise _fail(root, "missing required key 'transitions'")
    if trans_node is not None and not (H == 1 and isinstance(trans_node, yaml.ScalarNode)):
        for h, layer in enumerate(_seq(trans_node, "transitions", H - 1)):
            p = np.zeros((sizes[h], A, sizes[h + 1]))
            for x, row in enumerate(_seq(layer, f"transitions[{h}]", sizes[h])):
                for a, dist in enumerate(_seq(row, f"transitions[{h}][{x}]", A)):
                    p[x, a] = _distribution(dist, f"transitions[{h}][{x}][{a}]", sizes[h + 1])
            transitions.append(p)

    name = top["name"].value if "name" in top else Path(source).stem
    return LayeredMdp(tuple(transitions), tuple(rewards), tuple(features), init, name=str(name))


def load_mdp(path: str | Path) -> LayeredMdp:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"MDP file not found: {path}")
    return parse_mdp(path.read_text(), source=str(path))


def mdp_to_dict(mdp: LayeredMdp) -> dict[str, Any]:
    return {
        "name": mdp.name,
        "horizon": mdp.horizon,
        "actions": mdp.n_actions,
        "feature_dim": mdp.feature_dim,
        "layers": list(mdp.layer_sizes),
        "init": mdp.init_dist.tolist(),
        "transitions": [p.tolist() for p in mdp.transitions],
        "rewards": [r.tolist() for r in mdp.rewards],
        "features": [f.tolist() for f in mdp.features],
    }


class _FlowDumper(yaml.SafeDumper):
    pass


def _represent_list(dumper: yaml.SafeDumper, data: list) -> yaml.Node:
    flow = all(not isinstance(v, list) or all(not isinstance(w, list) for w in v) for v in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_FlowDumper.add_representer(list, _represent_list)


def dump_mdp(mdp: LayeredMdp) -> str:
    return yaml.dump(mdp_to_dict(mdp), Dumper=_FlowDumper, sort_keys=False, width=120)


def save_mdp(mdp: LayeredMdp, path: str | Path) -> None:
    Path(path).write_text(dump_mdp(mdp))
