"""
Scenario and message-profile files.

A scenario is one JSON document: the instance description read by
model.build_instance plus optional `network` and `learning` blocks.
All user, slot and constraint indices in files are 1-based.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from mechanism.errors import DimensionMismatch, ScenarioError
from mechanism.learning import LearningConfig
from mechanism.mech_dist import HelperPolicy, TreeNetwork, spanning_tree
from mechanism.messages import CentralMessageProfile, DistMessageProfile
from mechanism.model import Instance, build_instance
from mechanism.utils import logger

Profile = Union[CentralMessageProfile, DistMessageProfile]


@dataclass(frozen=True)
class LearningSettings:
    """The scenario's `learning` block; bounds are N x T or None for the domain defaults."""
    config: LearningConfig
    r_lo: Optional[np.ndarray] = None
    r_hi: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    instance: Instance
    network: Optional[TreeNetwork] = None
    learning: LearningSettings = field(default_factory=lambda: LearningSettings(LearningConfig()))


def _network_from_doc(doc: Dict[str, Any], n_users: int) -> TreeNetwork:
    try:
        edges = [(int(a) - 1, int(b) - 1) for a, b in doc['edges']]
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"Network block needs 'edges' as [[i, j], ...]: {e}")
    phi = doc.get('phi')
    if phi is None:
        policy = HelperPolicy.lowest_index()
    else:
        try:
            policy = HelperPolicy.explicit({int(k) - 1: int(v) - 1 for k, v in phi.items()})
        except (AttributeError, TypeError, ValueError) as e:
            raise ScenarioError(f"Network 'phi' must map user to helper: {e}")
    return spanning_tree(n_users, edges, policy)


def _bounds_from_doc(values, inst: Instance, name: str) -> Optional[np.ndarray]:
    if values is None:
        return None
    arr = np.asarray(values, dtype=float)
    if arr.shape != (inst.n_users, inst.horizon):
        raise DimensionMismatch(f"Learning bound '{name}' must be {inst.n_users} x {inst.horizon}, "
                                f"got {arr.shape}")
    return arr


def _learning_from_doc(doc: Dict[str, Any], inst: Instance) -> LearningSettings:
    try:
        alpha = doc.get('alpha')
        config = LearningConfig(
            alpha=None if alpha is None else float(alpha),
            max_iters=int(doc.get('iters', 100)),
            stop_tol=float(doc.get('stop_tol', 0.0)),
        )
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"Learning block is malformed: {e}")
    bounds = doc.get('bounds') or {}
    return LearningSettings(config=config,
                            r_lo=_bounds_from_doc(bounds.get('lo'), inst, 'lo'),
                            r_hi=_bounds_from_doc(bounds.get('hi'), inst, 'hi'))


def parse_scenario(doc: Dict[str, Any], name: str = 'scenario') -> Scenario:
    """
    Validate a scenario document and build its objects.

    Args:
        doc: Parsed JSON document
        name: Name used in logs when the document has none

    Returns:
        Scenario
    """
    if not isinstance(doc, dict):
        raise ScenarioError("Scenario document must be a JSON object")
    inst = build_instance(doc)
    network = None
    if doc.get('network') is not None:
        network = _network_from_doc(doc['network'], inst.n_users)
    learning = LearningSettings(LearningConfig())
    if doc.get('learning') is not None:
        learning = _learning_from_doc(doc['learning'], inst)
    scenario = Scenario(name=str(doc.get('name', name)), instance=inst, network=network, learning=learning)
    logger.info(f"Loaded scenario '{scenario.name}': N={inst.n_users}, T={inst.horizon}, "
                f"L={inst.n_constraints}, network={'yes' if network else 'no'}")
    return scenario


def _read_json(path: Union[str, Path]) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON ({e})")


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read and validate a scenario file. OSError propagates to the caller."""
    return parse_scenario(_read_json(path), name=Path(path).stem)


def _keyed_to_doc(table) -> list:
    return [{'from': i + 1, 'to': j + 1, 'values': [float(v) for v in vec]}
            for (i, j), vec in sorted(table.items())]


def _keyed_from_doc(entries, name: str) -> Dict:
    table = {}
    try:
        for entry in entries or []:
            table[(int(entry['from']) - 1, int(entry['to']) - 1)] = [float(v) for v in entry['values']]
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"Profile '{name}' entries need from/to/values: {e}")
    return table


def profile_to_doc(m: Profile) -> Dict[str, Any]:
    doc: Dict[str, Any] = {
        'y': m.y.tolist(),
        'q': m.q.tolist(),
        's': m.s.tolist(),
    }
    if isinstance(m, CentralMessageProfile):
        doc['kind'] = 'central'
        doc['beta'] = m.beta.tolist()
    else:
        doc['kind'] = 'distributed'
        doc['beta'] = _keyed_to_doc(m.beta)
        doc['n_summary'] = _keyed_to_doc(m.n_summary)
        doc['nu_summary'] = _keyed_to_doc(m.nu_summary)
    return doc


def profile_from_doc(doc: Dict[str, Any], inst: Instance) -> Profile:
    """Build a message profile from its JSON form and check it against the instance."""
    if not isinstance(doc, dict):
        raise ScenarioError("Profile document must be a JSON object")
    kind = doc.get('kind', 'central')
    try:
        if kind == 'central':
            m = CentralMessageProfile(y=doc['y'], q=doc['q'], s=doc['s'], beta=doc['beta'])
        elif kind == 'distributed':
            m = DistMessageProfile(y=doc['y'], q=doc['q'], s=doc['s'],
                                   beta=_keyed_from_doc(doc.get('beta'), 'beta'),
                                   n_summary=_keyed_from_doc(doc.get('n_summary'), 'n_summary'),
                                   nu_summary=_keyed_from_doc(doc.get('nu_summary'), 'nu_summary'))
        else:
            raise ScenarioError(f"Unknown profile kind '{kind}'")
    except KeyError as e:
        raise ScenarioError(f"Profile is missing field {e}")
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"Profile is malformed: {e}")
    expected = (inst.n_users, inst.horizon, inst.n_constraints)
    if (m.n_users, m.horizon, m.n_constraints) != expected:
        raise DimensionMismatch(f"Profile is {m.n_users} x {m.horizon} x {m.n_constraints}, "
                                f"instance is {expected[0]} x {expected[1]} x {expected[2]}")
    return m


def save_profile(path: Union[str, Path], m: Profile) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(profile_to_doc(m), f, indent=2)
    logger.info(f"Wrote message profile to {path}")


def load_profile(path: Union[str, Path], inst: Instance) -> Profile:
    return profile_from_doc(_read_json(path), inst)
