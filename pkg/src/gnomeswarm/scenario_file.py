"""Scenario files: JSON documents describing one run."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import topology as tp
from .adversary import ChurnScript, JokerScript
from .protocol import Mode
from .sim_sync import Scenario

_GNOME = {"oneOf": [{"type": "integer", "minimum": 0}, {"enum": ["random", "max-eccentricity"]}]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "topology": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["file"],
                 "properties": {"file": {"type": "string"}}},
                {"type": "object", "additionalProperties": False, "required": ["kind", "n", "d"],
                 "properties": {"kind": {"enum": list(tp.GENERATOR_KINDS)},
                                "n": {"type": "integer", "minimum": 1},
                                "d": {"type": "integer", "minimum": 0},
                                "seed": {"type": "integer", "minimum": 0},
                                "degree": {"type": "integer", "minimum": 1}}},
            ]
        },
        "engine": {"enum": ["sync", "async"]},
        "mode": {"enum": [m.value for m in Mode]},
        "d": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "max_turns": {"type": "integer", "minimum": 0},
        "retry": {"type": "boolean"},
        "sanity": {"enum": [None, "log", "expel"]},
        "backdate_guard": {"type": "boolean"},
        "confusion_timeout": {"type": "integer", "minimum": 1},
        "tau_max": {"type": "number", "exclusiveMinimum": 0},
        "delay": {"enum": ["constant", "uniform", "per-edge-fixed"]},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "proposers": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": False, "required": ["gnome"],
                      "properties": {"gnome": _GNOME, "turn": {"type": "integer", "minimum": 0},
                                     "payload": {"type": "string"}}},
        },
        "jokers": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": False, "required": ["gnome", "strategy"],
                      "properties": {"gnome": {"type": "integer", "minimum": 0},
                                     "strategy": {"enum": ["confuse", "fool", "trick", "backdate",
                                                           "custom", "stubborn"]},
                                     "turn": {"type": "number", "minimum": 0},
                                     "offset": {"type": "integer", "minimum": 0},
                                     "announces": {"type": "array",
                                                   "items": {"type": "array", "minItems": 3, "maxItems": 3}}}},
        },
        "churn": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": False, "required": ["turn", "gnome", "event"],
                      "properties": {"turn": {"type": "integer", "minimum": 0},
                                     "gnome": {"type": "integer", "minimum": 0},
                                     "event": {"enum": ["join", "leave"]},
                                     "neighbors": {"type": "array", "items": {"type": "integer"}}}},
        },
    },
}


class ScenarioFileError(ValueError):
    pass


@dataclass
class RunPlan:
    """A resolved scenario plus engine options not carried by :class:`Scenario`."""
    scenario: Scenario
    engine: str = "sync"
    tau_max: float = 1.0
    delay: str = "uniform"
    duration: float | None = None
    notes: list = field(default_factory=list)


def build_topology(spec: dict, base_dir: str = ".") -> tp.Topology:
    if "file" in spec:
        path = spec["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return tp.load(path)
    return tp.generate(spec["kind"], spec["n"], spec["d"], spec.get("seed", 0), degree=spec.get("degree"))


def pick_proposer(topo: tp.Topology, how, seed: int = 0) -> int:
    """Resolve an id, ``random`` or ``max-eccentricity`` to a gnome."""
    if isinstance(how, int) or (isinstance(how, str) and how.isdigit()):
        g = int(how)
        if not 0 <= g < topo.n:
            raise ScenarioFileError(f"proposer {g} outside 0..{topo.n - 1}")
        return g
    if how == "random":
        return int(np.random.default_rng(seed).integers(topo.n))
    if how == "max-eccentricity":
        if topo.n <= tp.EXACT_DIAMETER_LIMIT:
            return int(np.argmax(tp.eccentricities(topo)))
        # far end of a double sweep: a peripheral gnome, not always the exact argmax
        dist = tp.bfs_distances(topo, 0)
        return int(np.argmax(dist))
    raise ScenarioFileError(f"bad proposer {how!r}")


def parse(doc: dict, base_dir: str = ".", topology: tp.Topology | None = None) -> RunPlan:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioFileError(f"{where}: {exc.message}") from None
    if "topology" in doc:
        topo = build_topology(doc["topology"], base_dir)
    elif topology is not None:
        topo = topology
    else:
        raise ScenarioFileError("scenario needs a topology")
    seed = doc.get("seed", 0)
    proposers = [(pick_proposer(topo, p["gnome"], seed), p.get("turn", 0), p.get("payload", "").encode())
                 for p in doc.get("proposers", [])]
    jokers = []
    for j in doc.get("jokers", []):
        if j["gnome"] >= topo.n:
            raise ScenarioFileError(f"joker {j['gnome']} outside 0..{topo.n - 1}")
        ann = tuple(tuple(a) for a in j.get("announces", []))
        turn = j.get("turn", 0)
        jokers.append(JokerScript(j["gnome"], j["strategy"], turn if doc.get("engine") == "async" else int(turn),
                                  j.get("offset", 0), ann))
    churn = None
    if doc.get("churn"):
        churn = ChurnScript([(c["turn"], c["gnome"], c["event"], c.get("neighbors", []))
                             if c["event"] == "join" else (c["turn"], c["gnome"], "leave")
                             for c in doc["churn"]])
    sc = Scenario(topo, proposers, jokers, churn, Mode(doc.get("mode", "plain")), doc.get("max_turns"),
                  doc.get("d"), seed, None, doc.get("retry", False), doc.get("sanity"),
                  doc.get("backdate_guard", False), doc.get("confusion_timeout"))
    return RunPlan(sc, doc.get("engine", "sync"), doc.get("tau_max", 1.0), doc.get("delay", "uniform"),
                   doc.get("duration"))


def load(path: str, topology: tp.Topology | None = None) -> RunPlan:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioFileError(f"{path}: {exc}") from None
    return parse(doc, os.path.dirname(os.path.abspath(path)), topology)
