"""HCVRP problem data: fleets, instances, random generation and file I/O.

Coordinates live in the unit square, demands are integers and the depot is
always node 0 with zero demand.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, SchemaError

MIN_MAX = "min-max"
MIN_SUM = "min-sum"
OBJECTIVES = (MIN_MAX, MIN_SUM)

SCHEMA_VERSION = 1

FLEET_CAPACITIES = {
    "V3": (20, 25, 30),
    "V5": (20, 25, 30, 35, 40),
}
# min-sum speeds are inversely proportional to capacity: 1/4, 1/5, ...
MIN_SUM_SPEEDS = {
    "V3": (1 / 4, 1 / 5, 1 / 6),
    "V5": (1 / 4, 1 / 5, 1 / 6, 1 / 7, 1 / 8),
}
DEMAND_LOW, DEMAND_HIGH = 1, 9


def normalize_objective(tag: str) -> str:
    key = str(tag).lower().replace("_", "-")
    if key in ("min-max", "minmax", "mm"):
        return MIN_MAX
    if key in ("min-sum", "minsum", "ms"):
        return MIN_SUM
    raise ConfigurationError(f"unknown objective tag {tag!r}; expected one of {OBJECTIVES}")


@dataclass(frozen=True)
class FleetSpec:
    capacities: tuple[int, ...]
    speeds: tuple[float, ...]

    def __post_init__(self):
        caps = tuple(int(c) for c in self.capacities)
        speeds = tuple(float(s) for s in self.speeds)
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "speeds", speeds)
        if not caps:
            raise ConfigurationError("fleet needs at least one vehicle")
        if len(caps) != len(speeds):
            raise ConfigurationError(
                f"fleet has {len(caps)} capacities but {len(speeds)} speeds")
        if any(c <= 0 for c in caps) or any(not (s > 0 and math.isfinite(s)) for s in speeds):
            raise ConfigurationError("capacities and speeds must be positive")

    @property
    def m(self) -> int:
        return len(self.capacities)


def fleet_preset(name: str, objective: str) -> FleetSpec:
    """Return the V3/V5 fleet for the given objective."""
    key = str(name).upper()
    if key not in FLEET_CAPACITIES:
        raise ConfigurationError(f"unknown fleet preset {name!r}; expected V3 or V5")
    objective = normalize_objective(objective)
    caps = FLEET_CAPACITIES[key]
    speeds = (1.0,) * len(caps) if objective == MIN_MAX else MIN_SUM_SPEEDS[key]
    return FleetSpec(caps, speeds)


def resolve_fleet(fleet: str | FleetSpec, objective: str) -> FleetSpec:
    if isinstance(fleet, FleetSpec):
        return fleet
    return fleet_preset(fleet, objective)


@dataclass(frozen=True, eq=False)
class Instance:
    """One HCVRP instance. ``coords[0]`` is the depot."""

    coords: np.ndarray
    demands: np.ndarray
    fleet: FleetSpec
    objective: str
    name: str = ""
    # multiply times by this to report them in the original (unscaled) units
    scale: float = 1.0

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        demands = np.array(self.demands, dtype=np.int64)
        coords.setflags(write=False)
        demands.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "objective", normalize_objective(self.objective))
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise SchemaError(f"coords must have shape (n+1, 2) with n >= 1, got {coords.shape}")
        if demands.shape != (coords.shape[0],):
            raise SchemaError(
                f"expected {coords.shape[0]} demands, got {demands.shape[0] if demands.ndim else 0}")
        if not np.all(np.isfinite(coords)):
            raise SchemaError("coordinates must be finite")
        if demands[0] != 0:
            raise SchemaError("depot demand must be 0")
        if np.any(demands < 0):
            raise SchemaError("demands must be non-negative")
        if demands.max() > max(self.fleet.capacities):
            raise SchemaError(
                f"demand {int(demands.max())} exceeds the largest capacity "
                f"{max(self.fleet.capacities)}; instance is infeasible")

    @property
    def n(self) -> int:
        return self.coords.shape[0] - 1

    @property
    def m(self) -> int:
        return self.fleet.m

    @property
    def capacities(self) -> np.ndarray:
        return np.asarray(self.fleet.capacities, dtype=np.float64)

    @property
    def speeds(self) -> np.ndarray:
        return np.asarray(self.fleet.speeds, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (np.array_equal(self.coords, other.coords)
                and np.array_equal(self.demands, other.demands)
                and self.fleet == other.fleet
                and self.objective == other.objective
                and self.name == other.name
                and self.scale == other.scale)

    __hash__ = None

    def permuted(self, order: Sequence[int]) -> "Instance":
        """Reorder customers; ``order`` is a permutation of 1..n (depot stays first)."""
        idx = np.concatenate([[0], np.asarray(order, dtype=np.int64)])
        if sorted(idx.tolist()) != list(range(self.n + 1)):
            raise ConfigurationError("order must be a permutation of the customer indices")
        return Instance(self.coords[idx], self.demands[idx], self.fleet, self.objective,
                        self.name, self.scale)


def distance_table(instance: Instance) -> np.ndarray:
    """Pairwise Euclidean distances, shape (n+1, n+1)."""
    diff = instance.coords[:, None, :] - instance.coords[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


# -- generation -------------------------------------------------------------

def sample_arrays(rng: np.random.Generator, count: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` coordinate/demand arrays. The rng is advanced in place."""
    if n < 1:
        raise ConfigurationError(f"need at least one customer, got n={n}")
    coords = rng.random((count, n + 1, 2))
    demands = np.zeros((count, n + 1), dtype=np.int64)
    demands[:, 1:] = rng.integers(DEMAND_LOW, DEMAND_HIGH + 1, size=(count, n))
    return coords, demands


def generate_dataset(n: int, fleet: str | FleetSpec, objective: str, count: int,
                     seed: int) -> list[Instance]:
    if count < 1:
        raise ConfigurationError(f"count must be positive, got {count}")
    objective = normalize_objective(objective)
    spec = resolve_fleet(fleet, objective)
    coords, demands = sample_arrays(np.random.default_rng(seed), count, n)
    return [Instance(c, d, spec, objective) for c, d in zip(coords, demands)]


def generate_instance(n: int, fleet_preset: str | FleetSpec, objective: str,
                      rng_seed: int) -> Instance:
    return generate_dataset(n, fleet_preset, objective, 1, rng_seed)[0]


# -- native file format -----------------------------------------------------

def instance_to_dict(instance: Instance) -> dict:
    record = {
        "version": SCHEMA_VERSION,
        "n": instance.n,
        "m": instance.m,
        "objective": instance.objective,
        "coords": instance.coords.tolist(),
        "demands": instance.demands.tolist(),
        "capacities": list(instance.fleet.capacities),
        "speeds": list(instance.fleet.speeds),
    }
    if instance.name:
        record["name"] = instance.name
    if instance.scale != 1.0:
        record["scale"] = instance.scale
    return record


def instance_from_dict(record: dict) -> Instance:
    if not isinstance(record, dict):
        raise SchemaError("instance record must be an object")
    version = record.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported instance schema version {version!r} "
                          f"(expected {SCHEMA_VERSION})")
    try:
        fleet = FleetSpec(tuple(record["capacities"]), tuple(record["speeds"]))
        inst = Instance(record["coords"], record["demands"], fleet, record["objective"],
                        record.get("name", ""), float(record.get("scale", 1.0)))
    except KeyError as exc:
        raise SchemaError(f"instance record is missing field {exc.args[0]!r}") from None
    except (TypeError, ConfigurationError) as exc:
        raise SchemaError(f"malformed instance record: {exc}") from None
    if inst.n != record.get("n", inst.n) or inst.m != record.get("m", inst.m):
        raise SchemaError("header n/m disagree with array sizes")
    return inst


def dumps_instances(instances: Iterable[Instance]) -> str:
    return "".join(json.dumps(instance_to_dict(i), separators=(",", ":")) + "\n"
                   for i in instances)


def save_instances(path: str | Path, instances: Iterable[Instance]) -> None:
    Path(path).write_text(dumps_instances(instances))


def load_instances(path: str | Path) -> list[Instance]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        out.append(instance_from_dict(record))
    if not out:
        raise SchemaError(f"{path}: no instances found")
    return out


def save_instance(path: str | Path, instance: Instance) -> None:
    save_instances(path, [instance])


def load_instance(path: str | Path) -> Instance:
    instances = load_instances(path)
    if len(instances) != 1:
        raise SchemaError(f"{path}: expected a single instance, found {len(instances)}")
    return instances[0]


# -- CVRPLib ----------------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")
_HEADER_RE = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*?)\s*$")


def parse_cvrplib(text: str, fleet_preset: str | FleetSpec, objective: str) -> Instance:
    """Read a ``.vrp`` file, keeping locations and demands but replacing the fleet.

    Coordinates are shifted and divided by the larger of the x/y ranges, so they
    land in the unit square; the divisor is kept in ``Instance.scale``.
    """
    objective = normalize_objective(objective)
    fleet = resolve_fleet(fleet_preset, objective)
    header: dict[str, str] = {}
    sections: dict[str, list[list[str]]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        word = line.split()[0].rstrip(":")
        if word == "EOF":
            break
        if word in _SECTIONS or word.endswith("_SECTION"):
            current = word
            sections[current] = []
            continue
        match = _HEADER_RE.match(line)
        if match and not line[0].isdigit() and not line[0] == "-":
            header[match.group(1)] = match.group(2)
            current = None
            continue
        if current is None:
            raise ParseError(f"unexpected line outside any section: {line!r}")
        sections[current].append(line.split())

    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION header")
    try:
        dim = int(header["DIMENSION"])
    except ValueError:
        raise ParseError(f"DIMENSION is not an integer: {header['DIMENSION']!r}") from None
    for name in _SECTIONS:
        if name not in sections:
            raise ParseError(f"missing {name}")

    coords = _indexed_rows(sections["NODE_COORD_SECTION"], dim, 2, "NODE_COORD_SECTION", float)
    demands = _indexed_rows(sections["DEMAND_SECTION"], dim, 1, "DEMAND_SECTION", int)[:, 0]

    depots = []
    for row in sections["DEPOT_SECTION"]:
        for tok in row:
            val = int(tok)
            if val == -1:
                break
            depots.append(val)
    if len(depots) != 1 or not 1 <= depots[0] <= dim:
        raise ParseError(f"DEPOT_SECTION must name exactly one depot in 1..{dim}, got {depots}")
    depot = depots[0] - 1
    order = [depot] + [i for i in range(dim) if i != depot]
    coords, demands = coords[order], demands[order]
    if demands[0] != 0:
        raise ParseError(f"DEMAND_SECTION gives the depot a nonzero demand {demands[0]}")

    lo = coords.min(axis=0)
    span = float((coords.max(axis=0) - lo).max())
    if span <= 0:
        raise ParseError("NODE_COORD_SECTION has zero coordinate range")
    scaled = (coords - lo) / span
    try:
        return Instance(scaled, demands.astype(np.int64), fleet, objective,
                        header.get("NAME", ""), span)
    except SchemaError as exc:
        raise ParseError(f"DEMAND_SECTION: {exc}") from None


def _indexed_rows(rows: list[list[str]], dim: int, width: int, section: str, cast) -> np.ndarray:
    if len(rows) != dim:
        raise ParseError(f"{section} has {len(rows)} rows but DIMENSION is {dim}")
    out = np.zeros((dim, width), dtype=np.float64 if cast is float else np.int64)
    seen = set()
    for row in rows:
        if len(row) != width + 1:
            raise ParseError(f"{section}: bad row {' '.join(row)!r}")
        try:
            idx = int(row[0])
            vals = [cast(float(v)) if cast is int else cast(v) for v in row[1:]]
        except ValueError:
            raise ParseError(f"{section}: non-numeric row {' '.join(row)!r}") from None
        if not 1 <= idx <= dim or idx in seen:
            raise ParseError(f"{section}: node id {idx} out of range or repeated")
        seen.add(idx)
        out[idx - 1] = vals
    return out
