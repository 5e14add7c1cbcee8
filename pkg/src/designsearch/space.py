"""Design spaces: dimensions, dependency groups, enumeration, distance, encoding.

A design is stored internally as a row of integer codes, one per dimension,
holding the index of the chosen value in that dimension's choice list or -1
when the dimension is inactive (a dependent dimension whose group flag is
off).  Enumeration order is lexicographic over these codes in declared
dimension order, with -1 sorting first; a design's id is its position in it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
INACTIVE = -1


class ConfigurationError(ValueError):
    """Malformed space declaration or assignment naming unknown dimensions."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


def _same_value(a: Any, b: Any) -> bool:
    # keep True distinct from 1 and "1" distinct from 1
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    return type(a) is type(b) and a == b


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    choices: tuple

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise ConfigurationError(f"dimension {self.name!r}: unknown kind {self.kind!r}")
        if len(self.choices) == 0:
            raise ConfigurationError(f"dimension {self.name!r}: choices must be non-empty")
        for i, a in enumerate(self.choices):
            for b in self.choices[i + 1:]:
                if _same_value(a, b):
                    raise ConfigurationError(f"dimension {self.name!r}: duplicate choice {a!r}")
        if self.kind == NUMERICAL:
            if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in self.choices):
                raise ConfigurationError(f"dimension {self.name!r}: numerical choices must be numbers")
            if any(b <= a for a, b in zip(self.choices, self.choices[1:])):
                raise ConfigurationError(f"dimension {self.name!r}: numerical choices must be strictly increasing")

    @property
    def size(self) -> int:
        return len(self.choices)

    @property
    def width(self) -> int:
        """Number of feature columns this dimension occupies in an encoding."""
        return 1 if self.kind == NUMERICAL else self.size

    def index(self, value: Any) -> int:
        for i, c in enumerate(self.choices):
            if _same_value(c, value):
                return i
        raise DomainError(f"{value!r} is not a choice of dimension {self.name!r}")


@dataclass(frozen=True)
class DependencyGroup:
    """Dimensions that exist only while a categorical flag is not `inactive`.

    `gates` holds (dependent, bound) pairs: the dependent numerical value may
    not exceed the bound dimension's value within one design.
    """

    name: str
    flag: str
    members: tuple[str, ...]
    inactive: Any = False
    gates: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Design:
    id: int
    values: tuple  # aligned with space.dimensions, None where inactive
    names: tuple[str, ...] = field(repr=False, compare=False, default=())

    @property
    def assignment(self) -> dict[str, Any]:
        return {n: v for n, v in zip(self.names, self.values) if v is not None}


class DesignSpace:
    def __init__(self, dimensions: Sequence[Dimension], groups: Sequence[DependencyGroup] = ()):
        self.dimensions = tuple(dimensions)
        self.groups = tuple(groups)
        self.names = tuple(d.name for d in self.dimensions)
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("dimension names must be unique")
        self._pos = {n: i for i, n in enumerate(self.names)}
        self._check_groups()

        # per-dimension group membership: index of the owning group or -1
        self._member_of = np.full(len(self.dimensions), -1, dtype=int)
        for g_idx, g in enumerate(self.groups):
            for m in g.members:
                self._member_of[self._pos[m]] = g_idx
        self._flag_inactive_code = [
            self.dimensions[self._pos[g.flag]].index(g.inactive) for g in self.groups
        ]

    def _check_groups(self) -> None:
        seen: set[str] = set()
        flags: set[str] = set()
        for g in self.groups:
            for ref in (g.flag, *g.members):
                if ref not in self._pos:
                    raise ConfigurationError(f"group {g.name!r}: unknown dimension {ref!r}")
            if g.name in self._pos:
                raise ConfigurationError(f"group {g.name!r}: name collides with a dimension")
            flag_dim = self.dimensions[self._pos[g.flag]]
            if flag_dim.kind != CATEGORICAL:
                raise ConfigurationError(f"group {g.name!r}: flag {g.flag!r} must be categorical")
            try:
                flag_dim.index(g.inactive)
            except DomainError:
                raise ConfigurationError(
                    f"group {g.name!r}: inactive value {g.inactive!r} is not a choice of {g.flag!r}"
                ) from None
            if flag_dim.size < 2:
                raise ConfigurationError(f"group {g.name!r}: flag needs at least one active choice")
            if not g.members:
                raise ConfigurationError(f"group {g.name!r}: needs at least one member")
            for m in g.members:
                if m in seen:
                    raise ConfigurationError(f"dimension {m!r} belongs to more than one group")
                seen.add(m)
            flags.add(g.flag)
            for dep, bound in g.gates:
                if dep not in g.members:
                    raise ConfigurationError(f"group {g.name!r}: gated dimension {dep!r} is not a member")
                if bound not in self._pos:
                    raise ConfigurationError(f"group {g.name!r}: unknown bound dimension {bound!r}")
                for ref in (dep, bound):
                    if self.dimensions[self._pos[ref]].kind != NUMERICAL:
                        raise ConfigurationError(f"group {g.name!r}: gate dimension {ref!r} must be numerical")
                if bound in seen or any(bound in h.members for h in self.groups):
                    raise ConfigurationError(f"group {g.name!r}: gate bound {bound!r} must not be a dependent dimension")
        if flags & seen:
            raise ConfigurationError("a group flag cannot itself be a dependent dimension")

    # -- construction ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DesignSpace":
        if not isinstance(data, Mapping):
            raise ConfigurationError("space declaration must be an object")
        dims_raw = data.get("dimensions")
        if not isinstance(dims_raw, list) or not dims_raw:
            raise ConfigurationError("dimensions: expected a non-empty list")
        dims = []
        for i, d in enumerate(dims_raw):
            where = f"dimensions[{i}]"
            if not isinstance(d, Mapping):
                raise ConfigurationError(f"{where}: expected an object")
            for key in ("name", "kind", "choices"):
                if key not in d:
                    raise ConfigurationError(f"{where}.{key}: missing")
            if not isinstance(d["name"], str):
                raise ConfigurationError(f"{where}.name: expected a string")
            if not isinstance(d["choices"], list):
                raise ConfigurationError(f"{where}.choices: expected a list")
            try:
                dims.append(Dimension(d["name"], d["kind"], tuple(d["choices"])))
            except ConfigurationError as exc:
                raise ConfigurationError(f"{where}: {exc}") from None
        groups = []
        for i, g in enumerate(data.get("groups", []) or []):
            where = f"groups[{i}]"
            if not isinstance(g, Mapping):
                raise ConfigurationError(f"{where}: expected an object")
            for key in ("name", "flag", "members"):
                if key not in g:
                    raise ConfigurationError(f"{where}.{key}: missing")
            gates = g.get("gates", [])
            if not all(isinstance(p, list) and len(p) == 2 for p in gates):
                raise ConfigurationError(f"{where}.gates: expected a list of [dependent, bound] pairs")
            groups.append(
                DependencyGroup(
                    name=g["name"],
                    flag=g["flag"],
                    members=tuple(g["members"]),
                    inactive=g.get("inactive", False),
                    gates=tuple((a, b) for a, b in gates),
                )
            )
        try:
            return cls(dims, groups)
        except ConfigurationError as exc:
            raise ConfigurationError(f"groups: {exc}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "DesignSpace":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        try:
            return cls.from_dict(data)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "dimensions": [
                {"name": d.name, "kind": d.kind, "choices": list(d.choices)} for d in self.dimensions
            ],
            "groups": [
                {
                    "name": g.name,
                    "flag": g.flag,
                    "inactive": g.inactive,
                    "members": list(g.members),
                    "gates": [list(p) for p in g.gates],
                }
                for g in self.groups
            ],
        }

    # -- codes ----------------------------------------------------------

    def position(self, name: str) -> int:
        try:
            return self._pos[name]
        except KeyError:
            raise ConfigurationError(f"unknown dimension {name!r}") from None

    @property
    def coordinates(self) -> tuple[str, ...]:
        """Edge-label vocabulary: every dimension, then every group."""
        return self.names + tuple(g.name for g in self.groups)

    def valid_mask(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        ok = np.ones(len(codes), dtype=bool)
        for j, dim in enumerate(self.dimensions):
            c = codes[:, j]
            if self._member_of[j] < 0:
                ok &= (c >= 0) & (c < dim.size)
            else:
                ok &= (c >= INACTIVE) & (c < dim.size)
        for g_idx, g in enumerate(self.groups):
            off = codes[:, self._pos[g.flag]] == self._flag_inactive_code[g_idx]
            for m in g.members:
                c = codes[:, self._pos[m]]
                ok &= np.where(off, c == INACTIVE, c >= 0)
            for dep, bound in g.gates:
                dep_vals = np.asarray(self.dimensions[self._pos[dep]].choices, dtype=float)
                bnd_vals = np.asarray(self.dimensions[self._pos[bound]].choices, dtype=float)
                c_dep = codes[:, self._pos[dep]]
                c_bnd = np.clip(codes[:, self._pos[bound]], 0, None)
                active = c_dep >= 0
                dv = dep_vals[np.clip(c_dep, 0, None)]
                ok &= ~active | (dv <= bnd_vals[c_bnd])
        return ok

    @cached_property
    def _radices(self) -> np.ndarray:
        return np.array([d.size + 1 for d in self.dimensions], dtype=np.int64)

    def _keys(self, codes: np.ndarray) -> np.ndarray:
        # mixed-radix key over (code + 1): ascending keys == lexicographic order
        codes = np.atleast_2d(codes).astype(np.int64) + 1
        key = np.zeros(len(codes), dtype=np.int64)
        for j, r in enumerate(self._radices):
            key = key * r + codes[:, j]
        return key

    @cached_property
    def codes(self) -> np.ndarray:
        """Codes of every valid canonical design, in id order (read-only)."""
        ranges = []
        for j, dim in enumerate(self.dimensions):
            lo = INACTIVE if self._member_of[j] >= 0 else 0
            ranges.append(np.arange(lo, dim.size))
        grids = np.meshgrid(*ranges, indexing="ij")
        allc = np.stack([g.ravel() for g in grids], axis=1).astype(np.int16)
        out = allc[self.valid_mask(allc)]
        out.setflags(write=False)
        return out

    @cached_property
    def _sorted_keys(self) -> np.ndarray:
        return self._keys(self.codes)

    @property
    def size(self) -> int:
        return len(self.codes)

    def ids_of(self, codes: np.ndarray) -> np.ndarray:
        """Map code rows to design ids; -1 for rows that are not valid designs."""
        codes = np.atleast_2d(codes)
        keys = self._keys(codes)
        idx = np.searchsorted(self._sorted_keys, keys)
        idx = np.clip(idx, 0, len(self._sorted_keys) - 1)
        found = (self._sorted_keys[idx] == keys) & self.valid_mask(codes)
        return np.where(found, idx, -1)

    # -- assignments ----------------------------------------------------

    def _codes_of_assignment(self, assignment: Mapping[str, Any]) -> np.ndarray | None:
        for k in assignment:
            self.position(k)
        row = np.full(len(self.dimensions), INACTIVE, dtype=np.int16)
        for name, value in assignment.items():
            j = self._pos[name]
            try:
                row[j] = self.dimensions[j].index(value)
            except DomainError:
                return None
        for j, dim in enumerate(self.dimensions):
            if self._member_of[j] < 0 and dim.name not in assignment:
                return None
        return row

    def is_valid(self, assignment: Mapping[str, Any]) -> bool:
        row = self._codes_of_assignment(assignment)
        return row is not None and bool(self.valid_mask(row)[0])

    def canonicalize(self, assignment: Mapping[str, Any]) -> dict[str, Any]:
        """Clamp gated values exceeding their bound to the largest valid choice."""
        out = dict(assignment)
        for k in out:
            self.position(k)
        for g in self.groups:
            if _same_value(out.get(g.flag, g.inactive), g.inactive):
                continue
            for dep, bound in g.gates:
                if dep not in out or bound not in out:
                    continue
                choices = self.dimensions[self._pos[dep]].choices
                allowed = [c for c in choices if c <= out[bound]]
                if not allowed:
                    raise DomainError(f"no choice of {dep!r} fits under {bound}={out[bound]!r}")
                if out[dep] > out[bound]:
                    out[dep] = allowed[-1]
        return out

    def design(self, design_id: int) -> Design:
        if not 0 <= design_id < self.size:
            raise DomainError(f"design id {design_id} not in space of size {self.size}")
        row = self.codes[design_id]
        values = tuple(
            None if c == INACTIVE else dim.choices[c] for dim, c in zip(self.dimensions, row)
        )
        return Design(int(design_id), values, self.names)

    def lookup(self, assignment: Mapping[str, Any]) -> Design:
        """Design for an assignment after canonicalization."""
        canon = self.canonicalize(assignment)
        row = self._codes_of_assignment(canon)
        if row is None:
            raise DomainError(f"assignment {dict(assignment)!r} is not a valid design")
        i = int(self.ids_of(row)[0])
        if i < 0:
            raise DomainError(f"assignment {dict(assignment)!r} is not a valid design")
        return self.design(i)

    def _id(self, d: Design | int) -> int:
        i = d.id if isinstance(d, Design) else int(d)
        if not 0 <= i < self.size:
            raise DomainError(f"design {i} not in space")
        return i

    # -- distance -------------------------------------------------------

    def distance_codes(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Vectorised design distance between broadcastable code arrays."""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
        total = np.zeros(shape, dtype=np.int64)
        flags = {self._pos[g.flag] for g in self.groups}
        for j, dim in enumerate(self.dimensions):
            if self._member_of[j] >= 0 or j in flags:
                continue
            ca, cb = a[..., j], b[..., j]
            total += np.abs(ca - cb) if dim.kind == NUMERICAL else (ca != cb)
        for g_idx, g in enumerate(self.groups):
            fj = self._pos[g.flag]
            off = self._flag_inactive_code[g_idx]
            fa, fb = a[..., fj], b[..., fj]
            a_off, b_off = fa == off, fb == off
            both_on = np.zeros(shape, dtype=np.int64) + (fa != fb)
            a_from_min = np.zeros(shape, dtype=np.int64)
            b_from_min = np.zeros(shape, dtype=np.int64)
            for m in g.members:
                j = self._pos[m]
                ca, cb = a[..., j], b[..., j]
                if self.dimensions[j].kind == NUMERICAL:
                    both_on += np.abs(ca - cb)
                    a_from_min += np.clip(ca, 0, None)
                    b_from_min += np.clip(cb, 0, None)
                else:
                    both_on += ca != cb
            total += np.select(
                [a_off & b_off, a_off, b_off],
                [0, 1 + b_from_min, 1 + a_from_min],
                both_on,
            )
        return total

    def distance(self, a: Design | int, b: Design | int) -> int:
        ia, ib = self._id(a), self._id(b)
        return int(self.distance_codes(self.codes[ia], self.codes[ib]))

    def distances_from(self, a: Design | int) -> np.ndarray:
        return self.distance_codes(self.codes[self._id(a)][None, :], self.codes)

    # -- encoding -------------------------------------------------------

    @property
    def feature_width(self) -> int:
        return sum(d.width for d in self.dimensions)

    def encode_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        blocks = []
        for j, dim in enumerate(self.dimensions):
            c = codes[:, j].astype(np.int64)
            active = c >= 0
            if dim.kind == NUMERICAL:
                vals = np.asarray(dim.choices, dtype=float)
                span = vals[-1] - vals[0]
                x = (vals[np.clip(c, 0, None)] - vals[0]) / span if span > 0 else np.zeros(len(c))
                blocks.append(np.where(active, x, 0.0)[:, None])
            else:
                onehot = np.zeros((len(c), dim.size))
                rows = np.nonzero(active)[0]
                onehot[rows, c[rows]] = 1.0
                blocks.append(onehot)
        return np.concatenate(blocks, axis=1)

    @cached_property
    def features(self) -> np.ndarray:
        """Encoded features of every design, row i for design id i."""
        out = self.encode_codes(self.codes)
        out.setflags(write=False)
        return out

    def encode(self, d: Design | int) -> np.ndarray:
        return self.features[self._id(d)].copy()


def enumerate_designs(space: DesignSpace) -> list[Design]:
    return [space.design(i) for i in range(space.size)]


def is_valid(space: DesignSpace, assignment: Mapping[str, Any]) -> bool:
    return space.is_valid(assignment)


def design_distance(space: DesignSpace, a: Design | int, b: Design | int) -> int:
    return space.distance(a, b)


def encode_design(space: DesignSpace, d: Design | int) -> np.ndarray:
    return space.encode(d)


BUNDLED_SPACES = ("node_level", "graph_level", "toy")


def load_space(name_or_path: str | Path) -> DesignSpace:
    """Load a space from a declaration file or a bundled name."""
    if str(name_or_path) in BUNDLED_SPACES:
        return DesignSpace.from_file(Path(__file__).parent / "spaces" / f"{name_or_path}.json")
    return DesignSpace.from_file(name_or_path)


def product_size(sizes: Iterable[int]) -> int:
    n = 1
    for s in sizes:
        n *= s
    return n
