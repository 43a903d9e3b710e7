"""Relational data model: schemas, ingestion, discretization, flattening.

Attribute values are integer codes ``0..domain_size-1``.  Inside a
:class:`FlattenedRelation`, a slot past the group size holds the NULL code
(``domain_size`` of that attribute) and a slot that has not been sampled yet
holds ``UNSAMPLED``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .errors import CapExceeded, IncompleteRow, IntegrityError, SchemaError

log = logging.getLogger(__name__)

UNSAMPLED = -1
PRIVACY_CLASSES = ("primary", "secondary", "public")


@dataclass
class AttributeSpec:
    name: str
    domain_size: int
    bin_representatives: list[float] | None = None

    def __post_init__(self):
        if int(self.domain_size) < 1:
            raise SchemaError(f"attribute {self.name!r}: domain_size must be >= 1")
        self.domain_size = int(self.domain_size)
        if self.bin_representatives is not None and len(self.bin_representatives) != self.domain_size:
            raise SchemaError(f"attribute {self.name!r}: need one bin representative per code")


@dataclass
class ForeignKey:
    column: str
    references: str
    max_group_size: int | None = None
    min_group_size: int = 1
    tau: int | None = None


@dataclass
class RelationSchema:
    name: str
    primary_key: str
    attributes: list[AttributeSpec]
    foreign_keys: list[ForeignKey] = field(default_factory=list)
    privacy: str = "primary"

    def __post_init__(self):
        if self.privacy not in PRIVACY_CLASSES:
            raise SchemaError(f"relation {self.name!r}: unknown privacy class {self.privacy!r}")
        cols = [self.primary_key] + [fk.column for fk in self.foreign_keys] + [a.name for a in self.attributes]
        if len(set(cols)) != len(cols):
            raise SchemaError(f"relation {self.name!r}: duplicate column names")

    @property
    def attr_names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def domain_sizes(self) -> list[int]:
        return [a.domain_size for a in self.attributes]

    def attr(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def fk(self, column: str) -> ForeignKey:
        for fk in self.foreign_keys:
            if fk.column == column:
                return fk
        raise KeyError(column)

    @property
    def is_private(self) -> bool:
        return self.privacy != "public"


@dataclass
class Relation:
    """Rows of one relation.  ``data`` is an (n, n_attrs) int64 code matrix."""

    schema: RelationSchema
    keys: list[str]
    fk_values: dict[str, list[str]]
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64).reshape(len(self.keys), len(self.schema.attributes))

    def __len__(self):
        return len(self.keys)

    @property
    def name(self) -> str:
        return self.schema.name

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.schema.attr_names.index(name)]


def size_attr_name(referencing: str, fk_column: str) -> str:
    """Name of the derived group-size attribute for FK(referencing.fk_column)."""
    return f"#size({referencing}.{fk_column})"


def is_size_attr(name: str) -> bool:
    return name.startswith("#size(")


class Database:
    """A set of relations plus the foreign-key graph over private relations."""

    def __init__(self, relations: Iterable[Relation], validate: bool = True):
        self.relations: dict[str, Relation] = {}
        for r in relations:
            if r.name in self.relations:
                raise SchemaError(f"duplicate relation {r.name!r}")
            self.relations[r.name] = r
        if validate:
            self.validate()

    @property
    def schemas(self) -> list[RelationSchema]:
        return [r.schema for r in self.relations.values()]

    def __getitem__(self, name: str) -> Relation:
        return self.relations[name]

    @property
    def fk_graph(self) -> nx.DiGraph:
        """Edge R -> R' for every foreign key from private R to private R'."""
        g = nx.DiGraph()
        for r in self.relations.values():
            if r.schema.is_private:
                g.add_node(r.name)
        for r in self.relations.values():
            for fk in r.schema.foreign_keys:
                target = self.relations[fk.references].schema
                if r.schema.is_private and target.is_private:
                    g.add_edge(r.name, fk.references)
        return g

    def validate(self) -> None:
        validate_schemas(self.schemas)
        for r in self.relations.values():
            _check_codes(r)
            if len(set(r.keys)) != len(r.keys):
                raise IntegrityError(f"{r.name}: duplicate primary key values")
        for r in self.relations.values():
            for fk in r.schema.foreign_keys:
                ref = self.relations[fk.references]
                known = set(ref.keys)
                vals = r.fk_values[fk.column]
                for v in vals:
                    if v not in known:
                        raise IntegrityError(f"{r.name}.{fk.column}={v!r} has no match in {ref.name}")
                sizes = group_sizes(ref.keys, vals)
                if fk.max_group_size is not None and len(sizes) and sizes.max() > fk.max_group_size:
                    raise CapExceeded(
                        f"{r.name}.{fk.column}: group of size {sizes.max()} exceeds cap {fk.max_group_size}"
                    )
                if fk.min_group_size > 0 and len(sizes) and sizes.min() < fk.min_group_size:
                    raise IntegrityError(
                        f"{ref.name} has tuples with fewer than {fk.min_group_size} references from "
                        f"{r.name}.{fk.column}; declare min_group_size 0 to allow empty groups"
                    )

    def copy(self) -> "Database":
        return Database(list(self.relations.values()), validate=False)


def validate_schemas(schemas: Sequence[RelationSchema]) -> None:
    by_name = {s.name: s for s in schemas}
    if len(by_name) != len(schemas):
        raise SchemaError("duplicate relation names")
    g = nx.DiGraph()
    for s in schemas:
        for fk in s.foreign_keys:
            if fk.references not in by_name:
                raise SchemaError(f"{s.name}.{fk.column} references unknown relation {fk.references!r}")
            target = by_name[fk.references]
            if not s.is_private and target.is_private:
                raise SchemaError(f"public relation {s.name} cannot reference private {target.name}")
            if fk.max_group_size is not None and fk.max_group_size < max(fk.min_group_size, 0):
                raise SchemaError(f"{s.name}.{fk.column}: max_group_size below min_group_size")
            if s.is_private and target.is_private:
                g.add_edge(s.name, target.name)
    if not nx.is_directed_acyclic_graph(g):
        raise SchemaError("private foreign-key graph has a cycle")
    primaries = [s.name for s in schemas if s.privacy == "primary"]
    private = [s for s in schemas if s.is_private]
    if private and len(primaries) != 1:
        raise SchemaError(f"need exactly one primary private relation, found {len(primaries)}")
    for s in private:
        if s.privacy == "secondary" and not any(by_name[fk.references].is_private for fk in s.foreign_keys):
            raise SchemaError(f"secondary relation {s.name} does not reference any private relation")


def _check_codes(r: Relation) -> None:
    if r.data.size == 0:
        return
    lo = r.data.min(axis=0)
    hi = r.data.max(axis=0)
    for j, a in enumerate(r.schema.attributes):
        if lo[j] < 0 or hi[j] >= a.domain_size:
            raise IntegrityError(f"{r.name}.{a.name}: code out of range [0, {a.domain_size})")


def group_sizes(ref_keys: Sequence[str], fk_vals: Sequence[str]) -> np.ndarray:
    """Number of referencing tuples per referenced key, in ``ref_keys`` order."""
    index = {k: i for i, k in enumerate(ref_keys)}
    counts = np.zeros(len(ref_keys), dtype=np.int64)
    for v in fk_vals:
        counts[index[v]] += 1
    return counts


# ---------------------------------------------------------------- file I/O

def _parse_schema(obj: dict) -> list[RelationSchema]:
    if not isinstance(obj, dict) or not isinstance(obj.get("relations"), list):
        raise SchemaError("schema must be an object with a 'relations' list")
    out = []
    for rel in obj["relations"]:
        try:
            name = rel["name"]
            cap = rel.get("max_group_size")
            fks = []
            for fk in rel.get("foreign_keys", []):
                col = fk["attribute"]
                fk_cap = fk.get("max_group_size")
                if fk_cap is None and isinstance(cap, dict):
                    fk_cap = cap.get(col)
                elif fk_cap is None and cap is not None:
                    fk_cap = cap
                fks.append(ForeignKey(
                    column=col,
                    references=fk["references"],
                    max_group_size=None if fk_cap is None else int(fk_cap),
                    min_group_size=int(fk.get("min_group_size", 1)),
                    tau=None if fk.get("tau") is None else int(fk["tau"]),
                ))
            attrs = [AttributeSpec(a["name"], int(a["domain_size"]), a.get("bin_representatives"))
                     for a in rel.get("attributes", [])]
            out.append(RelationSchema(name, rel["primary_key"], attrs, fks, rel.get("privacy", "primary")))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed relation entry {rel!r}: {exc}") from exc
    validate_schemas(out)
    return out


def schema_to_json(schemas: Sequence[RelationSchema]) -> dict:
    rels = []
    for s in schemas:
        attrs = []
        for a in s.attributes:
            d = {"name": a.name, "domain_size": a.domain_size}
            if a.bin_representatives is not None:
                d["bin_representatives"] = list(a.bin_representatives)
            attrs.append(d)
        fks = []
        for fk in s.foreign_keys:
            d = {"attribute": fk.column, "references": fk.references, "min_group_size": fk.min_group_size}
            if fk.max_group_size is not None:
                d["max_group_size"] = fk.max_group_size
            if fk.tau is not None:
                d["tau"] = fk.tau
            fks.append(d)
        rels.append({"name": s.name, "primary_key": s.primary_key, "attributes": attrs,
                     "foreign_keys": fks, "privacy": s.privacy})
    return {"relations": rels}


def load_schema(path: str | Path) -> list[RelationSchema]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return _parse_schema(obj)


def read_relation(schema: RelationSchema, path: str | Path) -> Relation:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"missing data file {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IntegrityError(f"{path}: empty file (header required)") from None
        needed = [schema.primary_key] + [fk.column for fk in schema.foreign_keys] + schema.attr_names
        missing = [c for c in needed if c not in header]
        if missing:
            raise IntegrityError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in needed}
        keys, fkv, rows = [], {fk.column: [] for fk in schema.foreign_keys}, []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            keys.append(row[pos[schema.primary_key]])
            for fk in schema.foreign_keys:
                fkv[fk.column].append(row[pos[fk.column]])
            try:
                rows.append([int(row[pos[a]]) for a in schema.attr_names])
            except ValueError as exc:
                raise IntegrityError(f"{path}:{lineno}: non-integer attribute code ({exc})") from exc
    data = np.array(rows, dtype=np.int64).reshape(len(keys), len(schema.attributes))
    return Relation(schema, keys, fkv, data)


def load_database(schema_file: str | Path, data_dir: str | Path) -> Database:
    """Read a schema JSON and one ``<relation>.csv`` per relation, then validate."""
    schemas = load_schema(schema_file)
    rels = [read_relation(s, Path(data_dir) / f"{s.name}.csv") for s in schemas]
    return Database(rels)


def write_relation(rel: Relation, path: str | Path) -> None:
    s = rel.schema
    header = [s.primary_key] + [fk.column for fk in s.foreign_keys] + s.attr_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        fk_cols = [rel.fk_values[fk.column] for fk in s.foreign_keys]
        for i, key in enumerate(rel.keys):
            w.writerow([key] + [c[i] for c in fk_cols] + [int(v) for v in rel.data[i]])


def write_database(db: Database, out_dir: str | Path, schema_file: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rel in db.relations.values():
        write_relation(rel, out / f"{rel.name}.csv")
    if schema_file:
        (out / "schema.json").write_text(json.dumps(schema_to_json(db.schemas), indent=2) + "\n",
                                         encoding="utf-8")


# ---------------------------------------------------------- discretization

def discretize(values: Sequence, num_bins: int) -> tuple[np.ndarray, list[float]]:
    """Equal-width binning over [min, max]; the max is clamped into the last bin.

    Returns the codes and the bin midpoints.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    arr = np.asarray(values)
    if arr.dtype.kind not in "biuf":
        raise TypeError("discretize needs a numeric column")
    arr = arr.astype(np.float64)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64), [0.0] * num_bins
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros(arr.size, dtype=np.int64), [lo] * num_bins
    # floor((v - lo) * bins / (hi - lo)) avoids the rounding of a precomputed width
    codes = np.floor((arr - lo) * num_bins / (hi - lo)).astype(np.int64)
    codes = np.clip(codes, 0, num_bins - 1)
    width = (hi - lo) / num_bins
    mids = [lo + (i + 0.5) * width for i in range(num_bins)]
    return codes, mids


def discretize_column(rows: list[dict], attr: str, num_bins: int) -> tuple[list[dict], AttributeSpec]:
    """Discretize ``attr`` in a list of dict rows; returns new rows and the attribute spec."""
    raw = [r[attr] for r in rows]
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise TypeError(f"column {attr!r} is not numeric") from None
    codes, mids = discretize(np.array(vals), num_bins)
    out = [dict(r, **{attr: int(c)}) for r, c in zip(rows, codes)]
    return out, AttributeSpec(attr, num_bins, mids)


# ------------------------------------------------------------- flattening

def augment_size_attribute(r_h: Relation, r_i: Relation, fk: str, n_cap: int | None = None) -> Relation:
    """Append the group-size attribute for FK(r_i.fk -> r_h) to ``r_h``."""
    fk_decl = r_i.schema.fk(fk)
    if fk_decl.references != r_h.name:
        raise SchemaError(f"{r_i.name}.{fk} does not reference {r_h.name}")
    sizes = group_sizes(r_h.keys, r_i.fk_values[fk])
    if n_cap is None:
        n_cap = fk_decl.max_group_size
    if n_cap is None:
        n_cap = int(sizes.max()) if len(sizes) else 0
        log.warning("no max_group_size declared for %s.%s; using the observed maximum %d, "
                    "which is itself a statistic of the private data", r_i.name, fk, n_cap)
    if len(sizes) and sizes.max() > n_cap:
        raise CapExceeded(f"{r_i.name}.{fk}: group of size {sizes.max()} exceeds cap {n_cap}")
    name = size_attr_name(r_i.name, fk)
    attrs = list(r_h.schema.attributes) + [AttributeSpec(name, n_cap + 1)]
    schema = replace(r_h.schema, attributes=attrs)
    data = np.column_stack([r_h.data, sizes]) if len(r_h) else np.zeros((0, len(attrs)), dtype=np.int64)
    return Relation(schema, list(r_h.keys), {k: list(v) for k, v in r_h.fk_values.items()}, data)


@dataclass
class FlattenedRelation:
    """One row per referenced tuple: its attributes followed by N member slots.

    ``household`` is (n, |A_H|) and includes the size attribute at column
    ``size_index``; ``slots`` is (n, N, |A_I|).
    """

    household_attrs: list[AttributeSpec]
    individual_attrs: list[AttributeSpec]
    size_index: int
    N: int
    household: np.ndarray
    slots: np.ndarray
    household_keys: list[str] | None = None

    def __post_init__(self):
        self.household = np.asarray(self.household, dtype=np.int64).reshape(-1, len(self.household_attrs))
        n = self.household.shape[0]
        self.slots = np.asarray(self.slots, dtype=np.int64).reshape(n, self.N, len(self.individual_attrs))

    def __len__(self):
        return self.household.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return self.household[:, self.size_index]

    @property
    def null_codes(self) -> np.ndarray:
        return np.array([a.domain_size for a in self.individual_attrs], dtype=np.int64)

    @property
    def group_counts(self) -> np.ndarray:
        return count_group_sizes(self)

    @property
    def household_names(self) -> list[str]:
        return [a.name for a in self.household_attrs]

    @property
    def individual_names(self) -> list[str]:
        return [a.name for a in self.individual_attrs]

    def rows_of_size(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.sizes == s)

    def check_padding(self) -> None:
        """Assert the NULL-padding invariant (slots > size are NULL, others are not)."""
        nulls = self.null_codes
        pos = np.arange(self.N)[None, :]
        inside = pos < self.sizes[:, None]
        is_null = (self.slots == nulls[None, None, :]).all(axis=2)
        any_null = (self.slots == nulls[None, None, :]).any(axis=2)
        if np.any(inside & any_null) or np.any(~inside & ~is_null):
            raise IntegrityError("flattened relation violates the NULL-padding invariant")


def flatten(r_i: Relation, r_h: Relation, fk: str, N: int | None = None) -> FlattenedRelation:
    """Flatten ``r_i`` into ``r_h`` (which must carry the size attribute).

    Members fill slots in the file order of ``r_i``.
    """
    size_name = size_attr_name(r_i.name, fk)
    if size_name not in r_h.schema.attr_names:
        raise SchemaError(f"{r_h.name} lacks the size attribute {size_name}; call augment_size_attribute")
    size_idx = r_h.schema.attr_names.index(size_name)
    if N is None:
        N = r_h.schema.attributes[size_idx].domain_size - 1
    index = {k: i for i, k in enumerate(r_h.keys)}
    n_attrs = len(r_i.schema.attributes)
    nulls = np.array(r_i.schema.domain_sizes, dtype=np.int64)
    slots = np.broadcast_to(nulls, (len(r_h), N, n_attrs)).copy()
    fill = np.zeros(len(r_h), dtype=np.int64)
    for row, v in enumerate(r_i.fk_values[fk]):
        h = index[v]
        if fill[h] >= N:
            raise CapExceeded(f"group of {r_h.name} key {v!r} exceeds N={N}")
        slots[h, fill[h]] = r_i.data[row]
        fill[h] += 1
    if not np.array_equal(fill, r_h.data[:, size_idx]):
        raise IntegrityError(f"size attribute of {r_h.name} disagrees with {r_i.name}.{fk}")
    return FlattenedRelation(list(r_h.schema.attributes), list(r_i.schema.attributes), size_idx, N,
                             r_h.data.copy(), slots, list(r_h.keys))


def count_group_sizes(fr: FlattenedRelation) -> np.ndarray:
    """Exact n_s for s = 0..N (index = group size)."""
    return np.bincount(fr.sizes, minlength=fr.N + 1)[: fr.N + 1].astype(np.int64)


def decompose(fr: FlattenedRelation, individual_schema: RelationSchema, household_schema: RelationSchema,
              fk_column: str, household_keys: Sequence[str] | None = None,
              key_prefix: str = "") -> tuple[Relation, Relation]:
    """Split a (synthetic) flattened relation back into its two base relations.

    Household attributes absent from ``household_schema`` (e.g. derived size
    attributes) are dropped.  Households get fresh keys ``1..n`` unless
    ``household_keys`` is given.  Individuals get fresh keys ``1..m``.
    """
    n = len(fr)
    sizes = fr.sizes
    pos = np.arange(fr.N)[None, :]
    live = pos < sizes[:, None]
    if np.any(fr.household == UNSAMPLED):
        raise IncompleteRow("household attribute left unsampled")
    live_vals = fr.slots[live]
    if np.any(live_vals == UNSAMPLED):
        raise IncompleteRow("a non-NULL slot has an unsampled attribute")
    if household_keys is None:
        household_keys = [f"{key_prefix}{i + 1}" for i in range(n)]
    household_keys = list(household_keys)
    cols = [fr.household_names.index(a) for a in household_schema.attr_names]
    h_rel = Relation(household_schema, household_keys,
                     {fk.column: [""] * n for fk in household_schema.foreign_keys},
                     fr.household[:, cols])
    owner = np.nonzero(live)[0]
    icols = [fr.individual_names.index(a) for a in individual_schema.attr_names]
    i_data = live_vals[:, icols] if len(live_vals) else np.zeros((0, len(icols)), dtype=np.int64)
    m = len(owner)
    fkv = {fk.column: [""] * m for fk in individual_schema.foreign_keys}
    fkv[fk_column] = [household_keys[h] for h in owner]
    i_rel = Relation(individual_schema, [f"{key_prefix}{j + 1}" for j in range(m)], fkv, i_data)
    return i_rel, h_rel


def strip_size_attributes(rel: Relation) -> Relation:
    keep = [j for j, a in enumerate(rel.schema.attributes) if not is_size_attr(a.name)]
    schema = replace(rel.schema, attributes=[rel.schema.attributes[j] for j in keep])
    return Relation(schema, list(rel.keys), {k: list(v) for k, v in rel.fk_values.items()}, rel.data[:, keep])
