"""Feeder model: buses, branches, admittance assembly, and the tap transformer.

A feeder is an undirected graph over buses, each bus carrying up to three
phases.  Every (bus, phase) pair is one scalar complex voltage unknown, called
a node below.  The source bus always carries all three phases and holds the
slack voltage.  One in-feeder transformer may be declared; its branches split
the graph into two subsystems that the tap-ratio equations couple.

Node ordering is deterministic: the three source nodes first, then subsystem-1
buses in file order, the transformer primary bus, the transformer secondary
bus, and finally subsystem-2 buses in file order; phases run a, b, c within
each bus.  All electrical quantities are per-unit on the bases declared by the
grid file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError

PHASE_ORDER = ("a", "b", "c")


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    y_block: np.ndarray  # complex, (n_phases_from, n_phases_to), p.u.
    is_transformer: bool = False


@dataclass(frozen=True)
class Transformer:
    primary: str
    secondary: str
    tap_min: float
    tap_max: float
    tap_step: float


@dataclass(frozen=True)
class TapVector:
    """Per-phase real tap ratios of the controllable transformer."""

    values: np.ndarray  # (3,), dimensionless

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (3,):
            raise ConfigError(f"tap vector must have 3 entries, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            raise ConfigError(f"tap ratios must be finite and positive, got {vals}")
        object.__setattr__(self, "values", vals)
        vals.flags.writeable = False

    def delta(self, other: "TapVector") -> np.ndarray:
        """Per-phase difference self - other."""
        return self.values - other.values

    def within(self, lo: float, hi: float, tol: float = 1e-9) -> bool:
        return bool(np.all(self.values >= lo - tol) and np.all(self.values <= hi + tol))

    @staticmethod
    def nominal() -> "TapVector":
        return TapVector(np.ones(3))


@dataclass
class AdmittanceMatrix:
    """Dense complex Laplacian over node phases plus its index map."""

    matrix: np.ndarray                      # complex, (N+3, N+3)
    nodes: tuple[tuple[str, str], ...]      # global order of (bus, phase)
    index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {np_: k for k, np_ in enumerate(self.nodes)}

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _check_connected(bus_ids, edges):
    """BFS connectivity over the bus graph; returns the set reached from edges[0]."""
    if not bus_ids:
        return set()
    adj = {b: set() for b in bus_ids}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    start = bus_ids[0]
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _component_from(start, bus_ids, edges):
    adj = {b: set() for b in bus_ids}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


class GridModel:
    """Validated feeder model with a fixed deterministic node ordering.

    Parameters are plain containers; `load_grid` builds them from the JSON
    schema.  Validation enforces: one source bus with phases (a, b, c),
    connectivity, no duplicate branches, and, when a transformer is declared,
    that removing its branches splits the graph into exactly two components
    with the source on the primary side.
    """

    def __init__(self, buses, branches, source_bus, v_src, transformer=None,
                 base_mva=1.0, base_kv=1.0):
        self.buses = tuple(buses)
        self.branches = tuple(branches)
        self.source_bus = source_bus
        self.transformer = transformer
        self.base_mva = float(base_mva)
        self.base_kv = float(base_kv)

        v_src = np.asarray(v_src, dtype=complex)
        if v_src.shape != (3,):
            raise ConfigError("source voltage must have exactly 3 phase entries")
        self.v_src = v_src

        self._validate_buses()
        self._validate_branches()
        self._split_subsystems()
        self._build_ordering()

    # -- validation -------------------------------------------------------

    def _validate_buses(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bus ids in grid file")
        self._bus_by_id = {b.id: b for b in self.buses}
        if self.source_bus not in self._bus_by_id:
            raise ConfigError(f"source bus '{self.source_bus}' not among buses")
        src = self._bus_by_id[self.source_bus]
        if tuple(src.phases) != PHASE_ORDER:
            raise ConfigError("source bus must carry phases a, b, c")
        for b in self.buses:
            bad = [p for p in b.phases if p not in PHASE_ORDER]
            if bad:
                raise ConfigError(f"bus '{b.id}': unknown phases {bad}")
            if tuple(b.phases) != tuple(p for p in PHASE_ORDER if p in b.phases):
                raise ConfigError(f"bus '{b.id}': phases must be listed in a,b,c order")
            if len(b.phases) == 0:
                raise ConfigError(f"bus '{b.id}': empty phase set")

    def _validate_branches(self):
        seen_pairs = set()
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self._bus_by_id:
                    raise ConfigError(f"branch endpoint '{end}' is not a bus")
            if br.from_bus == br.to_bus:
                raise ConfigError(f"self-loop branch at '{br.from_bus}'")
            key = frozenset((br.from_bus, br.to_bus))
            if key in seen_pairs:
                raise ConfigError(
                    f"duplicate branch between '{br.from_bus}' and '{br.to_bus}'")
            seen_pairs.add(key)
            self._branch_core(br)  # shape/symmetry validation happens here

        bus_ids = [b.id for b in self.buses]
        edges = [(br.from_bus, br.to_bus) for br in self.branches]
        if _check_connected(bus_ids, edges) != set(bus_ids):
            raise ConfigError("grid graph is not connected")

        tf = self.transformer
        if tf is not None:
            for end in (tf.primary, tf.secondary):
                if end not in self._bus_by_id:
                    raise ConfigError(f"transformer bus '{end}' is not a bus")
            if tf.primary == tf.secondary:
                raise ConfigError("transformer primary and secondary must differ")
            if tf.primary == self.source_bus or tf.secondary == self.source_bus:
                raise ConfigError("transformer may not sit on the source bus")
            p1 = self._bus_by_id[tf.primary].phases
            p2 = self._bus_by_id[tf.secondary].phases
            if tuple(p1) != PHASE_ORDER or tuple(p2) != PHASE_ORDER:
                raise ConfigError("transformer buses must carry all three phases")
            if not (tf.tap_min <= tf.tap_max):
                raise ConfigError("tap_min must not exceed tap_max")
            if tf.tap_min <= 0:
                raise ConfigError("tap bounds must be positive")
            if tf.tap_step <= 0:
                raise ConfigError("tap_step must be positive")

    def _split_subsystems(self):
        """Identify the two electrical subsystems around the transformer."""
        bus_ids = [b.id for b in self.buses]
        if self.transformer is None:
            self.subsystem1 = tuple(bus_ids)
            self.subsystem2 = ()
            return
        tf = self.transformer
        non_tf_edges = []
        n_tf_branches = 0
        for br in self.branches:
            pair = {br.from_bus, br.to_bus}
            if pair == {tf.primary, tf.secondary}:
                n_tf_branches += 1
                continue
            non_tf_edges.append((br.from_bus, br.to_bus))
        if n_tf_branches == 0:
            raise ConfigError("no branch connects the declared transformer buses")
        comp1 = _component_from(self.source_bus, bus_ids, non_tf_edges)
        comp2 = set(bus_ids) - comp1
        if tf.primary not in comp1 or tf.secondary not in comp2:
            raise ConfigError(
                "transformer orientation inconsistent: primary must share a "
                "component with the source once transformer branches are removed")
        if _component_from(tf.secondary, bus_ids, non_tf_edges) != comp2:
            raise ConfigError(
                "removing the transformer branches must leave exactly two components")
        self.subsystem1 = tuple(b for b in bus_ids if b in comp1)
        self.subsystem2 = tuple(b for b in bus_ids if b in comp2)

    def _build_ordering(self):
        tf = self.transformer
        order = [self.source_bus]
        if tf is None:
            order += [b.id for b in self.buses if b.id != self.source_bus]
        else:
            order += [b for b in self.subsystem1
                      if b not in (self.source_bus, tf.primary)]
            order += [tf.primary, tf.secondary]
            order += [b for b in self.subsystem2 if b != tf.secondary]
        self.bus_order = tuple(order)

        nodes = []
        for bus_id in order:
            for ph in self._bus_by_id[bus_id].phases:
                nodes.append((bus_id, ph))
        self.nodes = tuple(nodes)             # global (bus, phase) order
        self.node_index = {np_: k for k, np_ in enumerate(nodes)}
        self.n_total = len(nodes)             # N + 3
        self.n = self.n_total - 3             # non-source nodes

        def bus_nodes(bus_id):
            return tuple(self.node_index[(bus_id, p)]
                         for p in self._bus_by_id[bus_id].phases)

        self.source_nodes = bus_nodes(self.source_bus)
        if self.source_nodes != (0, 1, 2):
            raise ConfigError("internal ordering error: source nodes not first")
        if tf is not None:
            self.tf1_nodes = bus_nodes(tf.primary)     # global indices
            self.tf2_nodes = bus_nodes(tf.secondary)
        else:
            self.tf1_nodes = ()
            self.tf2_nodes = ()
        in_sub2 = set(self.subsystem2)
        self.sub2_nodes = tuple(k for k, (b, _) in enumerate(self.nodes)
                                if b in in_sub2)

    # -- lookups ----------------------------------------------------------

    def bus(self, bus_id: str) -> Bus:
        try:
            return self._bus_by_id[bus_id]
        except KeyError:
            raise ConfigError(f"unknown bus '{bus_id}'") from None

    def node(self, bus_id: str, phase: str) -> int:
        """Global node index of (bus, phase)."""
        try:
            return self.node_index[(bus_id, phase)]
        except KeyError:
            raise ConfigError(f"unknown node ({bus_id}, {phase})") from None

    def phase_of(self, node: int) -> int:
        """Phase slot 0/1/2 (a/b/c) of a global node index."""
        return PHASE_ORDER.index(self.nodes[node][1])

    def find_branch(self, from_bus: str, to_bus: str) -> tuple[Branch, bool]:
        """Branch between the two buses and whether it is stored reversed."""
        for br in self.branches:
            if (br.from_bus, br.to_bus) == (from_bus, to_bus):
                return br, False
            if (br.from_bus, br.to_bus) == (to_bus, from_bus):
                return br, True
        raise ConfigError(f"no branch between '{from_bus}' and '{to_bus}'")

    def is_transformer_branch(self, br: Branch) -> bool:
        tf = self.transformer
        if tf is None:
            return False
        return {br.from_bus, br.to_bus} == {tf.primary, tf.secondary}

    # -- branch cores ------------------------------------------------------

    def _branch_core(self, br: Branch):
        """Shared-phase square admittance core of a branch.

        The stored block spans all phases of both endpoint buses; only the
        square sub-block on shared phases may be nonzero, and it must be
        symmetric (reciprocal element).
        """
        bf = self._bus_by_id[br.from_bus]
        bt = self._bus_by_id[br.to_bus]
        block = np.asarray(br.y_block, dtype=complex)
        if block.shape != (len(bf.phases), len(bt.phases)):
            raise ConfigError(
                f"branch {br.from_bus}-{br.to_bus}: y_block shape {block.shape} "
                f"does not match phase counts ({len(bf.phases)}, {len(bt.phases)})")
        shared = [p for p in bf.phases if p in bt.phases]
        if not shared:
            raise ConfigError(
                f"branch {br.from_bus}-{br.to_bus}: endpoints share no phase")
        rows = [bf.phases.index(p) for p in shared]
        cols = [bt.phases.index(p) for p in shared]
        mask = np.ones(block.shape, dtype=bool)
        mask[np.ix_(rows, cols)] = False
        if np.any(np.abs(block[mask]) > 1e-12):
            raise ConfigError(
                f"branch {br.from_bus}-{br.to_bus}: admittance entries on "
                f"non-shared phases must be zero")
        core = block[np.ix_(rows, cols)]
        if np.max(np.abs(core - core.T)) > 1e-9:
            raise ConfigError(
                f"branch {br.from_bus}-{br.to_bus}: admittance core not symmetric")
        return shared, core


def assemble_laplacian(node_ids, edges):
    """Weighted-graph Laplacian over scalar nodes.

    `edges` is an iterable of (i, j, w) index pairs with complex weight
    matrices or scalars; for each edge both diagonal entries gain +w and the
    off-diagonal entries gain -w.
    """
    n = len(node_ids)
    y = np.zeros((n, n), dtype=complex)
    for i, j, w in edges:
        w = np.asarray(w, dtype=complex)
        y[np.ix_(i, i)] += w
        y[np.ix_(j, j)] += w
        y[np.ix_(i, j)] -= w
        y[np.ix_(j, i)] -= w.T
    return y


def _assemble(grid: GridModel, include_transformer: bool) -> AdmittanceMatrix:
    edges = []
    for br in grid.branches:
        if not include_transformer and grid.is_transformer_branch(br):
            continue
        shared, core = grid._branch_core(br)
        gi = [grid.node(br.from_bus, p) for p in shared]
        gj = [grid.node(br.to_bus, p) for p in shared]
        edges.append((gi, gj, core))
    y = assemble_laplacian(range(grid.n_total), edges)
    return AdmittanceMatrix(matrix=y, nodes=grid.nodes)


def build_admittance(grid: GridModel) -> AdmittanceMatrix:
    """Laplacian admittance matrix of the full feeder graph."""
    return _assemble(grid, include_transformer=True)


def build_isolated_admittance(grid: GridModel) -> AdmittanceMatrix:
    """Admittance with the transformer branches removed.

    Block diagonal over the two subsystems; the tap-ratio equations carry the
    coupling instead of an admittance stamp.  Equals `build_admittance` when
    the grid has no transformer.
    """
    return _assemble(grid, include_transformer=False)


def apply_tap(v_tf1, tap: TapVector):
    """Secondary-side voltages diag(tap) @ v_tf1 for matched phases."""
    v = np.asarray(v_tf1, dtype=complex)
    if v.shape != (3,):
        raise ConfigError(f"expected 3 primary-side phasors, got shape {v.shape}")
    return tap.values * v


# -- JSON ingestion --------------------------------------------------------

def _complex_pair(pair, where):
    if (not isinstance(pair, (list, tuple))) or len(pair) != 2:
        raise ConfigError(f"{where}: expected [re, im] pair, got {pair!r}")
    return complex(float(pair[0]), float(pair[1]))


def _parse_y_block(raw, where):
    try:
        rows = [[_complex_pair(cell, where) for cell in row] for row in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed y_block ({exc})") from None
    arr = np.array(rows, dtype=complex)
    if arr.ndim != 2:
        raise ConfigError(f"{where}: y_block must be a matrix")
    return arr


def load_grid(path) -> GridModel:
    """Parse and validate a grid JSON file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read grid file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {path} is not valid JSON: {exc}") from None
    return grid_from_dict(raw, source_name=str(path))


def grid_from_dict(raw: dict, source_name="<dict>") -> GridModel:
    def need(key, obj=raw, ctx=source_name):
        if key not in obj:
            raise ConfigError(f"{ctx}: missing field '{key}'")
        return obj[key]

    buses = []
    for i, b in enumerate(need("buses")):
        buses.append(Bus(id=str(need("id", b, f"buses[{i}]")),
                         phases=tuple(need("phases", b, f"buses[{i}]"))))
    branches = []
    tf_raw = raw.get("transformer")
    tf_pair = None
    if tf_raw is not None:
        tf_pair = {str(tf_raw.get("primary")), str(tf_raw.get("secondary"))}
    for i, br in enumerate(need("branches")):
        ctx = f"branches[{i}]"
        from_bus = str(need("from", br, ctx))
        to_bus = str(need("to", br, ctx))
        branches.append(Branch(
            from_bus=from_bus,
            to_bus=to_bus,
            y_block=_parse_y_block(need("y_block", br, ctx), ctx),
            is_transformer=(tf_pair is not None and {from_bus, to_bus} == tf_pair),
        ))
    src = need("source")
    v_src = [_complex_pair(v, "source.v") for v in need("v", src, "source")]
    if len(v_src) != 3:
        raise ConfigError("source.v must list exactly 3 phasors")
    transformer = None
    if tf_raw is not None:
        transformer = Transformer(
            primary=str(need("primary", tf_raw, "transformer")),
            secondary=str(need("secondary", tf_raw, "transformer")),
            tap_min=float(need("tap_min", tf_raw, "transformer")),
            tap_max=float(need("tap_max", tf_raw, "transformer")),
            tap_step=float(need("tap_step", tf_raw, "transformer")),
        )
    return GridModel(
        buses=buses,
        branches=branches,
        source_bus=str(need("bus", src, "source")),
        v_src=v_src,
        transformer=transformer,
        base_mva=float(need("base_mva")),
        base_kv=float(need("base_kv")),
    )
