"""Analytical DRAM-traffic model for the expansion and tournament trees.

Traffic is counted at object granularity (whole ciphertexts and keys) for a
set of scheduling policies:

* ``BFS`` — stream every tree level through DRAM; keys loaded once per level.
* ``DFS`` — walk the whole tree depth-first holding the path on chip; keys
  reloaded at every node.
* ``HS_BFS`` / ``HS_DFS`` — hierarchical search: the tree is cut into
  subtree layers of bounded depth; each subtree's interior stays on chip and
  only its boundary ciphertexts touch DRAM.  The two variants differ in the
  working set a subtree needs, hence in the depth a given capacity allows.
* ``HS_DFS_RO`` — additionally fuses the gadget-digit reduction into the
  decomposition pipeline, shrinking the per-node temporary from a full digit
  vector to a single polynomial and thereby allowing deeper subtrees.

All byte counts are per query; batching multiplies client traffic while the
database scan volume stays constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .params import PirParams

WORD_BYTES = 3.5  # 28-bit residues

STRATEGIES = ("BFS", "DFS", "HS_BFS", "HS_DFS", "HS_DFS_RO")


class CapacityError(ValueError):
    """On-chip capacity cannot hold the minimum working set."""


class InfeasibleScheduleError(ValueError):
    """A schedule step exceeded on-chip capacity."""


@dataclass(frozen=True)
class MemModel:
    """On-chip capacity plus derived object sizes (bytes)."""

    onchip_capacity: int
    params: PirParams

    @property
    def poly(self) -> float:
        return self.params.K * self.params.N * WORD_BYTES

    @property
    def ct_bfv(self) -> float:
        return 2 * self.poly

    @property
    def ct_rgsw(self) -> float:
        return 2 * 2 * self.params.ell * self.poly

    @property
    def evk(self) -> float:
        return 2 * self.params.ell * self.poly

    @property
    def db_poly(self) -> float:
        return self.poly


@dataclass(frozen=True)
class SchedulePolicy:
    strategy: str
    depth: int | str = "auto"  # subtree depth for HS strategies

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class OpGraph:
    """Node multiset of one pipeline stage, tagged by tree depth.

    ``direction`` is "expand" (1 -> 2^L leaves) or "fold" (2^L -> 1).
    """

    stage: str
    direction: str
    levels: int
    key_kind: str  # "evk" or "rgsw"
    nodes: list = field(default_factory=list)  # (kind, depth)

    def nodes_at(self, depth: int) -> list:
        return [n for n in self.nodes if n[1] == depth]

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n[0] == kind)


@dataclass
class TrafficReport:
    stage: str
    policy: str
    depth_used: int | None
    batch: int
    loaded: dict = field(default_factory=dict)
    stored: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> float:
        return sum(self.loaded.values()) + sum(self.stored.values())

    def category_bytes(self, cat: str) -> float:
        return self.loaded.get(cat, 0.0) + self.stored.get(cat, 0.0)

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "policy": self.policy,
            "depth": self.depth_used,
            "batch": self.batch,
            "loaded": {k: round(v) for k, v in self.loaded.items()},
            "stored": {k: round(v) for k, v in self.stored.items()},
            "total_bytes": round(self.total_bytes),
        }


# --------------------------------------------------------------- op graphs


def build_graphs(params: PirParams, batch: int = 1):
    """Returns (expand graph, coltor graph, db-scan bytes per batch)."""
    expand = OpGraph("expand", "expand", params.m, "evk")
    for t in range(params.m):
        for _ in range(1 << t):
            expand.nodes.append(("Subs", t))
            expand.nodes.append(("Add", t))
            expand.nodes.append(("Sub", t))
    coltor = OpGraph("coltor", "fold", params.d, "rgsw")
    for t in range(params.d):
        for _ in range(1 << (params.d - t - 1)):
            coltor.nodes.append(("ExtProd", t))
            coltor.nodes.append(("Add", t))
            coltor.nodes.append(("Sub", t))
    db_bytes = params.D * params.K * params.N * WORD_BYTES
    return expand, coltor, db_bytes


# ----------------------------------------------------------- depth selection


def _key_size(mem: MemModel, key_kind: str) -> float:
    return mem.evk if key_kind == "evk" else mem.ct_rgsw


def _temp_bytes(mem: MemModel, strategy: str, key_kind: str) -> float:
    """Decomposition temporaries: ell digit polys per Subs (2*ell per
    ExtProd, which decomposes both halves); one polynomial with R.O."""
    if strategy.endswith("_RO"):
        return mem.poly
    digits = mem.params.ell * (1 if key_kind == "evk" else 2)
    return digits * mem.poly


def _bare_working_set(strategy: str, depth: int, key: float, ct: float) -> float:
    if strategy.startswith("HS_BFS") or strategy == "BFS":
        return depth * key + (1 << (depth - 1)) * ct
    return depth * key + (depth + 1) * ct  # DFS-style subtree


def max_subtree_depth(policy: SchedulePolicy, mem: MemModel,
                      key_kind: str = "rgsw", max_depth: int = 40) -> int:
    """Largest subtree depth whose working-set formula fits on chip.

    Uses the bare working-set formulas (keys plus boundary ciphertexts);
    decomposition temporaries additionally constrain the depth the simulator
    will actually accept, see :func:`feasible_depth`.
    """
    key = _key_size(mem, key_kind)
    ct = mem.ct_bfv
    best = 0
    for ds in range(1, max_depth + 1):
        if _bare_working_set(policy.strategy, ds, key, ct) <= mem.onchip_capacity:
            best = ds
        else:
            break
    if best == 0:
        need = _bare_working_set(policy.strategy, 1, key, ct)
        raise CapacityError(
            f"capacity {mem.onchip_capacity} below minimum working set "
            f"{need:.0f} for depth 1")
    return best


def feasible_depth(policy: SchedulePolicy, mem: MemModel, key_kind: str,
                   max_depth: int = 40) -> int:
    """Like max_subtree_depth but including decomposition temporaries."""
    key = _key_size(mem, key_kind)
    ct = mem.ct_bfv
    temp = _temp_bytes(mem, policy.strategy, key_kind)
    best = 0
    for ds in range(1, max_depth + 1):
        if _bare_working_set(policy.strategy, ds, key, ct) + temp <= mem.onchip_capacity:
            best = ds
        else:
            break
    if best == 0:
        raise CapacityError(
            f"capacity {mem.onchip_capacity} cannot hold a depth-1 subtree "
            f"plus temporaries ({temp:.0f} bytes)")
    return best


def _chunks(levels: int, ds: int) -> list:
    """Greedy subtree layering from the processing start of the tree."""
    out = []
    left = levels
    while left > 0:
        c = min(ds, left)
        out.append(c)
        left -= c
    return out


# --------------------------------------------------------------- simulation


def simulate_traffic(graph: OpGraph, policy: SchedulePolicy, mem: MemModel,
                     batch: int = 1) -> TrafficReport:
    """Byte-exact load/store accounting for one pipeline stage.

    The schedule is validated stepwise against capacity; an HS depth that
    does not fit (including temporaries) raises InfeasibleScheduleError.
    """
    L = graph.levels
    key_cat = graph.key_kind
    key = _key_size(mem, key_cat)
    ct = mem.ct_bfv
    temp = _temp_bytes(mem, policy.strategy, key_cat)
    loads = {key_cat: 0.0, "ct_bfv": 0.0, "db": 0.0, "temp": 0.0}
    stores = {"ct_bfv": 0.0, "temp": 0.0}
    depth_used = None

    if L == 0:
        pass
    elif policy.strategy == "BFS":
        # per-node working set: key + in/out cts + temporaries
        need = key + 3 * ct + temp
        if need > mem.onchip_capacity:
            raise InfeasibleScheduleError(
                f"BFS node working set {need:.0f} exceeds capacity")
        if graph.direction == "expand":
            loads["ct_bfv"] += ((1 << L) - 1) * ct        # sum 2^t
            stores["ct_bfv"] += ((1 << (L + 1)) - 2) * ct  # sum 2^(t+1)
        else:
            loads["ct_bfv"] += ((1 << (L + 1)) - 2) * ct   # sum 2^(L-t+1)
            stores["ct_bfv"] += ((1 << L) - 1) * ct
        loads[key_cat] += L * key
    elif policy.strategy == "DFS":
        need = L * 0 + (L + 1) * ct + key + temp
        if need > mem.onchip_capacity:
            raise InfeasibleScheduleError(
                f"DFS path working set {need:.0f} exceeds capacity")
        if graph.direction == "expand":
            loads["ct_bfv"] += 1 * ct
            stores["ct_bfv"] += (1 << L) * ct
        else:
            loads["ct_bfv"] += (1 << L) * ct
            stores["ct_bfv"] += 1 * ct
        loads[key_cat] += ((1 << L) - 1) * key  # reloaded at every node
    else:  # hierarchical search
        if policy.depth == "auto":
            ds = feasible_depth(policy, mem, key_cat, max_depth=L)
        else:
            ds = int(policy.depth)
            ws = _bare_working_set(policy.strategy, ds, key, ct) + temp
            if ws > mem.onchip_capacity:
                raise InfeasibleScheduleError(
                    f"depth-{ds} subtree working set {ws:.0f} exceeds "
                    f"capacity {mem.onchip_capacity}")
        depth_used = ds
        if graph.direction == "expand":
            width = 1
            for c in _chunks(L, ds):
                loads["ct_bfv"] += width * ct
                width <<= c
                stores["ct_bfv"] += width * ct
        else:
            width = 1 << L
            for c in _chunks(L, ds):
                loads["ct_bfv"] += width * ct
                width >>= c
                stores["ct_bfv"] += width * ct
        loads[key_cat] += L * key

    for cat in loads:
        loads[cat] *= batch
    for cat in stores:
        stores[cat] *= batch
    return TrafficReport(graph.stage, policy.strategy, depth_used, batch,
                         loads, stores)


def rowsel_report(params: PirParams, batch: int = 1) -> TrafficReport:
    """DB-scan traffic: the grid streams once per batch, whatever B is."""
    db_bytes = params.D * params.K * params.N * WORD_BYTES
    ct = 2 * params.K * params.N * WORD_BYTES
    loads = {"db": db_bytes, "ct_bfv": batch * params.D0 * ct}
    stores = {"ct_bfv": batch * params.rows * ct}
    return TrafficReport("rowsel", "stream", None, batch, loads, stores)


def pipeline_reports(params: PirParams, policy: SchedulePolicy, mem: MemModel,
                     batch: int = 1) -> list:
    expand, coltor, _ = build_graphs(params, batch)
    return [
        simulate_traffic(expand, policy, mem, batch),
        rowsel_report(params, batch),
        simulate_traffic(coltor, policy, mem, batch),
    ]


# ------------------------------------------------------------------ report


def report(reports: list) -> str:
    """Human-readable comparison table; one line per stage/policy."""
    lines = []
    hdr = f"{'stage':8} {'policy':10} {'depth':>5} {'batch':>5} " \
          f"{'evk_MB':>9} {'rgsw_MB':>9} {'ct_MB':>9} {'db_MB':>9} {'total_MB':>9}"
    lines.append(hdr)
    lines.append("-" * len(hdr))
    for r in reports:
        mb = 1024.0 * 1024.0
        lines.append(
            f"{r.stage:8} {r.policy:10} {str(r.depth_used or '-'):>5} "
            f"{r.batch:>5} "
            f"{r.category_bytes('evk') / mb:>9.2f} "
            f"{r.category_bytes('rgsw') / mb:>9.2f} "
            f"{r.category_bytes('ct_bfv') / mb:>9.2f} "
            f"{r.category_bytes('db') / mb:>9.2f} "
            f"{r.total_bytes / mb:>9.2f}")
    return "\n".join(lines)


def report_ldjson(reports: list) -> str:
    """Machine-readable line-delimited records with stable field names."""
    return "\n".join(json.dumps(r.to_record(), sort_keys=True) for r in reports)
