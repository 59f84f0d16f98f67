"""Reference engine for small instances.

``simulate`` executes a mapped loop nest one MAC at a time and keeps the
resident tile of every storage instance as an explicit set of tensor
coordinates. Transfers are counted by set difference, sharing by comparing
the sets different nodes receive at the same step. Nothing here reuses the
analytic model, so the two can certify each other.

``direct_gradients`` computes weight and input gradients by definition, and
``composed_gradients`` rebuilds them from padding, upsampling and a plain
correlation, as a second formulation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .arch import HardwareDescription, LevelKind
from .mapping import Mapping, SubKind
from .workload import TENSORS, LayerKind, LayerSpec, Phase


class OracleLimitError(RuntimeError):
    """Instance too large to execute literally."""


@dataclass
class SimLog:
    macs: int = 0
    accesses: dict = field(default_factory=dict)  # (level, tensor) -> [reads, writes]
    noc: dict = field(default_factory=dict)  # (level, tensor) -> {unicast, multicast, accumulate}
    # (child level, tensor) -> list of node groups (tuples of node ids) seen sharing data
    sharing: dict = field(default_factory=dict)

    def access_table(self) -> dict:
        return {k: (v[0], v[1]) for k, v in sorted(self.accesses.items())}

    def noc_table(self) -> dict:
        return dict(sorted(self.noc.items()))


def _coords(tensor: str, idx: dict, strides: tuple[int, int], depthwise: bool) -> tuple:
    n, m, c, r, s, e, f = (idx[d] for d in "NMCRSEF")
    u, v = strides
    if tensor == "inputs":
        return (n, e * u + r, f * v + s, m if depthwise else c)
    if tensor == "filters":
        return (r, s, m) if depthwise else (r, s, c, m)
    return (n, e, f, m)


def _bounding_box(points: set) -> frozenset:
    lo = [min(p[a] for p in points) for a in range(len(next(iter(points))))]
    hi = [max(p[a] for p in points) for a in range(len(lo))]
    return frozenset(itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))))


class _Boundary:
    """Tile state of one tensor between a parent level and a child level."""

    def __init__(self, tensor, parent, child, routing, loops):
        self.tensor, self.parent, self.child, self.routing = tensor, parent, child, routing
        self.key_pos = [i for i, l in enumerate(loops) if l[0] > child]
        self.time_pos = [i for i, l in enumerate(loops) if l[0] > child and not l[3]]
        self.node_pos = [i for i, l in enumerate(loops) if l[3] and child < l[0] < parent]
        self.parent_pos = [i for i, l in enumerate(loops) if l[3] and l[0] > parent]
        self.inner_pos = [i for i, l in enumerate(loops) if l[0] <= child]
        self.inst_pos = [i for i in self.key_pos if loops[i][3]]
        self.state: dict = {}  # instance -> (key, tile)
        self.visited: dict = {}
        self.events: dict = {}  # (label, parent) -> {node: (entering, readback)}
        self.evictions: dict = {}  # (label, parent) -> {node: leaving}


def simulate(m: Mapping, hw: HardwareDescription, limit: int = 10_000_000) -> SimLog:
    """Execute ``m`` literally and tally every transfer."""
    w = m.workload
    if w.macs > limit:
        raise OracleLimitError(f"{w.macs} iterations exceed the limit {limit}")
    names = [l.name for l in hw.levels]
    # (level index, dim, bound, spatial) outermost first
    loops = []
    for sub in m.subs:
        li = names.index(sub.level)
        for l in sub.loops:
            loops.append((li, l.dim, l.bound, sub.kind is SubKind.SPATIAL))
    weights = []
    for i, (_, d, _, _) in enumerate(loops):
        weights.append(prod(b for _, dd, b, _ in loops[i + 1:] if dd == d))

    def dims_of(index_tuple):
        idx = dict.fromkeys("NMCRSEF", 0)
        for (_, d, _, _), wgt, k in zip(loops, weights, index_tuple):
            idx[d] += k * wgt
        return idx

    mems = [i for i, l in enumerate(hw.levels) if l.kind is LevelKind.MEMORY]
    bounds = []
    for t in TENSORS:
        chain = [i for i in reversed(mems) if (names[i], t) not in m.bypass] + [0]
        for p, k in zip(chain, chain[1:]):
            between = [i for i in range(k + 1, p) if hw.levels[i].kind is LevelKind.ROUTING]
            bounds.append(_Boundary(t, p, k, between[-1] if between else None, loops))

    log = SimLog()
    for b in bounds:
        log.accesses.setdefault((names[b.parent], b.tensor), [0, 0])
        if b.child > 0:
            log.accesses.setdefault((names[b.child], b.tensor), [0, 0])
        if b.routing is not None:
            log.noc.setdefault((names[b.routing], b.tensor),
                               {"unicast": 0, "multicast": {}, "accumulate": 0})

    tile_cache: dict = {}

    def tile(b: _Boundary, it: tuple) -> frozenset:
        key = (id(b), tuple(it[i] for i in b.key_pos))
        if key not in tile_cache:
            pts = set()
            ranges = [range(loops[i][2]) for i in b.inner_pos]
            cur = list(it)
            for inner in itertools.product(*ranges):
                for pos, v in zip(b.inner_pos, inner):
                    cur[pos] = v
                pts.add(_coords(b.tensor, dims_of(cur), w.strides, w.depthwise))
            tile_cache[key] = _bounding_box(pts) if b.tensor == "inputs" else frozenset(pts)
        return tile_cache[key]

    for it in itertools.product(*(range(l[2]) for l in loops)):
        log.macs += 1
        for b in bounds:
            inst = tuple(it[i] for i in b.inst_pos)
            key = tuple(it[i] for i in b.key_pos)
            old = b.state.get(inst)
            if old is not None and old[0] == key:
                continue
            new = tile(b, it)
            old_tile = old[1] if old else frozenset()
            entering = new - old_tile
            label = (tuple(it[i] for i in b.time_pos), tuple(it[i] for i in b.parent_pos))
            node = tuple(it[i] for i in b.node_pos)
            readback = frozenset()
            if b.tensor == "outputs":
                seen = b.visited.setdefault(inst, set())
                readback = frozenset(entering & seen)
                seen |= new
                leaving = old_tile - new
                if leaving:
                    b.evictions.setdefault(label, {})[node] = leaving
            if entering:
                b.events.setdefault(label, {})[node] = (entering, readback)
            b.state[inst] = (key, new)
    for b in bounds:
        if b.tensor == "outputs":
            # end of execution: resident outputs are written back
            for inst, (_, t) in b.state.items():
                where = dict(zip(b.inst_pos, inst))
                node = tuple(where[i] for i in b.node_pos)
                parent = tuple(where[i] for i in b.parent_pos)
                b.evictions.setdefault(("end", parent), {})[node] = t
        _tally(b, names, log)
    return log


def _group(per_node: dict, pick) -> list[tuple[frozenset, list]]:
    groups: dict = {}
    for node in sorted(per_node):
        groups.setdefault(pick(per_node[node]), []).append(node)
    return [(s, nodes) for s, nodes in groups.items() if s]


def _tally(b: _Boundary, names: list, log: SimLog) -> None:
    pacc = log.accesses[(names[b.parent], b.tensor)]
    cacc = log.accesses.get((names[b.child], b.tensor)) if b.child > 0 else None
    noc = log.noc.get((names[b.routing], b.tensor)) if b.routing is not None else None
    share = log.sharing.setdefault((names[b.child], b.tensor), [])
    for label in sorted(b.events, key=repr):
        per_node = b.events[label]
        if b.tensor != "outputs":
            for data, nodes in _group(per_node, lambda ev: ev[0]):
                pacc[0] += len(data)
                if cacc is not None:
                    cacc[1] += len(data) * len(nodes)
                if len(nodes) > 1:
                    share.append(tuple(nodes))
                if noc is not None:
                    if len(nodes) == 1:
                        noc["unicast"] += len(data)
                    else:
                        noc["multicast"][len(nodes)] = noc["multicast"].get(len(nodes), 0) + len(data)
        else:
            # partial sums brought back go to one node of each group
            for data, nodes in _group(per_node, lambda ev: ev[1]):
                pacc[0] += len(data)
                if cacc is not None:
                    cacc[1] += len(data)
                if noc is not None:
                    noc["unicast"] += len(data)
    if b.tensor == "outputs":
        for label in sorted(b.evictions, key=repr):
            for data, nodes in _group(b.evictions[label], lambda s: s):
                pacc[1] += len(data)
                if cacc is not None:
                    cacc[0] += len(data) * len(nodes)
                if len(nodes) > 1:
                    share.append(tuple(nodes))
                if noc is not None:
                    if len(nodes) == 1:
                        noc["unicast"] += len(data)
                    else:
                        noc["accumulate"] += len(data) * len(nodes)
    if noc is not None:
        noc["multicast"] = dict(sorted(noc["multicast"].items()))


# --------------------------------------------------------------------------
# nest execution and gradients


def run_nest(bounds: tuple, strides: tuple, inputs: np.ndarray, filters: np.ndarray,
             depthwise: bool = False) -> np.ndarray:
    """Evaluate the canonical nest on concrete operands.

    ``inputs`` is [N, P, Q, C] (C replaced by M when depthwise), ``filters`` is
    [R, S, C, M] ([R, S, M] when depthwise). Returns [N, E, F, M].
    """
    n, m, c, r, s, e, f = bounds
    u, v = strides
    out = np.zeros((n, e, f, m), dtype=np.result_type(inputs, filters))
    for rr in range(r):
        for ss in range(s):
            win = inputs[:, rr:rr + (e - 1) * u + 1:u, ss:ss + (f - 1) * v + 1:v, :]
            if depthwise:
                out += win * filters[rr, ss][None, None, None, :]
            else:
                out += np.einsum("nefc,cm->nefm", win, filters[rr, ss])
    return out


def _dense_view(layer: LayerSpec, x: np.ndarray, w: np.ndarray):
    if layer.kind is LayerKind.FC:
        n = x.shape[0]
        return x.reshape(n, 1, 1, -1), w.reshape(1, 1, -1, w.shape[-1]), (0, 0), (1, 1)
    return x, w, layer.padding, layer.stride


def direct_gradients(layer: LayerSpec, x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                     want_dx: bool = True):
    """dW [R,S,C,M] and dX [N,H,W,C] by direct summation over the forward
    relation y[n,e,f,m] = sum x[n, e*U + r - ph, f*V + s - pw, c] * w[r,s,c,m]."""
    x4, w4, (ph, pw), (u, v) = _dense_view(layer, x, w)
    n, h, wd, c = x4.shape
    r, s, _, m = w4.shape
    _, e, f, _ = dy.shape
    dw = np.zeros_like(w4)
    dx = np.zeros_like(x4)
    for nn, ee, ff, rr, ss in itertools.product(range(n), range(e), range(f), range(r), range(s)):
        p, q = ee * u + rr - ph, ff * v + ss - pw
        if 0 <= p < h and 0 <= q < wd:
            dw[rr, ss] += np.outer(x4[nn, p, q], dy[nn, ee, ff])
            if want_dx:
                dx[nn, p, q] += w4[rr, ss] @ dy[nn, ee, ff]
    dw = dw.reshape(w.shape)
    return dw, (dx.reshape(x.shape) if want_dx else None)


def composed_gradients(layer: LayerSpec, x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Same gradients from zero-padding, zero-insertion and a valid correlation."""
    x4, w4, (ph, pw), (u, v) = _dense_view(layer, x, w)
    n, h, wd, c = x4.shape
    r, s, _, m = w4.shape
    _, e, f, _ = dy.shape
    up = np.zeros((n, (e - 1) * u + 1, (f - 1) * v + 1, m), dtype=dy.dtype)
    up[:, ::u, ::v] = dy
    # dW[r,s] = sum over the upsampled window of padded x
    xp = np.pad(x4, ((0, 0), (ph, ph + r), (pw, pw + s), (0, 0)))
    dw = np.zeros_like(w4)
    for rr in range(r):
        for ss in range(s):
            win = xp[:, rr:rr + up.shape[1], ss:ss + up.shape[2], :]
            dw[rr, ss] = np.einsum("npqc,npqm->cm", win, up)
    # dX: full correlation of upsampled dY with the flipped, transposed kernel
    full = np.pad(up, ((0, 0), (r - 1, r - 1 + u), (s - 1, s - 1 + v), (0, 0)))
    flipped = w4[::-1, ::-1].transpose(0, 1, 3, 2)
    big = np.zeros((n, h + 2 * ph, wd + 2 * pw, c), dtype=np.result_type(x4, w4))
    for rr in range(r):
        for ss in range(s):
            win = full[:, rr:rr + big.shape[1], ss:ss + big.shape[2], :]
            big += np.einsum("npqm,mc->npqc", win, flipped[rr, ss])
    dx = big[:, ph:ph + h, pw:pw + wd, :]
    return dw.reshape(w.shape), dx.reshape(x.shape)


def random_layer(rng, max_dim: int = 6) -> LayerSpec:
    """A small conv or FC layer with integer-friendly shapes."""
    if rng.random() < 0.2:
        return LayerSpec(LayerKind.FC, (1, 1, int(rng.integers(1, max_dim + 1))),
                         out_channels=int(rng.integers(1, max_dim + 1)))
    while True:
        r, s = (int(x) for x in rng.integers(1, 4, size=2))
        u, v = (int(x) for x in rng.integers(1, 4, size=2))
        ph, pw = int(rng.integers(0, r)), int(rng.integers(0, s))
        h, w = (int(x) for x in rng.integers(1, max_dim + 1, size=2))
        if h + 2 * ph >= r and w + 2 * pw >= s:
            break
    return LayerSpec(LayerKind.CONV2D, (h, w, int(rng.integers(1, 4))),
                     out_channels=int(rng.integers(1, 4)), kernel_size=(r, s),
                     padding=(ph, pw), stride=(u, v))


def check_gradients(layer: LayerSpec, rng, batch: int = 2, want_dx: bool = True) -> list[str]:
    """Run the WG and BW nests on real integer tensors and compare them with
    both reference gradient routines. Returns a list of differences."""
    from .workload import bw_bounds, materialize_operands, wg_bounds

    h, w, c = layer.in_shape
    e, f, m = layer.out_shape
    r, s = layer.kernel_size if layer.kind is LayerKind.CONV2D else (1, 1)
    x = rng.integers(-3, 4, size=(batch, h, w, c)).astype(np.int64)
    wt = rng.integers(-3, 4, size=(r, s, c, m)).astype(np.int64)
    dy = rng.integers(-3, 4, size=(batch, e, f, m)).astype(np.int64)
    if layer.kind is LayerKind.FC:
        wt = wt.reshape(c * h * w, m) if h * w == 1 else wt
    dw_ref, dx_ref = direct_gradients(layer, x, wt, dy, want_dx)
    diffs = []
    dw_alt, dx_alt = composed_gradients(layer, x, wt, dy)
    if not np.array_equal(dw_ref, dw_alt):
        diffs.append("dW: direct and composed references disagree")
    if want_dx and not np.array_equal(dx_ref, dx_alt):
        diffs.append("dX: direct and composed references disagree")
    inp, fil = materialize_operands(layer, Phase.WG, x, wt, dy)
    dw = run_nest(wg_bounds(layer, batch), (1, 1), inp, fil)  # [c, r, s, m]
    if not np.array_equal(dw.transpose(1, 2, 0, 3).reshape(dw_ref.shape), dw_ref):
        diffs.append("dW: WG nest differs from direct gradient")
    if want_dx:
        inp, fil = materialize_operands(layer, Phase.BW, x, wt, dy)
        dx = run_nest(bw_bounds(layer, batch), (1, 1), inp, fil)
        if not np.array_equal(dx.reshape(dx_ref.shape), dx_ref):
            diffs.append("dX: BW nest differs from direct gradient")
    return diffs


# --------------------------------------------------------------------------
# independent mapspace count


def naive_mapping_count(w, hw: HardwareDescription, constraints) -> int:
    """Count mappings by brute force over every (dim, slot) divisor grid."""
    from .mapper import bypass_combinations, mapping_slots

    slots = mapping_slots(hw)
    fixed = {(d, s): b for d, s, b in constraints.factors}
    lists = {d: set(b) | {1} for d, b in constraints.factor_lists}
    per_dim = []
    for d, bound in zip("NMCRSEF", w.bounds):
        divs = [k for k in range(1, bound + 1) if bound % k == 0]
        opts = []
        for combo in itertools.product(divs, repeat=len(slots)):
            if prod(combo) != bound:
                continue
            if any(fixed.get((d, sl.name), combo[i]) != combo[i] for i, sl in enumerate(slots)):
                continue
            if d in lists and not set(combo) <= lists[d]:
                continue
            opts.append(combo)
        per_dim.append(opts)
    total = 0
    for choice in itertools.product(*per_dim):
        n = 1
        for i, sl in enumerate(slots):
            if sl.spatial:
                continue
            dims = [d for d, combo in zip("NMCRSEF", choice) if combo[i] > 1]
            ok = 0
            for perm in itertools.permutations(dims):
                good = True
                for d, level, pos in constraints.pins:
                    if level != sl.name:
                        continue
                    if d not in perm:
                        good = False
                        break
                    p = pos if pos >= 0 else len(perm) + pos
                    if not 0 <= p < len(perm) or perm[p] != d:
                        good = False
                        break
                ok += good
            n *= ok
        total += n
    return total * len(bypass_combinations(hw, constraints))


# --------------------------------------------------------------------------
# random instances


_TEMPLATES = (
    # (kind, mem_type) innermost first; routing entries get a random grid
    (("compute", None), ("memory", "Scratchpad"), ("memory", "DRAM")),
    (("compute", None), ("memory", "Scratchpad"), ("routing", None), ("memory", "DRAM")),
    (("compute", None), ("memory", "Register"), ("memory", "SRAM"), ("memory", "DRAM")),
    (("compute", None), ("memory", "Scratchpad"), ("routing", None), ("memory", "SRAM"),
     ("memory", "DRAM")),
)


def random_hardware(rng, max_levels: int = 4) -> HardwareDescription:
    from .arch import Buffer, LevelSpec, MemType, Topology, validate_description

    templates = [t for t in _TEMPLATES if len(t) <= max_levels]
    tpl = templates[rng.integers(len(templates))]
    levels = []
    for i, (kind, mt) in enumerate(tpl):
        name = f"L{i}"
        if kind == "compute":
            levels.append(LevelSpec(name, LevelKind.COMPUTE, pe_count=64))
        elif kind == "routing":
            grid = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            levels.append(LevelSpec(name, LevelKind.ROUTING, topology=Topology.BUS,
                                    routing_size=grid))
        else:
            size = None if i == len(tpl) - 1 else 1 << 20
            levels.append(LevelSpec(name, LevelKind.MEMORY,
                                    buffers=(Buffer(name, MemType(mt), size),)))
    hw = HardwareDescription(16, tuple(levels), name="random")
    validate_description(hw)
    return hw


def random_workload(rng, max_bound: int = 6, max_macs: int = 4000):
    from .workload import IntraLayerWorkload, Phase

    while True:
        bounds = tuple(int(rng.integers(1, max_bound + 1)) for _ in range(7))
        depthwise = bool(rng.random() < 0.15)
        if depthwise:
            bounds = bounds[:2] + (1,) + bounds[3:]
        if prod(bounds) <= max_macs:
            break
    strides = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    return IntraLayerWorkload(0, Phase.FW, bounds, strides, depthwise=depthwise, name="random")


def _split(rng, n: int, parts: int) -> list[int]:
    """Random ordered factorization of ``n`` into ``parts`` exact divisors."""
    out = []
    for _ in range(parts - 1):
        divs = [d for d in range(1, n + 1) if n % d == 0]
        d = divs[rng.integers(len(divs))]
        out.append(d)
        n //= d
    out.append(n)
    rng.shuffle(out)
    return out


def random_mapping(rng, w, hw: HardwareDescription) -> Mapping:
    """A random (not necessarily capacity-valid) mapping of ``w`` onto ``hw``."""
    from .mapper import Skeleton, bypass_candidates, mapping_slots

    slots = mapping_slots(hw)
    per_dim = [_split(rng, b, len(slots)) for b in w.bounds]
    factors = tuple(tuple(per_dim[d][k] for d in range(7)) for k in range(len(slots)))
    bypass = frozenset(p for p in bypass_candidates(hw) if rng.random() < 0.3)
    sk = Skeleton(w, hw, slots, factors, bypass, ())
    orders = []
    for _, dims in sk.temporal_levels():
        perm = list(dims)
        rng.shuffle(perm)
        orders.append(tuple(perm))
    return sk.mapping(tuple(orders))


def compare_with_model(m: Mapping, hw: HardwareDescription,
                       limit: int = 10_000_000) -> list[str]:
    """Differences between the analytic counts and the literal simulation."""
    from .evaluator import count_activity

    counts = count_activity(m, hw)
    log = simulate(m, hw, limit)
    diffs = []
    if counts.macs != log.macs:
        diffs.append(f"macs {counts.macs} != {log.macs}")
    a, b = counts.accesses(), log.access_table()
    if a != b:
        diffs.append(f"accesses {a} != {b}")
    a, b = counts.noc(), log.noc_table()
    if a != b:
        diffs.append(f"noc {a} != {b}")
    return diffs
