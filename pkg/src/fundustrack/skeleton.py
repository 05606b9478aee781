"""Vessel-mask thinning, skeleton-graph extraction, and tortuosity metrics.

The mask is thinned to one-pixel width by the classical two-subiteration
method (neighbor count in [2, 6], transition count 1, directional deletion
conditions). Within each subiteration candidates are flagged in parallel and
then deleted one at a time with the conditions re-checked against the current
raster; a transition count of 1 guarantees the deleted pixel's remaining
neighbors stay mutually connected, so every 8-connected component of the
input survives in the skeleton. A final pass dissolves any remaining fully-on
2x2 blocks under the same local-connectivity guard.

The skeleton decomposes into a graph of endpoint/junction nodes and ordered
pixel chains; each chain's tortuosity is its step-sum arc length (1 for axis
moves, sqrt(2) for diagonal moves) divided by the endpoint chord.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParams, DegenerateChord
from .validation import check_mask_array

# clockwise ring around a pixel, starting north: P2..P9 as (dx, dy)
_RING = ((0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1))

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class SkeletonNode:
    x: int
    y: int
    kind: str  # "endpoint" or "junction"


@dataclass(frozen=True)
class SkeletonSegment:
    segment_id: int
    pixels: tuple  # ordered (x, y) chain; for closed chains the last pixel
    closed: bool   # connects back to the first


@dataclass(frozen=True)
class SkeletonGraph:
    nodes: tuple
    segments: tuple

    @property
    def node_pixels(self) -> set:
        return {(n.x, n.y) for n in self.nodes}


@dataclass(frozen=True)
class SegmentMeasure:
    segment_id: int
    arc_length: float
    chord_length: float
    tortuosity: float


@dataclass(frozen=True)
class TortuosityReport:
    per_segment: tuple
    average_tortuosity: float | None
    max_tortuosity: float | None
    length_weighted_average: float | None
    segments_used: int
    min_arc_px: float

    def summary(self) -> dict:
        return {
            "avg_tortuosity": self.average_tortuosity,
            "max_tortuosity": self.max_tortuosity,
            "segments_used": self.segments_used,
        }


# ---------------------------------------------------------------------------
# thinning
# ---------------------------------------------------------------------------

def _neighbors(arr: np.ndarray, y: int, x: int) -> list:
    return [int(arr[y + dy, x + dx]) for dx, dy in _RING]


def _transitions(ring: list) -> int:
    return sum(1 for i in range(8) if ring[i] == 0 and ring[(i + 1) % 8] == 1)


def _deletable(arr: np.ndarray, y: int, x: int, second_pass: bool) -> bool:
    ring = _neighbors(arr, y, x)
    b = sum(ring)
    if not 2 <= b <= 6 or _transitions(ring) != 1:
        return False
    p2, p4, p6, p8 = ring[0], ring[2], ring[4], ring[6]
    if second_pass:
        return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
    return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0


def _locally_connected_without_center(arr: np.ndarray, y: int, x: int) -> bool:
    """True when the on-neighbors form one 8-connected cluster in the
    punctured 3x3 neighborhood, i.e. deletion cannot split the component."""
    on = [(dx, dy) for dx, dy in _RING if arr[y + dy, x + dx]]
    if len(on) < 2:
        return False
    seen = {on[0]}
    stack = [on[0]]
    rest = set(on[1:])
    while stack:
        cx, cy = stack.pop()
        for nx, ny in list(rest):
            if abs(nx - cx) <= 1 and abs(ny - cy) <= 1:
                rest.discard((nx, ny))
                seen.add((nx, ny))
                stack.append((nx, ny))
    return not rest


def _flag_candidates(padded: np.ndarray, second_pass: bool) -> np.ndarray:
    p = [padded[1 + dy: padded.shape[0] - 1 + dy, 1 + dx: padded.shape[1] - 1 + dx]
         for dx, dy in _RING]
    b = sum(pi.astype(np.int8) for pi in p)
    a = sum(((p[i] == 0) & (p[(i + 1) % 8] == 1)).astype(np.int8) for i in range(8))
    core = (padded[1:-1, 1:-1] == 1) & (b >= 2) & (b <= 6) & (a == 1)
    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
    if second_pass:
        cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    else:
        cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    return core & cond


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a vessel mask to a one-pixel-wide skeleton.

    Deterministic; preserves the number of 8-connected components, never adds
    pixels, and leaves no fully-on 2x2 block. An empty mask yields an empty
    skeleton; an isolated pixel is its own skeleton.
    """
    mask = check_mask_array(mask)
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = mask

    changed = True
    while changed:
        changed = False
        for second_pass in (False, True):
            flags = _flag_candidates(padded, second_pass)
            for y, x in np.argwhere(flags):
                py, px = y + 1, x + 1
                if padded[py, px] and _deletable(padded, py, px, second_pass):
                    padded[py, px] = 0
                    changed = True

    _prune_redundant_pixels(padded)
    return padded[1:-1, 1:-1].astype(bool)


def _prune_redundant_pixels(padded: np.ndarray) -> None:
    """Reduce the thinned raster to an irreducible skeleton.

    The sequentially guarded subiterations can leave residue the parallel
    rules would have removed: staircase shoulders on diagonal runs, corner
    pixels, and survivors of 2x2 blocks. Any pixel with two or more
    neighbors that stay mutually 8-connected without it is redundant:
    deleting it cannot split a component, erase one, or detach an endpoint.
    Straight and diagonal chain interiors have two opposite (disconnected)
    neighbors and real crossings have separated arms, so both survive.
    """
    changed = True
    while changed:
        changed = False
        for y, x in np.argwhere(padded):
            if _locally_connected_without_center(padded, y, x):
                padded[y, x] = 0
                changed = True


# ---------------------------------------------------------------------------
# graph extraction
# ---------------------------------------------------------------------------

def extract_graph(skel: np.ndarray) -> SkeletonGraph:
    """Decompose a skeleton into nodes and maximal degree-2 pixel chains.

    Pixels with one neighbor are endpoints and isolated pixels count as
    endpoints; pixels with three or more neighbors are junction pixels.
    Right-angle meetings leave small clusters of mutually adjacent junction
    pixels, so 8-connected junction pixels merge into a single junction node
    (anchored at the cluster's first pixel in row-major order). Chains run
    node-pixel to node-pixel; cycles with no node on them become one closed
    chain, measured by the loop diameter rule downstream.
    """
    skel = check_mask_array(skel, "skeleton")
    h, w = skel.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = skel

    order = lambda p: (p[1], p[0])  # row-major over (x, y)
    pixels = sorted(((int(x), int(y)) for y, x in np.argwhere(skel)), key=order)
    pixel_set = set(pixels)

    def adjacent(p):
        x, y = p
        return [(x + dx, y + dy) for dx, dy in _RING if padded[y + dy + 1, x + dx + 1]]

    degree = {p: len(adjacent(p)) for p in pixels}
    node_pixels = {p for p, d in degree.items() if d != 2}
    junction_pixels = {p for p, d in degree.items() if d >= 3}

    # merge 8-connected junction pixels into one node apiece
    cluster_of = {}
    nodes = []
    for p in pixels:
        if p not in junction_pixels or p in cluster_of:
            continue
        members = [p]
        stack = [p]
        cluster_of[p] = p
        while stack:
            cur = stack.pop()
            for nb in adjacent(cur):
                if nb in junction_pixels and nb not in cluster_of:
                    cluster_of[nb] = p
                    members.append(nb)
                    stack.append(nb)
        anchor = min(members, key=order)
        for m in members:
            cluster_of[m] = anchor
        nodes.append(SkeletonNode(x=anchor[0], y=anchor[1], kind="junction"))
    for p in pixels:
        if p in node_pixels and p not in junction_pixels:
            nodes.append(SkeletonNode(x=p[0], y=p[1], kind="endpoint"))
    nodes.sort(key=lambda n: (n.y, n.x))

    visited = set()

    def edge(a, b):
        return (a, b) if a <= b else (b, a)

    segments = []

    def add_segment(chain, closed):
        segments.append(
            SkeletonSegment(segment_id=len(segments), pixels=tuple(chain), closed=closed)
        )

    for start in sorted(node_pixels, key=order):
        for nb in adjacent(start):
            e = edge(start, nb)
            if e in visited:
                continue
            visited.add(e)
            if nb in node_pixels:
                same_cluster = (
                    start in cluster_of and nb in cluster_of
                    and cluster_of[start] == cluster_of[nb]
                )
                if not same_cluster:
                    add_segment([start, nb], closed=False)
                continue
            chain = [start, nb]
            prev, cur = start, nb
            closed = False
            while cur not in node_pixels:
                nxt = None
                for cand in adjacent(cur):
                    if cand != prev and edge(cur, cand) not in visited:
                        nxt = cand
                        break
                if nxt is None:
                    break  # tangle dead end; keep the partial chain
                visited.add(edge(cur, nxt))
                if nxt == start:
                    closed = True  # loop back onto the starting node pixel
                    break
                chain.append(nxt)
                prev, cur = cur, nxt
            add_segment(chain, closed)

    # leftover degree-2 pixels belong to node-free cycles
    chained = set()
    for seg in segments:
        chained.update(seg.pixels)
    for start in pixels:
        if start in node_pixels or start in chained:
            continue
        chain = [start]
        prev, cur = None, start
        closed = False
        while True:
            nxt = None
            for cand in adjacent(cur):
                if cand != prev and edge(cur, cand) not in visited:
                    nxt = cand
                    break
            if nxt is None:
                break
            visited.add(edge(cur, nxt))
            if nxt == start:
                closed = True
                break
            chain.append(nxt)
            prev, cur = cur, nxt
        chained.update(chain)
        add_segment(chain, closed=closed)

    return SkeletonGraph(nodes=tuple(nodes), segments=tuple(segments))


# ---------------------------------------------------------------------------
# tortuosity
# ---------------------------------------------------------------------------

def _step_length(a, b) -> float:
    dx, dy = abs(b[0] - a[0]), abs(b[1] - a[1])
    if dx > 1 or dy > 1 or (dx == 0 and dy == 0):
        raise BadParams(f"chain pixels {a} and {b} are not distinct 8-neighbors")
    return _SQRT2 if dx and dy else 1.0


def chain_arc_length(pixels, closed: bool = False) -> float:
    arc = sum(_step_length(pixels[i], pixels[i + 1]) for i in range(len(pixels) - 1))
    if closed and len(pixels) > 2:
        arc += _step_length(pixels[-1], pixels[0])
    return arc


def segment_tortuosity(chain) -> tuple:
    """(arc, chord, ratio) for an open pixel chain.

    Raises DegenerateChord for closed or single-pixel chains; the caller is
    expected to apply the loop diameter rule instead.
    """
    if len(chain) < 2:
        raise DegenerateChord("chain has fewer than 2 pixels")
    first, last = chain[0], chain[-1]
    if first == last:
        raise DegenerateChord("chain is closed; chord undefined")
    arc = chain_arc_length(chain)
    chord = math.hypot(last[0] - first[0], last[1] - first[1])
    return arc, chord, arc / chord


def _loop_measure(chain) -> tuple | None:
    arc = chain_arc_length(chain, closed=True)
    best = 0.0
    pts = list(chain)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = math.hypot(pts[j][0] - pts[i][0], pts[j][1] - pts[i][1])
            if d > best:
                best = d
    if best == 0.0:
        return None
    return arc, best, arc / best


def tortuosity_report(graph: SkeletonGraph, min_arc_px: float = 10.0) -> TortuosityReport:
    """Per-segment arc/chord ratios with unweighted average and maximum.

    Segments with arc length below ``min_arc_px`` are excluded; closed chains
    use their pixel-diameter as the chord and must reach ``2 * min_arc_px``.
    With no qualifying segment the summaries are absent (None).
    """
    if min_arc_px < 2:
        raise BadParams(f"min_arc_px must be >= 2, got {min_arc_px}")
    measures = []
    for seg in graph.segments:
        if seg.closed:
            if len(seg.pixels) < 3:
                continue
            m = _loop_measure(seg.pixels)
            if m is None or m[0] < 2 * min_arc_px:
                continue
        else:
            if len(seg.pixels) < 2:
                continue
            m = segment_tortuosity(seg.pixels)
            if m[0] < min_arc_px:
                continue
        measures.append(
            SegmentMeasure(
                segment_id=seg.segment_id,
                arc_length=m[0],
                chord_length=m[1],
                tortuosity=m[2],
            )
        )

    if measures:
        ratios = [m.tortuosity for m in measures]
        arcs = [m.arc_length for m in measures]
        average = sum(ratios) / len(ratios)
        weighted = sum(a * r for a, r in zip(arcs, ratios)) / sum(arcs)
        peak = max(ratios)
    else:
        average = weighted = peak = None

    return TortuosityReport(
        per_segment=tuple(measures),
        average_tortuosity=average,
        max_tortuosity=peak,
        length_weighted_average=weighted,
        segments_used=len(measures),
        min_arc_px=float(min_arc_px),
    )


def default_min_arc_px(image_width: int, base: float = 10.0, base_width: int = 512) -> float:
    """Arc-length floor scaled proportionally to image width."""
    return max(2.0, base * image_width / base_width)


def analyze_mask_tortuosity(mask: np.ndarray, min_arc_px: float | None = None) -> TortuosityReport:
    """Convenience composition: thin, extract the graph, measure."""
    mask = check_mask_array(mask)
    if min_arc_px is None:
        min_arc_px = default_min_arc_px(mask.shape[1])
    return tortuosity_report(extract_graph(skeletonize(mask)), min_arc_px)
