"""Graph-based supervoxels over the 26-neighbourhood with anisotropic z weighting; 2D superpixels per slice"""
import itertools
import math
from typing import Iterable, List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage
from skimage.segmentation import felzenszwalb

from models import SupervoxelParams
from volumes import LabelVolume, Volume
import logging

logger = logging.getLogger(__name__)

Offset = Tuple[int, int, int]

# Lexicographically positive half of the 26-neighbourhood: one offset per unordered pair.
NEIGHBOR_OFFSETS: List[Offset] = [
    o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)
]


class EdgeList(BaseModel):
    """Undirected voxel-graph edges; u < v are linear (z, y, x) indices"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    is_sorted: bool = False

    @property
    def count(self) -> int:
        return int(self.weight.size)

    def sorted(self) -> "EdgeList":
        """Nondecreasing weight, ties broken by (min endpoint, max endpoint)"""
        if self.is_sorted:
            return self
        order = np.lexsort((self.v, self.u, self.weight))
        return EdgeList(u=self.u[order], v=self.v[order], weight=self.weight[order], is_sorted=True)


def anisotropy_factor(offset: Offset, spacing: Sequence[float]) -> float:
    """Physical length of the offset over its length with the z component zeroed"""
    dz, dy, dx = offset
    if dz == 0:
        return 1.0
    sz, sy, sx = spacing
    physical = math.sqrt((dz * sz) ** 2 + (dy * sy) ** 2 + (dx * sx) ** 2)
    planar = math.sqrt((dy * sy) ** 2 + (dx * sx) ** 2)
    if planar == 0.0:
        # pure z step: compare against the nearest in-plane neighbour
        planar = min(sy, sx)
    return physical / planar


def _offset_windows(dims: Sequence[int], offset: Offset) -> Tuple[Tuple[slice, ...], Tuple[slice, ...]]:
    src, dst = [], []
    for size, step in zip(dims, offset):
        if step >= 0:
            src.append(slice(0, size - step))
            dst.append(slice(step, size))
        else:
            src.append(slice(-step, size))
            dst.append(slice(0, size + step))
    return tuple(src), tuple(dst)


def build_adjacency_edges(volume: Volume, offsets: Iterable[Offset] = NEIGHBOR_OFFSETS) -> EdgeList:
    """One edge per unordered neighbour pair, weighted by |I(p) - I(q)| times the anisotropy factor"""
    dims = volume.dims
    data = volume.data.astype(np.float64)
    index = np.arange(volume.num_voxels, dtype=np.int64).reshape(dims)

    us, vs, ws = [], [], []
    for offset in offsets:
        src, dst = _offset_windows(dims, offset)
        p = index[src].ravel()
        if p.size == 0:
            continue
        q = index[dst].ravel()
        weight = np.abs(data[src] - data[dst]).ravel()
        factor = anisotropy_factor(offset, volume.spacing)
        if factor != 1.0:
            weight = weight * factor
        us.append(np.minimum(p, q))
        vs.append(np.maximum(p, q))
        ws.append(weight)

    if not us:
        empty = np.zeros(0, dtype=np.int64)
        return EdgeList(u=empty, v=empty.copy(), weight=np.zeros(0, dtype=np.float64))
    return EdgeList(u=np.concatenate(us), v=np.concatenate(vs), weight=np.concatenate(ws))


class DisjointSet:
    """Union-find with per-component size and internal difference"""

    def __init__(self, num_elements: int):
        self.parent = list(range(num_elements))
        self.rank = [0] * num_elements
        self.size = [1] * num_elements
        self.internal = [0.0] * num_elements
        self.num_components = num_elements

    def __len__(self) -> int:
        return len(self.parent)

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int, weight: float) -> int:
        """Merge the components rooted at a and b; returns the new root"""
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        self.size[a] += self.size[b]
        self.internal[a] = weight
        self.num_components -= 1
        return a

    def roots(self) -> np.ndarray:
        return np.fromiter((self.find(i) for i in range(len(self))), dtype=np.int64, count=len(self))

    def component_sizes(self) -> List[int]:
        return sorted(self.size[r] for r in set(self.roots().tolist()))


def segment_graph(edges: EdgeList, num_voxels: int, params: SupervoxelParams) -> DisjointSet:
    ds = DisjointSet(num_voxels)
    edges = edges.sorted()
    k = params.scale_k
    find, size, internal = ds.find, ds.size, ds.internal

    for u, v, w in zip(edges.u.tolist(), edges.v.tolist(), edges.weight.tolist()):
        a, b = find(u), find(v)
        if a == b:
            continue
        if w <= min(internal[a] + k / size[a], internal[b] + k / size[b]):
            ds.union(a, b, w)
    return ds


def enforce_min_size(ds: DisjointSet, edges: EdgeList, rho: int) -> DisjointSet:
    """Second pass in edge order merging any pair where either side is smaller than rho"""
    find, size = ds.find, ds.size
    small = sum(1 for r in set(ds.roots().tolist()) if size[r] < rho)
    if small == 0:
        return ds

    edges = edges.sorted()
    for u, v, w in zip(edges.u.tolist(), edges.v.tolist(), edges.weight.tolist()):
        a, b = find(u), find(v)
        if a == b or (size[a] >= rho and size[b] >= rho):
            continue
        small -= (size[a] < rho) + (size[b] < rho)
        root = ds.union(a, b, w)
        small += size[root] < rho
        if small == 0:
            break
    return ds


def relabel_dense(roots: np.ndarray, dims: Sequence[int]) -> LabelVolume:
    """Map component roots to 1..L in order of first voxel appearance"""
    _, first_index, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first_index.size, dtype=np.uint32)
    rank[np.argsort(first_index, kind="stable")] = np.arange(1, first_index.size + 1, dtype=np.uint32)
    return LabelVolume(labels=rank[inverse.ravel()].reshape(dims))


def presmooth(volume: Volume, sigma: float) -> Volume:
    """In-plane Gaussian smoothing; sigma 0 is the identity"""
    if sigma <= 0:
        return volume
    smoothed = ndimage.gaussian_filter(volume.data.astype(np.float64), sigma=(0.0, sigma, sigma))
    return volume.with_data(smoothed.astype(np.float32))


def generate_supervoxels(volume: Volume, params: SupervoxelParams) -> LabelVolume:
    """3D supervoxels, labels dense 1..L; deterministic"""
    volume = presmooth(volume, params.presmooth_sigma)
    edges = build_adjacency_edges(volume, NEIGHBOR_OFFSETS).sorted()
    ds = segment_graph(edges, volume.num_voxels, params)
    logger.debug(f"Graph segmentation: {edges.count} edges, {ds.num_components} components before size floor")
    ds = enforce_min_size(ds, edges, params.rho)
    return relabel_dense(ds.roots(), volume.dims)


def generate_superpixels(volume: Volume, params: SupervoxelParams) -> LabelVolume:
    """Per-slice 2D Felzenszwalb superpixels (8-neighbourhood); labels dense 1..L across the volume"""
    stacked = np.empty(volume.dims, dtype=np.int64)
    next_label = 0
    for z in range(volume.dims[0]):
        segments = felzenszwalb(volume.data[z].astype(np.float64), scale=params.scale_k,
                                sigma=params.presmooth_sigma, min_size=params.rho, channel_axis=None)
        stacked[z] = segments + next_label
        next_label += int(segments.max()) + 1
    logger.debug(f"Superpixels: {next_label} segments over {volume.dims[0]} slices")
    return relabel_dense(stacked.ravel(), volume.dims)


def segment_volume(volume: Volume, params: SupervoxelParams,
                   mode: Literal["supervoxel", "superpixel"] = "supervoxel") -> LabelVolume:
    if mode == "superpixel":
        return generate_superpixels(volume, params)
    return generate_supervoxels(volume, params)
