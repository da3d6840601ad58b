"""Data model for parcellated brains, lesions, time series, and connectivity.

A :class:`ToyAtlas` labels a voxel grid with ROIs, arterial territories, and
hemispheres. A :class:`LesionMask` is a set of damaged voxels. The pipeline
from raw voxel signals to model inputs is deterministic:

    voxel signals -> ROI mean time series (lesioned voxels excluded)
                  -> Pearson correlation -> exponentiation -> X

Connectivity matrices are plain (N, N) float64 arrays; their invariants can
be asserted with :func:`validate_connectivity`. Lesions are summarized per
ROI by the spared voxel fraction p_i, held in :class:`LesionEncoding`.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

Voxel = tuple[int, int, int]

HEMI_LEFT = 0
HEMI_RIGHT = 1

_ATLAS_MAGIC = b"LEGA"
_COHORT_MAGIC = b"LEGC"
_FORMAT_VERSION = 1

_FACE_NEIGHBORS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class InputError(ValueError):
    """Rejected input: dimension mismatch, out-of-range entries, bad file."""


class AtlasLayoutError(ValueError):
    """Requested atlas shape cannot satisfy the parcellation invariants."""


# ----------------------------------------------------------------------
# atlas
# ----------------------------------------------------------------------


@dataclass(eq=False)
class ToyAtlas:
    """Voxel-grid parcellation with hemisphere, ROI, and territory labels.

    Labels are dense integer grids: 0 means background, ROIs are 1..N,
    territories 1..T. Every ROI lies in exactly one hemisphere and one
    territory, and every ROI and territory is a non-empty face-connected
    region.
    """

    grid_dims: tuple[int, int, int]
    roi_of_voxel: np.ndarray        # int32, shape grid_dims
    territory_of_voxel: np.ndarray  # int32, shape grid_dims
    hemisphere_of_voxel: np.ndarray  # uint8, shape grid_dims
    n_rois: int
    n_territories: int
    _roi_cache: dict = field(default_factory=dict, repr=False)

    def roi_sizes(self) -> np.ndarray:
        """Voxel count per ROI, index i holds the size of ROI i+1."""
        if "sizes" not in self._roi_cache:
            counts = np.bincount(self.roi_of_voxel.reshape(-1), minlength=self.n_rois + 1)
            self._roi_cache["sizes"] = counts[1:].copy()
        return self._roi_cache["sizes"]

    def territory_size(self, territory: int) -> int:
        return int(np.count_nonzero(self.territory_of_voxel == territory))

    def territory_voxels(self, territory: int) -> np.ndarray:
        """(K, 3) integer coordinates of a territory, in C order."""
        return np.argwhere(self.territory_of_voxel == territory)

    def left_territories(self) -> list[int]:
        """Territories whose voxels all lie in the left hemisphere."""
        out = []
        for t in range(1, self.n_territories + 1):
            hemi = self.hemisphere_of_voxel[self.territory_of_voxel == t]
            if hemi.size and np.all(hemi == HEMI_LEFT):
                out.append(t)
        return out

    def roi_flat_order(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat voxel indices sorted by ROI id, plus per-ROI segment bounds.

        Background voxels are excluded. Segment i covers ROI i+1 in the
        returned index array: indices[bounds[i]:bounds[i+1]].
        """
        if "order" not in self._roi_cache:
            flat = self.roi_of_voxel.reshape(-1)
            nonbg = np.flatnonzero(flat)
            order = nonbg[np.argsort(flat[nonbg], kind="stable")]
            counts = np.bincount(flat[nonbg], minlength=self.n_rois + 1)[1:]
            bounds = np.concatenate([[0], np.cumsum(counts)])
            self._roi_cache["order"] = (order, bounds)
        return self._roi_cache["order"]

    def validate(self) -> None:
        """Raise InputError on any violated atlas invariant."""
        dims = self.grid_dims
        for name, arr in (
            ("roi_of_voxel", self.roi_of_voxel),
            ("territory_of_voxel", self.territory_of_voxel),
            ("hemisphere_of_voxel", self.hemisphere_of_voxel),
        ):
            if arr.shape != dims:
                raise InputError(f"{name} shape {arr.shape} does not match grid {dims}")

        nonbg = self.roi_of_voxel > 0
        if np.any(self.territory_of_voxel[nonbg] == 0):
            raise InputError("non-background voxel without a territory")
        if np.any((self.roi_of_voxel > 0) != (self.territory_of_voxel > 0)):
            raise InputError("ROI and territory backgrounds disagree")

        for roi in range(1, self.n_rois + 1):
            cells = self.roi_of_voxel == roi
            if not cells.any():
                raise InputError(f"ROI {roi} is empty")
            if not region_is_face_connected(cells):
                raise InputError(f"ROI {roi} is not face-connected")
            if len(np.unique(self.hemisphere_of_voxel[cells])) != 1:
                raise InputError(f"ROI {roi} spans hemispheres")
            if len(np.unique(self.territory_of_voxel[cells])) != 1:
                raise InputError(f"ROI {roi} spans territories")
        for t in range(1, self.n_territories + 1):
            cells = self.territory_of_voxel == t
            if not cells.any():
                raise InputError(f"territory {t} is empty")
            if not region_is_face_connected(cells):
                raise InputError(f"territory {t} is not face-connected")


def _split_counts(total: int, parts: int) -> list[int]:
    """Near-equal integer split, larger shares first."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _range_chunks(extent: int, parts: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, extent, parts + 1).round().astype(int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(parts)]


def build_toy_atlas(
    n_rois: int = 90,
    grid_dims: tuple[int, int, int] = (32, 32, 32),
    n_territories: int = 6,
) -> ToyAtlas:
    """Construct the default procedural atlas.

    The left hemisphere is x < grid_dims[0] // 2. Territories are contiguous
    z-slabs within each hemisphere, ROIs are contiguous sub-blocks of their
    territory. ROI counts are distributed across territories proportionally
    to territory volume.
    """
    gx, gy, gz = grid_dims
    if n_territories < 2 or n_territories % 2:
        raise AtlasLayoutError("n_territories must be even and >= 2")
    per_hemi = n_territories // 2
    if gz < per_hemi or gx < 2:
        raise AtlasLayoutError(f"grid {grid_dims} too small for {n_territories} territories")

    roi = np.zeros(grid_dims, dtype=np.int32)
    territory = np.zeros(grid_dims, dtype=np.int32)
    hemisphere = np.zeros(grid_dims, dtype=np.uint8)
    mid = gx // 2
    hemisphere[mid:, :, :] = HEMI_RIGHT

    territory_boxes: list[tuple[tuple[int, int], tuple[int, int]]] = []  # (x range, z range)
    for x0, x1 in ((0, mid), (mid, gx)):
        for z0, z1 in _range_chunks(gz, per_hemi):
            territory[x0:x1, :, z0:z1] = len(territory_boxes) + 1
            territory_boxes.append(((x0, x1), (z0, z1)))

    sizes = [(x1 - x0) * gy * (z1 - z0) for (x0, x1), (z0, z1) in territory_boxes]
    quotas = _largest_remainder_quotas(n_rois, sizes)

    next_roi = 1
    for ((x0, x1), (z0, z1)), quota in zip(territory_boxes, quotas):
        if quota == 0:
            raise AtlasLayoutError("every territory needs at least one ROI")
        sz = z1 - z0
        stripes = min(gy, max(1, math.isqrt(quota - 1) + 1))
        stripe_counts = _split_counts(quota, stripes)
        if max(stripe_counts) > sz:
            raise AtlasLayoutError(
                f"cannot fit {quota} ROIs into a {x1 - x0}x{gy}x{sz} territory"
            )
        y_chunks = _range_chunks(gy, stripes)
        for (y0, y1), count in zip(y_chunks, stripe_counts):
            if y1 <= y0:
                raise AtlasLayoutError("empty y stripe; raise grid resolution")
            for zz0, zz1 in _range_chunks(sz, count):
                if zz1 <= zz0:
                    raise AtlasLayoutError("empty z chunk; raise grid resolution")
                roi[x0:x1, y0:y1, z0 + zz0:z0 + zz1] = next_roi
                next_roi += 1

    atlas = ToyAtlas(
        grid_dims=grid_dims,
        roi_of_voxel=roi,
        territory_of_voxel=territory,
        hemisphere_of_voxel=hemisphere,
        n_rois=n_rois,
        n_territories=n_territories,
    )
    return atlas


def _largest_remainder_quotas(total: int, sizes: list[int]) -> list[int]:
    weight = sum(sizes)
    raw = [total * s / weight for s in sizes]
    quotas = [int(x) for x in raw]
    remainders = sorted(range(len(sizes)), key=lambda i: raw[i] - quotas[i], reverse=True)
    for i in remainders[: total - sum(quotas)]:
        quotas[i] += 1
    return quotas


# ----------------------------------------------------------------------
# geometry helpers shared by lesion validation
# ----------------------------------------------------------------------


def region_is_face_connected(cells: np.ndarray) -> bool:
    """True if the set bits of a boolean grid form one 6-connected component."""
    coords = np.argwhere(cells)
    if coords.shape[0] == 0:
        return False
    seen = np.zeros(cells.shape, dtype=bool)
    start = tuple(coords[0])
    seen[start] = True
    queue = deque([start])
    found = 1
    dims = cells.shape
    while queue:
        x, y, z = queue.popleft()
        for dx, dy, dz in _FACE_NEIGHBORS:
            nx, ny, nz = x + dx, y + dy, z + dz
            if 0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2]:
                if cells[nx, ny, nz] and not seen[nx, ny, nz]:
                    seen[nx, ny, nz] = True
                    found += 1
                    queue.append((nx, ny, nz))
    return found == coords.shape[0]


def region_is_hole_free(cells: np.ndarray) -> bool:
    """True if the complement of the mask is one face-connected region.

    Equivalently: flood-filling the background from the grid boundary reaches
    every non-mask voxel, so the mask encloses no cavity.
    """
    dims = cells.shape
    outside = np.zeros(dims, dtype=bool)
    queue: deque[Voxel] = deque()
    boundary = np.zeros(dims, dtype=bool)
    boundary[0, :, :] = boundary[-1, :, :] = True
    boundary[:, 0, :] = boundary[:, -1, :] = True
    boundary[:, :, 0] = boundary[:, :, -1] = True
    for x, y, z in np.argwhere(boundary & ~cells):
        if not outside[x, y, z]:
            outside[x, y, z] = True
            queue.append((int(x), int(y), int(z)))
    while queue:
        x, y, z = queue.popleft()
        for dx, dy, dz in _FACE_NEIGHBORS:
            nx, ny, nz = x + dx, y + dy, z + dz
            if 0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2]:
                if not cells[nx, ny, nz] and not outside[nx, ny, nz]:
                    outside[nx, ny, nz] = True
                    queue.append((nx, ny, nz))
    return bool(np.all(outside | cells))


@dataclass(frozen=True)
class LesionMask:
    """Damaged voxels. Valid masks are non-empty, face-connected, hole-free,
    entirely left-hemisphere, and confined to one arterial territory."""

    voxels: frozenset[Voxel]

    @property
    def size(self) -> int:
        return len(self.voxels)

    def to_dense(self, grid_dims: tuple[int, int, int]) -> np.ndarray:
        mask = np.zeros(grid_dims, dtype=bool)
        if self.voxels:
            idx = np.array(sorted(self.voxels))
            mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return mask

    def territory(self, atlas: ToyAtlas) -> int:
        """The single territory containing the mask (raises if mixed)."""
        territories = {int(atlas.territory_of_voxel[v]) for v in self.voxels}
        if len(territories) != 1:
            raise InputError(f"lesion spans territories {sorted(territories)}")
        return territories.pop()

    def validate(self, atlas: ToyAtlas) -> None:
        if not self.voxels:
            raise InputError("lesion mask is empty")
        dims = atlas.grid_dims
        for v in self.voxels:
            if not all(0 <= v[a] < dims[a] for a in range(3)):
                raise InputError(f"lesion voxel {v} outside grid {dims}")
        dense = self.to_dense(dims)
        if np.any(atlas.hemisphere_of_voxel[dense] != HEMI_LEFT):
            raise InputError("lesion leaves the left hemisphere")
        self.territory(atlas)
        if not region_is_face_connected(dense):
            raise InputError("lesion is not face-connected")
        if not region_is_hole_free(dense):
            raise InputError("lesion encloses a cavity")


# ----------------------------------------------------------------------
# signals and connectivity
# ----------------------------------------------------------------------


@dataclass(eq=False)
class RoiTimeSeries:
    """Per-ROI mean signal, shape (N, Tlen). A fully lesioned ROI's row is
    all zeros."""

    series: np.ndarray

    @property
    def n_rois(self) -> int:
        return self.series.shape[0]

    @property
    def t_len(self) -> int:
        return self.series.shape[1]


def compute_roi_timeseries(
    volume_ts: np.ndarray,
    atlas: ToyAtlas,
    lesion: LesionMask | None = None,
) -> RoiTimeSeries:
    """Average voxel signals into ROI rows, skipping lesioned voxels.

    `volume_ts` has shape grid_dims + (Tlen,). ROIs whose voxels are all
    lesioned get an all-zero row.
    """
    if volume_ts.shape[:3] != atlas.grid_dims:
        raise InputError(
            f"volume grid {volume_ts.shape[:3]} does not match atlas {atlas.grid_dims}"
        )
    if volume_ts.ndim != 4 or volume_ts.shape[3] < 2:
        raise InputError("volume needs a time axis with Tlen >= 2")

    t_len = volume_ts.shape[3]
    flat = volume_ts.reshape(-1, t_len)
    order, bounds = atlas.roi_flat_order()
    sums = np.add.reduceat(flat[order], bounds[:-1], axis=0)
    counts = np.diff(bounds).astype(np.float64)

    if lesion is not None and lesion.voxels:
        dims = atlas.grid_dims
        idx = np.array(sorted(lesion.voxels))
        flat_idx = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), dims)
        rois = atlas.roi_of_voxel.reshape(-1)[flat_idx]
        keep = rois > 0
        flat_idx, rois = flat_idx[keep], rois[keep]
        np.subtract.at(sums, rois - 1, flat[flat_idx])
        np.subtract.at(counts, rois - 1, 1.0)

    series = np.zeros((atlas.n_rois, t_len))
    alive = counts > 0
    series[alive] = sums[alive] / counts[alive, None]
    return RoiTimeSeries(series=series)


def correlation_matrix(ts: RoiTimeSeries) -> np.ndarray:
    """Pearson correlation between ROI rows; 0 wherever a row has zero
    variance (the no-information convention for fully lesioned ROIs)."""
    data = ts.series
    if data.shape[1] < 2:
        raise InputError("need Tlen >= 2 for correlations")
    centered = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    alive = norms > 0.0
    safe = np.where(alive, norms, 1.0)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr[~alive, :] = 0.0
    corr[:, ~alive] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, np.where(alive, 1.0, 0.0))
    return corr


def exponentiate(corr: np.ndarray) -> np.ndarray:
    """Entrywise exp of a correlation matrix, mapping [-1, 1] to [1/e, e]."""
    if np.any(np.abs(corr) > 1.0 + 1e-9):
        raise InputError("correlation entries must lie in [-1, 1]")
    return np.exp(np.clip(corr, -1.0, 1.0))


def validate_connectivity(x: np.ndarray, atol: float = 1e-12) -> None:
    """Assert the connectivity-matrix invariants: symmetric, range [1/e, e]."""
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise InputError(f"connectivity must be square, got {x.shape}")
    if not np.allclose(x, x.T, atol=atol):
        raise InputError("connectivity matrix is not symmetric")
    lo, hi = math.exp(-1.0), math.exp(1.0)
    if x.min() < lo - atol or x.max() > hi + atol:
        raise InputError("connectivity entries outside [1/e, e]")


# ----------------------------------------------------------------------
# lesion encoding and subject records
# ----------------------------------------------------------------------


@dataclass(eq=False)
class LesionEncoding:
    """Per-ROI spared gray matter fractions p_i in [0, 1]. An intact ROI has
    p_i = 1, a fully lesioned one p_i = 0."""

    p: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """The diagonal lesion embedding matrix L with L_ii = p_i."""
        return np.diag(self.p)

    def validate(self) -> None:
        if self.p.ndim != 1:
            raise InputError("lesion encoding must be a vector")
        if np.any(self.p < 0.0) or np.any(self.p > 1.0) or not np.all(np.isfinite(self.p)):
            raise InputError("spared fractions must lie in [0, 1]")


def spared_fractions(atlas: ToyAtlas, lesion: LesionMask) -> LesionEncoding:
    """Fraction of each ROI's voxels that the lesion spares."""
    dims = atlas.grid_dims
    lesioned = np.zeros(atlas.n_rois, dtype=np.int64)
    for v in lesion.voxels:
        if not all(0 <= v[a] < dims[a] for a in range(3)):
            raise InputError(f"lesion voxel {v} outside grid {dims}")
        roi = int(atlas.roi_of_voxel[v])
        if roi > 0:
            lesioned[roi - 1] += 1
    total = atlas.roi_sizes()
    return LesionEncoding(p=(total - lesioned) / total)


@dataclass(eq=False)
class SubjectRecord:
    """One subject: connectivity matrix X, lesion encoding, and score y."""

    id: str
    x: np.ndarray
    lesion: LesionEncoding
    y: float

    @property
    def n_rois(self) -> int:
        return self.x.shape[0]

    def validate(self) -> None:
        if self.x.ndim != 2 or self.x.shape[0] != self.x.shape[1]:
            raise InputError(f"X must be square, got {self.x.shape}")
        if self.lesion.p.shape != (self.x.shape[0],):
            raise InputError("lesion encoding length does not match X")
        if not (math.isfinite(self.y) and 0.0 <= self.y <= 100.0):
            raise InputError(f"score {self.y} outside [0, 100]")


# ----------------------------------------------------------------------
# file formats (documented in README.md, "File formats")
# ----------------------------------------------------------------------


def save_atlas(path, atlas: ToyAtlas) -> None:
    """Write the binary atlas format: LEGA header + one record per voxel."""
    gx, gy, gz = atlas.grid_dims
    with open(path, "wb") as fh:
        fh.write(_ATLAS_MAGIC)
        fh.write(struct.pack("<IIIIII", _FORMAT_VERSION, gx, gy, gz,
                             atlas.n_rois, atlas.n_territories))
        roi = atlas.roi_of_voxel.reshape(-1).astype("<u2")
        terr = atlas.territory_of_voxel.reshape(-1).astype("<u2")
        hemi = atlas.hemisphere_of_voxel.reshape(-1).astype("u1")
        rec = np.empty(roi.size, dtype=[("roi", "<u2"), ("terr", "<u2"), ("hemi", "u1")])
        rec["roi"], rec["terr"], rec["hemi"] = roi, terr, hemi
        fh.write(rec.tobytes())


def load_atlas(path) -> ToyAtlas:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _ATLAS_MAGIC:
            raise InputError(f"not an atlas file (magic {magic!r})")
        version, gx, gy, gz, n_rois, n_terr = struct.unpack("<IIIIII", fh.read(24))
        if version != _FORMAT_VERSION:
            raise InputError(f"unsupported atlas format version {version}")
        n_vox = gx * gy * gz
        rec = np.frombuffer(fh.read(n_vox * 5),
                            dtype=[("roi", "<u2"), ("terr", "<u2"), ("hemi", "u1")])
        if rec.size != n_vox:
            raise InputError("truncated atlas file")
    dims = (gx, gy, gz)
    return ToyAtlas(
        grid_dims=dims,
        roi_of_voxel=rec["roi"].astype(np.int32).reshape(dims),
        territory_of_voxel=rec["terr"].astype(np.int32).reshape(dims),
        hemisphere_of_voxel=rec["hemi"].astype(np.uint8).reshape(dims),
        n_rois=n_rois,
        n_territories=n_terr,
    )


def save_cohort(path, records: list[SubjectRecord]) -> None:
    """Write the binary cohort format: LEGC header + one record per subject.

    Per subject: uint16 id length, utf-8 id, float64 y, float64 p[N],
    float64 X[N*N] row-major. Round trips are lossless.
    """
    if not records:
        raise InputError("refusing to write an empty cohort")
    n = records[0].x.shape[0]
    with open(path, "wb") as fh:
        fh.write(_COHORT_MAGIC)
        fh.write(struct.pack("<III", _FORMAT_VERSION, len(records), n))
        for rec in records:
            if rec.x.shape != (n, n):
                raise InputError("all subjects in a cohort must share N")
            ident = rec.id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<d", float(rec.y)))
            fh.write(np.ascontiguousarray(rec.lesion.p, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(rec.x, dtype="<f8").tobytes())


def load_cohort(path) -> list[SubjectRecord]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _COHORT_MAGIC:
            raise InputError(f"not a cohort file (magic {magic!r})")
        version, count, n = struct.unpack("<III", fh.read(12))
        if version != _FORMAT_VERSION:
            raise InputError(f"unsupported cohort format version {version}")
        records = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            ident = fh.read(id_len).decode("utf-8")
            (y,) = struct.unpack("<d", fh.read(8))
            p = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            x = np.frombuffer(fh.read(8 * n * n), dtype="<f8").astype(np.float64)
            records.append(
                SubjectRecord(id=ident, x=x.reshape(n, n), lesion=LesionEncoding(p=p), y=y)
            )
        if fh.read(1):
            raise InputError("trailing bytes in cohort file")
    return records
