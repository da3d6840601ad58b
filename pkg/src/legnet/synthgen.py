"""Synthetic cohorts: healthy-subject simulation plus artificial lesions.

Healthy voxel signals follow a three-level model: latent community time
series, per-ROI series (community signal plus ROI noise), and per-voxel
series (ROI series plus voxel noise). ROIs of one designated "language"
territory share a community whose per-subject coupling strength varies, so
the pre-lesion score y0 carries a learnable connectivity signal.

Lesions are grown by seeded region growing inside a single left-hemisphere
arterial territory, then hole-filled so the mask is simply connected.
Lesioning a subject masks voxels out of the ROI averages, diminishes and
noises connectivity entries touching damaged ROIs (clipped back into the
original range), and rescales the language score by the territory's spared
fraction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .connectome import (
    HEMI_LEFT,
    InputError,
    LesionEncoding,
    LesionMask,
    SubjectRecord,
    ToyAtlas,
    compute_roi_timeseries,
    correlation_matrix,
    exponentiate,
    spared_fractions,
)

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)

FRACTION_MIN = 0.05
FRACTION_MAX = 0.20
HOLE_FILL_SLACK = 0.02  # relative overshoot allowed from cavity filling
_MAX_GROW_ATTEMPTS = 64


class LesionSpecError(ValueError):
    """The requested lesion cannot be grown in the given territory."""


@dataclass(frozen=True)
class LesionSpec:
    territory: int
    target_fraction: float
    seed: int

    def __post_init__(self):
        if not (FRACTION_MIN <= self.target_fraction <= FRACTION_MAX):
            raise LesionSpecError(
                f"target_fraction {self.target_fraction} outside "
                f"[{FRACTION_MIN}, {FRACTION_MAX}]"
            )


@dataclass(frozen=True)
class CorruptionParams:
    """Connectivity corruption: X'_ij = clip(min(p_i,p_j)^gamma X_ij + eta)."""

    gamma: float = 1.0
    sigma_rel: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.sigma_rel < 0:
            raise InputError("gamma and sigma_rel must be nonnegative")


@dataclass(frozen=True)
class CohortParams:
    """Healthy-signal model and score model for one synthetic cohort."""

    t_len: int = 100
    n_communities: int = 8
    sigma_roi: float = 0.6
    sigma_voxel: float = 1.0
    coherence_range: tuple[float, float] = (0.7, 1.5)
    language_territory: int = 2
    score_mu: float = 30.0
    score_beta: float = 16.0
    score_eps: float = 2.0
    corruption_gamma: float = 1.0
    corruption_sigma_rel: float = 0.1


@dataclass(frozen=True)
class LesionPolicy:
    """Cohort flavor: lesion-size distribution and score offset."""

    name: str
    fraction_range: tuple[float, float] = (FRACTION_MIN, FRACTION_MAX)
    score_mu: float | None = None  # overrides CohortParams.score_mu when set


POLICIES = {
    "hcp-sl": LesionPolicy(name="hcp-sl"),
    "ds1-like": LesionPolicy(name="ds1-like"),
    "ds2-like": LesionPolicy(name="ds2-like", fraction_range=(0.08, 0.20), score_mu=27.0),
}


def policy_by_name(name: str) -> LesionPolicy:
    try:
        return POLICIES[name]
    except KeyError:
        raise InputError(f"unknown lesion policy {name!r}; choices: {sorted(POLICIES)}")


@dataclass(eq=False)
class HealthySubject:
    id: str
    volume_ts: np.ndarray  # grid_dims + (t_len,)
    y0: float


def _language_rois(atlas: ToyAtlas, params: CohortParams) -> np.ndarray:
    rois = np.unique(atlas.roi_of_voxel[atlas.territory_of_voxel == params.language_territory])
    rois = rois[rois > 0]
    if rois.size < 2:
        raise InputError("language territory must contain at least two ROIs")
    return rois - 1  # 0-based matrix indices


def mean_language_connectivity(x: np.ndarray, atlas: ToyAtlas, params: CohortParams) -> float:
    """Mean off-diagonal connectivity within the language-network ROIs."""
    idx = _language_rois(atlas, params)
    sub = x[np.ix_(idx, idx)]
    n = idx.size
    return float((sub.sum() - np.trace(sub)) / (n * (n - 1)))


def generate_healthy_subject(
    atlas: ToyAtlas,
    seed,
    cohort_params: CohortParams,
    subject_id: str = "healthy",
) -> HealthySubject:
    """Simulate one pre-lesion subject.

    The score is y0 = clip(mu + beta * m + eps, 0, 100), where m is the mean
    within-language-network connectivity measured through the same ROI-mean
    pipeline the model inputs use.
    """
    cp = cohort_params
    rng = np.random.default_rng(seed)
    n, t_len = atlas.n_rois, cp.t_len

    language = _language_rois(atlas, cp)
    community_of_roi = 1 + np.arange(n) % max(1, cp.n_communities - 1)
    community_of_roi[language] = 0

    community_ts = rng.standard_normal((cp.n_communities, t_len))
    coherence = rng.uniform(*cp.coherence_range)
    weight = np.ones(n)
    weight[language] = coherence
    roi_ts = weight[:, None] * community_ts[community_of_roi]
    roi_ts = roi_ts + cp.sigma_roi * rng.standard_normal((n, t_len))

    flat_roi = atlas.roi_of_voxel.reshape(-1)
    volume = np.zeros((flat_roi.size, t_len))
    nonbg = flat_roi > 0
    volume[nonbg] = roi_ts[flat_roi[nonbg] - 1]
    volume[nonbg] += cp.sigma_voxel * rng.standard_normal((int(nonbg.sum()), t_len))
    volume = volume.reshape(atlas.grid_dims + (t_len,))

    ts = compute_roi_timeseries(volume, atlas)
    x = exponentiate(correlation_matrix(ts))
    m = mean_language_connectivity(x, atlas, cp)
    y0 = float(np.clip(cp.score_mu + cp.score_beta * m + cp.score_eps * rng.standard_normal(),
                       0.0, 100.0))
    return HealthySubject(id=subject_id, volume_ts=volume, y0=y0)


# ----------------------------------------------------------------------
# lesion growth
# ----------------------------------------------------------------------


def grow_lesion(atlas: ToyAtlas, spec: LesionSpec) -> LesionMask:
    """Seeded region growing inside one left-hemisphere territory.

    Face-adjacent in-territory voxels are added in random frontier order;
    enclosed cavities are absorbed by hole filling. Growth tracks the
    hole-filled size so the final mask lands on
    round(target_fraction * |territory|) up to a 2% slack; attempts whose
    last filling step overshoots the slack are regrown from the same random
    stream, keeping the result a pure function of the spec.
    """
    if spec.territory not in atlas.left_territories():
        raise LesionSpecError(f"territory {spec.territory} is not a left-hemisphere territory")
    in_territory = atlas.territory_of_voxel == spec.territory
    territory_voxels = np.argwhere(in_territory)
    territory_size = territory_voxels.shape[0]
    target = int(round(spec.target_fraction * territory_size))
    if target < 1 or target > territory_size:
        raise LesionSpecError(
            f"territory {spec.territory} ({territory_size} voxels) cannot host "
            f"a lesion of {target} voxels"
        )

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    dims = atlas.grid_dims
    slack = int(np.ceil(HOLE_FILL_SLACK * target))

    # cavities can only form inside the territory's bounding box, so hole
    # filling runs on that subgrid (padded by one voxel) for speed
    lo = np.maximum(territory_voxels.min(axis=0) - 1, 0)
    hi = np.minimum(territory_voxels.max(axis=0) + 2, dims)
    box = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))

    for _ in range(_MAX_GROW_ATTEMPTS):
        grown = np.zeros(dims, dtype=bool)
        start = tuple(int(v) for v in territory_voxels[rng.integers(territory_size)])
        grown[start] = True
        frontier: list[tuple[int, int, int]] = []
        in_frontier: set[tuple[int, int, int]] = set()

        def push_neighbors(vox):
            x, y, z = vox
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nx, ny, nz = x + dx, y + dy, z + dz
                if 0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2]:
                    cand = (nx, ny, nz)
                    if in_territory[cand] and not grown[cand] and cand not in in_frontier:
                        in_frontier.add(cand)
                        frontier.append(cand)

        push_neighbors(start)
        filled_count = 1
        filled_box = grown[box]
        while filled_count < target and frontier:
            # approach the target geometrically, one voxel at a time near the
            # end, so the final fill step closes at most a tiny pocket
            deficit = target - filled_count
            chunk = max(1, deficit // 2) if deficit > slack else 1
            for _ in range(chunk):
                if not frontier:
                    break
                pick = int(rng.integers(len(frontier)))
                vox = frontier[pick]
                frontier[pick] = frontier[-1]
                frontier.pop()
                in_frontier.discard(vox)
                grown[vox] = True
                push_neighbors(vox)
            filled_box = ndimage.binary_fill_holes(grown[box], structure=_FACE_STRUCTURE)
            filled_count = int(filled_box.sum())

        overshoot = filled_count - target
        if 0 <= overshoot <= slack:
            filled = np.zeros(dims, dtype=bool)
            filled[box] = filled_box
            return LesionMask(voxels=frozenset(map(tuple, np.argwhere(filled))))

    raise LesionSpecError(
        f"could not grow a lesion within the hole-fill slack after "
        f"{_MAX_GROW_ATTEMPTS} attempts (spec: {spec})"
    )


# ----------------------------------------------------------------------
# connectivity corruption and score rescaling
# ----------------------------------------------------------------------


def corrupt_connectivity(
    x: np.ndarray,
    lesion: LesionEncoding | np.ndarray,
    cp: CorruptionParams,
) -> np.ndarray:
    """Diminish and noise off-diagonal entries touching damaged ROIs.

    Entries (i, j) with min(p_i, p_j) < 1 become
    clip(min(p_i, p_j)^gamma * X_ij + eta_ij) with symmetric gaussian noise
    of scale sigma_rel * std(X); clipping keeps the original [min X, max X]
    range. Intact pairs and the diagonal are untouched.
    """
    p = lesion.p if isinstance(lesion, LesionEncoding) else np.asarray(lesion, dtype=float)
    n = x.shape[0]
    if x.shape != (n, n) or p.shape != (n,):
        raise InputError(f"shape mismatch: X {x.shape}, p {p.shape}")
    pmin = np.minimum.outer(p, p)
    modified = pmin < 1.0
    np.fill_diagonal(modified, False)
    if not modified.any():
        return x.copy()

    rng = np.random.default_rng(np.random.SeedSequence(cp.seed))
    noise = rng.standard_normal((n, n))
    eta = np.triu(noise, 1)
    eta = (eta + eta.T) * (cp.sigma_rel * float(np.std(x)))

    with np.errstate(invalid="ignore"):
        damped = np.power(pmin, cp.gamma) * x + eta
    damped = np.clip(damped, x.min(), x.max())
    return np.where(modified, damped, x)


def territory_spared_fraction(atlas: ToyAtlas, lesion: LesionMask) -> float:
    """Fraction of the lesioned territory's voxels outside the lesion."""
    territory = lesion.territory(atlas)
    size = atlas.territory_size(territory)
    return 1.0 - lesion.size / size


def rescale_score(y0: float, atlas: ToyAtlas, lesion: LesionMask) -> float:
    """Scale the pre-lesion score by the territory's spared fraction."""
    return float(y0) * territory_spared_fraction(atlas, lesion)


# ----------------------------------------------------------------------
# cohort assembly
# ----------------------------------------------------------------------


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def lesion_subject(
    healthy: HealthySubject,
    atlas: ToyAtlas,
    spec: LesionSpec,
    corruption: CorruptionParams,
) -> tuple[SubjectRecord, LesionMask]:
    """Apply one artificial lesion to a healthy subject."""
    lesion = grow_lesion(atlas, spec)
    ts = compute_roi_timeseries(healthy.volume_ts, atlas, lesion)
    x = exponentiate(correlation_matrix(ts))
    encoding = spared_fractions(atlas, lesion)
    x = corrupt_connectivity(x, encoding, corruption)
    y = rescale_score(healthy.y0, atlas, lesion)
    record = SubjectRecord(id=healthy.id, x=x, lesion=encoding, y=y)
    return record, lesion


def generate_cohort(
    n: int,
    atlas: ToyAtlas,
    master_seed: int,
    cohort_params: CohortParams | None = None,
    policy: LesionPolicy | None = None,
) -> tuple[list[SubjectRecord], dict]:
    """Run the full pipeline for `n` subjects and return records + manifest.

    Every subject derives its own random streams from
    (master_seed, subject index, stage), so generation is order-independent
    and reproducible byte-for-byte.
    """
    if n < 1:
        raise InputError("cohort size must be >= 1")
    policy = policy or POLICIES["hcp-sl"]
    params = cohort_params or CohortParams()
    if policy.score_mu is not None:
        params = replace(params, score_mu=policy.score_mu)

    left = atlas.left_territories()
    if not left:
        raise InputError("atlas has no left-hemisphere territories")

    records: list[SubjectRecord] = []
    manifest_subjects = []
    for i in range(n):
        subject_id = f"{policy.name}-{i:04d}"
        draw_rng = np.random.default_rng(np.random.SeedSequence((master_seed, i, 0)))
        territory = int(draw_rng.choice(left))
        fraction = float(draw_rng.uniform(*policy.fraction_range))
        spec = LesionSpec(territory=territory, target_fraction=fraction,
                          seed=_derived_seed(master_seed, i, 1))
        corruption = CorruptionParams(gamma=params.corruption_gamma,
                                      sigma_rel=params.corruption_sigma_rel,
                                      seed=_derived_seed(master_seed, i, 2))
        healthy = generate_healthy_subject(
            atlas, np.random.SeedSequence((master_seed, i, 3)), params, subject_id)
        record, lesion = lesion_subject(healthy, atlas, spec, corruption)
        records.append(record)
        manifest_subjects.append({
            "id": subject_id,
            "territory": territory,
            "target_fraction": fraction,
            "lesion_seed": spec.seed,
            "corruption_seed": corruption.seed,
            "lesion_size": lesion.size,
            "territory_spared": territory_spared_fraction(atlas, lesion),
            "y0": healthy.y0,
            "y": record.y,
        })

    manifest = {
        "master_seed": master_seed,
        "n": n,
        "policy": {
            "name": policy.name,
            "fraction_range": list(policy.fraction_range),
            "score_mu": policy.score_mu,
        },
        "cohort_params": {f.name: getattr(params, f.name)
                          for f in params.__dataclass_fields__.values()},
        "atlas": {
            "grid_dims": list(atlas.grid_dims),
            "n_rois": atlas.n_rois,
            "n_territories": atlas.n_territories,
        },
        "subjects": manifest_subjects,
    }
    return records, manifest
