import io

import numpy as np
import pytest

from legnet.connectome import (
    LesionEncoding,
    LesionMask,
    build_toy_atlas,
    save_cohort,
)
from legnet.synthgen import (
    CohortParams,
    CorruptionParams,
    LesionPolicy,
    LesionSpec,
    LesionSpecError,
    corrupt_connectivity,
    generate_cohort,
    generate_healthy_subject,
    grow_lesion,
    policy_by_name,
    rescale_score,
    territory_spared_fraction,
)


@pytest.fixture(scope="module")
def atlas():
    return build_toy_atlas(n_rois=24, grid_dims=(16, 16, 12), n_territories=6)


@pytest.fixture(scope="module")
def cohort_params():
    return CohortParams(t_len=60)


def cohort_bytes(records):
    import tempfile, os
    with tempfile.NamedTemporaryFile(delete=False) as fh:
        path = fh.name
    try:
        save_cohort(path, records)
        with open(path, "rb") as fh:
            return fh.read()
    finally:
        os.unlink(path)


class TestLesionSpec:
    def test_fraction_bounds_enforced(self):
        with pytest.raises(LesionSpecError):
            LesionSpec(territory=1, target_fraction=0.03, seed=0)
        with pytest.raises(LesionSpecError):
            LesionSpec(territory=1, target_fraction=0.25, seed=0)

    def test_right_territory_rejected(self, atlas):
        with pytest.raises(LesionSpecError):
            grow_lesion(atlas, LesionSpec(territory=5, target_fraction=0.1, seed=0))

    def test_too_small_territory_rejected(self):
        tiny = build_toy_atlas(n_rois=6, grid_dims=(4, 4, 3), n_territories=6)
        # territories have 8 voxels; 5% rounds to zero target voxels
        with pytest.raises(LesionSpecError):
            grow_lesion(tiny, LesionSpec(territory=1, target_fraction=0.05, seed=0))


class TestGrowLesion:
    def test_determinism(self, atlas):
        spec = LesionSpec(territory=2, target_fraction=0.12, seed=42)
        assert grow_lesion(atlas, spec).voxels == grow_lesion(atlas, spec).voxels

    def test_mask_invariants_and_size(self, atlas):
        rng = np.random.default_rng(5)
        for _ in range(25):
            territory = int(rng.choice(atlas.left_territories()))
            fraction = float(rng.uniform(0.05, 0.20))
            spec = LesionSpec(territory=territory, target_fraction=fraction,
                              seed=int(rng.integers(1 << 31)))
            mask = grow_lesion(atlas, spec)
            mask.validate(atlas)  # left hemisphere, one territory, connected, no holes
            assert mask.territory(atlas) == territory
            tsize = atlas.territory_size(territory)
            target = round(fraction * tsize)
            assert 0 <= mask.size - target <= np.ceil(0.02 * target)

    def test_target_size_near_minimum(self, atlas):
        tsize = atlas.territory_size(1)
        mask = grow_lesion(atlas, LesionSpec(territory=1, target_fraction=0.05, seed=7))
        assert mask.size == pytest.approx(0.05 * tsize, abs=np.ceil(0.02 * 0.05 * tsize) + 0.5)


class TestCorruptConnectivity:
    def x_fixture(self):
        rng = np.random.default_rng(0)
        corr = rng.uniform(-0.9, 0.9, (5, 5))
        corr = (corr + corr.T) / 2
        np.fill_diagonal(corr, 1.0)
        return np.exp(corr)

    def test_intact_subject_unchanged(self):
        x = self.x_fixture()
        out = corrupt_connectivity(x, np.ones(5), CorruptionParams(seed=3))
        assert np.array_equal(out, x)

    def test_deterministic_diminution(self):
        x = self.x_fixture()
        p = np.array([0.5, 1.0, 1.0, 1.0, 1.0])
        out = corrupt_connectivity(x, p, CorruptionParams(gamma=1.0, sigma_rel=0.0, seed=0))
        expected = np.clip(0.5 * x[0, 1], x.min(), x.max())
        assert out[0, 1] == pytest.approx(expected)
        assert out[2, 3] == x[2, 3]

    def test_range_symmetry_and_modified_set(self):
        x = self.x_fixture()
        p = np.array([0.0, 0.4, 1.0, 1.0, 0.9])
        out = corrupt_connectivity(x, LesionEncoding(p=p),
                                   CorruptionParams(gamma=1.0, sigma_rel=0.2, seed=9))
        assert np.array_equal(out, out.T)
        assert out.min() >= x.min() and out.max() <= x.max()
        pmin = np.minimum.outer(p, p)
        # intact off-diagonal pairs and the diagonal are untouched
        untouched = (pmin >= 1.0) | np.eye(5, dtype=bool)
        assert np.array_equal(out[untouched], x[untouched])
        # every damaged pair is actually rewritten (noise makes ties unlikely)
        assert np.all(out[~untouched] != x[~untouched])

    def test_same_seed_same_noise(self):
        x = self.x_fixture()
        p = np.array([0.2, 1.0, 0.7, 1.0, 1.0])
        cp = CorruptionParams(sigma_rel=0.3, seed=21)
        assert np.array_equal(corrupt_connectivity(x, p, cp), corrupt_connectivity(x, p, cp))


class TestRescaleScore:
    def test_scales_by_spared_fraction(self, atlas):
        mask = grow_lesion(atlas, LesionSpec(territory=3, target_fraction=0.1, seed=11))
        s = territory_spared_fraction(atlas, mask)
        tsize = atlas.territory_size(3)
        assert s == pytest.approx(1.0 - mask.size / tsize)
        assert rescale_score(80.0, atlas, mask) == pytest.approx(80.0 * s)

    def test_multiplication_example(self, atlas):
        mask = grow_lesion(atlas, LesionSpec(territory=1, target_fraction=0.1, seed=3))
        y = rescale_score(80.0, atlas, mask)
        assert 0.0 <= y <= 80.0

    def test_monotone_in_lesion_size(self, atlas):
        # nested boxes inside territory 1: a larger lesion never scores higher
        vox = atlas.territory_voxels(1)
        x0, y0, z0 = vox.min(axis=0)
        small = LesionMask(frozenset(
            (x, y, z) for x in range(x0, x0 + 2) for y in range(y0, y0 + 3)
            for z in range(z0, z0 + 2)))
        big = LesionMask(small.voxels | frozenset(
            (x, y, z) for x in range(x0, x0 + 4) for y in range(y0, y0 + 3)
            for z in range(z0, z0 + 2)))
        small.validate(atlas)
        big.validate(atlas)
        assert rescale_score(70.0, atlas, big) <= rescale_score(70.0, atlas, small)


class TestHealthySubjects:
    def test_same_seed_identical_subject(self, atlas, cohort_params):
        a = generate_healthy_subject(atlas, 123, cohort_params)
        b = generate_healthy_subject(atlas, 123, cohort_params)
        assert a.y0 == b.y0
        assert np.array_equal(a.volume_ts, b.volume_ts)

    def test_degenerate_cohort_is_constant(self, atlas, cohort_params):
        from dataclasses import replace
        flat = replace(cohort_params, score_beta=0.0, score_eps=0.0, score_mu=55.0)
        scores = [generate_healthy_subject(atlas, seed, flat).y0 for seed in range(5)]
        assert scores == [55.0] * 5

    def test_connectivity_drives_scores(self, atlas, cohort_params):
        from legnet.connectome import compute_roi_timeseries, correlation_matrix, exponentiate
        from legnet.synthgen import mean_language_connectivity
        ms, y0s = [], []
        for i in range(200):
            hs = generate_healthy_subject(atlas, np.random.SeedSequence((7, i)), cohort_params)
            ts = compute_roi_timeseries(hs.volume_ts, atlas)
            x = exponentiate(correlation_matrix(ts))
            ms.append(mean_language_connectivity(x, atlas, cohort_params))
            y0s.append(hs.y0)
        assert np.corrcoef(ms, y0s)[0, 1] > 0.5


class TestGenerateCohort:
    def test_deterministic_bytes(self, atlas, cohort_params):
        a, _ = generate_cohort(3, atlas, master_seed=5, cohort_params=cohort_params)
        b, _ = generate_cohort(3, atlas, master_seed=5, cohort_params=cohort_params)
        assert cohort_bytes(a) == cohort_bytes(b)

    def test_lesioned_scores_never_exceed_healthy(self, atlas, cohort_params):
        records, manifest = generate_cohort(12, atlas, master_seed=6,
                                            cohort_params=cohort_params)
        for rec, meta in zip(records, manifest["subjects"]):
            assert rec.y <= meta["y0"]
            assert rec.id == meta["id"]

    def test_spared_fraction_predicts_score(self, atlas, cohort_params):
        records, manifest = generate_cohort(100, atlas, master_seed=11,
                                            cohort_params=cohort_params)
        spared = [s["territory_spared"] for s in manifest["subjects"]]
        ys = [r.y for r in records]
        assert np.corrcoef(spared, ys)[0, 1] > 0.5

    def test_records_are_valid_model_inputs(self, atlas, cohort_params):
        from legnet.connectome import validate_connectivity
        records, _ = generate_cohort(4, atlas, master_seed=8, cohort_params=cohort_params)
        for rec in records:
            rec.validate()
            validate_connectivity(rec.x)
            rec.lesion.validate()
            assert rec.x.shape == (atlas.n_rois, atlas.n_rois)

    def test_ds2_policy_shifts_scores_down(self, atlas, cohort_params):
        base, _ = generate_cohort(30, atlas, master_seed=9, cohort_params=cohort_params,
                                  policy=policy_by_name("ds1-like"))
        shifted, _ = generate_cohort(30, atlas, master_seed=9, cohort_params=cohort_params,
                                     policy=policy_by_name("ds2-like"))
        assert np.mean([r.y for r in shifted]) < np.mean([r.y for r in base])

    def test_unknown_policy_rejected(self):
        from legnet.connectome import InputError
        with pytest.raises(InputError):
            policy_by_name("nope")
