from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamae.synthgen import (DipoleConfig, label_matrix, labels_from_truth, simulate, synth_dataset,
                            synth_dipole)

CLEAN = DipoleConfig(noise_std=0.0)


def _leads(record):
    return {name: record.lead(name) for name in record.lead_names}


class TestIdentities:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 64 - 1))
    def test_einthoven_goldberger(self, seed):
        L = _leads(synth_dipole(replace(CLEAN, seed=seed)))
        assert np.max(np.abs(L["III"] - (L["II"] - L["I"]))) < 1e-9
        assert np.max(np.abs(L["aVR"] + (L["I"] + L["II"]) / 2)) < 1e-9
        assert np.max(np.abs(L["aVL"] - (L["I"] - L["III"]) / 2)) < 1e-9
        assert np.max(np.abs(L["aVF"] - (L["II"] + L["III"]) / 2)) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_limb_rank_two(self, seed):
        s = np.linalg.svd(synth_dipole(replace(CLEAN, seed=seed)).samples[:6], compute_uv=False)
        assert s[1] > 1e-3 * s[0]
        assert np.all(s[2:] < 1e-8 * s[0])

    def test_noise_breaks_identity(self):
        L = _leads(synth_dipole(DipoleConfig(noise_std=0.05)))
        assert np.max(np.abs(L["III"] - (L["II"] - L["I"]))) > 1e-3


class TestRecords:
    def test_shape_and_order(self):
        r = synth_dipole(DipoleConfig())
        assert r.samples.shape == (12, 1000)
        assert r.lead_names == ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

    def test_deterministic(self):
        assert synth_dipole(DipoleConfig(seed=5)) == synth_dipole(DipoleConfig(seed=5))
        assert not synth_dipole(DipoleConfig(seed=5)) == synth_dipole(DipoleConfig(seed=6))

    def test_dataset_seeds(self):
        recs, labels = synth_dataset(3, DipoleConfig(seed=40))
        assert recs[2] == synth_dipole(DipoleConfig(seed=42))
        one, _ = synth_dataset(1, DipoleConfig(seed=40))
        assert one[0] == recs[0]

    def test_dataset_deterministic(self):
        a, la = synth_dataset(4, DipoleConfig())
        b, lb = synth_dataset(4, DipoleConfig())
        assert all(x == y for x, y in zip(a, b))
        assert np.array_equal(label_matrix(la), label_matrix(lb))

    def test_prevalence(self):
        _, labels = synth_dataset(1000, DipoleConfig())
        prev = label_matrix(labels).mean(axis=0)
        assert np.all((prev >= 0.2) & (prev <= 0.8))

    @pytest.mark.parametrize("bad", [dict(sampling_rate=0.0), dict(duration=-1.0), dict(noise_std=-0.1),
                                     dict(heart_rate_range=(20.0, 100.0)), dict(heart_rate_range=(60.0, 250.0)),
                                     dict(seed=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            DipoleConfig(**bad)


class TestLabels:
    @pytest.mark.parametrize("seed", range(20))
    def test_tachycardia_from_beat_times(self, seed):
        cfg = DipoleConfig(seed=seed)
        _, truth = simulate(cfg)
        rr = np.diff(truth.beat_times)
        assert labels_from_truth(truth, cfg).tachycardia == (60.0 / rr.mean() > 100.0)

    def test_labels_ignore_noise(self):
        a = labels_from_truth(simulate(DipoleConfig(seed=3, noise_std=0.0))[1], DipoleConfig())
        b = labels_from_truth(simulate(DipoleConfig(seed=3, noise_std=0.2))[1], DipoleConfig())
        assert a == b

    def test_st_shift_is_precordial_only(self):
        for seed in range(30):
            cfg = replace(CLEAN, seed=seed)
            rec, truth = simulate(cfg)
            flat = replace(cfg, st_shift_prob=0.0)
            base, _ = simulate(flat)
            if truth.st_leads:
                assert np.array_equal(rec.samples[:6], base.samples[:6])
                assert set(truth.st_leads) <= set(range(6))
