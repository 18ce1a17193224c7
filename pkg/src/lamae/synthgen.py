"""Synthetic 12-lead ECGs projected from a single cardiac dipole.

The heart is a time-varying 3-vector built from Gaussian bumps (P, Q, R, S,
T) repeated at jittered beat times. Limb electrodes sit in the frontal plane,
so the six limb leads span a rank-2 space and obey the Einthoven and
Goldberger identities exactly; precordial leads add the anterior component.
Electrode potentials are snapped to a 2**-20 grid so those identities survive
the float32 storage of :class:`EcgRecord`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataio import STANDARD_LEADS, EcgRecord

LABEL_NAMES = ("tachycardia", "high_qrs", "st_shift")

_GRID = 2.0 ** 20


@dataclass(frozen=True)
class Wave:
    amplitude: tuple  # dipole direction and size, mV
    center: float  # fraction of the RR interval after beat onset
    width: float  # seconds


def _default_waves():
    return {
        "P": Wave((0.10, 0.15, 0.05), 0.12, 0.025),
        "Q": Wave((-0.05, -0.10, 0.15), 0.26, 0.010),
        "R": Wave((0.80, 1.10, -0.40), 0.28, 0.012),
        "S": Wave((-0.20, -0.25, 0.50), 0.30, 0.012),
        "T": Wave((0.20, 0.30, -0.15), 0.55, 0.050),
    }


@dataclass(frozen=True)
class DipoleConfig:
    sampling_rate: float = 500.0
    duration: float = 2.0
    heart_rate_range: tuple = (50.0, 150.0)
    waves: dict = field(default_factory=_default_waves)
    noise_std: float = 0.01
    seed: int = 0
    qrs_scale_range: tuple = (0.6, 1.4)
    hr_jitter: float = 0.05
    axis_jitter_deg: float = 20.0
    st_shift_prob: float = 0.5
    st_shift_range: tuple = (0.1, 0.3)

    def __post_init__(self):
        lo, hi = self.heart_rate_range
        if not (self.sampling_rate > 0 and self.duration > 0):
            raise ValueError("sampling_rate and duration must be positive")
        if not 30.0 <= lo <= hi <= 220.0:
            raise ValueError("heart_rate_range must lie within [30, 220] bpm")
        if any(w.width <= 0 for w in self.waves.values()):
            raise ValueError("wave widths must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if set(self.waves) != {"P", "Q", "R", "S", "T"}:
            raise ValueError("waves must define P, Q, R, S and T")


@dataclass(frozen=True)
class GroundTruth:
    """Generator parameters of one record; labels derive from these only."""

    beat_times: np.ndarray
    qrs_scale: float
    axis_deg: float
    st_leads: tuple
    st_amplitude: float

    @property
    def mean_heart_rate(self) -> float:
        return 60.0 / float(np.mean(np.diff(self.beat_times)))


@dataclass(frozen=True)
class LabelVector:
    tachycardia: bool
    high_qrs: bool
    st_shift: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.tachycardia, self.high_qrs, self.st_shift], dtype=bool)


def labels_from_truth(truth: GroundTruth, config: DipoleConfig) -> LabelVector:
    qrs_median = 0.5 * (config.qrs_scale_range[0] + config.qrs_scale_range[1])
    return LabelVector(
        tachycardia=truth.mean_heart_rate > 100.0,
        high_qrs=truth.qrs_scale > qrs_median,
        st_shift=truth.st_amplitude != 0.0,
    )


def _unit(deg):
    a = np.deg2rad(deg)
    return np.array([np.cos(a), np.sin(a), 0.0])


# frontal plane: x to the patient's left, y toward the feet, z anterior
_E_RIGHT_ARM = _unit(210.0)
_E_LEFT_ARM = _unit(-30.0)
_E_FOOT = _unit(90.0)
_PRECORDIAL = np.array([
    [np.cos(np.deg2rad(a)), 0.15, np.sin(np.deg2rad(a))]
    for a in (115.0, 95.0, 75.0, 60.0, 30.0, 0.0)
])


def _beat_times(rng, config: DipoleConfig):
    hr = rng.uniform(*config.heart_rate_range)
    rr = 60.0 / hr
    t = -rng.uniform(0.0, rr) - rr
    times = [t]
    while t < config.duration + rr:
        t += rr * (1.0 + rng.uniform(-config.hr_jitter, config.hr_jitter))
        times.append(t)
    return np.array(times)


def _dipole(t, beats, waves, qrs_scale, rot):
    d = np.zeros((3, t.size))
    for k in range(len(beats) - 1):
        onset, rr = beats[k], beats[k + 1] - beats[k]
        for name, w in waves.items():
            amp = np.asarray(w.amplitude) * (qrs_scale if name in "QRS" else 1.0)
            bump = np.exp(-0.5 * ((t - onset - w.center * rr) / w.width) ** 2)
            d += np.outer(rot @ amp, bump)
    return d


def _st_plateau(t, beats, waves):
    out = np.zeros(t.size)
    for k in range(len(beats) - 1):
        onset, rr = beats[k], beats[k + 1] - beats[k]
        start = onset + waves["S"].center * rr + 0.03
        stop = onset + waves["T"].center * rr
        out += expit((t - start) / 0.005) - expit((t - stop) / 0.005)
    return out


def simulate(config: DipoleConfig):
    """Record plus the ground-truth parameters that produced it."""
    rng = np.random.default_rng(config.seed)
    beats = _beat_times(rng, config)
    qrs_scale = rng.uniform(*config.qrs_scale_range)
    axis = rng.uniform(-config.axis_jitter_deg, config.axis_jitter_deg)
    a = np.deg2rad(axis)
    rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    st_leads, st_amp = (), 0.0
    if rng.random() < config.st_shift_prob:
        k = rng.integers(2, 5)
        st_leads = tuple(sorted(int(i) for i in rng.choice(6, size=k, replace=False)))
        st_amp = rng.uniform(*config.st_shift_range) * rng.choice([-1.0, 1.0])

    n = int(round(config.sampling_rate * config.duration))
    t = np.arange(n) / config.sampling_rate
    d = _dipole(t, beats, config.waves, qrs_scale, rot)

    phi_r, phi_l, phi_f = (np.round((e @ d) * _GRID) / _GRID for e in (_E_RIGHT_ARM, _E_LEFT_ARM, _E_FOOT))
    limb = np.stack([
        phi_l - phi_r,
        phi_f - phi_r,
        phi_f - phi_l,
        phi_r - 0.5 * (phi_l + phi_f),
        phi_l - 0.5 * (phi_r + phi_f),
        phi_f - 0.5 * (phi_r + phi_l),
    ])
    wct = (phi_r + phi_l + phi_f) / 3.0
    chest = _PRECORDIAL @ d - wct
    if st_leads:
        chest[list(st_leads)] += st_amp * _st_plateau(t, beats, config.waves)
    samples = np.concatenate([limb, chest])
    if config.noise_std > 0:
        samples = samples + rng.normal(0.0, config.noise_std, samples.shape)
    record = EcgRecord(STANDARD_LEADS, config.sampling_rate, samples, f"synth_{config.seed}")
    truth = GroundTruth(beats, float(qrs_scale), float(axis), st_leads, float(st_amp))
    return record, truth


def synth_dipole(config: DipoleConfig) -> EcgRecord:
    return simulate(config)[0]


def synth_dataset(n: int, config: DipoleConfig):
    """``n`` records seeded ``config.seed + i`` and their labels."""
    if n < 1:
        raise ValueError("n must be at least 1")
    records, labels = [], []
    for i in range(n):
        cfg = replace(config, seed=(config.seed + i) % 2 ** 64)
        rec, truth = simulate(cfg)
        records.append(rec)
        labels.append(labels_from_truth(truth, cfg))
    return records, labels


def label_matrix(labels) -> np.ndarray:
    return np.stack([lv.as_array() for lv in labels])
