import json
import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity
from torch import nn

from fulltarget.data import ImageDataset
from fulltarget.models import ClassifierSplit
from fulltarget.pipeline import (AttackReport, PoisonPlan, build_poisoned_dataset, evaluate_attack, label_edits,
                                 poison_rate_sweep, select_poison_indices, ssim_batch, target_rates, triggered,
                                 visual_report)


class PatternGenerator(nn.Module):
    """Trigger = +delta on channel ``class % C``; ignores the image content."""

    def __init__(self, num_classes=4, channels=3, size=16, delta=0.1):
        super().__init__()
        self.num_classes, self.in_channels, self.image_size = num_classes, channels, (size, size)
        self.epsilon = delta
        self.scale = nn.Parameter(torch.tensor(delta))

    def forward(self, x, class_vec):
        k = class_vec.argmax(1)
        t = torch.zeros_like(x)
        t[torch.arange(len(x)), k % x.shape[1]] = self.scale
        return t


class FixedClassifier(ClassifierSplit):
    """Predicts a fixed class for every input."""

    arch_id = "fixed"

    def __init__(self, num_classes, cls):
        super().__init__(num_classes, num_classes)
        self.cls = cls
        self.features = nn.Flatten()

    def forward(self, x):
        out = torch.zeros(len(x), self.num_classes)
        out[:, self.cls] = 1.0
        return out


class LabelOracle(ClassifierSplit):
    """Reads the label stored in pixel (0, 0, 0) as ``label / 10``; stands in for a perfect classifier."""

    arch_id = "oracle"

    def __init__(self, num_classes):
        super().__init__(num_classes, num_classes)
        self.features = nn.Flatten()

    def forward(self, x):
        lab = torch.round(x[:, 0, 0, 0] * 10).long().clamp(0, self.num_classes - 1)
        return nn.functional.one_hot(lab, self.num_classes).float()


def labelled_set(n_per_class=10, k=4, size=16):
    y = np.repeat(np.arange(k), n_per_class)
    x = np.full((len(y), 3, size, size), 0.5, dtype=np.float32)
    x[:, 0, 0, 0] = y / 10
    return ImageDataset(x, y, k)


# -- poisoning -----------------------------------------------------------------

def test_poisoning_is_clean_label_with_floor_count(tiny_data):
    gen = PatternGenerator()
    plan = PoisonPlan(poison_rate=0.1, seed=3)
    pois, man = build_poisoned_dataset(tiny_data, gen, plan)
    n_p = math.floor(0.1 * len(tiny_data))
    assert man.per_class_count == n_p // 4
    assert label_edits(tiny_data, pois) == 0
    assert np.bincount(man.classes, minlength=4).tolist() == [n_p // 4] * 4
    changed = np.flatnonzero(np.any(pois.images != tiny_data.images, axis=(1, 2, 3)))
    assert set(changed) <= set(man.indices)
    # triggers come from the sample's own class
    for i, c in zip(man.indices, man.classes):
        diff = pois.images[i] - tiny_data.images[i]
        assert np.abs(diff[[ch for ch in range(3) if ch != c % 3]]).max() == 0


def test_poison_manifest_deterministic(tiny_data):
    gen = PatternGenerator()
    a = build_poisoned_dataset(tiny_data, gen, PoisonPlan(0.2, seed=1))[1]
    b = build_poisoned_dataset(tiny_data, gen, PoisonPlan(0.2, seed=1))[1]
    c = build_poisoned_dataset(tiny_data, gen, PoisonPlan(0.2, seed=2))[1]
    assert a.to_json() == b.to_json()
    assert a.indices != c.indices
    assert json.loads(a.to_json())["generator_checksum"] == a.generator_checksum


def test_zero_rate_needs_no_generator(tiny_data):
    pois, man = build_poisoned_dataset(tiny_data, None, PoisonPlan(0.0))
    assert man.indices == [] and np.array_equal(pois.images, tiny_data.images)
    with pytest.raises(ValueError):
        build_poisoned_dataset(tiny_data, None, PoisonPlan(0.5))


def test_select_rejects_oversized_request():
    with pytest.raises(ValueError):
        select_poison_indices(np.array([0, 0, 1]), 2, 2, 0)


def test_plan_validation():
    with pytest.raises(ValueError):
        PoisonPlan(1.5)
    assert PoisonPlan(0.004).per_class_count(50000, 10) == 20


# -- metrics ---------------------------------------------------------------------

def ssim_oracle(a, b, win=11, sigma=1.5):
    """Scalar loops over every valid window position; mean over channels."""
    r = win // 2
    g = [math.exp(-((i - r) ** 2) / (2 * sigma ** 2)) for i in range(win)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - win + 1):
            for j in range(a.shape[2] - win + 1):
                ma = mb = saa = sbb = sab = 0.0
                for u in range(win):
                    for v in range(win):
                        w = g[u] * g[v]
                        pa, pb = a[ch, i + u, j + v], b[ch, i + u, j + v]
                        ma += w * pa
                        mb += w * pb
                        saa += w * pa * pa
                        sbb += w * pb * pb
                        sab += w * pa * pb
                va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_ssim_matches_scalar_oracle(rng):
    a = rng.random((2, 13, 12))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    got = float(ssim_batch(torch.from_numpy(a)[None], torch.from_numpy(b)[None])[0])
    assert abs(got - ssim_oracle(a, b)) < 1e-9


def test_ssim_matches_skimage(rng):
    a = rng.random((3, 16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    got = float(ssim_batch(torch.from_numpy(a)[None], torch.from_numpy(b)[None])[0])
    want = structural_similarity(a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)
    assert abs(got - want) < 1e-6


def test_ssim_identity_and_validation(rng):
    a = torch.from_numpy(rng.random((2, 3, 16, 16)))
    torch.testing.assert_close(ssim_batch(a, a), torch.ones(2, dtype=torch.float64))
    with pytest.raises(ValueError):
        ssim_batch(a[..., :8, :8], a[..., :8, :8])


def test_visual_report():
    a = torch.zeros(2, 3, 16, 16)
    rep = visual_report(a, a + 0.1)
    assert rep["psnr_mean"] == pytest.approx(20.0, abs=1e-5)
    with pytest.raises(ValueError):
        visual_report(a[:0], a[:0])


# -- attack evaluation -------------------------------------------------------------

def test_asr_excludes_target_class():
    test = labelled_set()
    victim = FixedClassifier(4, 2)
    rates = target_rates(victim, PatternGenerator(), test)
    # class 2 is predicted for everything; its own samples are not in the denominator
    assert rates == [0.0, 0.0, 1.0, 0.0]


def test_report_arithmetic():
    test = labelled_set()
    victim = LabelOracle(4)
    rep = evaluate_attack(victim, PatternGenerator(delta=0.0), test, clean_reference_ba=0.9, clean_model=victim)
    assert rep.ba == 1.0
    assert rep.dv == 0.9 - 1.0
    assert rep.asr_per_class == [0.0] * 4
    assert rep.asr_avg == float(np.mean(rep.asr_per_class))
    assert rep.adversarial_baseline_rate == 0.0
    assert math.isinf(rep.psnr_mean)


def test_report_json_round_trip_and_field_names():
    rep = AttackReport([0.5, 1.0], 0.75, 0.9, 0.01, math.inf, 1.0, 0.1)
    d = json.loads(rep.to_json())
    assert list(d) == ["asr_per_class", "asr_avg", "ba", "dv", "psnr_mean", "ssim_mean",
                       "adversarial_baseline_rate"]
    assert d["psnr_mean"] == "inf"
    assert AttackReport.from_json(rep.to_json()) == rep
    with pytest.raises(ValueError):
        AttackReport([1.5], 1.5, 0.9, 0, 30, 0.9)


def test_triggered_batches_equal_single_pass():
    gen = PatternGenerator()
    x = torch.rand(10, 3, 16, 16)
    c = torch.arange(10) % 4
    torch.testing.assert_close(triggered(gen, x, c, batch_size=3), triggered(gen, x, c, batch_size=100))


def test_rate_sweep_monotonicity():
    table = {0.0: 0.1, 0.01: 0.6, 0.02: 0.58, 0.04: 0.9}

    def run(r):
        return AttackReport([table[r]], table[r], 0.9, 0.0, 30.0, 0.9)

    out = poison_rate_sweep(run, sorted(table), tolerance=0.05)
    assert out["monotone"] and out["max_drop"] == pytest.approx(0.02)
    assert not poison_rate_sweep(run, sorted(table), tolerance=0.01)["monotone"]
    with pytest.raises(ValueError):
        poison_rate_sweep(run, [0.02, 0.01])
