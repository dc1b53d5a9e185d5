import mpmath
import numpy as np
import pytest

from mmlc.data import SampleWindow, enumerate_samples
from mmlc.encoders import rrp_ratios
from mmlc.errors import InputFormatError
from mmlc.labeling import (
    CleanLabelOutcome,
    LabelRuleConfig,
    TrendLabel,
    apply_label_patch,
    baseline_threshold,
    class_distribution,
    clean_label_resolve,
    inject_label_noise,
    label_samples,
    mean_ratio_label,
    triple_barrier_label,
    write_disagreement_report,
    write_label_file,
)

F, S, R = TrendLabel.FALL, TrendLabel.STATIONARY, TrendLabel.RISE


def threshold_oracle(omega, rate, H):
    """Average compounded growth written as an explicit sum, at 50 digits."""
    with mpmath.workdps(50):
        r = mpmath.mpf(rate)
        avg = mpmath.fsum((1 + r) ** h for h in range(1, H + 1)) / H
        return float(mpmath.mpf(omega) * (avg - 1))


def _window(anchor, horizon):
    return SampleWindow(0, np.array([anchor * 0.9, anchor]), np.asarray(horizon, float))


def test_threshold_examples():
    b10 = baseline_threshold(LabelRuleConfig(), 10)
    assert b10 == pytest.approx(0.0279167, abs=1e-7)
    assert baseline_threshold(LabelRuleConfig(), 13) == pytest.approx(0.0357097, abs=1e-7)
    assert baseline_threshold(LabelRuleConfig(omega=2.0), 10) == pytest.approx(2 * b10, rel=1e-15)


@pytest.mark.parametrize("H", range(1, 31))
def test_threshold_matches_oracle(H):
    for omega in (0.5, 1.0, 3.0):
        got = baseline_threshold(LabelRuleConfig(omega=omega), H)
        assert got == pytest.approx(threshold_oracle(omega, 0.005, H), rel=1e-10)


def test_threshold_monotone_in_horizon():
    b = [baseline_threshold(LabelRuleConfig(), H) for H in range(1, 31)]
    assert all(x > 0 for x in b)
    assert all(x < y for x, y in zip(b, b[1:]))


def test_threshold_rejects_zero_horizon():
    with pytest.raises(ValueError):
        baseline_threshold(LabelRuleConfig(), 0)


def test_mean_ratio_examples():
    b3 = baseline_threshold(LabelRuleConfig(), 3)
    assert b3 == pytest.approx(0.01003, abs=1e-5)
    assert mean_ratio_label([0.02, -0.01, 0.01], b3) == S
    assert mean_ratio_label(np.zeros(10), 0.0279) == S
    assert mean_ratio_label([0.05] * 10, baseline_threshold(LabelRuleConfig(), 10)) == R
    assert mean_ratio_label([-0.05] * 10, 0.0279) == F


def test_mean_ratio_band_is_closed():
    assert mean_ratio_label([0.5, 0.5], 0.5) == S
    assert mean_ratio_label([-0.5, -0.5], 0.5) == S
    with pytest.raises(ValueError):
        mean_ratio_label([], 0.1)


def test_mean_ratio_monotone():
    rng = np.random.default_rng(11)
    b = baseline_threshold(LabelRuleConfig(), 10)
    for _ in range(2000):
        r = rng.normal(0, 0.03, 10)
        bumped = r + rng.uniform(0, 0.05, 10)
        assert mean_ratio_label(bumped, b) >= mean_ratio_label(r, b)


def test_triple_barrier_examples():
    cfg = LabelRuleConfig(theta=0.02)
    assert triple_barrier_label(_window(100, [101, 103, 99]), cfg) == R
    assert triple_barrier_label(_window(100, [100.5, 99.5, 100.2]), cfg) == S
    assert triple_barrier_label(_window(100, [97, 104]), cfg) == F


def test_triple_barrier_truncation_invariance():
    rng = np.random.default_rng(5)
    cfg = LabelRuleConfig()
    for _ in range(500):
        anchor = rng.uniform(10, 200)
        path = anchor * np.exp(np.cumsum(rng.normal(0, 0.012, 15)))
        full = triple_barrier_label(_window(anchor, path), cfg)
        hit = np.nonzero((path >= anchor * 1.02) | (path <= anchor * 0.98))[0]
        if hit.size:
            assert triple_barrier_label(_window(anchor, path[: hit[0] + 1]), cfg) == full
        else:
            assert full == S


def test_labels_scale_invariant():
    rng = np.random.default_rng(8)
    cfg = LabelRuleConfig()
    b = baseline_threshold(cfg, 12)
    for _ in range(200):
        anchor = rng.uniform(20, 80)
        path = anchor * (1 + rng.normal(0, 0.03, 12))
        c = rng.choice([0.5, 4.0, 32.0])  # powers of two keep ratios exact
        w, wc = _window(anchor, path), _window(anchor * c, path * c)
        assert triple_barrier_label(w, cfg) == triple_barrier_label(wc, cfg)
        assert mean_ratio_label(rrp_ratios(w), b) == mean_ratio_label(rrp_ratios(wc), b)


def test_resolve_examples():
    assert clean_label_resolve(R, R) == CleanLabelOutcome(R, True, "agreement")
    assert clean_label_resolve(F, S) == CleanLabelOutcome(F, False, "fallback")
    assert clean_label_resolve(S, S) == CleanLabelOutcome(S, True, "agreement")


def test_agreement_on_steep_linear_trends():
    # mean ratio >= 0.038 and the 2% barrier is hit within three days
    for start, slope in ((100.0, 3.0), (400.0, -3.0)):
        x = start + slope * np.arange(120)
        samples = enumerate_samples(x, 30, 10)
        _, _, outcomes = label_samples(samples, LabelRuleConfig(), 10)
        assert all(o.agreed for o in outcomes)
        assert {o.label for o in outcomes} == {R if slope > 0 else F}


def test_label_files_and_patch(tmp_path):
    ks = [0, 1, 2]
    mean = [R, F, S]
    barrier = [R, S, F]
    outcomes = [clean_label_resolve(a, b) for a, b in zip(mean, barrier)]
    write_label_file(tmp_path / "labels.csv", ks, outcomes)
    assert (tmp_path / "labels.csv").read_text().splitlines() == [
        "k,label,agreed,source",
        "0,2,1,agreement",
        "1,0,0,fallback",
        "2,1,0,fallback",
    ]
    assert write_disagreement_report(tmp_path / "dis.csv", ks, mean, barrier) == 2
    assert (tmp_path / "dis.csv").read_text().splitlines()[1] == "1,0,1"
    (tmp_path / "patch.csv").write_text("k,label\n1,1\n")
    patched = apply_label_patch(ks, outcomes, tmp_path / "patch.csv")
    assert patched[1] == CleanLabelOutcome(S, False, "patch")
    assert patched[0] == outcomes[0] and patched[2] == outcomes[2]
    (tmp_path / "bad.csv").write_text("k,label\n1,7\n")
    with pytest.raises(InputFormatError, match="line 2"):
        apply_label_patch(ks, outcomes, tmp_path / "bad.csv")


def test_noise_examples():
    labels = list(np.random.default_rng(0).integers(0, 3, 10_000))
    assert inject_label_noise(labels, 0.0, 1) == [TrendLabel(v) for v in labels]
    assert all(a != b for a, b in zip(inject_label_noise(labels, 1.0, 1), labels))
    noisy = inject_label_noise(labels, 0.3, 1)
    assert abs(np.mean([a != b for a, b in zip(noisy, labels)]) - 0.3) < 0.02
    assert inject_label_noise(labels, 0.3, 1) == noisy
    with pytest.raises(ValueError):
        inject_label_noise(labels, 1.5, 0)


def test_noise_targets_uniform():
    labels = [S] * 30_000
    noisy = np.array(inject_label_noise(labels, 1.0, 4))
    assert abs(np.mean(noisy == F) - 0.5) < 0.02


def test_class_distribution():
    labels = [F] * 97 + [S] * 260 + [R] * 105
    d = class_distribution(labels)
    assert d.counts == (97, 260, 105)
    assert [round(100 * p, 2) for p in d.proportions] == [21.00, 56.28, 22.73]
    # the commonly quoted 20.99 / 56.28 / 22.72 mixes rounding rules; each is within 0.01
    for p, quoted in zip(d.proportions, (20.99, 56.28, 22.72)):
        assert abs(100 * p - quoted) < 0.01
    assert sum(d.proportions) == pytest.approx(1.0, abs=1e-9)
    single = class_distribution([R] * 5)
    assert single.counts == (0, 0, 5) and single.proportions == (0.0, 0.0, 1.0)
    with pytest.raises(ValueError, match="empty label set"):
        class_distribution([])
