import numpy as np
import pytest

from vaue.data import (
    DomainDataset,
    SyntheticSpec,
    gen_synthetic_domains,
    load_dataset_cache,
    sample_balanced_batch,
    save_dataset_cache,
    split_train_val,
    uniform_noise_like,
    wedge_label,
)
from vaue.numcore import Rng
from vaue.style_align import channel_stats


def _toy(n, domain=0):
    return DomainDataset(np.arange(n, dtype=float).reshape(n, 1), np.arange(n) % 2, domain, 2)


def test_unstyled_domains_identically_distributed():
    spec = SyntheticSpec(samples_per_domain=600, style_noise=0.0)
    doms = gen_synthetic_domains(spec, Rng(0))
    means = [channel_stats(d.x).mu.mean(axis=0) for d in doms]
    sds = [channel_stats(d.x).mu.std(axis=0) / np.sqrt(len(d)) for d in doms]
    for m, s in zip(means[1:], sds[1:]):
        assert np.all(np.abs(m - means[0]) <= 3 * np.hypot(s, sds[0]))


def test_inverse_style_recovers_shared_semantics():
    scale = [[1, 1, 1], [2.0, 0.5, 1.5], [0.5, 3.0, 1.0]]
    shift = [[0, 0, 0], [1.0, -1.0, 0.5], [-2.0, 0.0, 1.0]]
    spec = SyntheticSpec(num_domains=3, samples_per_domain=600, style_scale=scale, style_shift=shift, style_noise=0.0)
    doms = gen_synthetic_domains(spec, Rng(1))
    stats = []
    for d, a, c in zip(doms, scale, shift):
        raw = (d.x - np.array(c)[None, :, None, None]) / np.array(a)[None, :, None, None]
        mu = channel_stats(raw).mu
        stats.append((mu.mean(axis=0), mu.std(axis=0) / np.sqrt(len(d))))
    for m, s in stats[1:]:
        assert np.all(np.abs(m - stats[0][0]) <= 3 * np.hypot(s, stats[0][1]))


def test_style_scale_multiplies_channel_sigma():
    spec = SyntheticSpec(num_domains=3, samples_per_domain=500, style_scale=[1.0, 1.0, 3.0], style_noise=0.0)
    doms = gen_synthetic_domains(spec, Rng(2))
    ratio = channel_stats(doms[2].x).sigma.mean() / channel_stats(doms[0].x).sigma.mean()
    assert ratio == pytest.approx(3.0, rel=0.05)


def test_rotation_pi_inverts_two_class_labels():
    pts = np.random.default_rng(0).normal(size=(500, 2))
    base = wedge_label(pts, 0.0, 2)
    assert np.array_equal(wedge_label(pts, np.pi, 2), 1 - base)
    spec = SyntheticSpec(generator="rotated-wedges", num_classes=2, num_domains=2, vector_dim=2, rotation=[0.0, np.pi])
    d0, d1 = gen_synthetic_domains(spec, Rng(3))
    unstyled = d1.x  # default style is the identity transform apart from jitter
    assert np.mean(wedge_label(unstyled, 0.0, 2) != d1.y) > 0.9


def test_generation_deterministic_and_domain_streams_independent():
    spec = SyntheticSpec(samples_per_domain=50)
    a, b = gen_synthetic_domains(spec, Rng(7)), gen_synthetic_domains(spec, Rng(7))
    assert all(np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y) for x, y in zip(a, b))
    more = gen_synthetic_domains(SyntheticSpec(samples_per_domain=50, num_domains=5), Rng(7))
    assert np.array_equal(more[0].x, a[0].x)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(style_scale=[[0.0, 1.0, 1.0]] * 4)
    with pytest.raises(ValueError):
        SyntheticSpec(generator="pixels")
    with pytest.raises(ValueError):
        SyntheticSpec(rotation=[0.0])


@pytest.mark.parametrize("n, sizes", [(100, (80, 20)), (9, (7, 2)), (5, (4, 1))])
def test_split_sizes(n, sizes):
    tr, va = split_train_val(_toy(n), 0.8, Rng(0))
    assert (len(tr), len(va)) == sizes


def test_split_disjoint_exhaustive_deterministic():
    ds = _toy(37)
    tr, va = split_train_val(ds, 0.8, Rng(4))
    assert set(tr.x[:, 0]) | set(va.x[:, 0]) == set(ds.x[:, 0])
    assert not set(tr.x[:, 0]) & set(va.x[:, 0])
    tr2, _ = split_train_val(ds, 0.8, Rng(4))
    assert np.array_equal(tr.x, tr2.x)
    with pytest.raises(ValueError):
        split_train_val(_toy(4), 0.8, Rng(0))


def test_balanced_batches():
    sets = [_toy(10, i) for i in range(3)]
    batch = sample_balanced_batch(sets, 64, Rng(0))
    assert len(batch) == 192 and np.array_equal(np.bincount(batch.domain), [64, 64, 64])
    single = sample_balanced_batch([_toy(1)], 4, Rng(0))
    assert np.array_equal(single.x[:, 0], [0.0] * 4)
    one = sample_balanced_batch(sets[:1], 8, Rng(1))
    assert set(one.domain) == {0}
    with pytest.raises(ValueError):
        sample_balanced_batch([_toy(0)], 2, Rng(0))


def test_noise_matches_channel_moments():
    spec = SyntheticSpec(samples_per_domain=300, style_shift=[[0, 0, 0], [3.0, -2.0, 1.0], [0, 0, 0], [0, 0, 0]])
    ds = gen_synthetic_domains(spec, Rng(5))[1]
    noise = uniform_noise_like(ds, 2000, Rng(6))
    assert noise.shape == (2000,) + ds.x.shape[1:]
    np.testing.assert_allclose(noise.mean(axis=(0, 2, 3)), ds.x.mean(axis=(0, 2, 3)), atol=0.05)
    np.testing.assert_allclose(noise.std(axis=(0, 2, 3)), ds.x.std(axis=(0, 2, 3)), rtol=0.03)


def test_cache_round_trip_bit_exact(tmp_path):
    spec = SyntheticSpec(samples_per_domain=30)
    doms = gen_synthetic_domains(spec, Rng(8))
    path = tmp_path / "data.vdat"
    save_dataset_cache(path, doms, spec, 8)
    loaded, header = load_dataset_cache(path)
    assert header["seed"] == 8 and header["version"] == 1
    for a, b in zip(doms, loaded):
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    regenerated = tmp_path / "again.vdat"
    save_dataset_cache(regenerated, gen_synthetic_domains(spec, Rng(8)), spec, 8)
    assert regenerated.read_bytes() == path.read_bytes()
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(IOError, match="checksum"):
        load_dataset_cache(path)
