import json
from collections import Counter

import numpy as np
import pytest

from ccnet import data
from ccnet.errors import ConfigError, FormatError, InputError


def test_generator_is_deterministic():
    a = data.generate_synthetic(data.SynthConfig(seed=3))
    b = data.generate_synthetic(data.SynthConfig(seed=3))
    assert len(a.samples) == len(b.samples)
    for s, t in zip(a.samples, b.samples):
        assert (s.identity, s.time_label, s.split) == (t.identity, t.time_label, t.split)
        assert all(np.array_equal(x, y) for x, y in zip(s.inputs, t.inputs))


def test_zero_scales_make_identity_features_identical():
    m = data.generate_synthetic(data.SynthConfig(modality_offset_scale=0.0, sample_noise_scale=0.0))
    for ident in m.identities():
        xs = np.array([x for s in m.samples if s.identity == ident for x in s.inputs])
        assert np.all(xs == xs[0])


def test_cardinality_and_splits():
    m = data.generate_synthetic(data.SynthConfig(id_count=20))
    assert len(m.identities()) == 20
    assert len(m.samples) == 160
    train, test = set(m.identities("train")), set(m.identities("gallery"))
    assert len(train) == 10 and not train & test
    assert set(m.identities("query")) <= test
    m.validate()


def test_every_query_has_same_session_duplicate_and_cross_session_positive():
    m = data.generate_synthetic(data.SynthConfig(seed=1))
    gallery = [(s.identity, s.time_label) for s in m.split("gallery")]
    for q in m.split("query"):
        assert (q.identity, q.time_label) in gallery
        assert any(i == q.identity and t != q.time_label for i, t in gallery)


def test_config_errors():
    with pytest.raises(ConfigError):
        data.SynthConfig(id_count=1)
    with pytest.raises(ConfigError):
        data.SynthConfig(distortion_rate=1.5)
    with pytest.raises(ConfigError):
        data.SynthConfig(latent_dim=30, nuisance_dim=8)
    with pytest.raises(ConfigError):
        data.SynthConfig(gain_scale=-1.0)


def test_empty_sample_rejected():
    with pytest.raises(InputError, match="empty sample"):
        data.Sample(0, 0, (None, None, None))
    s = data.Sample(0, 0, ([1.0], None, [2.0]))
    assert s.mask.tolist() == [True, False, True] and not s.complete


def test_pk_batch_counts(rng):
    m = data.generate_synthetic(data.SynthConfig())
    b = data.pk_sample(m.split("train"), 8, 4, rng)
    assert b.inputs.shape[:3] == (8, 4, 3)
    assert b.sample_index.size == 32 and b.image_count == 96
    assert len(set(b.identities.tolist())) == 8


def test_pk_exact_k_draws_each_sample_once(rng):
    samples = [data.Sample(i // 4, 0, ([float(i)], [0.0], [0.0])) for i in range(12)]
    b = data.pk_sample(samples, 3, 4, rng)
    for row, ident in zip(b.sample_index, b.identities):
        assert sorted(row.tolist()) == [4 * ident + j for j in range(4)]


def test_pk_small_identity_uses_replacement(rng):
    samples = [data.Sample(0, 0, ([0.0],)), data.Sample(0, 1, ([1.0],))]
    b = data.pk_sample(samples, 1, 4, rng)
    counts = Counter(b.sample_index[0].tolist())
    assert sum(counts.values()) == 4 and set(counts) == {0, 1}
    assert max(counts.values()) > 1


def test_pk_errors(rng):
    samples = [data.Sample(0, 0, ([0.0],))]
    with pytest.raises(ConfigError):
        data.pk_sample(samples, 2, 4, rng)
    with pytest.raises(ConfigError):
        data.pk_sample(samples, 1, 0, rng)


def test_batches_per_epoch():
    assert data.batches_per_epoch(80, 8, 4) == 3
    assert data.batches_per_epoch(64, 8, 4) == 2


def test_manifest_round_trip(tmp_path):
    m = data.generate_synthetic(data.SynthConfig(id_count=4, samples_per_id=4, dim=6, latent_dim=2,
                                                 nuisance_dim=2))
    m.samples[0].inputs = (m.samples[0].inputs[0], None, m.samples[0].inputs[2])
    path = tmp_path / "m.jsonl"
    data.save_manifest(m, path)
    back = data.load_manifest(path)
    assert len(back.samples) == len(m.samples)
    for s, t in zip(m.samples, back.samples):
        assert (s.identity, s.time_label, s.split) == (t.identity, t.time_label, t.split)
        for x, y in zip(s.inputs, t.inputs):
            assert (x is None and y is None) or np.array_equal(x, y)


def test_load_small_manifest(tmp_path):
    path = tmp_path / "m.jsonl"
    recs = [{"id": i, "time": i, "split": "train", "modality": {"rgb": [1.0, 2.0], "tir": [0.0, 1.0]}}
            for i in range(3)]
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    m = data.load_manifest(path)
    assert len(m.samples) == 3 and m.samples[0].mask.tolist() == [True, False, True]


@pytest.mark.parametrize("line,message", [
    ("{not json", "invalid JSON"),
    ('{"id": 0, "time": 0, "split": "train"}', "missing field"),
    ('{"id": 0, "time": 0, "split": "train", "modality": {"uv": [1]}}', "unknown modality"),
    ('{"id": 0, "time": 0, "split": "train", "modality": {}}', "empty sample"),
    ('{"id": 0, "time": 0, "split": "train", "modality": {"rgb": ["a"]}}', "numeric"),
    ('{"id": 0, "time": 0, "split": "dev", "modality": {"rgb": [1]}}', "split"),
])
def test_manifest_errors(tmp_path, line, message):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(FormatError, match=message):
        data.load_manifest(path)


def test_manifest_shape_mismatch(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "time": 0, "split": "train", "modality": {"rgb": [1, 2], "nir": [1]}}\n')
    with pytest.raises(FormatError, match="shape"):
        data.load_manifest(path)


def test_validate_rejects_query_without_cross_time_positive():
    m = data.DatasetManifest([data.Sample(0, 1, ([0.0],), "query"), data.Sample(0, 1, ([0.0],), "gallery")])
    with pytest.raises(InputError):
        m.validate()


def test_stack_requires_complete_samples():
    m = data.DatasetManifest([data.Sample(0, 1, ([0.0], None, [1.0]), "train")])
    with pytest.raises(InputError):
        m.stack("train")


def test_embeddings_round_trip(tmp_path, rng):
    feats = rng.normal(size=(5, 4)).astype(np.float32)
    path = tmp_path / "e.ccnf"
    data.write_embeddings(path, feats)
    assert np.array_equal(data.read_embeddings(path), feats)
    assert path.stat().st_size == 16 + 5 * 4 * 4


def test_embeddings_errors(tmp_path, rng):
    path = tmp_path / "e.ccnf"
    data.write_embeddings(path, rng.normal(size=(5, 4)))
    blob = path.read_bytes()
    for name, bad in (("trunc", blob[:10]), ("short", blob[:-4]), ("magic", b"NOPE" + blob[4:]),
                      ("version", blob[:4] + (7).to_bytes(4, "little") + blob[8:])):
        p = tmp_path / name
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            data.read_embeddings(p)
    with pytest.raises(InputError):
        data.write_embeddings(path, np.zeros(3))
