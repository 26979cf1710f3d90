import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from kser.data import DataError, write_interactions
from kser.knowledge import write_pack
from kser.synthetic import SyntheticSpec, generate
from kser.training import compute_auc


def probe_design(data, spec):
    """Item and context one-hots plus the user chunk matching the item's category, per-category blocks."""
    samples = data.samples.samples
    items = np.array([int(s.item_id[1:]) for s in samples])
    ctxs = np.array([int(s.context["context"][1:]) for s in samples])
    cats = np.array([int(s.context["category"][1:]) for s in samples])
    users = np.array([int(s.user_id[1:]) for s in samples])
    s = spec.d_k // spec.n_chunks
    user_vecs = data.pack["user_preference"].vectors.astype(np.float64)
    blocks = np.zeros((len(samples), spec.n_categories * s))
    for c in range(spec.n_categories):
        rows = cats == c
        blocks[rows, c * s:(c + 1) * s] = user_vecs[users[rows], c * s:(c + 1) * s]
    return np.hstack([np.eye(spec.n_items)[items], np.eye(spec.n_contexts)[ctxs], blocks])


def probe_auc(spec, seed=0):
    data = generate(spec, seed)
    X, y = probe_design(data, spec), np.array([s.label for s in data.samples.samples])
    cut = int(0.8 * len(y))
    clf = LogisticRegression(max_iter=2000).fit(X[:cut], y[:cut])
    return compute_auc(clf.decision_function(X[cut:]), y[cut:])


def test_noiseless_planted_signal_is_recoverable():
    spec = SyntheticSpec(n_samples=10_000, n_users=500, n_items=100, d_k=16, n_chunks=4, snr=float("inf"))
    assert generate(spec, 0).oracle_auc["bayes_full"] == 1.0
    assert probe_auc(spec) >= 0.95


def test_signal_field_alone_is_recoverable():
    # knowledge is the only label source, and the probe sees only field-0 chunks
    spec = SyntheticSpec(n_samples=10_000, n_users=500, n_items=100, d_k=16, n_chunks=4, snr=float("inf"),
                         signal_field=0, feature_weight=0, interaction_weight=0)
    data = generate(spec, 0)
    assert data.pack.names[0] == "user_preference"
    X = probe_design(data, spec)[:, spec.n_items + spec.n_contexts:]
    y = np.array([s.label for s in data.samples.samples])
    clf = LogisticRegression(max_iter=2000).fit(X[:8000], y[:8000])
    assert compute_auc(clf.decision_function(X[8000:]), y[8000:]) >= 0.95


def test_zero_signal_gives_chance():
    spec = SyntheticSpec(n_samples=10_000, n_users=500, n_items=100, d_k=16, n_chunks=4,
                         knowledge_weight=0, interaction_weight=0, feature_weight=0)
    assert abs(probe_auc(spec) - 0.5) <= 0.02


def test_knowledge_adds_over_features():
    data = generate(SyntheticSpec(n_samples=5000, n_users=500, n_items=100, d_k=16, n_chunks=4), 0)
    assert data.oracle_auc["bayes_full"] > data.oracle_auc["bayes_features"] + 0.1


def test_generation_is_byte_deterministic(tmp_path):
    spec = SyntheticSpec(n_samples=500, n_users=50, n_items=20, d_k=8, n_chunks=4)
    for name in ("a", "b"):
        data = generate(spec, 11)
        (tmp_path / name).mkdir()
        write_interactions(data.samples, tmp_path / name / "log.tsv")
        write_pack(data.pack, tmp_path / name / "pack")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    other = generate(spec, 12)
    assert other.pack["user_preference"].vectors.tobytes() != generate(spec, 11).pack["user_preference"].vectors.tobytes()


@pytest.mark.parametrize("bad", [dict(d_k=10, n_chunks=4), dict(n_categories=5, n_chunks=4),
                                 dict(signal_field=2), dict(hallucination=1.0), dict(positive_rate=0.0),
                                 dict(encoding="spiral"), dict(snr=-1.0), dict(n_samples=2)])
def test_inconsistent_specs_rejected(bad):
    with pytest.raises(DataError):
        generate(SyntheticSpec(**{"n_samples": 100, "n_users": 10, "n_items": 10, **bad}))


def test_min_margin_enforced():
    spec = SyntheticSpec(n_samples=2000, n_users=100, n_items=50, d_k=8, n_chunks=4, min_margin=0.9)
    with pytest.raises(DataError, match="too weak"):
        generate(spec, 0)


def test_noise_field_does_not_depend_on_labels():
    base = SyntheticSpec(n_samples=5000, n_users=200, n_items=300, d_k=8, n_chunks=4)
    a = generate(base, 3)
    b = generate(SyntheticSpec(**{**base.to_dict(), "knowledge_weight": 0.0, "interaction_weight": 3.0}), 3)
    assert a.pack["item_factual"].vectors.tobytes() == b.pack["item_factual"].vectors.tobytes()
    assert [s.label for s in a.samples] != [s.label for s in b.samples]
    # no linear relation to per-item click rate beyond sampling noise
    items = np.array([int(s.item_id[1:]) for s in a.samples])
    y = np.array([s.label for s in a.samples], dtype=float)
    rate = np.bincount(items, y, minlength=300) / np.maximum(np.bincount(items, minlength=300), 1)
    vecs = a.pack["item_factual"].vectors
    r = [abs(np.corrcoef(vecs[:, d], rate)[0, 1]) for d in range(8)]
    assert max(r) < 4 / np.sqrt(300)


def test_positive_rate_and_layout():
    spec = SyntheticSpec(n_samples=4000, n_users=100, n_items=40, d_k=8, n_chunks=4, positive_rate=0.3)
    data = generate(spec, 0)
    y = np.array([s.label for s in data.samples])
    assert abs(y.mean() - 0.3) < 0.01
    assert [f.name for f in data.pack.fields] == ["user_preference", "item_factual"]
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_radial_encoding_puts_signal_in_chunk_norm():
    spec = SyntheticSpec(n_samples=1000, n_users=300, n_items=20, d_k=16, n_chunks=4, encoding="radial",
                         homogeneity=0.0, info_noise=0.0)
    data = generate(spec, 0)
    v = data.pack["user_preference"].vectors.reshape(300, 4, 4)
    norms = np.linalg.norm(v, axis=2)
    assert (norms > 0).all() and np.isfinite(norms).all()
    # per-category chunk norms vary across users; the mean of each chunk is near zero
    assert np.abs(v.mean(axis=0)).max() < 0.3
