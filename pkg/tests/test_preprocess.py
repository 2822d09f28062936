import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajrisk.augment import (
    STRATEGIES, augment_delete, augment_modify, augment_sample, augment_subset,
    draw_augmentation,
)
from trajrisk.datagen import CHANNELS, RawUser
from trajrisk.preprocess import (
    OOV, PAD, BinSpec, TrajectoryTokenizer, Vocab, collate,
    read_processed, write_processed,
)


def test_bin_edges_match_interpolated_quantiles():
    values = np.arange(100, dtype=float)
    spec = BinSpec.fit(values, 4)
    s = np.sort(values)

    def interp(q):
        pos = (len(s) - 1) * q
        lo = int(np.floor(pos))
        return s[lo] + (pos - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])

    oracle = [interp(q) for q in (0.25, 0.5, 0.75)]
    np.testing.assert_allclose(spec.edges, [24.75, 49.5, 74.25])
    np.testing.assert_allclose(spec.edges, oracle)


def test_constant_feature_single_bin():
    spec = BinSpec.fit([3.0] * 10, 8)
    assert spec.edges.size == 0
    assert {spec.encode(v) for v in (-1e9, 3.0, 1e9)} == {2}


def test_edge_value_goes_left():
    spec = BinSpec(np.array([1.0, 2.0]))
    assert spec.encode(1.0) == 2 and spec.encode(1.0000001) == 3 and spec.encode(2.0) == 3
    assert spec.encode(None) == OOV


def test_vocab_frequency_order():
    v = Vocab.fit(["a"] * 5 + ["b"] * 3 + ["c"])
    assert v.token_of == {"a": 2, "b": 3, "c": 4}
    assert v.encode("zzz") == OOV and v.encode(None) == OOV
    tie = Vocab.fit(["y", "x"])
    assert tie.token_of == {"x": 2, "y": 3}


def _events(n, base=0):
    return [{"amount": float(base + i), "kind": "k", "event_date": i} for i in range(n)]


def _user(uid, lengths, static=None):
    chans = {c: _events(lengths.get(c, 0)) for c in CHANNELS}
    return RawUser(uid, static or {"grade": "A"}, chans, [], 200)


def test_truncation_keeps_newest_and_padding():
    users = [_user(f"u{i}", {"loan_behavior": 130, "credit_report": 3, "credit_inquiry": 3})
             for i in range(5)]
    tok = TrajectoryTokenizer(n_bins=4).fit(users)
    assert tok.artifacts_.lengths["loan_behavior"] == 120
    s = tok.transform_one(users[0])
    assert s.valid_len["loan_behavior"] == 120
    amount_row = s.channel_tokens["loan_behavior"][tok.artifacts_.features["loan_behavior"].index("amount")]
    # newest event is last and gets the top bin
    assert amount_row[-1] == tok.artifacts_.bins["loan_behavior.amount"].encode(129.0)

    short = TrajectoryTokenizer(length_caps={"loan_behavior": 5, "credit_report": 5, "credit_inquiry": 5})
    short.fit([_user("a", {c: 5 for c in CHANNELS})])
    out = short.transform_one(_user("b", {"loan_behavior": 3}))
    assert (out.channel_tokens["loan_behavior"][:, 3:] == PAD).all()
    assert out.valid_len["loan_behavior"] == 3


def test_length_cutoff_is_95th_percentile(small_pairs):
    tok = TrajectoryTokenizer().fit(small_pairs)
    for c in CHANNELS:
        lens = [len(u.channels[c]) for u, _ in small_pairs]
        assert tok.artifacts_.lengths[c] == min(int(np.ceil(np.quantile(lens, 0.95))), 120 if c != "credit_inquiry" else 60)
        assert 1 <= tok.artifacts_.lengths[c]


def test_unknown_feature_raises(small_pairs):
    tok = TrajectoryTokenizer().fit(small_pairs)
    user = small_pairs[0][0]
    bad = RawUser(user.user_id, {**user.static_features, "shoe_size": 42}, user.channels, [], 100)
    with pytest.raises(KeyError, match="shoe_size"):
        tok.transform_one(bad)


def test_empty_fit_raises():
    with pytest.raises(ValueError, match="empty"):
        TrajectoryTokenizer().fit([])


def test_shapes_depend_only_on_artifacts(small_pairs):
    tok = TrajectoryTokenizer().fit(small_pairs)
    shapes = {tuple((c, s.channel_tokens[c].shape) for c in CHANNELS) for s in tok.transform(small_pairs)}
    assert len(shapes) == 1
    sizes = {c: tok.artifacts_.sizes(c) for c in CHANNELS}
    for s in tok.transform(small_pairs[:50]):
        for c in CHANNELS:
            mat = s.channel_tokens[c]
            assert (mat[:, s.valid_len[c]:] == PAD).all()
            assert (mat[:, :s.valid_len[c]] != PAD).all()
            assert all((mat[m] < sizes[c][m]).all() for m in range(mat.shape[0]))


def test_artifact_roundtrip_bit_identical(tmp_path, small_pairs):
    tok = TrajectoryTokenizer(n_bins=16).fit(small_pairs)
    path = tmp_path / "artifacts.json"
    tok.save(path)
    again = TrajectoryTokenizer.load(path)
    assert again.artifacts_.fingerprint() == tok.artifacts_.fingerprint()
    for a, b in zip(tok.transform(small_pairs), again.transform(small_pairs)):
        for c in CHANNELS:
            np.testing.assert_array_equal(a.channel_tokens[c], b.channel_tokens[c])
        np.testing.assert_array_equal(a.static_tokens, b.static_tokens)
    d = tok.artifacts_.to_dict()
    assert {"vocabs", "bins", "lengths", "n_bins", "version"} <= set(d)


def test_tokens_never_collide_with_specials(small_pairs):
    art = TrajectoryTokenizer().fit(small_pairs).artifacts_
    for v in art.vocabs.values():
        assert min(v.token_of.values()) == 2
        assert sorted(v.token_of.values()) == list(range(2, v.size))


def test_processed_jsonl_roundtrip(tmp_path, small_pairs):
    samples = TrajectoryTokenizer().fit(small_pairs).transform(small_pairs[:10])
    write_processed(samples, tmp_path / "p.jsonl")
    back = read_processed(tmp_path / "p.jsonl")
    b1, b2 = collate(samples), collate(back)
    for c in CHANNELS:
        np.testing.assert_array_equal(b1.tokens[c], b2.tokens[c])
    np.testing.assert_array_equal(b1.y, b2.y)
    np.testing.assert_array_equal(b1.mask, b2.mask)


def test_sklearn_params():
    tok = TrajectoryTokenizer(n_bins=32)
    assert tok.get_params()["n_bins"] == 32
    assert tok.set_params(n_bins=8).n_bins == 8


# -- augmentations -----------------------------------------------------------

A, B, C, D = 5, 6, 7, 8


def test_delete_examples():
    np.testing.assert_array_equal(augment_delete([A, B, C, D], {1}), [A, C, D, PAD])
    np.testing.assert_array_equal(augment_delete([A, B, C, D], set()), [A, B, C, D])
    np.testing.assert_array_equal(augment_delete([A, B, PAD], {0, 1}), [PAD] * 3)
    with pytest.raises(IndexError):
        augment_delete([A, B, PAD], {2})


def test_modify_examples():
    np.testing.assert_array_equal(augment_modify([A, B, C], 1, "left"), [A, A, C])
    np.testing.assert_array_equal(augment_modify([A, B, C], 1, "right"), [A, C, C])
    with pytest.raises(IndexError):
        augment_modify([A, B, C], 0, "left")
    with pytest.raises(IndexError):
        augment_modify([A, B, PAD], 1, "right")


def test_subset_examples():
    np.testing.assert_array_equal(augment_subset([A, B, C, D], 1, 2), [B, C, PAD, PAD])
    np.testing.assert_array_equal(augment_subset([A, B, C, D], 0, 4), [A, B, C, D])
    np.testing.assert_array_equal(augment_subset([A, B, C, D], 2, 1), [C, PAD, PAD, PAD])
    with pytest.raises(IndexError):
        augment_subset([A, B, C, D], 3, 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=12), st.integers(0, 5), st.data())
def test_augmentations_preserve_length(valid, n_pad, data):
    row = np.array(valid + [PAD] * n_pad)
    n = len(valid)
    dels = data.draw(st.sets(st.integers(0, n - 1)))
    assert augment_delete(row, dels).shape == row.shape
    start = data.draw(st.integers(0, n - 1))
    length = data.draw(st.integers(1, n - start))
    assert augment_subset(row, start, length).shape == row.shape
    if n >= 2:
        i = data.draw(st.integers(1, n - 1))
        assert augment_modify(row, i, "left").shape == row.shape


@pytest.fixture(scope="module")
def samples(small_pairs):
    return TrajectoryTokenizer().fit(small_pairs).transform(small_pairs)


def test_augment_sample_identity_and_determinism(samples):
    s = samples[0]
    assert augment_sample(s, np.random.default_rng(0), p_aug=0.0) is s
    a = [augment_sample(x, np.random.default_rng(5), p_aug=1.0) for x in samples[:30]]
    b = [augment_sample(x, np.random.default_rng(5), p_aug=1.0) for x in samples[:30]]
    for x, y in zip(a, b):
        for c in CHANNELS:
            np.testing.assert_array_equal(x.channel_tokens[c], y.channel_tokens[c])
            assert x.channel_tokens[c].shape == samples[0].channel_tokens[c].shape


def test_augment_sample_keeps_rows_aligned(samples):
    rng = np.random.default_rng(1)
    for s in samples[:100]:
        out = augment_sample(s, rng, p_aug=1.0)
        for c in CHANNELS:
            n = out.valid_len[c]
            mat = out.channel_tokens[c]
            assert (mat[:, n:] == PAD).all() and (mat[:, :n] != PAD).all()


def test_strategy_frequencies(samples):
    rng = np.random.default_rng(2024)
    counts = dict.fromkeys(STRATEGIES, 0)
    n = 10_000
    for i in range(n):
        plan = draw_augmentation(samples[i % len(samples)], rng, p_aug=0.3)
        if plan is not None:
            counts[plan.strategy] += 1
    for k, v in counts.items():
        assert abs(v / n - 0.10) <= 0.02, (k, v)
