import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lambda_repformer.dataset import (
    Episode,
    SyntheticConfig,
    cleanse_negatives,
    dataset_stats,
    generate_synthetic,
    generate_synthetic_videos,
    goal_satisfied,
    load_manifest,
    shaped_manifest,
    split_dataset,
    video_pairs,
    write_manifest,
)
from lambda_repformer.dataset.synthetic import (
    Action,
    WorldObject,
    feature_lengths,
    instruction_features,
    synthetic_registry,
)
from lambda_repformer.errors import ConfigError, ManifestError
from lambda_repformer.representation import FileProvider


def _eps(n, neg_flagged=0, n_neg=None):
    n_neg = n // 2 if n_neg is None else n_neg
    out = []
    for i in range(n):
        label = 0 if i < n_neg else 1
        flagged = (i < neg_flagged) if label == 0 else None
        out.append(Episode(f"e{i}", f"pick object {i % 7}", label, flagged_mislabel=flagged))
    return out


# -- manifest -----------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    eps = [
        Episode("a", "pick apple", 1),
        Episode("b", "place can upright", 0, flagged_mislabel=True),
        Episode("c", "move can near apple", 1, frames=("t0", "t1", "t2")),
    ]
    path = tmp_path / "m.jsonl"
    write_manifest(path, eps)
    back = load_manifest(path)
    assert back == eps
    assert back[2].before_ref == "t0" and back[2].after_ref == "t2"


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


@pytest.mark.parametrize(
    "lines,match,line",
    [
        (['{"episode_id": "a", "instruction": "x"}'], "label", 1),
        (['{"episode_id": "a", "instruction": "x", "label": 1}', "{bad json"], "invalid JSON", 2),
        (['{"episode_id": "a", "instruction": "x", "label": 1}'] * 2, "duplicate", 2),
        (['{"episode_id": "a", "instruction": "x", "label": 2}'], "label", 1),
        (['{"episode_id": "a", "instruction": "x", "label": 1, "frames": ["t0"]}'], "frames", 1),
        (['[1, 2]'], "object", 1),
    ],
)
def test_manifest_errors(tmp_path, lines, match, line):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=match) as e:
        load_manifest(path)
    assert e.value.line == line
    assert f"line {line}" in str(e.value)


# -- cleansing ----------------------------------------------------------------


def test_cleanse_replaces_exactly_flagged():
    eps = _eps(10, neg_flagged=4, n_neg=10)
    pool = [f"instr {i}" for i in range(6)]
    out = cleanse_negatives(eps, pool, seed=3)
    changed = [a.episode_id for a, b in zip(eps, out) if a.instruction != b.instruction]
    assert changed == ["e0", "e1", "e2", "e3"]
    assert all(b.instruction in pool for b in out[:4])
    assert [e.label for e in out] == [e.label for e in eps]
    assert out == cleanse_negatives(eps, pool, seed=3)


def test_cleanse_identity_without_flags():
    eps = _eps(8)
    assert cleanse_negatives(eps, seed=0) == eps


def test_cleanse_errors():
    with pytest.raises(ConfigError):
        cleanse_negatives(_eps(4, 1), [], seed=0)
    bad = [Episode("x", "pick a", 1, flagged_mislabel=True)]
    with pytest.raises(ConfigError):
        cleanse_negatives(bad, ["pick b"], seed=0)
    with pytest.raises(ConfigError):
        cleanse_negatives([Episode("x", "pick a", 0, flagged_mislabel=True)], ["pick a"], seed=0)


def test_cleanse_samples_uniformly_from_pool():
    eps = [Episode(f"e{i}", "pick a", 0, flagged_mislabel=True) for i in range(3000)]
    out = cleanse_negatives(eps, ["pick a", "b", "c", "d"], seed=1)
    counts = Counter(e.instruction for e in out)
    assert set(counts) == {"b", "c", "d"}
    assert all(abs(c - 1000) < 120 for c in counts.values())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.data())
def test_cleanse_properties(n, data):
    n_neg = data.draw(st.integers(0, n))
    flagged = data.draw(st.integers(0, n_neg))
    eps = _eps(n, flagged, n_neg)
    out = cleanse_negatives(eps, seed=data.draw(st.integers(0, 99)))
    for a, b in zip(eps, out):
        assert a.label == b.label and a.episode_id == b.episode_id
        if not a.flagged_mislabel:
            assert a == b
        else:
            assert b.instruction != a.instruction


# -- splits -------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 60), st.data())
def test_split_partitions(n, data):
    eps = _eps(n)
    a = data.draw(st.integers(0, n))
    b = data.draw(st.integers(0, n - a))
    seed = data.draw(st.integers(0, 1000))
    stratify = data.draw(st.booleans())
    s = split_dataset(eps, (a, b, n - a - b), seed=seed, stratify=stratify)
    assert s.sizes == (a, b, n - a - b)
    ids = list(s.train) + list(s.val) + list(s.test)
    assert sorted(ids) == sorted(e.episode_id for e in eps)
    assert len(set(ids)) == n
    assert s == split_dataset(eps, (a, b, n - a - b), seed=seed, stratify=stratify)


def test_split_edge_cases():
    eps = _eps(5)
    assert split_dataset(eps, (5, 0, 0), seed=0).sizes == (5, 0, 0)
    with pytest.raises(ConfigError):
        split_dataset(eps, (3, 1, 0), seed=0)
    with pytest.raises(ConfigError):
        split_dataset(eps, (6, -1, 0), seed=0)
    assert split_dataset(eps, (3, 1, 1), seed=0) != split_dataset(eps, (3, 1, 1), seed=1)


def test_split_stratified_balances_labels():
    eps = _eps(1000, n_neg=300)
    s = split_dataset(eps, (800, 100, 100), seed=0, stratify=True)
    labels = {e.episode_id: e.label for e in eps}
    assert [sum(1 for i in part if labels[i] == 0) for part in (s.train, s.val, s.test)] == [240, 30, 30]


def test_split_json_roundtrip():
    s = split_dataset(_eps(10), (6, 2, 2), seed=4)
    from lambda_repformer.dataset import DatasetSplit

    assert DatasetSplit.from_json(json.loads(json.dumps(s.to_json()))) == s


def test_full_corpus_sized_split():
    eps = shaped_manifest()
    s = split_dataset(eps, (11915, 1000, 1000), seed=1)
    assert s.sizes == (11915, 1000, 1000)


# -- stats --------------------------------------------------------------------


def naive_stats(eps):
    vocab, words = set(), 0
    for e in eps:
        for w in e.instruction.split():
            vocab.add(w)
            words += 1
    return len(vocab), words


def test_stats_single():
    st_ = dataset_stats([Episode("a", "pick apple", 1)])
    assert (st_.total, st_.positives, st_.negatives, st_.vocab_size, st_.word_count, st_.mean_length) == (
        1, 1, 0, 2, 2, 2.0
    )  # fmt: skip


def test_stats_empty():
    assert dataset_stats([]).mean_length == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("ab cd ef gh ij".split()), min_size=1, max_size=6), st.booleans()),
                max_size=30))  # fmt: skip
def test_stats_match_naive_recount(rows):
    eps = [Episode(f"e{i}", " ".join(ws), int(lbl)) for i, (ws, lbl) in enumerate(rows)]
    s = dataset_stats(eps)
    assert (s.vocab_size, s.word_count) == naive_stats(eps)
    assert s.positives == sum(int(lbl) for _, lbl in rows)


def test_shaped_manifest_statistics():
    eps = shaped_manifest()
    s = dataset_stats(eps)
    assert (s.total, s.positives, s.negatives, s.vocab_size, s.word_count) == (13915, 10000, 3915, 49, 78790)
    assert abs(s.mean_length - 5.66) <= 0.01
    flagged = sum(1 for e in eps if e.flagged_mislabel)
    assert flagged == round(0.436 * 3915)
    assert all(e.label == 0 for e in eps if e.flagged_mislabel)
    assert shaped_manifest() == eps


# -- synthetic ----------------------------------------------------------------


def _obj(c, s, x, y, upright=True, held=False):
    return WorldObject(c, s, x, y, upright, held)


def test_goal_predicates():
    objs = (_obj("red", "can", 0, 0), _obj("blue", "bag", 3, 3, upright=False), _obj("green", "block", 1, 1))
    assert not goal_satisfied(objs, Action("pick", 0))
    assert goal_satisfied(objs, Action("knock_over", 1))
    assert goal_satisfied(objs, Action("place_upright", 0))
    assert goal_satisfied(objs, Action("move_near", 0, 2))
    assert not goal_satisfied(objs, Action("move_near", 0, 1))
    assert goal_satisfied(objs, Action("move_near", 0, 1), near_threshold=3)
    held = (_obj("red", "can", 0, 0, held=True),) + objs[1:]
    assert goal_satisfied(held, Action("pick", 0))
    assert not goal_satisfied(held, Action("move_near", 0, 2))


def test_synthetic_labels_equal_predicate_everywhere():
    data = generate_synthetic(SyntheticConfig(n_episodes=500, seed=11))
    for ep, w in zip(data.episodes, data.worlds):
        assert ep.label == int(goal_satisfied(w.post, w.action, w.near_threshold))
        assert not goal_satisfied(w.objects, w.action, w.near_threshold)  # preconditions hold
        assert ep.instruction == w.instruction
        assert (w.corruption is None) == w.executed_correctly
        assert len(w.objects) <= 4
    assert all(w.label == 1 for w in data.worlds if w.executed_correctly)
    assert all(w.label == 0 for w in data.worlds if not w.executed_correctly)


def test_failure_rate_extremes():
    ok = generate_synthetic(SyntheticConfig(n_episodes=200, failure_rate=0.0, seed=1))
    assert all(e.label == 1 for e in ok.episodes)
    noop = generate_synthetic(SyntheticConfig(n_episodes=300, failure_rate=1.0, corruptions=("no_op",), seed=1))
    assert all(e.label == 0 for e in noop.episodes)
    for w in noop.worlds:
        assert w.post == w.objects
    verbs = Counter(w.action.verb for w in noop.worlds)
    assert verbs["pick"] > 0 and verbs["move_near"] > 0


def test_corruption_kinds_produce_failures():
    data = generate_synthetic(SyntheticConfig(n_episodes=400, failure_rate=1.0, seed=2))
    kinds = Counter(w.corruption for w in data.worlds)
    assert set(kinds) == {"wrong_object", "wrong_destination", "no_op"}
    for w in data.worlds:
        if w.corruption == "wrong_destination":
            assert w.action.verb == "move_near"
            assert w.post[w.action.target] != w.objects[w.action.target]


def test_synthetic_config_validation():
    for bad in (
        dict(failure_rate=1.5),
        dict(n_objects_max=1),
        dict(corruptions=("explode",)),
        dict(signal_group="language"),
        dict(n_episodes=-1),
        dict(noise=-0.1),
    ):
        with pytest.raises(ConfigError):
            SyntheticConfig(**bad)


def test_synthetic_store_is_deterministic():
    cfg = SyntheticConfig(n_episodes=30, seed=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.provider.keys() == b.provider.keys()
    for key in a.provider.keys():
        assert np.array_equal(a.provider.get(*key).values, b.provider.get(*key).values)
    c = generate_synthetic(SyntheticConfig(n_episodes=30, seed=5))
    first_a, first_c = a.provider.keys()[0], c.provider.keys()[0]
    assert first_a[1:] == first_c[1:]
    assert not np.array_equal(a.provider.get(*first_a).values, c.provider.get(*first_c).values)


def test_synthetic_store_dumps_to_lrep(tmp_path):
    data = generate_synthetic(SyntheticConfig(n_episodes=5, seed=0))
    fp = data.provider.dump(tmp_path)
    ep = data.episodes[0].episode_id
    assert fp.caption(ep, "after").startswith("In the image,")
    again = FileProvider(tmp_path, data.registry)
    for s in data.registry:
        phase = "instruction" if s.group == "language" else ("caption_after" if s.group == "narrative" else "after")
        assert again.get(ep, phase, s.id) == data.provider.get(ep, phase, s.id)


def test_synthetic_registry_fits_features():
    cfg = SyntheticConfig()
    reg = synthetic_registry(cfg)
    lengths = feature_lengths(cfg)
    assert [s.id for s in reg] == [
        "vit", "dinov2", "clip_image_intermediate", "clip_image_output", "bert_caption", "te3l_caption",
        "bert_instruction", "clip_text", "ada_instruction",
    ]  # fmt: skip
    for s in reg:
        assert s.dim >= lengths[s.group]
    objs = (_obj("red", "can", 0, 0), _obj("blue", "bag", 3, 3))
    assert instruction_features(objs, Action("pick", 0)).size == lengths["language"]


def _diff_instruction_features(data):
    reg = data.registry
    rows = []
    for ep in data.episodes:
        parts = []
        for s in reg.visual():
            ph = "caption_" if s.group == "narrative" else ""
            parts.append(data.provider.get(ep.episode_id, ph + "after", s.id).values
                         - data.provider.get(ep.episode_id, ph + "before", s.id).values)  # fmt: skip
        parts += [data.provider.get(ep.episode_id, "instruction", s.id).values for s in reg.group("language")]
        rows.append(np.concatenate(parts))
    return np.array(rows, dtype=np.float64), np.array([e.label for e in data.episodes])


def test_logistic_oracle_certifies_separability():
    from sklearn.linear_model import LogisticRegression

    data = generate_synthetic(SyntheticConfig(n_episodes=2000, seed=7))
    x, y = _diff_instruction_features(data)
    clf = LogisticRegression(C=10.0, max_iter=5000).fit(x, y)
    assert clf.score(x, y) >= 0.99


@pytest.mark.parametrize("group", ["scene", "aligned", "narrative"])
def test_signal_routing_isolates_label_information(group):
    from sklearn.linear_model import LogisticRegression

    data = generate_synthetic(SyntheticConfig(n_episodes=1200, seed=8, signal_group=group))
    reg = data.registry
    y = np.array([e.label for e in data.episodes])

    def group_diff(g):
        cols = []
        for s in reg.group(g):
            ph = "caption_" if g == "narrative" else ""
            cols.append(np.array([data.provider.get(e.episode_id, ph + "after", s.id).values
                                  - data.provider.get(e.episode_id, ph + "before", s.id).values
                                  for e in data.episodes]))  # fmt: skip
        return np.hstack(cols)

    for g in ("scene", "aligned", "narrative"):
        x = group_diff(g)
        clf = LogisticRegression(max_iter=3000).fit(x[:900], y[:900])
        acc = clf.score(x[900:], y[900:])
        if g == group:
            assert acc >= 0.95
        else:
            assert acc <= 0.65


# -- video --------------------------------------------------------------------


def test_video_pairs():
    ep = Episode("v", "pick a", 1, frames=tuple(f"t{i:02d}" for i in range(16)))
    pairs = video_pairs(ep)
    assert len(pairs) == 15
    assert [p.index for p in pairs] == list(range(1, 16))
    assert all(p.before == "t00" for p in pairs) and pairs[-1].after == "t15"
    two = video_pairs(Episode("w", "x", 0, frames=("a", "b")))
    assert [(p.index, p.before, p.after) for p in two] == [(1, "a", "b")]
    with pytest.raises(ConfigError):
        video_pairs(Episode("z", "x", 0))
    with pytest.raises(ManifestError):
        Episode("z", "x", 0, frames=("a",))


def test_synthetic_videos_change_at_frame():
    data = generate_synthetic_videos(SyntheticConfig(n_episodes=6, seed=1, failure_rate=0.0), 16, change_at=14)
    for ep, w in zip(data.episodes, data.worlds):
        states = data.frame_states[ep.episode_id]
        assert len(ep.frames) == 16 and ep.frames[0] == "t00"
        assert all(s == w.objects for s in states[:14]) and all(s == w.post for s in states[14:])
        assert ep.label == 1
    with pytest.raises(ConfigError):
        generate_synthetic_videos(SyntheticConfig(n_episodes=1), 4, change_at=4)
