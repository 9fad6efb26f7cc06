"""Acceptance criteria, one test each; the summary prints PASS/FAIL per criterion."""

import time
from dataclasses import replace

import numpy as np
import pytest
from oracles import brute_force_attention
from threadpoolctl import threadpool_limits

from lambda_repformer.dataset import (
    SyntheticConfig,
    cleanse_negatives,
    dataset_stats,
    generate_synthetic,
    generate_synthetic_videos,
    shaped_manifest,
    split_dataset,
)
from lambda_repformer.decoder import AttentionBlockParams, cross_attention
from lambda_repformer.harness import (
    ConfusionMatrix,
    classify_video,
    pair_probabilities,
    profile,
    train,
)
from lambda_repformer.harness.gradcheck import decoder_grad_error

SIZES = (2000, 250, 250)
DESK_EPOCHS = 30


def _desk_run(signal_group=None, groups=("SR", "AR", "NR"), checkpoint=None):
    data = generate_synthetic(SyntheticConfig(n_episodes=sum(SIZES), seed=7, signal_group=signal_group))
    split = split_dataset(data.episodes, SIZES, seed=7)
    cfg = profile("desk", epochs=DESK_EPOCHS, enabled_groups=groups)
    return train(data.episodes, split, cfg, data.provider, checkpoint_path=checkpoint)


@pytest.fixture(scope="module")
def desk_model():
    """The desk-profile model on the natural synthetic set, with its wall time on one thread."""
    with threadpool_limits(1):
        t0 = time.perf_counter()
        outcome = _desk_run()
        return outcome, time.perf_counter() - t0


@pytest.mark.criterion("gradient correctness")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    errs = [decoder_grad_error(d_model=4, seed=s) for s in range(20)]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {max(errs):.2e} over 20 seeds, {elapsed:.1f}s")
    assert max(errs) < 1e-4
    assert elapsed < 10


@pytest.mark.criterion("attention invariants")
def test_attention_invariants(record_property):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_row = 0.0
    for _ in range(1000):
        n_q, n_k, d, d_k, d_v = (int(x) for x in rng.integers(1, 7, size=5))
        p = AttentionBlockParams(rng.normal(size=(d, d_k)), rng.normal(size=(d, d_k)), rng.normal(size=(d, d_v)))
        xa, xb = rng.normal(size=(n_q, d)), rng.normal(size=(n_k, d))
        out, (w,) = cross_attention(xa, xb, p, return_weights=True)
        worst_row = max(worst_row, float(np.abs(w.sum(axis=-1) - 1).max()))
        assert np.abs(w.sum(axis=-1) - 1).max() <= 1e-12 and (w >= 0).all()
        perm = rng.permutation(n_k)
        np.testing.assert_allclose(cross_attention(xa, xb[perm], p), out, rtol=1e-10, atol=1e-10)
        single = cross_attention(xa, xb[:1], p)
        np.testing.assert_allclose(single, np.repeat(xb[:1] @ p.w_v, n_q, axis=0), rtol=1e-12, atol=1e-12)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"1000 trials, max row-sum dev {worst_row:.1e}, {elapsed:.2f}s")
    assert elapsed < 5


@pytest.mark.criterion("equation fidelity oracle")
def test_brute_force_oracle(record_property):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n_q, n_k, d, d_k, d_v = (int(x) for x in rng.integers(1, 6, size=5))
        p = AttentionBlockParams(rng.normal(size=(d, d_k)), rng.normal(size=(d, d_k)), rng.normal(size=(d, d_v)))
        xa, xb = rng.normal(size=(n_q, d)), rng.normal(size=(n_k, d))
        ref = np.array(brute_force_attention(xa.tolist(), xb.tolist(), p.w_q.tolist(), p.w_k.tolist(), p.w_v.tolist()))
        worst = max(worst, float(np.abs(cross_attention(xa, xb, p) - ref).max()))
    record_property("detail", f"100 cases, max abs diff {worst:.1e}")
    assert worst <= 1e-10


@pytest.mark.criterion("dataset procedure")
def test_dataset_procedure(record_property):
    eps = shaped_manifest()
    split = split_dataset(eps, (11915, 1000, 1000), seed=1)
    assert split.sizes == (11915, 1000, 1000)
    assert len(set(split.train) | set(split.val) | set(split.test)) == 13915

    cleaned = cleanse_negatives(eps, seed=0)
    flagged = {e.episode_id for e in eps if e.label == 0 and e.flagged_mislabel}
    changed = {a.episode_id for a, b in zip(eps, cleaned) if a.instruction != b.instruction}
    assert changed == flagged and flagged
    assert [e.label for e in cleaned] == [e.label for e in eps]

    s = dataset_stats(eps)
    record_property(
        "detail",
        f"split {split.sizes}, {len(changed)} cleansed, {s.positives}/{s.negatives}, "
        f"vocab {s.vocab_size}, mean len {s.mean_length:.3f}",
    )
    assert (s.positives, s.negatives, s.vocab_size) == (10000, 3915, 49)
    assert abs(s.mean_length - 5.66) <= 0.01


@pytest.mark.criterion("confusion-matrix arithmetic")
def test_confusion_matrix(record_property):
    cm = ConfusionMatrix(tp=431, fp=114, tn=386, fn=69)
    record_property("detail", f"accuracy {cm.accuracy}")
    assert cm.accuracy == 0.817


@pytest.mark.criterion("desk-scale learnability")
def test_learnability(record_property, desk_model):
    from sklearn.linear_model import LogisticRegression

    data = generate_synthetic(SyntheticConfig(n_episodes=sum(SIZES), seed=7))
    x, y = _diff_features(data)
    oracle = LogisticRegression(C=10.0, max_iter=5000).fit(x, y).score(x, y)
    assert oracle >= 0.99

    outcome, elapsed = desk_model
    r = outcome.result
    record_property(
        "detail",
        f"oracle {oracle:.3f}, test acc {r.test.accuracy:.3f}, best epoch {r.best_epoch}, {elapsed:.0f}s on 1 thread",
    )
    assert len(r.train_loss) <= DESK_EPOCHS
    assert r.test.accuracy >= 0.90
    assert elapsed < 300


def _diff_features(data):
    reg = data.registry
    rows = []
    for ep in data.episodes:
        parts = []
        for s in reg.visual():
            pre = "caption_" if s.group == "narrative" else ""
            after = data.provider.get(ep.episode_id, pre + "after", s.id).values
            before = data.provider.get(ep.episode_id, pre + "before", s.id).values
            parts.append(after - before)
        parts += [data.provider.get(ep.episode_id, "instruction", s.id).values for s in reg.group("language")]
        rows.append(np.concatenate(parts))
    return np.array(rows, dtype=np.float64), np.array([e.label for e in data.episodes])


@pytest.mark.criterion("ablation sensitivity")
def test_ablation_sensitivity(record_property):
    code = {"scene": "SR", "aligned": "AR", "narrative": "NR"}
    parts = []
    ok = True
    for group, tag in code.items():
        full = _desk_run(signal_group=group).result.test.accuracy
        rest = tuple(g for g in ("SR", "AR", "NR") if g != tag)
        dropped = _desk_run(signal_group=group, groups=rest).result.test.accuracy
        parts.append(f"{tag}: full {full:.3f} / without {dropped:.3f}")
        ok &= full >= 0.9 and dropped <= 0.6
    record_property("detail", "; ".join(parts))
    assert ok, parts


@pytest.mark.criterion("video classification")
def test_video_classification(record_property, desk_model):
    model = desk_model[0].model
    videos = generate_synthetic_videos(SyntheticConfig(n_episodes=100, seed=31), n_frames=16)
    successes = 0
    for ep in videos.episodes:
        res = classify_video(model, ep, videos.provider)
        probs = pair_probabilities(model, ep, videos.provider)
        hits = [i + 1 for i, p in enumerate(probs) if p >= 0.5]
        assert res.success == bool(hits)
        assert res.first_success == (hits[0] if hits else None)
        successes += res.success

    pattern = generate_synthetic_videos(SyntheticConfig(n_episodes=10, seed=32, failure_rate=0.0), 16, change_at=14)
    firsts = [classify_video(model, ep, pattern.provider).first_success for ep in pattern.episodes]
    record_property("detail", f"100 videos agree ({successes} successes); change-at-14 first successes {firsts}")
    assert firsts == [14] * 10


@pytest.mark.criterion("determinism")
def test_determinism(record_property, tmp_path):
    data = generate_synthetic(SyntheticConfig(n_episodes=300, seed=5))
    split = split_dataset(data.episodes, (200, 50, 50), seed=5)
    cfg = replace(profile("desk", epochs=3), seed=11)
    a = train(data.episodes, split, cfg, data.provider, checkpoint_path=tmp_path / "a.lrck")
    b = train(data.episodes, split, cfg, data.provider, checkpoint_path=tmp_path / "b.lrck")
    same_ckpt = (tmp_path / "a.lrck").read_bytes() == (tmp_path / "b.lrck").read_bytes()
    same_result = a.result.to_json() == b.result.to_json()
    record_property("detail", f"checkpoint digest {a.result.checkpoint_digest[:12]}")
    assert same_ckpt and same_result
