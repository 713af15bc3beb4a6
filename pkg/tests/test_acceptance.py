"""End-to-end acceptance checks. Each test records a PASS/FAIL line shown in the terminal summary."""
import functools
import math
import time

import numpy as np
from oracles import brute_ap, brute_recall, enumerate_wilcoxon_p

from audioret import numerics as nx
from audioret.audio import SnrSpec, Waveform, chunk, mix_noise, power, remove_silence
from audioret.baselines import BM25Index, filter_captions, lexical_search
from audioret.data import noisy_sequences
from audioret.errors import EmptyCaptionSet
from audioret.formats import csv_text, decode_embeddings, encode_embeddings
from audioret.objective import hybrid_loss
from audioret.pooling import attention_pool
from audioret.refinement import RefinerConfig, RefinerParams, embed_single, pad_batch, refine_batch
from audioret.retrieval import metric_report, wilcoxon_signed_rank
from audioret.text import TextDoc
from audioret.train import EPOCH_LOG_HEADER, STEP_LOG_HEADER, TrainConfig, evaluate, train
from conftest import default_synthetic

TREND_SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=None)
def _run(config: TrainConfig):
    return train(config, default_synthetic())


def _test_scores(params, noise_seqs=None):
    """Mean of a2t and t2a test mAP@10 plus the a2t/t2a reports."""
    test = default_synthetic().split_view("test")
    a2t = evaluate(params, test, "a2t", audio_seqs=noise_seqs).report
    t2a = evaluate(params, test, "t2a", audio_seqs=noise_seqs).report
    return 0.5 * (a2t.map_at_10 + t2a.map_at_10), a2t, t2a


# ------------------------------------------------------------------ 1

def test_gradient_fidelity(record_criterion):
    start = time.perf_counter()
    cfg = RefinerConfig(d_model=8, d_shared=4)
    params = RefinerParams.init(cfg, seed=0)
    rng = np.random.default_rng(0)
    # move off the zero-initialised cross-attention values so every gradient is nontrivial
    for t in params.tensors():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    audio = [rng.normal(size=(3, 8)) for _ in range(3)]
    text = [rng.normal(size=(2, 8)) for _ in range(3)]
    ax, av = pad_batch(audio)
    tx, tv = pad_batch(text)

    def loss():
        out = refine_batch(ax, av, tx, tv, params, nx.make_rng(7), "train")
        return hybrid_loss(out.audio, out.text)[0]

    report = nx.gradcheck(loss, params.tensors(), h=1e-5)
    worst = max(report.values())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10.0
    record_criterion(1, "gradient fidelity", ok,
                     f"{len(report)} tensors, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 10 s)")
    assert ok, report


# ------------------------------------------------------------------ 2

def test_stochastic_matrix_invariants(record_criterion, monkeypatch):
    captured = []
    original = nx.softmax

    def recording_softmax(x, valid=None):
        out = original(x, valid)
        captured.append(out.data)
        return out

    monkeypatch.setattr(nx, "softmax", recording_softmax)
    rng = np.random.default_rng(2024)
    worst_sum, worst_hull, n_rows = 0.0, 0.0, 0
    for case in range(1000):
        d_model = int(rng.choice([8, 16]))
        cfg = RefinerConfig(d_model=d_model, d_shared=int(rng.choice([4, 8])), replace_prob=0.5)
        params = RefinerParams.init(cfg, seed=case)
        for t in params.tensors():
            t.data = t.data * rng.uniform(0.5, 4.0)
        b = int(rng.integers(1, 5))
        scale = rng.uniform(0.1, 10.0)
        ax, av = pad_batch([rng.normal(size=(int(rng.integers(1, 7)), d_model)) * scale for _ in range(b)])
        tx, tv = pad_batch([rng.normal(size=(int(rng.integers(1, 5)), d_model)) * scale for _ in range(b)])
        captured.clear()
        refine_batch(ax, av, tx, tv, params, nx.make_rng(case), "train")
        for probs in captured:
            worst_sum = max(worst_sum, float(np.max(np.abs(probs.sum(axis=-1) - 1.0))))
            assert np.all(probs >= 0.0)
            n_rows += probs.size // probs.shape[-1]
        # pooling on its own: convex weights and an output inside the chunk hull
        m, d = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        chunks = rng.normal(size=(m, d)) * scale
        z, alpha = attention_pool(chunks, rng.normal(size=d) * scale)
        worst_sum = max(worst_sum, abs(float(alpha.data.sum()) - 1.0))
        assert np.all(alpha.data >= 0.0)
        worst_hull = max(worst_hull, float(np.max(np.abs(z.data - alpha.data @ chunks))))
        below = np.max(chunks.min(axis=0) - z.data)
        above = np.max(z.data - chunks.max(axis=0))
        worst_hull = max(worst_hull, float(below), float(above))
    ok = worst_sum <= 1e-9 and worst_hull <= 1e-9
    record_criterion(2, "stochastic-matrix invariants", ok,
                     f"{n_rows} softmax rows + 1000 pools, max |sum-1| {worst_sum:.1e}, hull excess {worst_hull:.1e}")
    assert ok


# ------------------------------------------------------------------ 3

def test_metric_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(31)
    mismatches = 0
    for _ in range(1000):
        n_docs = int(rng.integers(1, 40))
        rankings, relevance = {}, {}
        for q in range(int(rng.integers(1, 6))):
            rankings[q] = list(rng.permutation(n_docs)[: int(rng.integers(1, n_docs + 1))])
            relevance[q] = set(rng.choice(n_docs, int(rng.integers(1, n_docs + 1)), replace=False).tolist())
        rep = metric_report(rankings, relevance)
        recalls = [brute_recall(rankings, relevance, k) for k in (1, 5, 10)]
        aps = [brute_ap(rankings[q], relevance[q]) for q in rankings]
        mismatches += list(rep.row()[:3]) != recalls
        mismatches += any(abs(a - b) > 1e-12 for a, b in zip(rep.per_query_ap.values(), aps))
    worst_p, n_tests = 0.0, 0
    for n in range(5, 13):
        for _ in range(6):
            diffs = rng.integers(-5, 6, size=n).astype(float)
            diffs[diffs == 0] = 1.0
            got = wilcoxon_signed_rank(diffs, np.zeros(n)).p_value
            worst_p = max(worst_p, abs(got - enumerate_wilcoxon_p(diffs)))
            n_tests += 1
    ok = mismatches == 0 and worst_p < 1e-12
    record_criterion(3, "metric oracle equivalence", ok,
                     f"1000 metric cases, {mismatches} mismatches; {n_tests} Wilcoxon cases n=5..12, "
                     f"max |p diff| {worst_p:.1e}")
    assert ok


# ------------------------------------------------------------------ 4

def test_synthetic_convergence(record_criterion):
    start = time.perf_counter()
    result = _run(TrainConfig())
    _, a2t, t2a = _test_scores(result.params)
    elapsed = time.perf_counter() - start
    epochs = result.epoch_log[-1][0]
    ok = min(a2t.recall_at_1, t2a.recall_at_1) >= 0.9 and min(a2t.map_at_10, t2a.map_at_10) >= 0.9 \
        and epochs <= 200 and elapsed < 180
    record_criterion(4, "synthetic convergence", ok,
                     f"test R@1 a2t {a2t.recall_at_1:.3f} t2a {t2a.recall_at_1:.3f}, mAP@10 a2t "
                     f"{a2t.map_at_10:.3f} t2a {t2a.map_at_10:.3f} after {epochs} epochs, {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 5

def test_small_batch_trend(record_criterion):
    def mean_map(**kw):
        return float(np.mean([_test_scores(_run(TrainConfig(seed=s, **kw)).params)[0] for s in TREND_SEEDS]))

    hybrid4 = mean_map(batch_size=4)
    contrastive4 = mean_map(batch_size=4, w_directional=0.0, w_l1=0.0, w_contrastive=1.0)
    hybrid64 = mean_map(batch_size=64)
    first = hybrid4 >= contrastive4
    second = hybrid4 >= 0.9 * hybrid64
    record_criterion(5, "small-batch trend", first and second,
                     f"batch 4 hybrid {hybrid4:.4f} vs contrastive {contrastive4:.4f} "
                     f"({'ok' if first else 'not met'}); hybrid 4 vs 0.9 x batch 64 {0.9 * hybrid64:.4f} "
                     f"({'ok' if second else 'not met'}); seeds {TREND_SEEDS}")
    assert first and second


# ------------------------------------------------------------------ 6

def test_noise_robustness_trend(record_criterion):
    test = default_synthetic().split_view("test")
    noisy = noisy_sequences(test, SnrSpec(5.0, seed=0))
    drops = {}
    for pooling in ("attention", "mean"):
        per_seed = []
        for s in TREND_SEEDS:
            params = _run(TrainConfig(seed=s, pooling=pooling)).params
            per_seed.append(_test_scores(params)[0] - _test_scores(params, noisy)[0])
        drops[pooling] = float(np.mean(per_seed))
    ok = drops["attention"] <= drops["mean"]
    record_criterion(6, "noise-robustness trend", ok,
                     f"mAP@10 drop at 5 dB: attention {drops['attention']:.4f}, mean {drops['mean']:.4f}")
    assert ok


# ------------------------------------------------------------------ 7

def test_preprocessing_arithmetic(record_criterion):
    sr = 16000
    tone = lambda s: 0.5 * np.sin(2 * np.pi * 440 * np.arange(int(s * sr)) / sr)  # noqa: E731
    gap = lambda s: np.zeros(int(s * sr))  # noqa: E731
    checks = {
        "25 s -> 3 chunks": chunk(Waveform(tone(25), sr)).m == 3,
        "10 s -> 1 chunk": chunk(Waveform(tone(10), sr)).m == 1,
        "10.4 s -> 1 chunk": chunk(Waveform(tone(10.4), sr)).m == 1,
        "2 s gap excised": remove_silence(Waveform(np.concatenate([tone(5), gap(2), tone(5)]), sr)).samples.size
        == 10 * sr,
        "0.5 s gap kept": remove_silence(Waveform(np.concatenate([tone(5), gap(0.5), tone(5)]), sr)).samples.size
        == int(10.5 * sr),
    }
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(1000):
        s = rng.normal(size=int(rng.integers(16, 2000))) * rng.uniform(1e-3, 1.0)
        noise = rng.normal(size=int(rng.integers(8, 3000))) * rng.uniform(1e-3, 10.0)
        snr = float(rng.uniform(-5, 25))
        mixed = mix_noise(Waveform(s, 1000), Waveform(noise, 1000), SnrSpec(snr, seed=int(rng.integers(1 << 30))),
                          clamp=False)
        worst = max(worst, abs(10 * math.log10(power(s) / power(mixed.samples - s)) - snr))
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and worst < 1e-6
    record_criterion(7, "preprocessing arithmetic", ok,
                     f"{len(checks) - len(failed)}/{len(checks)} chunk/gap examples, SNR fuzz max err {worst:.1e} dB")
    assert ok, failed


# ------------------------------------------------------------------ 8

def test_inference_linearity(record_criterion):
    params = RefinerParams.init(TrainConfig().refiner(), seed=0)
    rng = np.random.default_rng(0)
    sizes = np.array([8, 64, 512])
    times = []
    for n in sizes:
        seq = rng.normal(size=(n, 64))
        embed_single(seq, "audio", params)  # warm-up
        reps = 5 if n < 512 else 3
        best = min(_timed(lambda: embed_single(seq, "audio", params)) for _ in range(reps))
        times.append(best)
    times = np.array(times)
    design = np.stack([np.ones(3), sizes], axis=1)
    coef, *_ = np.linalg.lstsq(design, times, rcond=None)
    residual = (times - design @ coef) / times
    worst = float(np.max(np.abs(residual)))
    ok = worst < 0.3
    record_criterion(8, "inference linearity", ok,
                     "times " + ", ".join(f"n={n}: {t * 1e3:.2f} ms" for n, t in zip(sizes, times))
                     + f"; linear-fit max relative residual {worst:.0%} (< 30%)")
    assert ok


def _timed(fn):
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


# ------------------------------------------------------------------ 9

def test_determinism(record_criterion):
    data = default_synthetic()
    cfg = TrainConfig(max_epochs=20)
    a, b = train(cfg, data), train(cfg, data)
    same_ckpt = a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    same_logs = (csv_text(STEP_LOG_HEADER, a.step_log) == csv_text(STEP_LOG_HEADER, b.step_log)
                 and csv_text(EPOCH_LOG_HEADER, a.epoch_log) == csv_text(EPOCH_LOG_HEADER, b.epoch_log))
    vecs = np.random.default_rng(9).normal(size=(50, 32)).astype(np.float32)
    ids, back = decode_embeddings(encode_embeddings(list(range(100, 150)), vecs))
    round_trip = np.array_equal(back, vecs) and ids.tolist() == list(range(100, 150))
    ok = same_ckpt and same_logs and round_trip
    record_criterion(9, "determinism", ok,
                     f"checkpoints identical: {same_ckpt}, logs identical: {same_logs} "
                     f"({len(a.step_log)} steps), AEMB f32 round trip: {round_trip}")
    assert ok


# ----------------------------------------------------------------- 10

def test_baselines(record_criterion):
    corpus = [TextDoc("A", "rain falls on the roof"), TextDoc("B", "heavy rain rain"),
              TextDoc("C", "dog barks loudly outside tonight")]
    idf = math.log((3 - 2 + 0.5) / (2 + 0.5) + 1)
    norm = 1.2 * (1 - 0.75 + 0.75 * 3 / (11 / 3))
    expected = np.array([idf * 2.2 / (1 + norm), idf * 2 * 2.2 / (2 + norm), 0.0])
    bm25_err = float(np.max(np.abs(BM25Index(corpus).scores(TextDoc("q", "rain")) - expected)))
    lexical = lexical_search(TextDoc("q", "rain sounds"), [TextDoc("A", "rain"), TextDoc("B", "rain sounds")], 2)
    lexical_ok = lexical == [("B", 2.0), ("A", 1.0)]

    def cap(text, sim):
        return text, np.array([1.0, 0.0]), np.array([sim, math.sqrt(1 - sim * sim)])

    sims = [0.9, 0.8, 0.7, 0.6, 0.5, 0.45, 0.36] + [0.34 - 0.02 * i for i in range(13)]
    order = np.random.default_rng(1).permutation(20)
    joined, kept = filter_captions([cap(f"c{i}", sims[i]) for i in order])
    filter_ok = joined == "c0 c1 c2 c3 c4" and len(kept) == 5
    try:
        filter_captions([cap("x", 0.3), cap("y", 0.1)])
        threshold_ok = False
    except EmptyCaptionSet:
        threshold_ok = True
    ok = bm25_err < 1e-9 and lexical_ok and filter_ok and threshold_ok
    record_criterion(10, "baselines", ok,
                     f"BM25 max err {bm25_err:.1e}, lexical order {'ok' if lexical_ok else 'wrong'}, "
                     f"top-5 of 7 above 0.35 {'ok' if filter_ok else 'wrong'}, "
                     f"all-below-threshold rejected {'ok' if threshold_ok else 'no'}")
    assert ok

