import threading

import numpy as np
import pytest

from gerea.caption_engine import (CaptionCache, CaptionRecord, CaptionSet, DecodingParams, MockCaptionBackend,
                                  generate_captions, merge_caption_sets)
from gerea.data_io import Sample
from gerea.exceptions import CaptionGenerationError
from gerea.metrics import contains_answer
from gerea.region_selector import RegionSet

SAMPLE = Sample("7", "synthetic:7", "What is the man holding?", ("umbrella",))
PARAMS = DecodingParams.for_style("instructblip", min_len=3, max_len=6).deterministic()


def _regions(m=3, K=2):
    return RegionSet([tuple(range(2 * i, 2 * i + K)) for i in range(m)], seed=0, K=K, m=m)


def test_decoding_defaults():
    ib, lv = DecodingParams.for_style("instructblip"), DecodingParams.for_style("llava")
    assert (ib.num_beams, ib.top_p, ib.temperature, ib.min_len, ib.max_len) == (5, 0.9, 1.0, 10, 25)
    assert (lv.min_len, lv.max_len) == (1, 32)
    assert ib.do_sample and not ib.deterministic().do_sample
    with pytest.raises(ValueError):
        DecodingParams(top_p=0)
    with pytest.raises(ValueError):
        DecodingParams(min_len=5, max_len=4)


def test_sampling_knobs_do_not_change_deterministic_hash():
    a = DecodingParams(top_p=0.5).deterministic()
    b = DecodingParams(top_p=0.9, temperature=2.0).deterministic()
    assert a.params_hash() == b.params_hash()
    assert DecodingParams(top_p=0.5).params_hash() != DecodingParams().params_hash()


def test_grid_is_region_major():
    cs = generate_captions(SAMPLE, _regions(), ["p1", "p2"], MockCaptionBackend(), PARAMS)
    assert [(c.region_index, c.template_id) for c in cs.captions] == [(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2)]
    cs.check_complete(3, 2)
    with pytest.raises(ValueError):
        cs.check_complete(2, 3)
    assert all(3 <= len(t.split()) <= 6 for t in cs.texts())


def test_mock_backend_is_pure_and_order_free():
    r = _regions()
    a = generate_captions(SAMPLE, r, ["p1", "p2"], MockCaptionBackend(seed=1), PARAMS).texts()
    shuffled = RegionSet([tuple(reversed(x)) for x in r.regions], seed=0, K=2, m=3)
    b = generate_captions(SAMPLE, shuffled, ["p1", "p2"], MockCaptionBackend(seed=1), PARAMS).texts()
    c = generate_captions(SAMPLE, r, ["p1", "p2"], MockCaptionBackend(seed=2), PARAMS).texts()
    assert a == b and a != c


def test_mock_embedding_fraction():
    be = MockCaptionBackend.embedding_fraction(0.5, answers={"7": "umbrella"})
    r = RegionSet([(i,) for i in range(40)], seed=0, K=1, m=40)
    texts = generate_captions(SAMPLE, r, ["a", "b", "c"], be, PARAMS).texts()
    hits = sum(contains_answer(t, "umbrella") for t in texts)
    assert 30 < hits < 90
    none = generate_captions(SAMPLE, r, ["a"], MockCaptionBackend(answers={"7": "umbrella"}), PARAMS).texts()
    assert not any(contains_answer(t, "umbrella") for t in none)


def test_failures_are_retried_then_listed():
    attempts = {}

    def flaky(sid, ri, tid):
        attempts[(ri, tid)] = attempts.get((ri, tid), 0) + 1
        return ri == 1 or (ri == 0 and attempts[(ri, tid)] == 1)

    be = MockCaptionBackend(fail=flaky)
    with pytest.raises(CaptionGenerationError) as err:
        generate_captions(SAMPLE, _regions(), ["p1", "p2"], be, PARAMS)
    msg = str(err.value)
    assert "sample 7" in msg and "(region=1, template=1)" in msg and "(region=1, template=2)" in msg
    assert sorted((f[0], f[1]) for f in err.value.failures) == [(1, 1), (1, 2)]
    assert all(f[2] == 4 for f in err.value.failures)


def test_retry_success_is_recorded():
    seen = set()

    def once(sid, ri, tid):
        if (ri, tid) in seen:
            return False
        seen.add((ri, tid))
        return True

    cs = generate_captions(SAMPLE, _regions(1), ["p1"], MockCaptionBackend(fail=once), PARAMS)
    assert len(cs) == 1 and cs.errors[0][:3] == (0, 1, 2)


def test_blank_captions_count_as_failures():
    class Blank(MockCaptionBackend):
        def generate(self, *a, **k):
            return "   "

    with pytest.raises(CaptionGenerationError):
        generate_captions(SAMPLE, _regions(1), ["p"], Blank(), PARAMS)


def test_cache_persists_and_keys_on_context(tmp_path):
    path = tmp_path / "c.jsonl"
    be = MockCaptionBackend()
    first = generate_captions(SAMPLE, _regions(), ["p1", "p2"], be, PARAMS, CaptionCache(path))
    assert be.calls == 6
    be2 = MockCaptionBackend()
    cache = CaptionCache(path)
    assert len(cache) == 6
    again = generate_captions(SAMPLE, _regions(), ["p1", "p2"], be2, PARAMS, cache)
    assert be2.calls == 0 and again.texts() == first.texts()
    other = Sample("7", "synthetic:7", "What is the woman holding?", ("umbrella",))
    generate_captions(other, _regions(), ["p1", "p2"], be2, PARAMS, cache)
    assert be2.calls == 6
    k1 = CaptionCache.key("b", "img", "q", (3, 1), 1, "h")
    assert k1 == CaptionCache.key("b", "img", "q", (1, 3), 1, "h")
    assert k1 != CaptionCache.key("b", "img", "q", (1, 3), 2, "h")


def test_cache_is_thread_safe(tmp_path):
    cache = CaptionCache(tmp_path / "c.jsonl")

    def work(i):
        for j in range(200):
            cache.put(f"{i}-{j}", "x")

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    cache.flush()
    assert len(CaptionCache(tmp_path / "c.jsonl")) == 800


def _set(bid, n):
    return CaptionSet("1", [CaptionRecord(f"{bid} {i}", i, 1, bid) for i in range(n)])


def test_merge_budgets():
    a, b = _set("x", 5), _set("y", 5)
    assert merge_caption_sets([a, b], [3, 1]).texts() == ["x 0", "x 1", "x 2", "y 0"]
    assert len(merge_caption_sets([b, a], {"x": 2, "y": 0})) == 2
    with pytest.raises(ValueError):
        merge_caption_sets([a], [6])
    with pytest.raises(ValueError):
        merge_caption_sets([a, b], {"x": 1})
    with pytest.raises(ValueError):
        merge_caption_sets([a, CaptionSet("2", [])], [1, 0])


def test_record_line_round_trip():
    rec = CaptionRecord("a cat", 2, 3, "b", (1, 4), "prompt", "h")
    assert CaptionRecord.from_line(rec.to_line("9")) == rec
    assert rec.to_line("9")["sample_id"] == "9"


def test_empty_prompt_list_rejected():
    with pytest.raises(ValueError):
        generate_captions(SAMPLE, _regions(), [], MockCaptionBackend(), PARAMS)


def test_mock_zero_shot_rate():
    answers = {str(i): "tea" for i in range(400)}
    be = MockCaptionBackend(answers=answers, zero_shot_accuracy=0.25)
    hits = np.mean([be.answer("x", "q", PARAMS, sample_id=str(i)) == "tea" for i in range(400)])
    assert 0.15 < hits < 0.35
