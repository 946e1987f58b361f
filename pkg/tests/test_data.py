import hashlib
import itertools
import json
import logging

import numpy as np
import pytest

from mppo.data import (
    DataError, PreferenceRecord, ResponseEntry, build_list_view, build_mc_view, build_mn_view,
    expand_pointwise, generate_synthetic, levenshtein, load_records, read_records, write_corpus,
    write_records, corpus_manifest,
)


def record(*scores):
    return PreferenceRecord("q", [ResponseEntry(f"r{i}", float(s)) for i, s in enumerate(scores)])


def line(scores, prompt="q"):
    return json.dumps({"prompt": prompt, "responses": [{"text": f"r{i}", "score": s}
                                                      for i, s in enumerate(scores)]})


class TestLoader:
    def test_valid_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(line([9, 7, 4, 2]) + "\n")
        recs = load_records(path)
        assert len(recs) == 1 and len(recs[0].responses) == 4
        assert recs[0].responses[0].norm_score == 0.9

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        assert load_records(path) == []

    def test_out_of_range_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(line([9, 7]) + "\n" + line([11, 3]) + "\n")
        recs, errors = read_records(path)
        assert len(recs) == 1
        assert errors[0][0] == 2 and "score out of range" in errors[0][1]
        with pytest.raises(DataError, match="line 2: .*score out of range"):
            load_records(path)

    @pytest.mark.parametrize("text,msg", [
        ("{not json", "invalid JSON"),
        ('{"prompt": "q"}', "missing field 'responses'"),
        ('{"prompt": "q", "responses": []}', "non-empty"),
        ('{"prompt": "q", "responses": [{"text": "a"}]}', "missing field"),
        ('{"prompt": "q", "responses": [{"text": "a", "score": "high"}]}', "finite number"),
        ('[1, 2]', "JSON object"),
    ])
    def test_malformed(self, tmp_path, text, msg):
        path = tmp_path / "d.jsonl"
        path.write_text(line([5, 3]) + "\n" + text + "\n")
        _, errors = read_records(path)
        assert errors[0][0] == 2 and msg in errors[0][1]

    def test_normalization_is_exact(self):
        for raw in np.arange(1.0, 10.05, 0.1):
            raw = round(float(raw), 1)
            assert ResponseEntry("x", raw).norm_score == raw / 10

    def test_write_then_read(self, tmp_path, small_corpus):
        path = tmp_path / "d.jsonl"
        write_records(path, small_corpus)
        assert [r.to_json() for r in load_records(path)] == [r.to_json() for r in small_corpus]


class TestViews:
    def test_pointwise_counts(self):
        assert len(expand_pointwise([record(9, 7, 4, 2)] * 10)) == 40
        assert len(expand_pointwise([record(5)])) == 1

    def test_pointwise_full_scale_count(self):
        recs = [record(9, 7, 4, 2)] * 64_000
        assert len(expand_pointwise(recs)) == 256_000

    def test_mn(self):
        assert build_mn_view(record(9, 7, 4, 2)) == (0, [1, 2, 3])
        assert build_mn_view(record(9, 9, 7, 2)) == (0, [2, 3])

    def test_mn_skips_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert build_mn_view(record(5, 5, 5)) is None
            assert build_mn_view(record(5)) is None
        assert "all scores are equal" in caplog.text and "fewer than two" in caplog.text

    def test_mc(self):
        assert len(build_mc_view(record(9, 7, 4, 2))) == 6
        assert build_mc_view(record(3, 8)) == [(1, 0)]
        assert build_mc_view(record(8, 8, 3)) == [(0, 2), (1, 2)]

    def test_mc_brute_force(self):
        # every score assignment over a small grid, for lists of 2..6 items
        for n in range(2, 7):
            for scores in itertools.product([1, 2, 3], repeat=n) if n <= 5 else [(1, 2, 3, 3, 2, 1), (4, 5, 6, 1, 2, 3)]:
                expected = {(i, j) if scores[i] > scores[j] else (j, i)
                            for i, j in itertools.combinations(range(n), 2) if scores[i] != scores[j]}
                pairs = build_mc_view(record(*scores))
                assert len(pairs) == len(expected) and set(pairs) == expected

    def test_list(self):
        assert build_list_view(record(4, 9, 7, 2)) == [1, 2, 0, 3]
        assert build_list_view(record(9, 7, 4, 2)) == [0, 1, 2, 3]
        assert build_list_view(record(5, 5, 5)) == [0, 1, 2]


class TestSynthetic:
    def test_counts(self):
        recs, _ = generate_synthetic(200, 4, seed=0)
        assert len(recs) == 200
        assert sum(len(r.responses) for r in recs) == 800

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            write_records(tmp_path / f"{name}.jsonl", generate_synthetic(30, 4, noise=0.5, seed=11)[0])
        digest = [hashlib.sha256((tmp_path / f"{n}.jsonl").read_bytes()).hexdigest() for n in "ab"]
        assert digest[0] == digest[1]

    def test_seed_changes_corpus(self):
        a = generate_synthetic(5, 3, seed=1)[0]
        b = generate_synthetic(5, 3, seed=2)[0]
        assert [r.to_json() for r in a] != [r.to_json() for r in b]

    def test_reference_gets_top_score(self):
        recs, scorer = generate_synthetic(50, 4, noise=0.0, seed=2)
        for rec in recs:
            ref = scorer.references[rec.prompt]
            copies = [r for r in rec.responses if r.text == ref]
            assert len(copies) == 1
            assert copies[0].raw_score == 10.0 == max(rec.scores)
            assert all(r.raw_score < 10.0 for r in rec.responses if r.text != ref)

    def test_scores_in_range_with_noise(self):
        recs, _ = generate_synthetic(50, 5, noise=3.0, seed=4)
        assert all(1.0 <= s <= 10.0 for r in recs for s in r.scores)

    def test_single_response_allowed(self):
        recs, _ = generate_synthetic(3, 1, seed=0)
        assert all(len(r.responses) == 1 for r in recs)

    @pytest.mark.parametrize("args", [(0, 4), (5, 0), (5, 4, -1.0)])
    def test_invalid_sizes(self, args):
        with pytest.raises(ValueError):
            generate_synthetic(*args)

    def test_levenshtein(self):
        assert levenshtein("kitten", "sitting") == 3
        assert levenshtein("", "abc") == 3

    def test_sidecar(self, tmp_path):
        recs, _ = generate_synthetic(4, 2, seed=0)
        sidecar = write_corpus(tmp_path / "c.jsonl", recs, corpus_manifest(4, 2, 0.0, 0))
        assert sidecar.name == "c.manifest.json"
        meta = json.loads(sidecar.read_text())
        assert meta["seed"] == 0 and meta["scorer_version"] == "edit-similarity-v1"
