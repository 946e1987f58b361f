"""Multi-response preference records: loading, views and a synthetic corpus.

Records are stored as JSON lines::

    {"prompt": "...", "responses": [{"text": "...", "score": 7.5}, ...]}

with raw scores in [1, 10].  Normalized scores are ``raw / 10``.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCORE_MIN, SCORE_MAX = 1.0, 10.0
SCORER_VERSION = "edit-similarity-v1"


class DataError(ValueError):
    """One or more input lines failed validation; ``errors`` holds (line, message) pairs."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        lines = "; ".join(f"line {n}: {msg}" for n, msg in errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        super().__init__(f"{len(errors)} invalid record(s): {lines}{more}")


@dataclass(frozen=True)
class ResponseEntry:
    text: str
    raw_score: float

    @property
    def norm_score(self) -> float:
        return self.raw_score / 10.0


@dataclass
class PreferenceRecord:
    prompt: str
    responses: list[ResponseEntry]

    @property
    def scores(self) -> list[float]:
        return [r.raw_score for r in self.responses]

    def to_json(self) -> dict:
        return {"prompt": self.prompt,
                "responses": [{"text": r.text, "score": r.raw_score} for r in self.responses]}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible random stream derived from a run seed and a stream name."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# -- loading --------------------------------------------------------------------

def parse_record(obj) -> PreferenceRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    for key in ("prompt", "responses"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    if not isinstance(obj["prompt"], str):
        raise ValueError("prompt must be a string")
    responses = obj["responses"]
    if not isinstance(responses, list) or not responses:
        raise ValueError("responses must be a non-empty list")
    entries = []
    for i, r in enumerate(responses):
        if not isinstance(r, dict) or "text" not in r or "score" not in r:
            raise ValueError(f"response {i}: missing field 'text' or 'score'")
        if not isinstance(r["text"], str):
            raise ValueError(f"response {i}: text must be a string")
        score = r["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
            raise ValueError(f"response {i}: score must be a finite number")
        if not SCORE_MIN <= score <= SCORE_MAX:
            raise ValueError(f"response {i}: score out of range [1, 10]: {score}")
        entries.append(ResponseEntry(r["text"], float(score)))
    return PreferenceRecord(obj["prompt"], entries)


def read_records(path: str | Path) -> tuple[list[PreferenceRecord], list[tuple[int, str]]]:
    """Parse a JSONL file, returning valid records and (line number, message) for bad lines."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"invalid JSON: {exc.msg}"))
            except ValueError as exc:
                errors.append((lineno, str(exc)))
    return records, errors


def load_records(path: str | Path) -> list[PreferenceRecord]:
    records, errors = read_records(path)
    if errors:
        raise DataError(errors)
    return records


def write_records(path: str | Path, records: Iterable[PreferenceRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


# -- training views ---------------------------------------------------------------

def expand_pointwise(records: Iterable[PreferenceRecord]) -> list[tuple[str, ResponseEntry]]:
    return [(rec.prompt, r) for rec in records for r in rec.responses]


def top_and_rest(scores: Sequence[float]) -> tuple[int, list[int]] | None:
    """Lowest-index top-scored response and every strictly lower-scored one.

    Returns None when no response scores below the top (nothing to reject).
    """
    best = max(scores)
    chosen = list(scores).index(best)
    rejected = [i for i, s in enumerate(scores) if s < best]
    return (chosen, rejected) if rejected else None


def oriented_pairs(scores: Sequence[float]) -> list[tuple[int, int]]:
    """All index pairs with distinct scores, higher-scored first, in (i, j) order."""
    pairs = []
    for i in range(len(scores)):
        for j in range(i + 1, len(scores)):
            if scores[i] > scores[j]:
                pairs.append((i, j))
            elif scores[j] > scores[i]:
                pairs.append((j, i))
    return pairs


def descending_order(scores: Sequence[float]) -> list[int]:
    """Indices sorted by score, highest first; ties keep their original order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def build_mn_view(record: PreferenceRecord) -> tuple[int, list[int]] | None:
    if len(record.responses) < 2:
        logger.warning("skipping record %r: fewer than two responses", record.prompt[:40])
        return None
    view = top_and_rest(record.scores)
    if view is None:
        logger.warning("skipping record %r: all scores are equal", record.prompt[:40])
    return view


def build_mc_view(record: PreferenceRecord) -> list[tuple[int, int]]:
    return oriented_pairs(record.scores)


def build_list_view(record: PreferenceRecord) -> list[int]:
    return descending_order(record.scores)


# -- synthetic corpus ----------------------------------------------------------------

WORDS = (
    "the a small red blue green quick slow old new river stone bird tree cloud light "
    "house road field song wind rain sun moon star boat hill lake door book hand "
    "runs sees holds finds makes keeps takes gives brings reads over under near into "
    "with from before after"
).split()
PROMPT_VERBS = ("describe", "explain", "summarize", "tell me about", "write about")
NOISE_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 .,;:!?-'"


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class GroundTruthScorer:
    """Scores a response by normalized edit similarity to the prompt's reference answer."""

    references: dict[str, str] = field(default_factory=dict)
    version: str = SCORER_VERSION

    def similarity(self, prompt: str, response: str) -> float:
        ref = self.references[prompt]
        longest = max(len(ref), len(response), 1)
        return 1.0 - levenshtein(ref, response) / longest

    def score(self, prompt: str, response: str) -> float:
        return round(SCORE_MIN + (SCORE_MAX - SCORE_MIN) * self.similarity(prompt, response), 1)


def corrupt(text: str, rate: float, rng: np.random.Generator) -> str:
    """Apply substitutions, deletions and insertions, each position hit with probability ``rate``."""
    out = []
    for ch in text:
        if rng.random() >= rate:
            out.append(ch)
            continue
        op = rng.integers(3)
        if op == 0:
            choices = [c for c in NOISE_ALPHABET if c != ch]
            out.append(choices[rng.integers(len(choices))])
        elif op == 2:
            out.append(ch)
            out.append(NOISE_ALPHABET[rng.integers(len(NOISE_ALPHABET))])
    result = "".join(out)
    if result == text:
        i = int(rng.integers(len(text)))
        sub = "#" if text[i] != "#" else "%"
        result = text[:i] + sub + text[i + 1:]
    return result


def generate_synthetic(num_prompts: int, responses_per_prompt: int, noise: float = 0.0,
                       seed: int = 0, max_rate: float = 0.5,
                       ) -> tuple[list[PreferenceRecord], GroundTruthScorer]:
    """Build prompts with one reference answer each and graded corruptions of it.

    Response 0 of every prompt (before shuffling) is the exact reference; the
    others are corrupted at increasing rates up to ``max_rate``.  A single
    response per prompt is allowed, though pair and list views will skip it.  Scores come
    from the scorer, perturbed by uniform noise in ``[-noise, noise]`` and
    clamped to [1, 10].
    """
    if num_prompts < 1:
        raise ValueError(f"num_prompts must be >= 1, got {num_prompts}")
    if responses_per_prompt < 1:
        raise ValueError(f"responses_per_prompt must be >= 1, got {responses_per_prompt}")
    if noise < 0 or not 0 < max_rate <= 1:
        raise ValueError("noise must be >= 0 and max_rate in (0, 1]")
    rng = rng_stream(seed, "data")
    scorer = GroundTruthScorer()
    k = responses_per_prompt
    step = max_rate / max(k - 1, 1)
    records = []
    for n in range(num_prompts):
        topic = " ".join(rng.choice(WORDS, 2))
        prompt = f"{PROMPT_VERBS[n % len(PROMPT_VERBS)]} {topic} #{n}"
        reference = " ".join(rng.choice(WORDS, int(rng.integers(4, 8)))) + "."
        scorer.references[prompt] = reference
        texts = [reference]
        for j in range(1, k):
            rate = float(np.clip(j * step + rng.uniform(-step / 3, step / 3), 0.02, 1.0))
            texts.append(corrupt(reference, rate, rng))
        order = rng.permutation(k)
        entries = []
        for j in order:
            raw = scorer.score(prompt, texts[j])
            if noise > 0:
                raw = round(float(np.clip(raw + rng.uniform(-noise, noise), SCORE_MIN, SCORE_MAX)), 1)
            entries.append(ResponseEntry(texts[j], raw))
        records.append(PreferenceRecord(prompt, entries))
    return records, scorer


def corpus_manifest(num_prompts: int, responses_per_prompt: int, noise: float, seed: int) -> dict:
    return {"seed": seed, "noise": noise, "num_prompts": num_prompts,
            "responses_per_prompt": responses_per_prompt, "scorer_version": SCORER_VERSION}


def write_corpus(path: str | Path, records: Sequence[PreferenceRecord], manifest: dict) -> Path:
    """Write the JSONL corpus and its sidecar manifest; returns the manifest path."""
    path = Path(path)
    write_records(path, records)
    sidecar = path.with_suffix(".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar
