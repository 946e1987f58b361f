"""Training loop, per-step diagnostics and ranking evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import losses as L
from .data import PreferenceRecord, descending_order, oriented_pairs, rng_stream, top_and_rest
from .model import (ModelConfig, PolicyModel, TokenSequence, Vocab, avg_likelihoods,
                    build_model, sequence_logprobs)

logger = logging.getLogger(__name__)

DEFAULT_LR = {"bigram": 1e-2, "mlp": 1e-3, "transformer1": 1e-3}
METRIC_COLUMNS = ("step", "loss", "p_chosen_mean", "p_rejected_mean", "margin", "lr")
COMPARISON_COLUMNS = ("variant", "final_loss", "final_margin", "top1_acc", "concordance")
FLUSH_EVERY = 100
SMOOTH_WINDOW = 50
TIE_RTOL = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "pair-mnm"
    learning_rate: float | None = None
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    arch: str = "bigram"
    embed_dim: int = 16
    hidden_dim: int = 64
    window: int = 8
    context_length: int = 256
    dpo_beta: float | None = None

    def __post_init__(self):
        L.check_variant(self.variant)
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR.get(self.arch, 1e-3)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if (self.variant == "dpo") != (self.dpo_beta is not None):
            raise ValueError("dpo_beta must be given for the dpo variant and only for it")
        if self.dpo_beta is not None and not self.dpo_beta > 0:
            raise ValueError(f"dpo_beta must be positive, got {self.dpo_beta}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(arch=self.arch, vocab_size=vocab_size, embed_dim=self.embed_dim,
                           hidden_dim=self.hidden_dim, window=self.window,
                           context_length=self.context_length)


# -- optimizers -------------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[ad.Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.values -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam(SGD):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics ----------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    loss: float
    p_chosen_mean: float
    p_rejected_mean: float
    margin: float
    lr: float
    p_rejected_slots: tuple[float, ...] = ()


@dataclass
class LikelihoodSummary:
    """Corpus-wide mean rewards of chosen and rejected responses."""

    p_chosen_mean: float
    p_rejected_mean: float
    p_rejected_slots: tuple[float, ...]

    @property
    def margin(self) -> float:
        return self.p_chosen_mean - self.p_rejected_mean


@dataclass
class MetricsLog:
    n_slots: int
    rows: list[MetricsRow] = field(default_factory=list)
    initial: LikelihoodSummary | None = None
    final: LikelihoodSummary | None = None

    @property
    def columns(self) -> tuple[str, ...]:
        return METRIC_COLUMNS + tuple(f"p_rejected_{i + 1}" for i in range(self.n_slots))

    def as_row(self, r: MetricsRow) -> list:
        return [r.step, r.loss, r.p_chosen_mean, r.p_rejected_mean, r.margin, r.lr,
                *r.p_rejected_slots]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            w.writerows(self.as_row(r) for r in self.rows)

    def smoothed_loss(self, end: bool = True, window: int = SMOOTH_WINDOW) -> float:
        chunk = self.rows[-window:] if end else self.rows[:window]
        return float(np.mean([r.loss for r in chunk]))


# -- prepared dataset -------------------------------------------------------------

def corpus_vocab(records: Sequence[PreferenceRecord]) -> Vocab:
    return Vocab.from_texts([r.prompt for r in records] + [e.text for r in records for e in r.responses])


@dataclass
class _Prepared:
    records: list[PreferenceRecord]
    seqs: list[list[TokenSequence]]
    mn: list[tuple[int, list[int]] | None]
    usable: list[int]
    skipped: int


def _usable(variant: str, rec: PreferenceRecord, mn) -> bool:
    if variant.startswith("point"):
        return True
    if variant == "list-mle":
        return len(rec.responses) >= 2
    if variant in ("pair-mcs", "pair-mcm"):
        return bool(oriented_pairs(rec.scores))
    return mn is not None


def _prepare(records: Sequence[PreferenceRecord], vocab: Vocab, variant: str) -> _Prepared:
    records = list(records)
    seqs = [[vocab.sequence(r.prompt, e.text) for e in r.responses] for r in records]
    mn = []
    for r in records:
        view = top_and_rest(r.scores) if len(r.responses) >= 2 else None
        if view is not None:
            # rejected slots ordered best-first, for per-slot diagnostics
            view = (view[0], sorted(view[1], key=lambda i: -r.scores[i]))
        mn.append(view)
    usable = [i for i, r in enumerate(records) if _usable(variant, r, mn[i])]
    skipped = len(records) - len(usable)
    if skipped:
        few = sum(len(records[i].responses) < 2 for i in set(range(len(records))) - set(usable))
        logger.warning("%s: skipping %d of %d records (%d with fewer than two responses, "
                       "%d without distinct scores)", variant, skipped, len(records), few, skipped - few)
    return _Prepared(records, seqs, mn, usable, skipped)


def _slot_means(p_values: Sequence[np.ndarray], views, n_slots: int):
    """Chosen/rejected means over the records that have a chosen-vs-rejected view."""
    chosen, rejected, slots = [], [], [[] for _ in range(n_slots)]
    for p, view in zip(p_values, views):
        if view is None:
            continue
        c, rej = view
        chosen.append(p[c])
        rejected.append(float(np.mean(p[rej])))
        for k, i in enumerate(rej):
            slots[k].append(p[i])
    if not chosen:
        return None
    return (float(np.mean(chosen)), float(np.mean(rejected)),
            tuple(float(np.mean(s)) if s else math.nan for s in slots))


def summarize(model: PolicyModel, records: Sequence[PreferenceRecord],
              vocab: Vocab | None = None) -> LikelihoodSummary:
    """Mean chosen and rejected rewards over every record with a strict top response."""
    vocab = vocab or model.vocab
    prep = _prepare(records, vocab, "pair-mnm")
    n_slots = max((len(v[1]) for v in prep.mn if v), default=0)
    p_values = _record_rewards(model, prep.seqs)
    means = _slot_means(p_values, prep.mn, n_slots)
    if means is None:
        raise ValueError("no record has a response scored strictly above another")
    return LikelihoodSummary(*means)


def _record_rewards(model: PolicyModel, seqs: list[list[TokenSequence]]) -> list[np.ndarray]:
    with ad.no_grad():
        flat = avg_likelihoods(model, [s for group in seqs for s in group]).values
    cuts = np.cumsum([len(g) for g in seqs])[:-1]
    return np.split(flat, cuts)


# -- training ---------------------------------------------------------------------

class _Batches:
    """Epoch-shuffled record order; pair-single/dpo negatives are redrawn every epoch."""

    def __init__(self, prep: _Prepared, seed: int, needs_negative: bool):
        self.prep = prep
        self.rng = rng_stream(seed, "shuffle")
        self.needs_negative = needs_negative
        self.queue: list[int] = []
        self.negative: dict[int, int] = {}

    def _new_epoch(self) -> None:
        self.queue = [self.prep.usable[i] for i in self.rng.permutation(len(self.prep.usable))]
        if self.needs_negative:
            self.negative = {i: int(self.rng.choice(self.prep.mn[i][1])) for i in self.queue}

    def next(self, size: int) -> list[tuple[int, int | None]]:
        out = []
        while len(out) < size:
            if not self.queue:
                self._new_epoch()
            i = self.queue.pop(0)
            out.append((i, self.negative.get(i)))
        return out


def _record_loss(variant: str, rec: PreferenceRecord, view, neg, p, logp, ref, beta):
    if variant == "pair-single":
        return L.pair_single(ad.take(p, view[0]), ad.take(p, neg))
    if variant == "pair-mns":
        return L.pair_mns(ad.take(p, view[0]), ad.take(p, view[1]))
    if variant == "pair-mnm":
        return L.pair_mnm(ad.take(p, view[0]), ad.take(p, view[1]))
    if variant == "pair-mcs":
        return L.pair_mcs(p, rec.scores)
    if variant == "pair-mcm":
        return L.pair_mcm(p, rec.scores)
    if variant == "list-mle":
        return L.list_mle(ad.take(p, descending_order(rec.scores)))
    if variant == "dpo":
        c = view[0]
        return L.dpo(ad.take(logp, c), ad.take(logp, neg), ref[c], ref[neg], beta)
    raise ValueError(f"no per-record loss for {variant!r}")


def train(config: TrainConfig, records: Sequence[PreferenceRecord], vocab: Vocab | None = None,
          csv_path: str | Path | None = None) -> tuple[PolicyModel, MetricsLog]:
    """Optimize a fresh policy on ``records`` with the configured objective.

    Each step draws ``batch_size`` records, evaluates the rewards of all their
    responses, averages the per-record losses and takes one optimizer step.
    Logged likelihoods come from the same batch; ``log.initial`` and
    ``log.final`` hold corpus-wide summaries before and after training.
    """
    vocab = vocab or corpus_vocab(records)
    prep = _prepare(records, vocab, config.variant)
    if not prep.usable:
        raise ValueError(f"no record satisfies the {config.variant} view (skipped {prep.skipped})")

    model = build_model(config.model_config(len(vocab)), rng_stream(config.seed, "init"), vocab)
    params = model.parameters()
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)

    ref_logps = None
    if config.variant == "dpo":
        reference = model.copy()
        with ad.no_grad():
            ref_logps = {i: sequence_logprobs(reference, prep.seqs[i]).values for i in prep.usable}

    n_slots = max((len(v[1]) for v in prep.mn if v), default=0)
    log = MetricsLog(n_slots)
    if any(v is not None for v in prep.mn):
        log.initial = LikelihoodSummary(*_slot_means(_record_rewards(model, prep.seqs), prep.mn, n_slots))
    last = (log.initial.p_chosen_mean, log.initial.p_rejected_mean, log.initial.p_rejected_slots) \
        if log.initial else (math.nan, math.nan, ())

    batches = _Batches(prep, config.seed, config.variant in ("pair-single", "dpo"))
    writer = _CsvStream(csv_path, log.columns) if csv_path is not None else None
    try:
        for step in range(1, config.steps + 1):
            batch = batches.next(config.batch_size)
            seqs = [s for i, _ in batch for s in prep.seqs[i]]
            sizes = [len(prep.seqs[i]) for i, _ in batch]
            with ad.Tape():
                logp_all = sequence_logprobs(model, seqs)
                lengths = np.array([len(s.response_ids) for s in seqs], dtype=np.float64)
                p_all = ad.exp(logp_all * (1.0 / lengths))
                loss, per_record = _batch_loss(config, prep, batch, sizes, p_all, logp_all, ref_logps)
                if not math.isfinite(loss.item()):
                    bad = next((i for (i, _), v in zip(batch, per_record) if not math.isfinite(v)),
                               batch[0][0])
                    raise TrainingError(f"non-finite loss at step {step} (record {bad})")
                ad.backward(loss)
            opt.step()
            opt.zero_grad()

            p_values = np.split(p_all.values, np.cumsum(sizes)[:-1])
            means = _slot_means(p_values, [prep.mn[i] for i, _ in batch], n_slots)
            if means is not None:
                slots = tuple(m if not math.isnan(m) else last[2][k] for k, m in enumerate(means[2]))
                last = (means[0], means[1], slots)
            row = MetricsRow(step, loss.item(), last[0], last[1], last[0] - last[1],
                             config.learning_rate, last[2])
            log.rows.append(row)
            if writer:
                writer.write(log.as_row(row), flush=step % FLUSH_EVERY == 0)
    finally:
        if writer:
            writer.close()

    if log.initial is not None:
        log.final = LikelihoodSummary(*_slot_means(_record_rewards(model, prep.seqs), prep.mn, n_slots))
    return model, log


def _batch_loss(config, prep, batch, sizes, p_all, logp_all, ref_logps):
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    if config.variant.startswith("point"):
        scores = np.array([e.norm_score for i, _ in batch for e in prep.records[i].responses])
        fn = L.point_ce if config.variant == "point-ce" else L.point_mse
        loss = fn(p_all, scores)
        return loss, [loss.item()] * len(batch)
    terms = []
    for (i, neg), off, k in zip(batch, offsets, sizes):
        idx = np.arange(off, off + k)
        p = ad.take(p_all, idx)
        logp = ad.take(logp_all, idx) if ref_logps is not None else None
        terms.append(_record_loss(config.variant, prep.records[i], prep.mn[i], neg, p, logp,
                                  ref_logps[i] if ref_logps is not None else None, config.dpo_beta))
    stacked = ad.stack([t.reshape(()) for t in terms])
    return ad.mean(stacked), list(stacked.values)


class _CsvStream:
    def __init__(self, path, columns):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(columns)

    def write(self, row, flush: bool) -> None:
        self.w.writerow(row)
        if flush:
            self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# -- evaluation -------------------------------------------------------------------

@dataclass
class RankingReport:
    top1_accuracy: float
    concordance: float
    n_records: int
    n_skipped: int
    chance: float

    def chance_interval(self, level: float = 0.99) -> tuple[float, float]:
        """Binomial interval for top-1 accuracy of a policy that picks uniformly at random."""
        lo, hi = stats.binom.interval(level, self.n_records, self.chance)
        return lo / self.n_records, hi / self.n_records

    def to_dict(self) -> dict:
        return asdict(self)


def ranking_from_rewards(p_values: Sequence[Sequence[float]],
                         scores: Sequence[Sequence[float]]) -> RankingReport:
    """Top-1 accuracy and pairwise concordance between rewards and scores.

    Records without a unique top score are skipped.  When several responses
    share the highest reward, the record earns 1/k top-1 credit, the expected
    value of a random tie-break; tied rewards count half in concordance.
    Rewards within ``TIE_RTOL`` of each other are tied, so rounding in the
    log-space mean cannot break ties by response length.
    """
    top1, chance, agree, pairs, n, skipped = 0.0, 0.0, 0.0, 0, 0, 0
    for p, s in zip(p_values, scores):
        p, s = np.asarray(p, dtype=float), np.asarray(s, dtype=float)
        if len(s) < 2 or np.sum(s == s.max()) != 1:
            skipped += 1
            continue
        n += 1
        best = p >= p.max() * (1.0 - TIE_RTOL)
        top1 += best[int(s.argmax())] / best.sum()
        chance += 1.0 / len(s)
        for w, l in oriented_pairs(list(s)):
            pairs += 1
            if abs(p[w] - p[l]) <= TIE_RTOL * max(p[w], p[l]):
                agree += 0.5
            elif p[w] > p[l]:
                agree += 1.0
    if n == 0:
        raise ValueError("no evaluable record (each needs >= 2 responses and a unique top score)")
    return RankingReport(top1 / n, agree / pairs, n, skipped, chance / n)


def eval_ranking(model: PolicyModel, records: Sequence[PreferenceRecord],
                 vocab: Vocab | None = None) -> RankingReport:
    vocab = vocab or model.vocab
    if vocab is None:
        raise ValueError("a vocabulary is required to tokenize the records")
    seqs = [[vocab.sequence(r.prompt, e.text) for e in r.responses] for r in records]
    return ranking_from_rewards(_record_rewards(model, seqs), [r.scores for r in records])


# -- variant comparison -----------------------------------------------------------

def compare_variants(configs: Sequence[TrainConfig], records: Sequence[PreferenceRecord],
                     csv_path: str | Path | None = None) -> list[dict]:
    if len({c.seed for c in configs}) > 1:
        raise ValueError("all configurations must share one seed")
    vocab = corpus_vocab(records)
    rows = []
    for cfg in configs:
        model, log = train(cfg, records, vocab)
        report = eval_ranking(model, records, vocab)
        rows.append({
            "variant": cfg.variant,
            "final_loss": log.smoothed_loss(),
            "final_margin": log.final.margin if log.final else math.nan,
            "top1_acc": report.top1_accuracy,
            "concordance": report.concordance,
        })
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, COMPARISON_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def variant_configs(base: TrainConfig, variants: Sequence[str] = L.MPPO_VARIANTS,
                    dpo_beta: float = 0.1) -> list[TrainConfig]:
    return [replace(base, variant=v, dpo_beta=dpo_beta if v == "dpo" else None) for v in variants]
