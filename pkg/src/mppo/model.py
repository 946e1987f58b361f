"""Tiny autoregressive policies and the average-likelihood reward.

Three architectures share one interface: a bigram logit table, a one-hidden-
layer MLP over a fixed window of previous tokens, and a single-block
transformer with one attention head.  All of them are teacher-forced: the
log-probability of response token ``y_i`` is conditioned on the prompt and
the gold prefix ``y_<i``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")
ARCHS = ("bigram", "mlp", "transformer1")
CHECKPOINT_MAGIC = "MPPO-CKPT"
CHECKPOINT_VERSION = 1

_MASK = -1e30


class Vocab:
    """Character vocabulary with reserved pad/bos/eos ids 0, 1, 2."""

    def __init__(self, symbols: Sequence[str]):
        if tuple(symbols[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self._split = re.compile("(" + "|".join(re.escape(r) for r in RESERVED) + ")")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> Vocab:
        chars = sorted(set("".join(texts)))
        return cls(list(RESERVED) + chars)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def encode(self, text: str) -> list[int]:
        ids = []
        for part in self._split.split(text):
            if part in RESERVED:
                ids.append(self.index[part])
                continue
            for ch in part:
                try:
                    ids.append(self.index[ch])
                except KeyError:
                    raise ValueError(f"character {ch!r} is not in the vocabulary") from None
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids)

    def sequence(self, prompt: str, response: str) -> TokenSequence:
        """Tokenize a prompt/response pair as ``<bos> prompt`` and ``response <eos>``."""
        return TokenSequence((BOS, *self.encode(prompt)), (*self.encode(response), EOS))


@dataclass(frozen=True)
class TokenSequence:
    prompt_ids: tuple[int, ...]
    response_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.response_ids:
            raise ValueError("response must contain at least one token")

    @property
    def ids(self) -> tuple[int, ...]:
        return self.prompt_ids + self.response_ids

    def __len__(self) -> int:
        return len(self.prompt_ids) + len(self.response_ids)


@dataclass
class ModelConfig:
    arch: str = "bigram"
    vocab_size: int = 0
    embed_dim: int = 16
    hidden_dim: int = 64
    window: int = 8
    context_length: int = 256
    init_scale: float = 0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.vocab_size < len(RESERVED) + 1:
            raise ValueError(f"vocab_size must exceed {len(RESERVED)}, got {self.vocab_size}")


class PolicyModel:
    """Base class: subclasses fill ``params`` and implement ``_response_logits``."""

    arch = ""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], vocab: Vocab | None = None):
        self.config = config
        self.params = params
        self.vocab = vocab

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> PolicyModel:
        params = {k: Tensor(v.values, requires_grad=v.requires_grad) for k, v in self.params.items()}
        return type(self)(self.config, params, self.vocab)

    def _check(self, seq: TokenSequence) -> None:
        if len(seq) > self.config.context_length:
            raise ValueError(
                f"sequence of {len(seq)} tokens exceeds context length {self.config.context_length}")
        ids = seq.ids
        if min(ids) < 0 or max(ids) >= self.config.vocab_size:
            raise ValueError(f"token id out of range for vocabulary of {self.config.vocab_size}")

    def response_logits(self, seqs: Sequence[TokenSequence]) -> Tensor:
        """Logit rows for every response position of every sequence, concatenated."""
        for s in seqs:
            self._check(s)
        return self._response_logits(seqs)

    def _response_logits(self, seqs: Sequence[TokenSequence]) -> Tensor:
        raise NotImplementedError


def _contexts(seq: TokenSequence) -> tuple[np.ndarray, int]:
    """Full id array (with an implicit <bos> when the prompt is empty) and the response offset."""
    prompt = seq.prompt_ids or (BOS,)
    return np.array(prompt + seq.response_ids, dtype=np.intp), len(prompt)


class BigramModel(PolicyModel):
    arch = "bigram"

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> BigramModel:
        v = config.vocab_size
        # zero logits: the untrained policy is uniform over the vocabulary
        return cls(config, {"table": Tensor(np.zeros((v, v)), requires_grad=True)})

    def _response_logits(self, seqs):
        prev = []
        for s in seqs:
            ids, off = _contexts(s)
            prev.append(ids[off - 1:-1])
        return ad.take(self.params["table"], np.concatenate(prev))


class MLPModel(PolicyModel):
    arch = "mlp"

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> MLPModel:
        v, d, h, w = config.vocab_size, config.embed_dim, config.hidden_dim, config.window
        sc = config.init_scale
        params = {
            "embed": rng.normal(0.0, sc, (v, d)),
            "w1": rng.normal(0.0, 1.0 / np.sqrt(w * d), (w * d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, sc / np.sqrt(h), (h, v)),
            "b2": np.zeros(v),
        }
        return cls(config, {k: Tensor(a, requires_grad=True) for k, a in params.items()})

    def _response_logits(self, seqs):
        w = self.config.window
        windows = []
        for s in seqs:
            ids, off = _contexts(s)
            padded = np.concatenate([np.full(w, PAD, dtype=np.intp), ids])
            # window ending just before response position j sits at padded[j : j + w]
            starts = np.arange(off, len(ids))
            windows.append(padded[starts[:, None] + np.arange(w)])
        windows = np.concatenate(windows)
        p = self.params
        x = ad.take(p["embed"], windows).reshape(len(windows), w * self.config.embed_dim)
        hidden = ad.tanh(x @ p["w1"] + p["b1"])
        return hidden @ p["w2"] + p["b2"]


class TransformerModel(PolicyModel):
    """Single block: one causal attention head plus a tanh feed-forward, both residual.

    Pad tokens are masked out as keys and do not advance positions, so left
    padding a prompt leaves every response log-probability unchanged.
    """

    arch = "transformer1"

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> TransformerModel:
        v, d, h, n = config.vocab_size, config.embed_dim, config.hidden_dim, config.context_length
        sc = config.init_scale
        params = {
            "embed": rng.normal(0.0, sc, (v, d)),
            "pos": rng.normal(0.0, sc, (n, d)),
            "wq": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "wk": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "wv": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "wo": rng.normal(0.0, sc / np.sqrt(d), (d, d)),
            "w1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, sc / np.sqrt(h), (h, d)),
            "out": rng.normal(0.0, sc / np.sqrt(d), (d, v)),
            "out_b": np.zeros(v),
        }
        return cls(config, {k: Tensor(a, requires_grad=True) for k, a in params.items()})

    def _block(self, ids: np.ndarray) -> Tensor:
        p = self.params
        real = ids != PAD
        pos = np.maximum(np.cumsum(real) - 1, 0)
        x = ad.take(p["embed"], ids) + ad.take(p["pos"], pos)
        n = len(ids)
        allowed = np.tril(np.ones((n, n), dtype=bool)) & real[None, :]
        mask = np.where(allowed, 0.0, _MASK)
        scores = (x @ p["wq"]) @ (x @ p["wk"]).T * (1.0 / np.sqrt(self.config.embed_dim)) + mask
        attn = ad.exp(ad.log_softmax(scores))
        h = x + (attn @ (x @ p["wv"])) @ p["wo"]
        h = h + ad.tanh(h @ p["w1"] + p["b1"]) @ p["w2"]
        return h @ p["out"] + p["out_b"]

    def _response_logits(self, seqs):
        parts = []
        for s in seqs:
            ids, off = _contexts(s)
            logits = self._block(ids)
            parts.append(ad.take(logits, np.arange(off - 1, len(ids) - 1)))
        return parts[0] if len(parts) == 1 else ad.concat(parts)


_REGISTRY = {cls.arch: cls for cls in (BigramModel, MLPModel, TransformerModel)}


def build_model(config: ModelConfig, seed: int | np.random.Generator = 0,
                vocab: Vocab | None = None) -> PolicyModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = _REGISTRY[config.arch].init(config, rng)
    model.vocab = vocab
    return model


# -- log-likelihoods and the reward ---------------------------------------------

def _targets(seqs: Sequence[TokenSequence]) -> np.ndarray:
    return np.concatenate([np.asarray(s.response_ids, dtype=np.intp) for s in seqs])


def batch_logprobs(model: PolicyModel, seqs: Sequence[TokenSequence]) -> Tensor:
    """log pi(y_i | x, y_<i) for every response token of every sequence, concatenated."""
    if not seqs:
        raise ValueError("no sequences given")
    return ad.gather(ad.log_softmax(model.response_logits(seqs)), _targets(seqs))


def forward_logprobs(model: PolicyModel, seq: TokenSequence) -> Tensor:
    return batch_logprobs(model, [seq])


def sequence_logprobs(model: PolicyModel, seqs: Sequence[TokenSequence]) -> Tensor:
    """Summed response log-likelihood per sequence, shape ``(len(seqs),)``."""
    return ad.segment_sum(batch_logprobs(model, seqs), [len(s.response_ids) for s in seqs])


def avg_likelihoods(model: PolicyModel, seqs: Sequence[TokenSequence]) -> Tensor:
    """Geometric-mean token likelihood per sequence, the reward ``p`` in (0, 1]."""
    lengths = np.array([len(s.response_ids) for s in seqs], dtype=np.float64)
    return ad.exp(sequence_logprobs(model, seqs) * (1.0 / lengths))


def avg_likelihood(model: PolicyModel, seq: TokenSequence) -> Tensor:
    return ad.take(avg_likelihoods(model, [seq]), 0)


def token_distributions(model: PolicyModel, seq: TokenSequence) -> np.ndarray:
    """Full next-token log-probability rows at each response position, shape ``(|y|, V)``."""
    with ad.no_grad():
        return ad.log_softmax(model.response_logits([seq])).values


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: PolicyModel) -> None:
    """Write a versioned header line, a JSON manifest line and raw little-endian float64 params."""
    vocab = model.vocab
    header = {
        "config": asdict(model.config),
        "vocab": vocab.symbols if vocab is not None else None,
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> PolicyModel:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1]}")
        header = json.loads(fh.readline())
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated while reading {name!r}")
            params[name] = Tensor(np.frombuffer(buf, dtype="<f8").reshape(shape), requires_grad=True)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    config = ModelConfig(**header["config"])
    vocab = Vocab(header["vocab"]) if header["vocab"] is not None else None
    return _REGISTRY[config.arch](config, params, vocab)
