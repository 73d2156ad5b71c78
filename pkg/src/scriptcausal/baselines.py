"""Comparison systems: ordered discounted skip-bigram PMI and a GRU event
sequence language model.

PMI follows the ordered skip-bigram scheme with a window of 2: within each
chain, (e_i, e_j) is counted for every j with i < j <= i + window, keeping
direction. The discounted variant multiplies raw PMI by
(c / (c+1)) * (m / (m+1)) with m = min(left(e1), right(e2)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .corpus import ChainCorpus, chain_ids
from .errors import ConfigError, DataFormatError
from .events import END_ID, START_ID, Vocabulary

NEG_INF = float("-inf")

_COUNTS_HEADER_TAG = "#scriptcausal-counts v1"


# ---------------------------------------------------------------------------
# ordered skip-bigram PMI


@dataclass
class OrderedCounts:
    window: int
    pair_counts: dict = field(default_factory=dict)
    left_totals: dict = field(default_factory=dict)
    right_totals: dict = field(default_factory=dict)
    grand_total: int = 0

    def add_pair(self, e1: int, e2: int, count: int = 1):
        key = (e1, e2)
        self.pair_counts[key] = self.pair_counts.get(key, 0) + count
        self.left_totals[e1] = self.left_totals.get(e1, 0) + count
        self.right_totals[e2] = self.right_totals.get(e2, 0) + count
        self.grand_total += count

    def merge(self, other: "OrderedCounts"):
        if other.window != self.window:
            raise ConfigError("cannot merge counts with different windows")
        for (e1, e2), c in sorted(other.pair_counts.items()):
            self.add_pair(e1, e2, c)
        return self


def count_skip_bigrams(corpus: ChainCorpus, vocab: Vocabulary,
                       window: int = 2,
                       include_self_pairs: bool = True) -> OrderedCounts:
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    counts = OrderedCounts(window)
    for chain in corpus.chains:
        ids = chain_ids(chain, vocab)
        n = len(ids)
        for i in range(n):
            for j in range(i + 1, min(i + window, n - 1) + 1):
                if not include_self_pairs and ids[i] == ids[j]:
                    continue
                counts.add_pair(ids[i], ids[j])
    return counts


def ordered_pmi(counts: OrderedCounts, e1: int, e2: int,
                discounted: bool = True) -> float:
    """PMI of e2 following e1 within the window; -inf when the pair is unseen."""
    c = counts.pair_counts.get((e1, e2), 0)
    if c == 0:
        return NEG_INF
    T = counts.grand_total
    left = counts.left_totals[e1]
    right = counts.right_totals[e2]
    raw = math.log((c / T) / ((left / T) * (right / T)))
    if not discounted:
        return raw
    m = min(left, right)
    return raw * (c / (c + 1.0)) * (m / (m + 1.0))


def save_counts(counts: OrderedCounts, vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{_COUNTS_HEADER_TAG}\t{counts.window}\t{counts.grand_total}\n")
        for (e1, e2) in sorted(counts.pair_counts):
            f.write(f"{vocab.key_of(e1)}\t{vocab.key_of(e2)}\t"
                    f"{counts.pair_counts[(e1, e2)]}\n")


def load_counts(path, vocab: Vocabulary) -> OrderedCounts:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if len(header) != 3 or header[0] != _COUNTS_HEADER_TAG:
            raise DataFormatError("missing skip-bigram counts header")
        counts = OrderedCounts(window=int(header[1]))
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"counts line {lineno}: expected 3 fields")
            counts.add_pair(vocab.id_of(parts[0]), vocab.id_of(parts[1]),
                            int(parts[2]))
        if counts.grand_total != int(header[2]):
            raise DataFormatError("counts header total does not match rows")
    return counts


def pmi_pair_scorer(counts: OrderedCounts, discounted: bool = True):
    """Pairwise score function score(e1, e2) for the eval harness."""
    def score(e1, e2):
        return ordered_pmi(counts, e1, e2, discounted)
    return score


# ---------------------------------------------------------------------------
# GRU event sequence LM


DEFAULT_LM_CONFIG = {
    "emb_dim": 300,
    "hidden_dim": 512,
    "num_layers": 2,
    "dropout": 0.1,
    "lr": 0.001,
    "clip_norm": 10.0,
    "batch_size": 64,
    "patience": 3,
    "max_epochs": 50,
    "seed": 0,
}


class EventLM:
    """Multi-layer GRU language model over framed event-id sequences."""

    def __init__(self, vocab_size: int, config: dict | None = None,
                 params: dict | None = None):
        self.config = dict(DEFAULT_LM_CONFIG)
        if config:
            self.config.update(config)
        self.vocab_size = vocab_size
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(self.config["seed"])
            d = self.config["emb_dim"]
            h = self.config["hidden_dim"]
            p = {"emb": K.init_embedding(rng, vocab_size, d)}
            in_dim = d
            for layer in range(self.config["num_layers"]):
                K.init_gru(rng, f"gru{layer}", in_dim, h, p)
                in_dim = h
            p["out.W"] = K.init_matrix(rng, vocab_size, h)
            p["out.b"] = np.zeros(vocab_size)
            self.params = p

    # -- forward / backward -------------------------------------------------

    def _frame(self, ids):
        return [START_ID] + list(ids) + [END_ID]

    def _pad_batch(self, sequences):
        """Right-pad framed sequences; returns inputs, targets, mask (T, B)."""
        framed = [self._frame(s) for s in sequences]
        T = max(len(s) for s in framed) - 1
        B = len(framed)
        inputs = np.zeros((T, B), dtype=int)
        targets = np.zeros((T, B), dtype=int)
        mask = np.zeros((T, B))
        for b, s in enumerate(framed):
            n = len(s) - 1
            inputs[:n, b] = s[:-1]
            targets[:n, b] = s[1:]
            mask[:n, b] = 1.0
        return inputs, targets, mask

    def _forward(self, params, inputs, mask, dropout_masks=None):
        T, B = inputs.shape
        x = params["emb"][inputs]          # (T, B, d)
        if dropout_masks is not None:
            x = x * dropout_masks[0]
        caches = {"inputs": inputs, "x": x}
        h = x
        for layer in range(self.config["num_layers"]):
            h, c = K.gru_forward(params, f"gru{layer}", h, mask)
            caches[f"gru{layer}"] = c
            caches[f"h{layer}"] = h
        if dropout_masks is not None:
            h = h * dropout_masks[1]
        caches["h_top"] = h
        logits = h @ params["out.W"].T + params["out.b"]   # (T, B, V)
        return logits, caches

    def _loss_and_grads(self, params, inputs, targets, mask, dropout_masks=None):
        T, B = inputs.shape
        logits, caches = self._forward(params, inputs, mask, dropout_masks)
        flat_logits = logits.reshape(T * B, -1)
        loss_sum, dflat = K.softmax_xent_batch(flat_logits, targets.reshape(-1),
                                               weights=mask.reshape(-1))
        n_tokens = float(mask.sum())
        loss = loss_sum / n_tokens
        dlogits = dflat.reshape(T, B, -1) / n_tokens
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        h_top = caches["h_top"]
        grads["out.W"] += np.einsum("tbv,tbh->vh", dlogits, h_top)
        grads["out.b"] += dlogits.sum(axis=(0, 1))
        dh = np.einsum("tbv,vh->tbh", dlogits, params["out.W"])
        if dropout_masks is not None:
            dh = dh * dropout_masks[1]
        for layer in range(self.config["num_layers"] - 1, -1, -1):
            dh = K.gru_backward(params, f"gru{layer}", caches[f"gru{layer}"],
                                dh, grads, mask)
        if dropout_masks is not None:
            dh = dh * dropout_masks[0]
        np.add.at(grads["emb"], inputs, dh)
        return loss, grads

    def loss_and_grads(self, sequences, dropout_rng=None):
        """Mean per-token loss and gradients on a batch of id sequences."""
        inputs, targets, mask = self._pad_batch(sequences)
        dropout_masks = None
        p = self.config["dropout"]
        if dropout_rng is not None and p > 0:
            d = self.config["emb_dim"]
            h = self.config["hidden_dim"]
            T, B = inputs.shape
            keep = 1.0 - p
            dropout_masks = (
                (dropout_rng.random((T, B, d)) < keep) / keep,
                (dropout_rng.random((T, B, h)) < keep) / keep,
            )
        return self._loss_and_grads(self.params, inputs, targets, mask,
                                    dropout_masks)

    def mean_loss(self, sequences, batch_size=256):
        """Evaluation loss (no dropout) averaged per token."""
        total, tokens = 0.0, 0.0
        for start in range(0, len(sequences), batch_size):
            batch = sequences[start:start + batch_size]
            inputs, targets, mask = self._pad_batch(batch)
            logits, _ = self._forward(self.params, inputs, mask)
            T, B = inputs.shape
            loss_sum, _ = K.softmax_xent_batch(logits.reshape(T * B, -1),
                                               targets.reshape(-1),
                                               weights=mask.reshape(-1))
            total += loss_sum
            tokens += mask.sum()
        return total / tokens

    def next_distribution(self, history) -> np.ndarray:
        """softmax over the next event given a history of event ids."""
        ids = [START_ID] + list(history)
        x = self.params["emb"][np.asarray(ids)][:, None, :]
        h = x
        for layer in range(self.config["num_layers"]):
            h, _ = K.gru_forward(self.params, f"gru{layer}", h)
        logits = h[-1, 0] @ self.params["out.W"].T + self.params["out.b"]
        return K.softmax(logits)

    def chain_score(self, context, candidate: int) -> float:
        """log p(candidate | START, context)."""
        dist = self.next_distribution(context)
        return float(np.log(dist[candidate]))

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        config = dict(self.config, vocab_size=self.vocab_size)
        K.save_model(path, "event-lm", config, self.params)

    @staticmethod
    def load(path) -> "EventLM":
        kind, config, params = K.load_model(path)
        if kind != "event-lm":
            raise DataFormatError(f"expected event-lm model file, got {kind!r}")
        vocab_size = config.pop("vocab_size")
        return EventLM(vocab_size, config, params)


def corpus_sequences(corpus: ChainCorpus, vocab: Vocabulary):
    return [chain_ids(c, vocab) for c in corpus.chains]


def train_event_lm(train_corpus: ChainCorpus, dev_corpus: ChainCorpus,
                   vocab: Vocabulary, config: dict | None = None,
                   log=None) -> EventLM:
    """Train with Adam + early stopping; returns the best-dev checkpoint."""
    train_seqs = corpus_sequences(train_corpus, vocab)
    dev_seqs = corpus_sequences(dev_corpus, vocab)
    if not train_seqs:
        raise ConfigError("empty training corpus")
    lm = EventLM(len(vocab), config)
    cfg = lm.config
    rng = np.random.default_rng(cfg["seed"] + 1)
    opt = K.AdamState(lm.params, lr=cfg["lr"], clip_norm=cfg["clip_norm"])
    best_loss = float("inf")
    best_params = {k: v.copy() for k, v in lm.params.items()}
    stale = 0
    for epoch in range(cfg["max_epochs"]):
        order = rng.permutation(len(train_seqs))
        for start in range(0, len(order), cfg["batch_size"]):
            batch = [train_seqs[i] for i in order[start:start + cfg["batch_size"]]]
            _, grads = lm.loss_and_grads(batch, dropout_rng=rng)
            K.adam_update(opt, lm.params, grads)
        dev_loss = lm.mean_loss(dev_seqs) if dev_seqs else lm.mean_loss(train_seqs)
        if log:
            log(f"lm epoch {epoch}: dev loss {dev_loss:.4f}")
        if dev_loss < best_loss:
            best_loss = dev_loss
            best_params = {k: v.copy() for k, v in lm.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg["patience"]:
                break
    lm.params = best_params
    return lm


def lm_next_distribution(lm: EventLM, history) -> np.ndarray:
    return lm.next_distribution(history)


def lm_chain_score(lm: EventLM, context, candidate: int) -> float:
    return lm.chain_score(context, candidate)
