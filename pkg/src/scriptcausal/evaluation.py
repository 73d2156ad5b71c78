"""Evaluation protocols: infrequent narrative cloze with Recall@N, pairwise
abductive task sheets, chain-completion helpers, and output-diversity
reports.

A "system" enters the cloze as a ranker: a callable mapping a context (list
of event ids) to a ranked candidate list. Pairwise sheets instead take
pair-score functions score(predecessor, target).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import ChainCorpus, chain_ids
from .errors import ConfigError, DataFormatError
from .events import NUM_SPECIALS, Vocabulary

DEFAULT_CUTOFFS = (0, 50, 100, 125, 150, 200, 500)
DEFAULT_RECALL_N = 100


@dataclass
class ClozeInstance:
    context: list[int]
    answer: int
    chain_id: str

    def __post_init__(self):
        if not self.context:
            raise ConfigError("cloze context must be non-empty")
        if self.answer < NUM_SPECIALS:
            raise ConfigError("cloze answer must be a non-special event id")


def make_cloze_set(corpus: ChainCorpus, vocab: Vocabulary, count: int,
                   seed: int) -> list[ClozeInstance]:
    """Seeded uniform sample (without replacement) of (chain, split-point)
    pairs whose held-out answer is a real event."""
    pool = []
    for ci, chain in enumerate(corpus.chains):
        ids = chain_ids(chain, vocab)
        for pos in range(1, len(ids)):
            if ids[pos] >= NUM_SPECIALS:
                pool.append((ci, pos))
    if len(pool) < count:
        raise ConfigError(
            f"corpus yields {len(pool)} cloze candidates, need {count}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=count, replace=False)
    instances = []
    for p in sorted(picks):
        ci, pos = pool[p]
        ids = chain_ids(corpus.chains[ci], vocab)
        instances.append(ClozeInstance(ids[:pos], ids[pos],
                                       corpus.chains[ci].chain_id))
    return instances


def filter_by_cutoff(instances, rank, cutoff: int):
    """Drop instances whose answer is among the cutoff most frequent events."""
    if cutoff < 0:
        raise ConfigError("cutoff must be >= 0")
    if cutoff == 0:
        return list(instances)
    frequent = set(rank[:cutoff])
    return [inst for inst in instances if inst.answer not in frequent]


def recall_at_n(ranker, instances, N: int) -> float:
    """Percentage of instances whose answer appears in the ranker's top N."""
    if not instances:
        raise ConfigError("recall undefined on an empty instance set")
    hits = 0
    for inst in instances:
        if inst.answer in ranker(inst.context)[:N]:
            hits += 1
    return 100.0 * hits / len(instances)


@dataclass
class ClozeReport:
    cutoffs: list[int]
    counts: list[int]
    recalls: dict[str, list[float]]

    def to_tsv(self) -> str:
        lines = ["cutoff\t" + "\t".join(str(c) for c in self.cutoffs),
                 "instances\t" + "\t".join(str(n) for n in self.counts)]
        for system in self.recalls:
            lines.append(system + "\t"
                         + "\t".join(f"{r:.2f}" for r in self.recalls[system]))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_tsv())


def run_infrequent_cloze(systems: dict, instances, rank,
                         cutoffs=DEFAULT_CUTOFFS,
                         N: int = DEFAULT_RECALL_N) -> ClozeReport:
    """Recall@N per system per exclusion cutoff over a fixed instance set."""
    cutoffs = list(cutoffs)
    counts = []
    recalls = {name: [] for name in systems}
    for cutoff in cutoffs:
        kept = filter_by_cutoff(instances, rank, cutoff)
        counts.append(len(kept))
        for name, ranker in systems.items():
            recalls[name].append(recall_at_n(ranker, kept, N) if kept
                                 else float("nan"))
    return ClozeReport(cutoffs, counts, recalls)


# ---------------------------------------------------------------------------
# pairwise abductive sheets


SHORT_MARK = "<short>"


def pairwise_sheet(systems: dict, targets, vocab: Vocabulary, rank,
                   per_system: int = 2, exclude_top: int = 20,
                   seed: int = 0) -> list[dict]:
    """Task rows for human scoring: for each target event, each system's top
    predecessors (after the frequency filter), shuffled within the task.

    ``systems`` maps name -> pair score function score(predecessor, target).
    Rows carry the system identity in a hidden key column. Returns a list of
    row dicts; see ``sheet_to_tsv``.
    """
    excluded = set(rank[:exclude_top]) if exclude_top else set()
    rng = np.random.default_rng(seed)
    rows = []
    for task_id, target in enumerate(targets):
        task_rows = []
        for name, score_fn in systems.items():
            scored = [(k, score_fn(k, target))
                      for k in range(NUM_SPECIALS, len(vocab))
                      if k not in excluded and k != target]
            scored = [(k, s) for k, s in scored if np.isfinite(s)]
            scored.sort(key=lambda p: (-p[1], p[0]))
            picks = [k for k, _ in scored[:per_system]]
            for k in picks:
                task_rows.append({"task_id": task_id,
                                  "target_event": vocab.key_of(target),
                                  "candidate_event": vocab.key_of(k),
                                  "hidden_system_key": name, "score": ""})
            for _ in range(per_system - len(picks)):
                task_rows.append({"task_id": task_id,
                                  "target_event": vocab.key_of(target),
                                  "candidate_event": SHORT_MARK,
                                  "hidden_system_key": name, "score": ""})
        order = rng.permutation(len(task_rows))
        rows.extend(task_rows[i] for i in order)
    return rows


SHEET_COLUMNS = ("task_id", "target_event", "candidate_event",
                 "hidden_system_key", "score")


def sheet_to_tsv(rows) -> str:
    lines = ["\t".join(SHEET_COLUMNS)]
    for r in rows:
        lines.append("\t".join(str(r[c]) for c in SHEET_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_sheet_tsv(text: str) -> list[dict]:
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != list(SHEET_COLUMNS):
        raise DataFormatError("missing or malformed sheet header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(SHEET_COLUMNS):
            raise DataFormatError(f"sheet line {lineno}: wrong column count")
        rows.append(dict(zip(SHEET_COLUMNS, parts)))
    return rows


def score_summary(rows) -> dict[str, dict[str, float]]:
    """Average human score and average within-task rank per system.

    Expects filled-in rows (score column is a number in [0, 100]). Ranks are
    assigned within each task, highest score getting the highest rank; ties
    share the average of their positions.
    """
    tasks = {}
    for r in rows:
        if r["candidate_event"] == SHORT_MARK:
            continue
        try:
            score = float(r["score"])
        except ValueError as e:
            raise DataFormatError(
                f"non-numeric score {r['score']!r} in task {r['task_id']}") from e
        tasks.setdefault(r["task_id"], []).append((r["hidden_system_key"], score))
    sums = {}
    for entries in tasks.values():
        ordered = sorted(range(len(entries)), key=lambda i: entries[i][1])
        ranks = [0.0] * len(entries)
        i = 0
        while i < len(ordered):
            j = i
            while (j + 1 < len(ordered)
                   and entries[ordered[j + 1]][1] == entries[ordered[i]][1]):
                j += 1
            avg_rank = (i + j) / 2.0 + 1.0
            for t in range(i, j + 1):
                ranks[ordered[t]] = avg_rank
            i = j + 1
        for idx, (system, score) in enumerate(entries):
            agg = sums.setdefault(system, {"score": 0.0, "rank": 0.0, "n": 0})
            agg["score"] += score
            agg["rank"] += ranks[idx]
            agg["n"] += 1
    return {system: {"avg_score": agg["score"] / agg["n"],
                     "avg_rank": agg["rank"] / agg["n"],
                     "count": agg["n"]}
            for system, agg in sums.items()}


# ---------------------------------------------------------------------------
# diversity


@dataclass
class DiversityStats:
    total: int
    distinct: int
    pct_new: float
    top2: list[tuple[str, float]] = field(default_factory=list)


def diversity_report(emissions: dict[str, list]) -> dict[str, DiversityStats]:
    """%-new-output rate and top-2 most-emitted events per system.

    ``emissions`` maps system name -> the chronological sequence of emitted
    events (ids or keys)."""
    report = {}
    for system, seq in emissions.items():
        if not seq:
            raise ConfigError(f"system {system!r} has no emissions")
        seen = set()
        firsts = 0
        counts = {}
        for e in seq:
            if e not in seen:
                seen.add(e)
                firsts += 1
            counts[e] = counts.get(e, 0) + 1
        top2 = sorted(counts.items(), key=lambda p: (-p[1], str(p[0])))[:2]
        report[system] = DiversityStats(
            total=len(seq), distinct=len(seen),
            pct_new=100.0 * firsts / len(seq),
            top2=[(str(e), 100.0 * c / len(seq)) for e, c in top2])
    return report


# ---------------------------------------------------------------------------
# rankers


def lm_ranker(lm, exclude_top: int = 0, rank=None):
    """Ranked candidate list from the LM's next-event distribution."""
    excluded = set(rank[:exclude_top]) if exclude_top else set()

    def ranked(context):
        dist = lm.next_distribution(context)
        order = [l for l in range(NUM_SPECIALS, dist.shape[0])
                 if l not in excluded]
        order.sort(key=lambda l: (-dist[l], l))
        return order

    return ranked


def lm_pair_scorer(lm):
    """Joint log p(k, l) of a two-event chain under the LM, as the pairwise
    score used for abductive queries."""
    start_dist = None

    def score(k, l):
        nonlocal start_dist
        if start_dist is None:
            start_dist = np.log(lm.next_distribution([]))
        return float(start_dist[k]) + lm.chain_score([k], l)

    return score
