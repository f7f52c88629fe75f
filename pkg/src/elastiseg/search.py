"""Constrained subnet discovery over a trained supernet.

Three techniques (hill climber, greedy mutation, differential evolution)
propose integer genomes; a UCB bandit with sliding-window improvement
credit decides which technique spends each evaluation. Genomes are
deduplicated so repeat proposals never consume budget, and the Pareto
frontier over (parameter count, mIoU) is extracted from the history.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .ioutil import atomic_write_text, fmt_float
from .model import SubnetConfig, SupernetWeights
from .space import SearchSpace, param_count
from .train import evaluate_miou

TECHNIQUES = ("hill_climber", "greedy_mutation", "de")
BANDIT_WINDOW = 50
BANDIT_C = 1.4
DE_POP = 10
ENUMERATION_LIMIT = 65536


@dataclass
class SampleRecord:
    config: Optional[SubnetConfig]
    genome: tuple
    params: int
    miou: float
    technique: str
    index: int

    def __post_init__(self):
        if not 0.0 <= self.miou <= 1.0:
            raise ConfigError(f"miou {self.miou} outside [0, 1]")
        if self.params <= 0:
            raise ConfigError("params must be positive")


@dataclass
class SearchConstraints:
    budget: int
    max_params: Optional[int] = None
    min_miou: Optional[float] = None

    def __post_init__(self):
        if self.budget < len(TECHNIQUES):
            raise ConfigError(
                f"budget {self.budget} below the number of techniques ({len(TECHNIQUES)})")

    def feasible(self, record: SampleRecord) -> bool:
        if self.max_params is not None and record.params > self.max_params:
            return False
        if self.min_miou is not None and record.miou < self.min_miou:
            return False
        return True


@dataclass
class SearchResult:
    best: Optional[SampleRecord]
    history: list
    feasible: bool
    technique_uses: dict


# ---------------------------------------------------------------------------
# genome encoding

def _gene_bounds(space: SearchSpace) -> list:
    """Inclusive (lo, hi) per gene: keep bits for P, then a window index
    per elastic layer."""
    m = len(space.menu)
    return ([(0, 1)] * len(space.prunable)
            + [(0, m - 1)] * len(space.elastic))


def encode_genome(space: SearchSpace, config: SubnetConfig) -> np.ndarray:
    """Keep bits over the prunable set, then window menu indices over the
    elastic layers; dropped layers carry gene 0 (canonical form)."""
    space.validate_config(config)
    genes = [1 if config.keep[p] else 0 for p in space.prunable]
    for l in space.elastic:
        genes.append(space.menu.index(config.window[l]) if config.keep[l] else 0)
    return np.asarray(genes, dtype=np.int64)


def decode_genome(space: SearchSpace, genome: Sequence[int]) -> SubnetConfig:
    genome = [int(g) for g in genome]
    bounds = _gene_bounds(space)
    if len(genome) != len(bounds):
        raise InputError(f"genome length {len(genome)} != {len(bounds)} genes")
    for g, (lo, hi) in zip(genome, bounds):
        if not lo <= g <= hi:
            raise InputError(f"gene value {g} outside [{lo}, {hi}]")
    np_genes = genome[:len(space.prunable)]
    drop = [p for p, bit in zip(space.prunable, np_genes) if bit == 0]
    window_index = {}
    for l, g in zip(space.elastic, genome[len(space.prunable):]):
        if l not in drop:
            window_index[l] = g
    return space.make_config(drop=drop, window_index=window_index)


def _canonical(space: SearchSpace, genome: Sequence[int]) -> tuple:
    """Zero the window genes of dropped layers so duplicates collapse."""
    genome = [int(g) for g in genome]
    np_count = len(space.prunable)
    dropped = {p for p, bit in zip(space.prunable, genome[:np_count]) if bit == 0}
    out = list(genome)
    for pos, l in enumerate(space.elastic):
        if l in dropped:
            out[np_count + pos] = 0
    return tuple(out)


def random_genome(space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    genes = [int(rng.integers(lo, hi + 1)) for lo, hi in _gene_bounds(space)]
    return np.asarray(genes, dtype=np.int64)


# ---------------------------------------------------------------------------
# techniques

def _mutable_positions(space: SearchSpace) -> list:
    return [i for i, (lo, hi) in enumerate(_gene_bounds(space)) if hi > lo]


def _mutate_gene(genes: list, pos: int, bounds: list, rng: np.random.Generator) -> None:
    lo, hi = bounds[pos]
    if hi - lo == 1:
        genes[pos] = lo + hi - genes[pos]
        return
    delta = int(rng.choice((-1, 1)))
    new = genes[pos] + delta
    if not lo <= new <= hi:
        new = genes[pos] - delta
    genes[pos] = int(np.clip(new, lo, hi))


def hill_climber_step(current: Sequence[int], space: SearchSpace,
                      rng: np.random.Generator) -> np.ndarray:
    """Mutate exactly one gene of the current position (keep-bit flip or a
    window step of +-1)."""
    mutable = _mutable_positions(space)
    genes = [int(g) for g in current]
    if not mutable:
        return np.asarray(genes, dtype=np.int64)
    pos = int(mutable[int(rng.integers(0, len(mutable)))])
    _mutate_gene(genes, pos, _gene_bounds(space), rng)
    return np.asarray(genes, dtype=np.int64)


def greedy_mutation_step(best: Sequence[int], space: SearchSpace,
                         rng: np.random.Generator, k: Optional[int] = None) -> np.ndarray:
    """Mutate k distinct genes of the best-so-far, k geometric(p=0.5)."""
    mutable = _mutable_positions(space)
    genes = [int(g) for g in best]
    if not mutable:
        return np.asarray(genes, dtype=np.int64)
    if k is None:
        k = int(rng.geometric(0.5))
    k = max(1, min(k, len(mutable)))
    bounds = _gene_bounds(space)
    for pos in rng.choice(len(mutable), size=k, replace=False):
        _mutate_gene(genes, mutable[int(pos)], bounds, rng)
    return np.asarray(genes, dtype=np.int64)


def de_step(population: Sequence[Sequence[int]], space: SearchSpace,
            rng: np.random.Generator, F: float = 0.5, CR: float = 0.9) -> np.ndarray:
    """DE/rand/1/bin on integer genes with rounding and range clamping."""
    if len(population) < 4:
        raise InputError(f"differential evolution needs 4 genomes, have {len(population)}")
    pop = [np.asarray(g, dtype=np.float64) for g in population]
    ti, r0, r1, r2 = (int(i) for i in rng.choice(len(pop), size=4, replace=False))
    target = pop[ti]
    donor = pop[r0] + F * (pop[r1] - pop[r2])
    n = len(target)
    jrand = int(rng.integers(0, n))
    trial = np.empty(n, dtype=np.int64)
    bounds = _gene_bounds(space)
    for j in range(n):
        src = donor[j] if (rng.random() < CR or j == jrand) else target[j]
        lo, hi = bounds[j]
        trial[j] = int(np.clip(int(round(src)), lo, hi))
    return trial


def auc_bandit_select(windows: Sequence, t: int, C: float = BANDIT_C) -> int:
    """UCB1 over sliding windows of improvement outcomes. Techniques with
    no recorded outcome are taken first, in index order; ties in the UCB
    score also resolve to the lower index."""
    if t < 1:
        raise ConfigError("bandit time index starts at 1")
    for i, window in enumerate(windows):
        if len(window) == 0:
            return i
    best_i, best_score = 0, -1.0
    for i, window in enumerate(windows):
        winrate = sum(window) / len(window)
        score = winrate + C * (np.log(t) / len(window)) ** 0.5
        if score > best_score:
            best_i, best_score = i, score
    return best_i


# ---------------------------------------------------------------------------
# search loop

def search(space: SearchSpace, weights: SupernetWeights, eval_set: Sequence,
           constraints: SearchConstraints, seed: int = 0,
           eval_batch: int = 16) -> SearchResult:
    """Bandit-coordinated ensemble search for the best feasible subnet.

    Runs until the budget is spent or every config has been evaluated.
    Infeasible evaluations enter the history but never become best. The
    returned best is None when nothing feasible was found.
    """
    if not eval_set:
        raise InputError("search needs a non-empty evaluation set")
    rng = np.random.Generator(np.random.PCG64(seed))
    windows = [deque(maxlen=BANDIT_WINDOW) for _ in TECHNIQUES]
    uses = {name: 0 for name in TECHNIQUES}
    seen: set = set()
    history: list = []
    population: deque = deque(maxlen=DE_POP)
    best: Optional[SampleRecord] = None
    hc_pos: Optional[tuple] = None   # genome the hill climber stands on
    hc_score: float = -1.0
    hc_feasible = False
    total = space.size()

    def propose(tech: int) -> Optional[tuple]:
        for _ in range(16):
            if tech == 0:
                if hc_pos is None:
                    cand = random_genome(space, rng)
                else:
                    cand = hill_climber_step(hc_pos, space, rng)
            elif tech == 1:
                base = best.genome if best is not None else (
                    history[-1].genome if history else None)
                cand = (greedy_mutation_step(base, space, rng) if base is not None
                        else random_genome(space, rng))
            else:
                if len(population) >= 4:
                    cand = de_step(list(population), space, rng)
                else:
                    base = best.genome if best is not None else (
                        history[-1].genome if history else None)
                    cand = (greedy_mutation_step(base, space, rng) if base is not None
                            else random_genome(space, rng))
            c = _canonical(space, cand)
            if c not in seen:
                return c
        return None

    def fallback_unseen() -> Optional[tuple]:
        for _ in range(200):
            c = _canonical(space, random_genome(space, rng))
            if c not in seen:
                return c
        if total <= ENUMERATION_LIMIT:
            for config in space.all_configs():
                c = tuple(int(g) for g in encode_genome(space, config))
                if c not in seen:
                    return c
        return None

    for t in range(1, constraints.budget + 1):
        if len(seen) >= total:
            break
        tech = auc_bandit_select(windows, t)
        genome = propose(tech)
        if genome is None:
            genome = fallback_unseen()
        if genome is None:
            break
        seen.add(genome)
        config = decode_genome(space, genome)
        params = param_count(space, config)
        miou = evaluate_miou(weights, config, eval_set, batch_size=eval_batch)
        record = SampleRecord(config=config, genome=genome, params=params,
                              miou=miou, technique=TECHNIQUES[tech],
                              index=len(history))
        history.append(record)
        population.append(np.asarray(genome, dtype=np.int64))

        improved = False
        feasible = constraints.feasible(record)
        if feasible and (best is None or record.miou > best.miou
                         or (record.miou == best.miou and record.params < best.params)):
            best = record
            improved = True
        # The climber walks its own chain: a candidate it proposed replaces
        # its position only when feasible and better (bootstrap excepted).
        if tech == 0:
            if hc_pos is None or (feasible and (not hc_feasible or record.miou > hc_score)):
                hc_pos, hc_score, hc_feasible = genome, record.miou, feasible
        windows[tech].append(1 if improved else 0)
        uses[TECHNIQUES[tech]] += 1

    return SearchResult(best=best, history=history, feasible=best is not None,
                        technique_uses=uses)


# ---------------------------------------------------------------------------
# Pareto frontier

def pareto_frontier(records: Sequence[SampleRecord]) -> list:
    """Non-dominated records under (minimize params, maximize miou),
    ordered by ascending params, one representative per point."""
    if not records:
        raise InputError("no records to take a frontier of")
    order = sorted(range(len(records)),
                   key=lambda i: (records[i].params, -records[i].miou, i))
    out: list = []
    best_miou = -1.0
    for i in order:
        r = records[i]
        if r.miou > best_miou:
            out.append(r)
            best_miou = r.miou
    return out


# ---------------------------------------------------------------------------
# records i/o

RECORD_FIELDS = ("genome", "params", "miou", "technique", "index")


def write_records(path: str, records: Sequence[SampleRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for r in records:
        writer.writerow(["-".join(str(int(g)) for g in r.genome),
                         r.params, fmt_float(r.miou), r.technique, r.index])
    atomic_write_text(path, buf.getvalue())


def read_records(path: str, space: Optional[SearchSpace] = None) -> list:
    """Load records.csv; configs are reconstructed when a space is given."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != list(RECORD_FIELDS):
                raise FormatError(f"{path}: expected header {','.join(RECORD_FIELDS)}")
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read records file {path}: {exc}") from exc
    records = []
    for li, row in enumerate(rows, start=2):
        if len(row) != len(RECORD_FIELDS):
            raise FormatError(f"{path}:{li}: expected {len(RECORD_FIELDS)} columns")
        try:
            genome = tuple(int(g) for g in row[0].split("-")) if row[0] else ()
            params, miou, index = int(row[1]), float(row[2]), int(row[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{li}: {exc}") from exc
        config = decode_genome(space, genome) if space is not None else None
        records.append(SampleRecord(config=config, genome=genome, params=params,
                                    miou=miou, technique=row[3], index=index))
    return records
