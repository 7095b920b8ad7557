"""Decoding strategies over a trained policy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import InvalidArgument
from .instances import Tour, TspInstance, batch_tour_lengths, tour_length
from .model import CNNTransformer, DecoderState, rollout

SELECT_RULES = ("max_prob", "shortest_tour")


def _coords(inst) -> np.ndarray:
    return inst.coords if isinstance(inst, TspInstance) else np.asarray(inst, dtype=np.float64)


def greedy_decode(inst, model: CNNTransformer, clamp_k: bool = False) -> Tour:
    return rollout(inst, model, "greedy", clamp_k=clamp_k)[0]


def sample_decode(inst, model: CNNTransformer, count: int, seed: int = 0, clamp_k: bool = False) -> Tour:
    """Shortest of ``count`` sampled rollouts (running batch-norm statistics)."""
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    coords = _coords(inst)
    batch = torch.from_numpy(np.repeat(coords[None], count, axis=0))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        tours, _ = model.rollout(batch, mode="sample", generator=gen, clamp_k=clamp_k)
    tours = tours.numpy()
    lengths = batch_tour_lengths(np.repeat(coords[None], count, axis=0), tours)
    best = int(np.argmin(lengths))
    order = tuple(int(i) for i in tours[best])
    return Tour(order, tour_length(coords, order))


@dataclass
class BeamEntry:
    order: tuple
    log_prob: float


def _rank(prefixes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by lexicographic sequence."""
    keys = [prefixes[:, c] for c in range(prefixes.shape[1] - 1, -1, -1)]
    keys.append(-scores)
    return np.lexsort(keys)


def beam_finalists(inst, model: CNNTransformer, B: int, clamp_k: bool = False,
                   trace: Optional[list] = None) -> list[BeamEntry]:
    """Run beam search and return the surviving complete tours, best first.

    Every step expands each live entry over its unvisited nodes and keeps the
    ``B`` highest cumulative log-probabilities. When ``trace`` is a list, the
    kept entries of every step are appended to it.
    """
    if B < 1:
        raise InvalidArgument(f"beam width must be >= 1, got {B}")
    coords = _coords(inst)
    n = coords.shape[0]
    with torch.no_grad():
        enc1 = model.encode(torch.tensor(coords)[None], "infer", clamp_k=clamp_k)
        state = DecoderState.initial(1, n, model.dtype)
        prefixes = np.zeros((1, 0), dtype=np.int64)
        for t in range(n):
            live = prefixes.shape[0]
            enc = enc1.index_select(torch.zeros(live, dtype=torch.long))
            logp = model.decoder_step(enc, state)
            cand = (state.log_prob[:, None] + logp[:, 1:]).double().numpy()
            parent, node = np.nonzero(np.isfinite(cand))
            scores = cand[parent, node]
            seqs = np.concatenate([prefixes[parent], node[:, None]], axis=1)
            keep = _rank(seqs, scores)[:B]
            parent_t = torch.from_numpy(parent[keep])
            state = state.index_select(parent_t).choose(torch.from_numpy(node[keep]), logp[parent_t])
            prefixes = seqs[keep]
            if trace is not None:
                trace.append([BeamEntry(tuple(int(i) for i in row), float(lp))
                              for row, lp in zip(prefixes, state.log_prob)])
    return [BeamEntry(tuple(int(i) for i in row), float(lp)) for row, lp in zip(prefixes, state.log_prob)]


def beam_search(inst, model: CNNTransformer, B: int, select: str = "max_prob",
                clamp_k: bool = False) -> Tour:
    """Beam search; ``select`` picks the most probable finalist or the shortest one."""
    if select not in SELECT_RULES:
        raise InvalidArgument(f"select must be one of {SELECT_RULES}, got {select!r}")
    coords = _coords(inst)
    finalists = beam_finalists(coords, model, B, clamp_k)
    if select == "max_prob":
        best = finalists[0].order
    else:
        lengths = [tour_length(coords, e.order) for e in finalists]
        best = finalists[int(np.argmin(lengths))].order
    return Tour(best, tour_length(coords, best))
