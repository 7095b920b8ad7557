"""CNN-Transformer policy: k-NN convolutional embedding, batch-normalized
encoder, decoder with self-attention over the last ``m`` decoder inputs, and a
tanh-clipped pointer distribution over unvisited nodes.

Everything runs batched over instances of equal size: coordinates are
``(B, n, 2)``, encoder outputs ``(B, n + 1, d)`` with slot 0 holding the start
token and slot ``i + 1`` holding node ``i``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import DecodeComplete, InstanceTooSmall, InvalidArgument
from .instances import Tour, TspInstance, knn_from_distances, pairwise_distances, tour_length

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    L: int = 6
    d: int = 128
    heads: int = 8
    ff_width: int = 512
    k: int = 10
    m: int = 5
    c: float = 10.0
    use_cnn: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise InvalidArgument(f"d={self.d} is not divisible by heads={self.heads}")
        if self.L < 0 or self.k < 0 or self.m < 1 or self.c <= 0 or self.ff_width < 1:
            raise InvalidArgument(f"invalid model config {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidArgument(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def positional_encoding(t, d: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encoding of decoding step ``t`` (1-based): sin on even, cos on odd slots."""
    if isinstance(t, int) and t < 1:
        raise InvalidArgument(f"step t must be >= 1, got {t}")
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.pow(10000.0, -i / d)
    angle = float(t) * freq
    pe = torch.zeros(d, dtype=torch.float64)
    pe[0::2] = torch.sin(angle)
    pe[1::2] = torch.cos(angle[: d // 2])
    return pe.to(dtype)


class _Attention(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        for w in (self.wq, self.wk, self.wv, self.wo):
            nx.init_uniform_(w, d)


class _FeedForward(nn.Module):
    def __init__(self, d: int, width: int):
        super().__init__()
        self.w1 = nn.Parameter(nx.init_uniform_(torch.empty(d, width), d))
        self.b1 = nn.Parameter(nx.init_uniform_(torch.empty(width), d))
        self.w2 = nn.Parameter(nx.init_uniform_(torch.empty(width, d), width))
        self.b2 = nn.Parameter(nx.init_uniform_(torch.empty(d), width))

    def forward(self, x):
        return nx.linear(nx.activate(nx.linear(x, self.w1, self.b1), "relu"), self.w2, self.b2)


class _LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return nx.normalize_layer(x, self.weight, self.bias)


class _Embedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w_emb = nn.Parameter(nx.init_uniform_(torch.empty(2, cfg.d), 2))
        if cfg.use_cnn:
            fan_in = 2 * (cfg.k + 1)
            self.conv_kernel = nn.Parameter(nx.init_uniform_(torch.empty(cfg.k + 1, 2, cfg.d), fan_in))
            self.conv_bias = nn.Parameter(nx.init_uniform_(torch.empty(cfg.d), fan_in))


class _EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mhsa = _Attention(cfg.d)
        self.bn1 = nx.BatchNormState(cfg.d)
        self.ff = _FeedForward(cfg.d, cfg.ff_width)
        self.bn2 = nx.BatchNormState(cfg.d)


class _Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mhpsa = _Attention(cfg.d)
        self.ln1 = _LayerNorm(cfg.d)
        self.mmha = _Attention(cfg.d)
        self.ln2 = _LayerNorm(cfg.d)
        self.ff = _FeedForward(cfg.d, cfg.ff_width)
        self.ln3 = _LayerNorm(cfg.d)


class _Pointer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.wq = nn.Parameter(nx.init_uniform_(torch.empty(d, d), d))
        self.wk = nn.Parameter(nx.init_uniform_(torch.empty(d, d), d))


@dataclass
class EncoderOutput:
    E: torch.Tensor        # (B, n+1, d)
    mmha_k: torch.Tensor   # keys/values of the masked attention, (B, n+1, d)
    mmha_v: torch.Tensor
    ptr_k: torch.Tensor    # pointer keys, (B, n+1, d)

    @property
    def n(self) -> int:
        return self.E.shape[1] - 1

    def index_select(self, idx: torch.Tensor) -> "EncoderOutput":
        return EncoderOutput(self.E[idx], self.mmha_k[idx], self.mmha_v[idx], self.ptr_k[idx])


@dataclass
class DecoderState:
    """Per-batch decoding progress.

    ``visited`` has ``n + 1`` slots; slot 0 (start token) is visited from the
    start. ``history`` holds the decoder inputs ``h_1..h_t``; ``hist_k`` and
    ``hist_v`` their partial-attention key/value projections.
    """

    t: int
    visited: torch.Tensor
    last_slot: torch.Tensor
    log_prob: torch.Tensor
    tour: list = field(default_factory=list)
    history: list = field(default_factory=list)
    hist_k: list = field(default_factory=list)
    hist_v: list = field(default_factory=list)

    @classmethod
    def initial(cls, batch: int, n: int, dtype, device=None) -> "DecoderState":
        visited = torch.zeros(batch, n + 1, dtype=torch.bool, device=device)
        visited[:, 0] = True
        return cls(
            t=1,
            visited=visited,
            last_slot=torch.zeros(batch, dtype=torch.long, device=device),
            log_prob=torch.zeros(batch, dtype=dtype, device=device),
        )

    @property
    def n(self) -> int:
        return self.visited.shape[1] - 1

    def choose(self, nodes: torch.Tensor, log_probs: torch.Tensor) -> "DecoderState":
        """Commit node ``nodes[b]`` (0-based) for every batch row; returns a new state."""
        slots = nodes + 1
        picked = log_probs.gather(1, slots[:, None]).squeeze(1)
        visited = self.visited.clone()
        visited[torch.arange(visited.shape[0]), slots] = True
        return DecoderState(
            t=self.t + 1,
            visited=visited,
            last_slot=slots,
            log_prob=self.log_prob + picked,
            tour=self.tour + [nodes],
            history=list(self.history),
            hist_k=list(self.hist_k),
            hist_v=list(self.hist_v),
        )

    def index_select(self, idx: torch.Tensor) -> "DecoderState":
        return DecoderState(
            t=self.t,
            visited=self.visited[idx],
            last_slot=self.last_slot[idx],
            log_prob=self.log_prob[idx],
            tour=[x[idx] for x in self.tour],
            history=[x[idx] for x in self.history],
            hist_k=[x[idx] for x in self.hist_k],
            hist_v=[x[idx] for x in self.hist_v],
        )

    def tours(self) -> torch.Tensor:
        return torch.stack(self.tour, dim=1)


class CNNTransformer(nn.Module):
    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        if seed is not None:
            torch.manual_seed(seed)
        d = config.d
        self.embed = _Embedding(config)
        self.start_token = nn.Parameter(nx.init_uniform_(torch.empty(d), d))
        self.encoder = nn.ModuleList([_EncoderLayer(config) for _ in range(config.L)])
        self.decoder = _Decoder(config)
        self.pointer = _Pointer(d)

    @property
    def dtype(self):
        return self.start_token.dtype

    def parameter_registry(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    # --- encoder -------------------------------------------------------------

    def effective_k(self, n: int, clamp_k: bool = False) -> int:
        k = self.config.k
        if not self.config.use_cnn or n >= k + 1:
            return k
        if not clamp_k:
            raise InstanceTooSmall(f"n={n} nodes but the CNN embedding needs n >= k+1 = {k + 1}")
        log.warning("clamping k from %d to %d for n=%d", k, n - 1, n)
        return n - 1

    def cnn_embed(self, coords: torch.Tensor, knn: Optional[torch.Tensor] = None,
                  clamp_k: bool = False) -> torch.Tensor:
        """``x_i W_emb`` plus the valid convolution of node ``i`` stacked with its k neighbours."""
        coords = coords.to(self.dtype)
        out = nx.linear(coords, self.embed.w_emb)
        if not self.config.use_cnn:
            return out
        B, n, _ = coords.shape
        k = self.effective_k(n, clamp_k)
        if knn is None:
            knn = batch_knn(coords, k)
        knn = knn[..., :k]
        neigh = torch.gather(coords[:, None, :, :].expand(B, n, n, 2), 2,
                             knn[..., None].expand(B, n, k, 2))
        stack = torch.cat([coords[:, :, None, :], neigh], dim=2)  # (B, n, k+1, 2)
        conv = nx.conv_valid(stack, self.embed.conv_kernel[: k + 1], self.embed.conv_bias)
        return out + conv.squeeze(2)

    def encoder_forward(self, emb: torch.Tensor, mode: str = "infer", update_stats: bool = True) -> torch.Tensor:
        B = emb.shape[0]
        E = torch.cat([self.start_token.expand(B, 1, -1), emb], dim=1)
        heads = self.config.heads
        for layer in self.encoder:
            a = layer.mhsa
            att = nx.masked_attention(nx.linear(E, a.wq), nx.linear(E, a.wk), nx.linear(E, a.wv),
                                      None, heads, a.wo)
            E = nx.normalize_batch(E + att, layer.bn1, mode, update_stats)
            E = nx.normalize_batch(E + layer.ff(E), layer.bn2, mode, update_stats)
        return E

    def encode(self, coords, mode: str = "infer", update_stats: bool = True,
               clamp_k: bool = False) -> EncoderOutput:
        if isinstance(coords, np.ndarray):
            coords = np.array(coords)  # torch refuses to wrap read-only buffers
        coords = torch.as_tensor(coords).to(self.dtype)
        if coords.ndim == 2:
            coords = coords[None]
        E = self.encoder_forward(self.cnn_embed(coords, clamp_k=clamp_k), mode, update_stats)
        dec = self.decoder
        return EncoderOutput(E, nx.linear(E, dec.mmha.wk), nx.linear(E, dec.mmha.wv),
                             nx.linear(E, self.pointer.wk))

    # --- decoder -------------------------------------------------------------

    def decoder_step(self, enc: EncoderOutput, state: DecoderState,
                     window: Optional[int] = None) -> torch.Tensor:
        """Log-probabilities over the ``n + 1`` slots for step ``state.t``.

        Appends ``h_t`` to the state's history as a side effect. Visited
        slots (always including the start token) get ``-inf``.
        """
        n = enc.n
        if state.t > n or bool(state.visited.all()):
            raise DecodeComplete(f"all {n} nodes already visited")
        cfg = self.config
        d, heads = cfg.d, cfg.heads
        window = cfg.m if window is None else window
        B = enc.E.shape[0]
        rows = torch.arange(B)
        dec = self.decoder

        h = enc.E[rows, state.last_slot] + positional_encoding(state.t, d, self.dtype)
        state.history.append(h)
        state.hist_k.append(nx.linear(h, dec.mhpsa.wk))
        state.hist_v.append(nx.linear(h, dec.mhpsa.wv))
        w = min(window, state.t)
        keys = torch.stack(state.hist_k[-w:], dim=1)
        vals = torch.stack(state.hist_v[-w:], dim=1)
        q = nx.linear(h, dec.mhpsa.wq)[:, None, :]
        hh = dec.ln1(h + nx.masked_attention(q, keys, vals, None, heads, dec.mhpsa.wo)[:, 0])

        unvisited = ~state.visited
        q = nx.linear(hh, dec.mmha.wq)[:, None, :]
        ht = dec.ln2(hh + nx.masked_attention(q, enc.mmha_k, enc.mmha_v, unvisited[:, None, :],
                                               heads, dec.mmha.wo)[:, 0])
        hb = dec.ln3(ht + dec.ff(ht))

        q = nx.linear(hb, self.pointer.wq)
        scores = torch.einsum("bd,bsd->bs", q, enc.ptr_k) / math.sqrt(d)
        logits = cfg.c * nx.activate(scores, "tanh")
        logits = logits.masked_fill(state.visited, float("-inf"))
        return nx.log_softmax(logits, axis=-1)

    def rollout(self, coords, mode: str = "greedy", bn_mode: str = "infer",
                generator: Optional[torch.Generator] = None, forced: Optional[torch.Tensor] = None,
                update_stats: bool = True, clamp_k: bool = False, record: Optional[list] = None,
                window: Optional[int] = None):
        """Decode every instance in the batch.

        ``mode`` is ``greedy`` (argmax, lowest index on ties), ``sample``, or
        ignored when ``forced`` tours are given (teacher forcing). Returns
        ``(tours (B, n) long, log_prob (B,))``. Per-step log-probabilities are
        appended to ``record`` when it is a list.
        """
        enc = self.encode(coords, bn_mode, update_stats, clamp_k)
        B, n = enc.E.shape[0], enc.n
        state = DecoderState.initial(B, n, self.dtype)
        for t in range(n):
            logp = self.decoder_step(enc, state, window)
            if record is not None:
                record.append(logp)
            if forced is not None:
                nodes = forced[:, t]
            elif mode == "greedy":
                nodes = torch.argmax(logp[:, 1:], dim=1)
            elif mode == "sample":
                probs = torch.exp(logp[:, 1:].detach()).clamp_min(0)
                nodes = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            else:
                raise InvalidArgument(f"unknown decode mode {mode!r}")
            state = state.choose(nodes, logp)
        return state.tours(), state.log_prob

    def score(self, coords, tours, bn_mode: str = "infer", update_stats: bool = False,
              clamp_k: bool = False) -> torch.Tensor:
        """Teacher-forced ``log p(tour)`` for each batch row."""
        tours = torch.as_tensor(np.asarray(tours), dtype=torch.long)
        if tours.ndim == 1:
            tours = tours[None]
        return self.rollout(coords, forced=tours, bn_mode=bn_mode, update_stats=update_stats,
                            clamp_k=clamp_k)[1]

    # --- persistence ---------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        nx.save_checkpoint(path, self.state_dict(), self.config.to_dict(), extra)

    @classmethod
    def load(cls, path) -> "CNNTransformer":
        ckpt = nx.load_checkpoint(path)
        model = cls(ModelConfig.from_dict(ckpt.config))
        model.load_state_dict(ckpt.tensors)
        model.checkpoint_extra = ckpt.extra
        return model


def batch_knn(coords: torch.Tensor, k: int) -> torch.Tensor:
    arr = coords.detach().cpu().numpy().astype(np.float64)
    return torch.from_numpy(knn_from_distances(pairwise_distances(arr), k))


def _coords_batch(inst) -> torch.Tensor:
    coords = inst.coords if isinstance(inst, TspInstance) else np.asarray(inst, dtype=np.float64)
    return torch.tensor(np.asarray(coords, dtype=np.float64))[None]


# --- per-instance helpers ------------------------------------------------------

def cnn_embed(inst, model: CNNTransformer) -> torch.Tensor:
    """``n x d`` embedding matrix of one instance."""
    return model.cnn_embed(_coords_batch(inst))[0]


def encoder_forward(embeddings: torch.Tensor, model: CNNTransformer, mode: str = "infer") -> torch.Tensor:
    return model.encoder_forward(embeddings[None].to(model.dtype), mode)[0]


def decoder_step(enc: EncoderOutput, state: DecoderState, model: CNNTransformer):
    """Distribution ``p_t`` over the ``n + 1`` slots plus the state carrying ``h_t``."""
    logp = model.decoder_step(enc, state)
    return torch.exp(logp), state


def rollout(inst, model: CNNTransformer, mode: str = "greedy", seed: Optional[int] = None,
            clamp_k: bool = False) -> tuple[Tour, float]:
    gen = None
    if mode == "sample":
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
    with torch.no_grad():
        tours, logp = model.rollout(_coords_batch(inst), mode=mode, generator=gen, clamp_k=clamp_k)
    order = tuple(int(i) for i in tours[0])
    coords = inst.coords if isinstance(inst, TspInstance) else inst
    return Tour(order, tour_length(coords, order)), float(logp[0])
