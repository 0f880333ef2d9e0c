"""Gated recurrent cells: the standard LSTM step and the memory-tape step.

The tape cell keeps every past (h_i, c_i) pair in growable per-sequence
tapes and, at each step, addresses them with an attention distribution to
form adaptive summaries (h~, c~) that replace the single recurrent state.
Stacked variants feed the lower layer's output upward, optionally with a
skip connection from the token embedding.

All step functions are batch-first: token inputs are (B, in), states are
(B, h).  Weights are immutable during forward/backward; tapes belong to
one sequence and are never shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class TapeError(ValueError):
    """A tape invariant (equal lengths, non-empty read) was violated."""


class CellState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class GateWeights:
    """Gate block mapping [recurrent-input, token-input] to the four gate
    pre-activations, stacked row-wise in (i, f, o, c-hat) order."""
    w: Tensor            # (4h, h + in)
    bias: Optional[Tensor] = None   # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w.data.shape[0] // 4


@dataclass
class IntraAttentionWeights:
    v: Tensor            # (a,)
    w_h: Tensor          # (a, h)   tape-slot projection
    w_x: Tensor          # (a, in)  current-input projection
    w_htilde: Tensor     # (a, h)   previous-summary projection
    bias: Optional[Tensor] = None   # (a,) shared inside the tanh


@dataclass
class LstmnLayerWeights:
    gates: GateWeights
    attn: IntraAttentionWeights

    def named(self, prefix: str, upper: bool = False) -> dict:
        """Checkpoint tensors for one layer.  Upper layers store their
        input projection as W_l (it projects the layer below's output)."""
        out = {f"{prefix}.W": self.gates.w}
        if self.gates.bias is not None:
            out[f"{prefix}.bias"] = self.gates.bias
        out[f"{prefix}.v"] = self.attn.v
        out[f"{prefix}.W_h"] = self.attn.w_h
        out[f"{prefix}.W_l" if upper else f"{prefix}.W_x"] = self.attn.w_x
        out[f"{prefix}.W_htilde"] = self.attn.w_htilde
        if self.attn.bias is not None:
            out[f"{prefix}.attn_bias"] = self.attn.bias
        return out


@dataclass
class StackWeights:
    layers: list          # of LstmnLayerWeights
    skip: bool = False    # append the token embedding to upper-layer inputs

    def named(self, prefix: str = "") -> dict:
        out = {}
        for k, layer in enumerate(self.layers):
            name = f"{prefix}layer{k + 1}"
            out.update(layer.named(name, upper=k > 0))
        return out


class Tapes:
    """Per-sequence hidden/memory tapes plus cached attention projections.

    ``h_proj`` holds W_h @ h_i for each slot, computed once when the slot
    is appended so later steps reuse it.  With a capacity, appending past
    the bound evicts the oldest slot (FIFO).
    """

    def __init__(self, capacity: Optional[int] = None):
        if capacity is not None and capacity < 1:
            raise TapeError(f"tape capacity must be >= 1, got {capacity}")
        self.h: list = []
        self.c: list = []
        self.h_proj: list = []
        self.capacity = capacity

    def __len__(self) -> int:
        return len(self.h)

    def append(self, h: Tensor, c: Tensor, h_proj: Optional[Tensor] = None) -> None:
        self.h.append(h)
        self.c.append(c)
        self.h_proj.append(h_proj)
        if self.capacity is not None and len(self.h) > self.capacity:
            del self.h[0], self.c[0], self.h_proj[0]

    def check(self) -> None:
        if len(self.h) != len(self.c):
            raise TapeError(
                f"hidden tape length {len(self.h)} != memory tape length {len(self.c)}")


@dataclass
class IntraAttention:
    """Attention record for one step: raw energies and the normalized
    distribution over tape slots (None at the first step, when the tape
    is empty), plus the adaptive summaries used in the state update."""
    scores: Optional[Tensor]    # (B, t-1)
    weights: Optional[Tensor]   # (B, t-1)
    htilde: Tensor              # (B, h)
    ctilde: Tensor              # (B, h)


def glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_gate_weights(rng, hidden: int, in_size: int, bias: bool = True) -> GateWeights:
    return GateWeights(
        w=glorot(rng, 4 * hidden, hidden + in_size),
        bias=zeros_param(4 * hidden) if bias else None,
    )


def init_intra_attention(rng, attn_size: int, hidden: int, in_size: int,
                         bias: bool = True) -> IntraAttentionWeights:
    return IntraAttentionWeights(
        v=zeros_param(attn_size),
        w_h=glorot(rng, attn_size, hidden),
        w_x=glorot(rng, attn_size, in_size),
        w_htilde=glorot(rng, attn_size, hidden),
        bias=zeros_param(attn_size) if bias else None,
    )


def init_lstmn_layer(rng, hidden: int, in_size: int, attn_size: int,
                     attention_bias: bool = True) -> LstmnLayerWeights:
    return LstmnLayerWeights(
        gates=init_gate_weights(rng, hidden, in_size),
        attn=init_intra_attention(rng, attn_size, hidden, in_size, bias=attention_bias),
    )


def init_stack(rng, num_layers: int, hidden: int, embed: int, attn_size: int,
               skip: bool = False, attention_bias: bool = True) -> StackWeights:
    if num_layers < 1:
        raise ValueError(f"layer count must be >= 1, got {num_layers}")
    layers = []
    for k in range(num_layers):
        in_size = embed if k == 0 else hidden + (embed if skip else 0)
        layers.append(init_lstmn_layer(rng, hidden, in_size, attn_size, attention_bias))
    return StackWeights(layers=layers, skip=skip)


def zero_state(batch: int, hidden: int) -> CellState:
    return CellState(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def _gates(rec: Tensor, x: Tensor, w: GateWeights):
    z = ad.linear(ad.concat([rec, x], axis=1), w.w)
    if w.bias is not None:
        z = ad.add(z, w.bias)
    h = w.hidden_size
    i = ad.sigmoid(ad.slice_cols(z, 0, h))
    f = ad.sigmoid(ad.slice_cols(z, h, 2 * h))
    o = ad.sigmoid(ad.slice_cols(z, 2 * h, 3 * h))
    chat = ad.tanh(ad.slice_cols(z, 3 * h, 4 * h))
    return i, f, o, chat


def lstm_step(x: Tensor, prev: CellState, w: GateWeights) -> CellState:
    """One standard LSTM update from (h_{t-1}, c_{t-1})."""
    i, f, o, chat = _gates(prev.h, x, w)
    c = ad.add(ad.mul(f, prev.c), ad.mul(i, chat))
    h = ad.mul(o, ad.tanh(c))
    return CellState(h, c)


def intra_attend(x: Tensor, tapes: Tapes, htilde_prev: Tensor,
                 w: IntraAttentionWeights, mask=None):
    """Attention energies and distribution over the hidden tape.

    Returns (scores, weights), each (B, t-1).  The tape must be
    non-empty; the first-step convention is the caller's concern.
    """
    tapes.check()
    if len(tapes) == 0:
        raise TapeError("attention over an empty tape")
    proj = []
    for slot_h, cached in zip(tapes.h, tapes.h_proj):
        proj.append(cached if cached is not None else ad.linear(slot_h, w.w_h))
    p3 = ad.stack_slots(proj)                                   # (B, t-1, a)
    q = ad.add(ad.linear(x, w.w_x), ad.linear(htilde_prev, w.w_htilde))
    if w.bias is not None:
        q = ad.add(q, w.bias)
    scores = ad.slot_dot(ad.tanh(ad.bcast_add_slots(p3, q)), w.v)
    weights = ad.masked_softmax(scores, mask)
    return scores, weights


def lstmn_step(x: Tensor, tapes: Tapes, htilde_prev: Tensor,
               w: LstmnLayerWeights, mask=None):
    """One memory-tape update; appends the new state to ``tapes``.

    Empty-tape convention: at the first step the summaries are zero, so
    the gate block sees [0, x_t] and c_t reduces to i * c-hat.
    """
    tapes.check()
    batch = x.data.shape[0]
    hidden = w.gates.hidden_size
    if len(tapes) == 0:
        zero = Tensor(np.zeros((batch, hidden)))
        attn = IntraAttention(None, None, zero, zero)
    else:
        scores, weights = intra_attend(x, tapes, htilde_prev, w.attn, mask)
        htilde = ad.attend(weights, ad.stack_slots(tapes.h))
        ctilde = ad.attend(weights, ad.stack_slots(tapes.c))
        attn = IntraAttention(scores, weights, htilde, ctilde)
    i, f, o, chat = _gates(attn.htilde, x, w.gates)
    c = ad.add(ad.mul(f, attn.ctilde), ad.mul(i, chat))
    h = ad.mul(o, ad.tanh(c))
    tapes.append(h, c, ad.linear(h, w.attn.w_h))
    return CellState(h, c), attn


def stack_step(x: Tensor, tapes: list, summaries_prev: list, w: StackWeights,
               mask=None):
    """One step through all layers; layer k+1 consumes layer k's output
    (concatenated with x when skip connections are on)."""
    if len(tapes) != len(w.layers) or len(summaries_prev) != len(w.layers):
        raise TapeError(
            f"expected {len(w.layers)} tape/summary entries, "
            f"got {len(tapes)}/{len(summaries_prev)}")
    states, traces = [], []
    inp = x
    for k, layer in enumerate(w.layers):
        if k > 0:
            inp = ad.concat([states[-1].h, x], axis=1) if w.skip else states[-1].h
        state, attn = lstmn_step(inp, tapes[k], summaries_prev[k], layer, mask)
        states.append(state)
        traces.append(attn)
    return states, traces


@dataclass
class StackRun:
    """Full-sequence result: per-step top-layer states (kept for every
    step even when a capacity bound evicts tape slots), final per-layer
    tapes, and per-step/per-layer attention traces."""
    top_h: list           # [T] of (B, h)
    top_c: list           # [T] of (B, h)
    tapes: list           # [layers] of Tapes
    traces: list          # [T][layers] of IntraAttention


def run_stack(xs: list, w: StackWeights, capacity: Optional[int] = None) -> StackRun:
    """Process a token-embedding sequence left to right.  ``capacity``
    bounds only how far back the attention may look."""
    if not xs:
        raise TapeError("cannot run over an empty sequence")
    batch = xs[0].data.shape[0]
    hidden = w.layers[0].gates.hidden_size
    tapes = [Tapes(capacity) for _ in w.layers]
    summaries = [Tensor(np.zeros((batch, hidden))) for _ in w.layers]
    top_h, top_c, traces = [], [], []
    for x in xs:
        states, step_traces = stack_step(x, tapes, summaries, w)
        summaries = [t.htilde for t in step_traces]
        top_h.append(states[-1].h)
        top_c.append(states[-1].c)
        traces.append(step_traces)
    return StackRun(top_h=top_h, top_c=top_c, tapes=tapes, traces=traces)


def init_lstm_stack(rng, num_layers: int, hidden: int, embed: int) -> list:
    """Plain stacked-LSTM weights, layer k>0 consuming layer k-1's output."""
    return [init_gate_weights(rng, hidden, embed if k == 0 else hidden)
            for k in range(num_layers)]


def run_lstm(xs: list, layers: list) -> list:
    """Stacked-LSTM baseline; returns the top layer's h_t per step."""
    if not xs:
        raise TapeError("cannot run over an empty sequence")
    batch = xs[0].data.shape[0]
    states = [zero_state(batch, w.hidden_size) for w in layers]
    top_h = []
    for x in xs:
        inp = x
        for k, w in enumerate(layers):
            states[k] = lstm_step(inp, states[k], w)
            inp = states[k].h
        top_h.append(inp)
    return top_h


def lstm_named(layers: list, prefix: str = "") -> dict:
    out = {}
    for k, w in enumerate(layers):
        out[f"{prefix}layer{k + 1}.W"] = w.w
        if w.bias is not None:
            out[f"{prefix}layer{k + 1}.bias"] = w.bias
    return out
