"""Encoder-decoder composition of two tape cells with inter-attention.

The encoder is a (possibly stacked) tape cell; its final top-layer tapes
become the source hidden tape Y and memory tape A.  The decoder is a
single tape cell that additionally attends over the source at every
step.  Two couplings are provided:

* shallow fusion: the decoder update is the plain tape-cell step; the
  source context vector only joins the prediction input, concatenated
  with h_t.
* deep fusion: a transfer gate writes the aligned source memory directly
  into the target memory update, c_t = r * a~ + f * c~ + i * c-hat.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import Tensor
from .cells import CellState, IntraAttention, LstmnLayerWeights, StackWeights, TapeError, Tapes


@dataclass
class SourceTapes:
    """Stacked source-side tapes: y (B, m, h) hidden, a (B, m, h) memory,
    and a (B, m) validity mask for padded batching."""
    y: Tensor
    a: Tensor
    mask: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.y.data.shape[1]


@dataclass
class InterAttentionWeights:
    u: Tensor            # (a,)
    w_gamma: Tensor      # (a, h)  source-slot projection
    w_x: Tensor          # (a, e)  target-input projection
    w_gammatilde: Tensor  # (a, h) previous-context projection
    w_r: Tensor          # (h, h + e) transfer gate over [gamma~, x]
    r_bias: Optional[Tensor] = None   # absent by default; a -inf bias kills the gate

    def named(self, prefix: str = "inter") -> dict:
        out = {f"{prefix}.u": self.u,
               f"{prefix}.W_gamma": self.w_gamma,
               f"{prefix}.W_x": self.w_x,
               f"{prefix}.W_gammatilde": self.w_gammatilde,
               f"{prefix}.W_r": self.w_r}
        if self.r_bias is not None:
            out[f"{prefix}.r_bias"] = self.r_bias
        return out


@dataclass
class InterAttention:
    """One decode step's alignment over the source: raw energies, the
    distribution, both adaptive summaries, and the transfer gate (deep
    fusion only)."""
    energies: Tensor            # (B, m)
    weights: Tensor             # (B, m)
    gamma_tilde: Tensor         # (B, h)
    alpha_tilde: Tensor         # (B, h)
    gate: Optional[Tensor] = None   # (B, h)


@dataclass
class DecoderWeights:
    cell: LstmnLayerWeights
    inter: InterAttentionWeights

    def named(self, prefix: str = "") -> dict:
        out = self.cell.named(f"{prefix}layer1")
        out.update(self.inter.named(f"{prefix}inter"))
        return out


def init_inter_attention(rng, attn_size: int, hidden: int, embed: int) -> InterAttentionWeights:
    return InterAttentionWeights(
        u=cells.zeros_param(attn_size),
        w_gamma=cells.glorot(rng, attn_size, hidden),
        w_x=cells.glorot(rng, attn_size, embed),
        w_gammatilde=cells.glorot(rng, attn_size, hidden),
        w_r=cells.glorot(rng, hidden, hidden + embed),
    )


def init_decoder(rng, hidden: int, embed: int, attn_size: int,
                 attention_bias: bool = True) -> DecoderWeights:
    return DecoderWeights(
        cell=cells.init_lstmn_layer(rng, hidden, embed, attn_size, attention_bias),
        inter=init_inter_attention(rng, attn_size, hidden, embed),
    )


def encode(xs: list, w: StackWeights, capacity: Optional[int] = None,
           mask: Optional[np.ndarray] = None):
    """Run the encoder over source embeddings, left to right.

    Returns (SourceTapes, per-step top-layer IntraAttention traces).  The
    source tapes hold every step's top-layer state; ``capacity`` only
    bounds how far back the encoder's own attention may look.
    """
    if not xs:
        raise TapeError("cannot encode an empty source")
    run = cells.run_stack(xs, w, capacity=capacity)
    tapes = SourceTapes(y=ad.stack_slots(run.top_h), a=ad.stack_slots(run.top_c),
                        mask=mask)
    return tapes, [step[-1] for step in run.traces]


def source_projection(src: SourceTapes, w: InterAttentionWeights) -> Tensor:
    """Project every source hidden slot into attention space once per
    decoded sequence; reused by all decode steps."""
    return ad.slot_linear(src.y, w.w_gamma)


def inter_attend(x: Tensor, src: SourceTapes, gamma_tilde_prev: Tensor,
                 w: InterAttentionWeights,
                 src_proj: Optional[Tensor] = None) -> InterAttention:
    """Align the current target input against the whole source."""
    if src.length < 1:
        raise TapeError("inter-attention needs a non-empty source")
    p3 = src_proj if src_proj is not None else source_projection(src, w)
    q = ad.add(ad.linear(x, w.w_x), ad.linear(gamma_tilde_prev, w.w_gammatilde))
    energies = ad.slot_dot(ad.tanh(ad.bcast_add_slots(p3, q)), w.u)
    weights = ad.masked_softmax(energies, src.mask)
    gamma_tilde = ad.attend(weights, src.y)
    alpha_tilde = ad.attend(weights, src.a)
    return InterAttention(energies, weights, gamma_tilde, alpha_tilde)


def deep_decode_step(x: Tensor, tapes: Tapes, htilde_prev: Tensor,
                     gamma_tilde_prev: Tensor, src: SourceTapes,
                     w: DecoderWeights, src_proj: Optional[Tensor] = None):
    """One deep-fusion decoder step; appends to the target tapes.

    The transfer gate decides how much aligned source memory enters the
    new target memory alongside the intra term and the fresh input term.
    """
    tapes.check()
    batch = x.data.shape[0]
    hidden = w.cell.gates.hidden_size
    if len(tapes) == 0:
        zero = Tensor(np.zeros((batch, hidden)))
        intra = IntraAttention(None, None, zero, zero)
    else:
        scores, weights = cells.intra_attend(x, tapes, htilde_prev, w.cell.attn)
        intra = IntraAttention(scores, weights,
                               ad.attend(weights, ad.stack_slots(tapes.h)),
                               ad.attend(weights, ad.stack_slots(tapes.c)))
    inter = inter_attend(x, src, gamma_tilde_prev, w.inter, src_proj)
    i, f, o, chat = cells._gates(intra.htilde, x, w.cell.gates)
    pre = ad.linear(ad.concat([inter.gamma_tilde, x], axis=1), w.inter.w_r)
    if w.inter.r_bias is not None:
        pre = ad.add(pre, w.inter.r_bias)
    r = ad.sigmoid(pre)
    inter.gate = r
    c = ad.add(ad.add(ad.mul(r, inter.alpha_tilde), ad.mul(f, intra.ctilde)),
               ad.mul(i, chat))
    h = ad.mul(o, ad.tanh(c))
    tapes.append(h, c, ad.linear(h, w.cell.attn.w_h))
    return CellState(h, c), intra, inter


def shallow_decode_step(x: Tensor, tapes: Tapes, htilde_prev: Tensor,
                        gamma_tilde_prev: Tensor, src: SourceTapes,
                        w: DecoderWeights, src_proj: Optional[Tensor] = None):
    """One shallow-fusion decoder step: the cell update is the plain tape
    step; the source context only feeds the prediction input.

    Returns (state, intra, inter, context) where context = [h_t, gamma~_t].
    """
    state, intra = cells.lstmn_step(x, tapes, htilde_prev, w.cell)
    inter = inter_attend(x, src, gamma_tilde_prev, w.inter, src_proj)
    context = ad.concat([state.h, inter.gamma_tilde], axis=1)
    return state, intra, inter, context


@dataclass
class DecodeRun:
    """Per-step decoder outputs: prediction inputs (h_t for deep fusion,
    [h_t, gamma~_t] for shallow), plus both attention trace streams."""
    outputs: list
    intra: list
    inter: list


def run_decoder(xs: list, src: SourceTapes, w: DecoderWeights, mode: str,
                capacity: Optional[int] = None) -> DecodeRun:
    if mode not in ("deep", "shallow"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    if not xs:
        raise TapeError("cannot decode an empty target")
    batch = xs[0].data.shape[0]
    hidden = w.cell.gates.hidden_size
    tapes = Tapes(capacity)
    htilde = Tensor(np.zeros((batch, hidden)))
    gamma = Tensor(np.zeros((batch, hidden)))
    proj = source_projection(src, w.inter)
    outputs, intra_traces, inter_traces = [], [], []
    for x in xs:
        if mode == "deep":
            state, intra, inter = deep_decode_step(x, tapes, htilde, gamma, src, w, proj)
            outputs.append(state.h)
        else:
            state, intra, inter, context = shallow_decode_step(
                x, tapes, htilde, gamma, src, w, proj)
            outputs.append(context)
        htilde = intra.htilde
        gamma = inter.gamma_tilde
        intra_traces.append(intra)
        inter_traces.append(inter)
    return DecodeRun(outputs=outputs, intra=intra_traces, inter=inter_traces)
