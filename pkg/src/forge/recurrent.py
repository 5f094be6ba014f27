"""Recurrent prototype module: a gated linear recurrence over weight tokens.

    h_j = lam * h_{j-1} + (1 - lam) * (W_in u_j + b_in)
    g_j = sigmoid(W_g u_j + b_g)
    p_j = W_out (g_j * h_j) + b_out

with lam = sigmoid(decay_logits) per hidden channel, so every state is a
convex combination of past inputs and the recurrence cannot blow up.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx


class SsmBlock:
    def __init__(self, in_dim: int, hidden: int, out_dim: int, seed: int = 0):
        rng = nx.rng_stream(seed, "ssm-init")
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.w_in = nx.parameter(rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim), "ssm.w_in")
        self.b_in = nx.parameter(np.zeros(hidden), "ssm.b_in")
        self.w_gate = nx.parameter(rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim), "ssm.w_gate")
        self.b_gate = nx.parameter(np.zeros(hidden), "ssm.b_gate")
        # spread of time constants, lam roughly in [0.5, 0.98]
        self.decay_logits = nx.parameter(np.linspace(0.0, 4.0, hidden), "ssm.decay_logits")
        self.w_out = nx.parameter(rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden), "ssm.w_out")
        self.b_out = nx.parameter(np.zeros(out_dim), "ssm.b_out")

    def parameters(self) -> list[nx.Tensor]:
        return [self.w_in, self.b_in, self.w_gate, self.b_gate, self.decay_logits, self.w_out, self.b_out]

    def named_parameters(self) -> dict[str, nx.Tensor]:
        return {p.name: p for p in self.parameters()}

    def decay(self) -> np.ndarray:
        return nx._sigmoid(self.decay_logits.data)

    def zero_state(self, batch: int = 1) -> nx.Tensor:
        return nx.Tensor(np.zeros((batch, self.hidden)))


def ssm_step(block: SsmBlock, u, h_prev) -> tuple[nx.Tensor, nx.Tensor]:
    """One recurrence step on a batch: u (N, in_dim), h_prev (N, hidden)."""
    u, h_prev = nx.as_tensor(u), nx.as_tensor(h_prev)
    if u.shape[-1] != block.in_dim:
        raise nx.DimensionError(f"ssm_step expects inputs of dim {block.in_dim}, got {u.shape[-1]}")
    if h_prev.shape[-1] != block.hidden:
        raise nx.DimensionError(f"ssm_step expects state of dim {block.hidden}, got {h_prev.shape[-1]}")
    lam = nx.sigmoid(block.decay_logits)
    drive = u @ block.w_in + block.b_in
    h = lam * h_prev + (1.0 - lam) * drive
    gate = nx.sigmoid(u @ block.w_gate + block.b_gate)
    p = (gate * h) @ block.w_out + block.b_out
    return p, h


def ssm_scan(block: SsmBlock, inputs, h0=None) -> tuple[list[nx.Tensor], nx.Tensor]:
    """Run ``ssm_step`` over a sequence.

    ``inputs`` is (T, in_dim) for one sequence or (N, T, in_dim) for a batch;
    returns the list of prototypes (each (N, out_dim)) and the final state.
    """
    inputs = nx.as_tensor(inputs)
    single = inputs.ndim == 2
    if single:
        inputs = inputs.reshape(1, *inputs.shape)
    n, length, _ = inputs.shape
    if length == 0:
        raise ValueError("cannot scan an empty sequence")
    h = block.zero_state(n) if h0 is None else nx.as_tensor(h0)
    protos = []
    for j in range(length):
        p, h = ssm_step(block, inputs[:, j, :], h)
        protos.append(p)
    return protos, h
