"""Stage 2: window-wise graph learning and concurrent-noise reconstruction.

Each window gets a fresh graph over variates: cosine similarity of the
stage-1 error rows. A single self-loop-free graph convolution mixes the
short windows of the *other* variates (degree-normalized) and maps them
through a learnable time-axis weight matrix and tanh, producing the noise
reconstruction. A variate can therefore never explain its own anomaly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import WindowInstance
from .nn import Tensor
from .temporal import TemporalModule, reconstruct

DEGREE_EPS = 1e-8
# Edges below this similarity are ignored by the message pass. Error rows are
# correlated even between unrelated variates because the shared network has a
# shared position-dependent bias; that correlation reaches ~0.9, while rows
# hit by the same concurrent-noise pattern sit above 0.95. Gating at 0.8
# keeps the co-noise cliques (including windows that only partially overlap
# an event) and drops the bulk of the bias edges, whose unrelated values
# would otherwise dilute the shared-noise content of the messages.
SIM_GATE = 0.8


@dataclass(frozen=True)
class WindowGraph:
    """Pairwise similarity graph of one window.

    ``adjacency`` keeps the raw similarities (diagonal 1 for nonzero error
    rows); ``hollow`` is the same matrix with the diagonal zeroed; ``degrees``
    are the hollow row sums.
    """

    adjacency: np.ndarray
    hollow: np.ndarray
    degrees: np.ndarray


def window_graph(errors: np.ndarray) -> WindowGraph:
    """Build the similarity graph from an N x omega error matrix.

    Zero-norm error rows get similarity 0 to every other variate. The
    diagonal is zeroed explicitly (rather than subtracting I) so that
    numerically degenerate rows cannot leave a residual self-loop.
    """
    e = np.asarray(errors, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = e / safe[:, None]
    a = unit @ unit.T
    np.clip(a, -1.0, 1.0, out=a)
    a = (a + a.T) / 2.0  # exact symmetry
    hollow = a.copy()
    np.fill_diagonal(hollow, 0.0)
    return WindowGraph(adjacency=a, hollow=hollow, degrees=hollow.sum(axis=1))


def _inverse_degrees(degrees: np.ndarray) -> np.ndarray:
    # the floor of 1 keeps messages bounded when a row's similarities are all
    # weak (a degree near zero would otherwise amplify the neighbor mixture
    # arbitrarily); isolated variates (degree <= eps) get a zero row.
    inv = 1.0 / np.maximum(degrees, 1.0)
    return np.where(degrees <= DEGREE_EPS, 0.0, inv)


class NoiseModule:
    """Learnable parameters of the graph convolution (time-axis map + bias)."""

    def __init__(self, omega: int, dtype=np.float64):
        self.omega = omega
        self.dtype = np.dtype(dtype).type
        self.w_theta = nn.zeros_param((omega, omega), dtype=self.dtype, name="w_theta")
        self.b_theta = nn.zeros_param((omega,), dtype=self.dtype, name="b_theta")

    def parameters(self) -> list[Tensor]:
        return [self.w_theta, self.b_theta]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "noise/w_theta": self.w_theta.data,
            "noise/b_theta": self.b_theta.data,
            "noise/__dims__": np.array([self.omega]),
        }

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], dtype=np.float64
                   ) -> "NoiseModule":
        omega = int(arrays["noise/__dims__"][0])
        mod = cls(omega, dtype=dtype)
        mod.w_theta.data = np.asarray(arrays["noise/w_theta"], dtype=mod.dtype)
        mod.b_theta.data = np.asarray(arrays["noise/b_theta"], dtype=mod.dtype)
        return mod


def graph_messages(graph: WindowGraph, short: np.ndarray) -> np.ndarray:
    """Degree-normalized neighbor mixture of the short windows (no self term).

    Only strongly positively correlated neighbors contribute (see SIM_GATE).
    Signed or weak mixing weights break the degree normalization whenever
    similarities partly cancel: the common level of the neighbor values then
    enters the message scaled by an arbitrary near-zero net degree instead of
    dropping out, which buries the shared-noise signal under baseline leakage.
    """
    pos = np.where(graph.hollow >= SIM_GATE, graph.hollow, 0.0)
    inv = _inverse_degrees(pos.sum(axis=1))
    return inv[:, None] * (pos @ np.asarray(short, dtype=np.float64))


def gcn_reconstruct(graph: WindowGraph, short: np.ndarray,
                    module: NoiseModule) -> Tensor:
    """Noise reconstruction tanh(messages @ W_theta + b_theta), N x omega."""
    msg = graph_messages(graph, short).astype(module.dtype)
    return nn.tanh(Tensor(msg) @ module.w_theta + module.b_theta)


def batch_graph_messages(errors: np.ndarray, shorts: np.ndarray) -> np.ndarray:
    """Vectorized graph_messages over a (B, N, omega) stack of windows."""
    e = np.asarray(errors, dtype=np.float64)
    y = np.asarray(shorts, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1)
    unit = e / np.where(norms > 0.0, norms, 1.0)[..., None]
    a = np.matmul(unit, np.swapaxes(unit, -1, -2))
    n = a.shape[-1]
    idx = np.arange(n)
    a[..., idx, idx] = 0.0
    a[a < SIM_GATE] = 0.0
    inv = _inverse_degrees(a.sum(axis=-1))
    return inv[..., None] * np.matmul(a, y)


def complete_graph_messages(shorts: np.ndarray) -> np.ndarray:
    """Static-graph ablation: all-ones graph minus self-loops (uniform mixing)."""
    y = np.asarray(shorts, dtype=np.float64)
    n = y.shape[-2]
    if n < 2:
        return np.zeros_like(y)
    total = y.sum(axis=-2, keepdims=True)
    return (total - y) / (n - 1)


def noise_forward(messages: np.ndarray, module: NoiseModule) -> Tensor:
    """Apply the learnable map to precomputed messages (any leading batch dims)."""
    m = Tensor(np.ascontiguousarray(messages, dtype=module.dtype))
    return nn.tanh(m @ module.w_theta + module.b_theta)


def stage2_forward(instance: WindowInstance, temporal_module: TemporalModule,
                   noise_module: NoiseModule
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full two-stage forward for one window with stage-1 gradients blocked.

    Returns (Y1_hat, Y2_hat, residual) where residual = Y - Y1_hat - Y2_hat.
    """
    y1, errors = reconstruct(instance, temporal_module)
    graph = window_graph(errors)
    with nn.no_grad():
        y2 = gcn_reconstruct(graph, instance.short, noise_module).data
    y2 = y2.astype(np.float64)
    return y1, y2, instance.short - y1 - y2
