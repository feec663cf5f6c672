"""Hierarchical motion encoder: one recurrent encoder per motion order."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .motion import InsufficientLengthError
from .nn_core import Linear, LSTMCell, ParamStore, RecurrentState, Tensor
from .social import neighbor_indicator

ORDERS = ("s", "v", "a")
ORDER_NAMES = {"location": "s", "velocity": "v", "acceleration": "a", "s": "s", "v": "v", "a": "a"}


class MotionEncoder:
    """Embedding (linear + leaky ReLU) followed by an LSTM rollout.

    Sequences are left-padded to a common length; padded steps leave the
    recurrent state untouched, so each agent's final state equals an
    unpadded rollout of its own sequence.
    """

    def __init__(self, store: ParamStore, order: str, embed: int, hidden: int, scale: float = 1.0):
        self.order = order
        self.hidden = hidden
        self.scale = scale
        self.embed = Linear(store, f"enc.{order}.embed", 2, embed)
        self.cell = LSTMCell(store, f"enc.{order}.lstm", embed, hidden)

    def __call__(self, seqs: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        seqs = np.asarray(seqs, dtype=np.float64)
        n, steps = seqs.shape[:2]
        if n == 0:
            return Tensor(np.zeros((0, self.hidden)))
        if lengths is None:
            lengths = np.full(n, steps)
        if steps < 1 or np.any(lengths < 1):
            raise InsufficientLengthError("cannot encode an empty sequence")
        x_all = nn.leaky_relu(self.embed(Tensor(seqs / self.scale)))
        state = self.cell.zero_state(n)
        first_valid = steps - lengths
        for t in range(steps):
            nxt = self.cell(x_all[:, t], state)
            active = first_valid <= t
            if active.all():
                state = nxt
            else:
                m = active[:, None]
                state = RecurrentState(nn.where(m, nxt.hidden, state.hidden),
                                       nn.where(m, nxt.cell, state.cell))
        return state.hidden


@dataclass
class SceneEncodings:
    ego: dict[str, Tensor]  # order -> (B, H)
    neighbors: dict[str, Tensor]  # order -> (M, H)
    nb_scene: np.ndarray  # (M,) scene index within the batch
    nb_ids: np.ndarray  # (M,)
    nb_positions: np.ndarray  # (M, 2) last observed position, ego frame

    @property
    def n_scenes(self) -> int:
        return next(iter(self.ego.values())).shape[0]

    @property
    def n_neighbors(self) -> int:
        return len(self.nb_ids)


def _left_pad(seqs: list[np.ndarray], steps: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros((len(seqs), steps, 2))
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for k, s in enumerate(seqs):
        s = s[-steps:]
        out[k, steps - len(s):] = s
        lengths[k] = len(s)
    return out, lengths


def motion_orders(seqs: np.ndarray, lengths: np.ndarray, f: float) -> dict[str, tuple]:
    """Left-padded location/velocity/acceleration arrays with their lengths."""
    v = np.diff(seqs, axis=1) * f
    a = np.diff(v, axis=1) * f
    out = {"s": (seqs, lengths), "v": (v, lengths - 1), "a": (a, lengths - 2)}
    for key, (arr, ln) in out.items():
        pad = arr.shape[1] - ln
        arr[np.arange(arr.shape[1])[None, :] < pad[:, None]] = 0.0
    return out


class EncoderStack:
    def __init__(self, store: ParamStore, orders=ORDERS, embed: int = 16,
                 hidden: dict[str, int] | None = None, scales: dict[str, float] | None = None):
        hidden = hidden or {"s": 64, "v": 32, "a": 32}
        scales = scales or {"s": 1.0, "v": 1.0, "a": 1.0}
        self.orders = tuple(orders)
        self.encoders = {o: MotionEncoder(store, o, embed, hidden[o], scales[o]) for o in self.orders}

    def hidden_size(self, order: str) -> int:
        return self.encoders[order].hidden

    def encode_sequence(self, seq, order: str) -> Tensor:
        order = ORDER_NAMES[order]
        seq = np.asarray(seq, dtype=np.float64).reshape(-1, 2)
        if len(seq) < 1:
            raise InsufficientLengthError("cannot encode an empty sequence")
        return self.encoders[order](seq[None])[0]

    def encode_batch(self, scenes, field=None, neighbors: bool = True) -> SceneEncodings:
        """Encode egos and neighbors of several scenes in one rollout per order.

        With ``field`` given, neighbors outside it are skipped before encoding:
        they cannot reach the social grid, and leaving them out keeps the
        batch (and hence every other agent's rounding) unchanged.
        """
        scenes = list(scenes)
        f = scenes[0].frequency
        if any(sc.frequency != f for sc in scenes):
            raise ValueError("all scenes in a batch must share one sampling frequency")
        steps = max(len(sc.history) for sc in scenes)
        agents, scene_idx, ids = [], [], []
        for b, sc in enumerate(scenes):
            if len(sc.history) < 3:
                raise InsufficientLengthError(f"scene {sc.scene_id}: ego has < 3 observed steps")
            agents.append(sc.history)
        for b, sc in enumerate(scenes if neighbors else []):
            for nb in sc.neighbors:
                if len(nb.history) < 3:
                    continue  # too short to difference twice
                if field is not None and neighbor_indicator((0.0, 0.0), nb.history[-1], field) is None:
                    continue
                agents.append(nb.history)
                scene_idx.append(b)
                ids.append(nb.agent_id)
        seqs, lengths = _left_pad(agents, steps)
        orders = motion_orders(seqs, lengths, f)
        hid = {o: self.encoders[o](*orders[o]) for o in self.orders}
        n_ego = len(scenes)
        nb_pos = seqs[n_ego:, -1] if len(agents) > n_ego else np.zeros((0, 2))
        return SceneEncodings(
            ego={o: h[:n_ego] for o, h in hid.items()},
            neighbors={o: h[n_ego:] for o, h in hid.items()},
            nb_scene=np.asarray(scene_idx, dtype=np.int64),
            nb_ids=np.asarray(ids, dtype=np.int64),
            nb_positions=nb_pos,
        )

    def encode_scene(self, scene, field=None) -> SceneEncodings:
        return self.encode_batch([scene], field)


def encode_sequence(seq, order: str, stack: EncoderStack) -> Tensor:
    return stack.encode_sequence(seq, order)


def encode_scene(scene, stack: EncoderStack) -> SceneEncodings:
    return stack.encode_scene(scene)
