"""Triplet metric learning over a per-location linear feature adapter.

The trainable object is an affine map y = normalize(W x + b) applied to
every cell descriptor.  Training alternates: adapt all features with the
current parameters, mine hard positives and negatives on the adapted
features, then take a single Adam step on the clamped triplet loss

    L = -min(lambda, s(P1, P2)) + (1/N) sum_i max(s(P1, N_i), 1 - lambda)

where s is cosine similarity.  Both clamps contribute zero gradient when
active, so a well-separated triplet stops moving the parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, FeaturePyramid
from .mining import MiningConfig, MiningRound, mine_round

_NORM_EPS = 1e-12


@dataclass
class AdapterParams:
    W: np.ndarray  # (C_out, C_in)
    b: np.ndarray  # (C_out,)

    @classmethod
    def identity(cls, channels: int) -> "AdapterParams":
        return cls(W=np.eye(channels, dtype=np.float64),
                   b=np.zeros(channels, dtype=np.float64))

    def copy(self) -> "AdapterParams":
        return AdapterParams(W=self.W.copy(), b=self.b.copy())


@dataclass
class LossConfig:
    lam: float = 0.8
    n_neg: int = 20

    def __post_init__(self):
        if not (0.0 < self.lam < 1.0):
            raise ValueError("lambda must be in (0, 1)")


@dataclass
class TripletEntry:
    """One training triplet in base (pre-adapter) feature space."""

    p1: np.ndarray
    p2: np.ndarray
    negatives: np.ndarray  # (N, C)


@dataclass
class AdamState:
    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: AdapterParams, lr: float = 1e-5) -> "AdamState":
        return cls(m_w=np.zeros_like(params.W), v_w=np.zeros_like(params.W),
                   m_b=np.zeros_like(params.b), v_b=np.zeros_like(params.b),
                   lr=lr)


def apply_adapter(params: AdapterParams, x: np.ndarray) -> np.ndarray:
    """normalize(W x + b); an all-zero input stays zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.W.shape[1]:
        raise ValueError("feature dimension does not match adapter")
    z = x @ params.W.T + params.b
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    y = np.divide(z, n, out=np.zeros_like(z), where=n > _NORM_EPS)
    if x.ndim == 1:
        if not np.any(x):
            return np.zeros_like(z)
        return y
    mask = np.any(x != 0, axis=-1)
    return np.where(mask[..., None], y, 0.0)


def adapt_pyramid(params: AdapterParams, pyr: FeaturePyramid) -> FeaturePyramid:
    maps = [FeatureMap(scale_factor=m.scale_factor,
                       values=apply_adapter(params, m.values).astype(np.float32))
            for m in pyr.maps]
    return FeaturePyramid(image_id=pyr.image_id, maps=maps,
                          cell_stride_px=pyr.cell_stride_px)


def triplet_loss(p1: np.ndarray, p2: np.ndarray, negatives: np.ndarray,
                 cfg: LossConfig) -> float:
    """Clamped triplet loss on already-adapted unit vectors."""
    negatives = np.atleast_2d(negatives)
    if negatives.shape[0] == 0:
        raise ValueError("at least one negative is required")
    pos = min(cfg.lam, float(p1 @ p2))
    neg = np.maximum(negatives @ p1, 1.0 - cfg.lam)
    return -pos + float(neg.mean())


def _forward(params: AdapterParams, x: np.ndarray):
    z = x @ params.W.T + params.b
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.maximum(n, _NORM_EPS)
    return z / safe, safe


def _backward(dy: np.ndarray, y: np.ndarray, n: np.ndarray, x: np.ndarray,
              grad_w: np.ndarray, grad_b: np.ndarray) -> None:
    # y = z / |z|  =>  dz = (dy - (dy . y) y) / |z|
    dz = (dy - np.sum(dy * y, axis=-1, keepdims=True) * y) / n
    flat_dz = dz.reshape(-1, dz.shape[-1])
    flat_x = x.reshape(-1, x.shape[-1])
    grad_w += flat_dz.T @ flat_x
    grad_b += flat_dz.sum(axis=0)


def triplet_loss_grad(batch: list[TripletEntry], params: AdapterParams,
                      cfg: LossConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. (W, b).

    Gradients flow through both branches of every similarity and through
    the adapter's normalization; clamped terms contribute nothing.
    """
    if not batch:
        raise ValueError("empty batch")
    grad_w = np.zeros_like(params.W)
    grad_b = np.zeros_like(params.b)
    total = 0.0
    for entry in batch:
        x1 = np.asarray(entry.p1, dtype=np.float64)
        x2 = np.asarray(entry.p2, dtype=np.float64)
        xn = np.atleast_2d(np.asarray(entry.negatives, dtype=np.float64))
        n_neg = xn.shape[0]
        if n_neg == 0:
            raise ValueError("entry with no negatives")

        y1, n1 = _forward(params, x1)
        y2, n2 = _forward(params, x2)
        yn, nn = _forward(params, xn)

        s12 = float(y1 @ y2)
        sn = yn @ y1
        total += -min(cfg.lam, s12) + float(np.maximum(sn, 1.0 - cfg.lam).mean())

        d12 = -1.0 if s12 < cfg.lam else 0.0
        dn = np.where(sn > 1.0 - cfg.lam, 1.0 / n_neg, 0.0)

        dy1 = d12 * y2 + dn @ yn
        dy2 = d12 * y1
        dyn = dn[:, None] * y1[None, :]

        _backward(dy1, y1, n1, x1, grad_w, grad_b)
        _backward(dy2, y2, n2, x2, grad_w, grad_b)
        _backward(dyn, yn, nn, xn, grad_w, grad_b)

    k = len(batch)
    return total / k, grad_w / k, grad_b / k


def adam_step(state: AdamState, params: AdapterParams,
              grad_w: np.ndarray, grad_b: np.ndarray
              ) -> tuple[AdapterParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2

    def upd(m, v, g, p):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return m, v, p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)

    m_w, v_w, w = upd(state.m_w, state.v_w, grad_w, params.W)
    m_b, v_b, b = upd(state.m_b, state.v_b, grad_b, params.b)
    new_state = AdamState(m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b, t=t,
                          lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          epsilon=state.epsilon)
    return AdapterParams(W=w, b=b), new_state


def batch_from_round(rnd: MiningRound,
                     base_pyramids: list[FeaturePyramid]) -> list[TripletEntry]:
    """Resolve a mining round's feature references against the base
    (pre-adapter) pyramids."""
    by_id = {p.image_id: p for p in base_pyramids}

    def fetch(ref):
        m = by_id[ref.image_id].maps[ref.pos.scale_index]
        return np.array(m.values[ref.pos.row, ref.pos.col], dtype=np.float64)

    out = []
    for pair in rnd.pairs:
        if not pair.negatives:
            continue
        out.append(TripletEntry(
            p1=fetch(pair.p1), p2=fetch(pair.p2),
            negatives=np.stack([fetch(r) for r in pair.negatives]),
        ))
    return out


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["round", "loss", "n_verified", "mean_votes"])
            writer.writeheader()
            writer.writerows(self.rows)


def train(base_pyramids: list[FeaturePyramid],
          mining_cfg: MiningConfig,
          loss_cfg: LossConfig,
          rounds: int,
          seed: int,
          lr: float = 1e-5,
          checkpoint_every: int = 0,
          checkpoint_fn=None) -> tuple[AdapterParams, TrainHistory]:
    """Alternate mining on adapted features with single gradient steps.

    Rounds whose mining yields no usable pairs are skipped (recorded in
    the history with a NaN loss).  With rounds=0 the identity adapter is
    returned untouched.
    """
    channels = base_pyramids[0].channels
    params = AdapterParams.identity(channels)
    state = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainHistory()

    for r in range(rounds):
        adapted = [adapt_pyramid(params, p) for p in base_pyramids]
        rnd = mine_round(adapted, mining_cfg, rng)
        batch = batch_from_round(rnd, base_pyramids)
        votes = [c.votes for c in rnd.verified]
        mean_votes = float(np.mean(votes)) if votes else 0.0
        if not batch:
            history.rows.append({"round": r, "loss": float("nan"),
                                 "n_verified": 0, "mean_votes": mean_votes})
            continue
        loss, grad_w, grad_b = triplet_loss_grad(batch, params, loss_cfg)
        params, state = adam_step(state, params, grad_w, grad_b)
        history.rows.append({"round": r, "loss": loss,
                             "n_verified": len(rnd.verified),
                             "mean_votes": mean_votes})
        if checkpoint_every and checkpoint_fn and (r + 1) % checkpoint_every == 0:
            checkpoint_fn(r, params, state)
    return params, history


def save_checkpoint(path, params: AdapterParams, state: AdamState) -> None:
    np.savez(path, W=params.W, b=params.b,
             m_w=state.m_w, v_w=state.v_w, m_b=state.m_b, v_b=state.v_b,
             t=state.t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
             epsilon=state.epsilon)


def load_checkpoint(path) -> tuple[AdapterParams, AdamState]:
    data = np.load(path)
    params = AdapterParams(W=data["W"], b=data["b"])
    state = AdamState(m_w=data["m_w"], v_w=data["v_w"],
                      m_b=data["m_b"], v_b=data["v_b"],
                      t=int(data["t"]), lr=float(data["lr"]),
                      beta1=float(data["beta1"]), beta2=float(data["beta2"]),
                      epsilon=float(data["epsilon"]))
    return params, state
