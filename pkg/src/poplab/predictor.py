"""The forecasting network.

Query-centric design: every scene element is encoded in its own local
frame and elements exchange information only through relative-pose
embeddings, so the network is exactly invariant to the values of masked
history steps (they are zeroed out of the features AND excluded from
attention keys) and equivariant under rigid motions of the scene (all
absolute geometry enters through anchor poses applied outside the
network).

Pipeline: per-step tokens -> temporal attention (one anchor query per
agent) -> lane self-attention -> map->agent and agent->agent attention
-> K learnable mode queries cross-attend the scene (proposals) -> a GRU
re-embeds each proposal and a second cross-attention round refines it
(offsets, per-step Laplace scales, mode probabilities). An optional
reconstruction head decodes each agent's full history from its feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .errors import ContractViolation
from .scene import AgentState, Scene, norm_angle

TEMPORAL_FEATS = 8  # dx, dy, cos/sin dyaw, v, dt, dv/dt, dyaw/dt
RELPOS_FEATS = 6    # dx, dy, cos/sin dyaw, dist, dt
LANE_GEO_FEATS = 2  # dx, dy in lane frame
LANE_SEM_FEATS = 7  # cos/sin rel dir, is_int, is_cw, speed_cls, cos/sin dir_cls


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    k_modes: int = 6
    n_layers: int = 2
    n_heads: int = 4
    t_h: int = 20
    t_f: int = 30
    radius: float = 50.0
    n_freqs: int = 8
    recon_head: bool = False

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ContractViolation(
                f"hidden dim {self.d} must divide by {self.n_heads} heads"
            )
        if self.k_modes < 1:
            raise ContractViolation("need at least one mode")

    def as_dict(self) -> dict:
        return {
            "d": self.d, "k_modes": self.k_modes, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "t_h": self.t_h, "t_f": self.t_f,
            "radius": self.radius, "n_freqs": self.n_freqs,
            "recon_head": self.recon_head,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class FeatureTaps:
    """Distillation taps: per-agent, per-lane, and per-mode features."""

    h_a: Tensor  # [A, d]
    h_m: Tensor  # [M, d]
    h_f: Tensor  # [K, d]

    def detached(self) -> "FeatureTaps":
        return FeatureTaps(self.h_a.detach(), self.h_m.detach(),
                           self.h_f.detach())


@dataclass
class PredictionSet:
    """K hypotheses in the world frame (numpy, detached from the graph).

    ``scales`` are the per-step Laplace scale parameters expressed in
    the focal agent's local coordinates (the frame the likelihood is
    evaluated in).
    """

    proposals: np.ndarray  # [K, T_F, 2]
    refined: np.ndarray    # [K, T_F, 2]
    scales: np.ndarray     # [K, T_F, 2]
    probs: np.ndarray      # [K]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.proposals))
                and np.all(np.isfinite(self.refined))):
            raise ContractViolation("trajectories must be finite")
        if np.any(self.scales <= 0):
            raise ContractViolation("scales must be strictly positive")
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ContractViolation(
                f"probs must sum to 1, got {float(self.probs.sum())}"
            )


@dataclass
class ModelOutput:
    """Full forward result: numpy views for consumers plus the live
    loss-path tensors (focal/agent local frames) for training."""

    pred: PredictionSet
    taps: FeatureTaps
    proposals_local: Tensor       # [K, T_F, 2]
    refined_local: Tensor         # [K, T_F, 2]
    scales: Tensor                # [K, T_F, 2]
    probs: Tensor                 # [K]
    logits: Tensor                # [K]
    recon_local: Tensor | None    # [A, T_H, 4] in per-agent frames
    recon_global: np.ndarray | None  # [A, T_H, 4] world frame
    anchor: AgentState
    agent_anchors: list


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class Predictor:
    """Holds the ParamStore and wires the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _build(self, rng):
        cfg = self.config
        d = cfg.d
        add = self.store.add
        nf = cfg.n_freqs

        # Learnable frequency banks; small init keeps the base wavelengths
        # long relative to typical coordinate magnitudes (tens of meters).
        add("embed.temporal.freqs", rng.normal(0.0, 0.2, nf))
        add("embed.relpos.freqs", rng.normal(0.0, 0.2, nf))
        add("embed.lane.freqs", rng.normal(0.0, 0.2, nf))
        self._bind_freqs()

        # raw scalars pass through alongside the fourier pairs so
        # magnitudes beyond one period stay distinguishable
        t_in = TEMPORAL_FEATS * (2 * nf + 1)
        r_in = RELPOS_FEATS * (2 * nf + 1)
        l_in = LANE_GEO_FEATS * (2 * nf + 1) + LANE_SEM_FEATS
        self.temporal_mlp = dc.MLP(self.store, "embed.temporal.mlp",
                                   [t_in, d, d], rng)
        self.relpos_mlp = dc.MLP(self.store, "embed.relpos.mlp",
                                 [r_in, d, d], rng)
        self.lane_mlp = dc.MLP(self.store, "embed.lane.mlp",
                               [l_in, d, d], rng)

        self.temporal_blocks = [
            dc.AttentionBlock(self.store, f"enc.temporal{i}", d, 2 * d,
                              cfg.n_heads, rng)
            for i in range(cfg.n_layers)
        ]
        self.m2m_blocks = [
            dc.AttentionBlock(self.store, f"enc.m2m{i}", d, 2 * d,
                              cfg.n_heads, rng)
            for i in range(cfg.n_layers)
        ]
        self.a2m_blocks = [
            dc.AttentionBlock(self.store, f"enc.a2m{i}", d, 2 * d,
                              cfg.n_heads, rng)
            for i in range(cfg.n_layers)
        ]
        self.a2a_blocks = [
            dc.AttentionBlock(self.store, f"enc.a2a{i}", d, 2 * d,
                              cfg.n_heads, rng)
            for i in range(cfg.n_layers)
        ]

        add("dec.queries", rng.normal(0.0, 1.0, (cfg.k_modes, d)))
        self._bind_queries()
        self.dec_a = dc.AttentionBlock(self.store, "dec.qa", d, 2 * d,
                                       cfg.n_heads, rng)
        self.dec_m = dc.AttentionBlock(self.store, "dec.qm", d, 2 * d,
                                       cfg.n_heads, rng)
        # head emits per-step velocities which are integrated into
        # positions; bias starts every mode on a straight forward path
        # (a motion prior, refined away by training)
        self.init_head = dc.MLP(self.store, "dec.init_head",
                                [d, 2 * d, cfg.t_f * 2], rng)
        self.store["dec.init_head.1.b"].data[0::2] = 7.0

        self.step_embed = dc.MLP(self.store, "ref.step_embed", [3, d], rng)
        self.gru = dc.GRUCell(self.store, "ref.gru", d, d, rng)
        self.ref_a = dc.AttentionBlock(self.store, "ref.qa", d, 2 * d,
                                       cfg.n_heads, rng)
        self.ref_m = dc.AttentionBlock(self.store, "ref.qm", d, 2 * d,
                                       cfg.n_heads, rng)
        self.offset_head = dc.MLP(self.store, "ref.offset_head",
                                  [d, 2 * d, cfg.t_f * 2], rng)
        self.scale_head = dc.MLP(self.store, "ref.scale_head",
                                 [d, 2 * d, cfg.t_f * 2], rng)
        self.prob_head = dc.MLP(self.store, "ref.prob_head",
                                [d, d, 1], rng)
        if cfg.recon_head:
            self.recon_mlp = dc.MLP(self.store, "recon.head",
                                    [d, 2 * d, cfg.t_h * 4], rng)
            # zeroed output layer: the branch starts out reproducing the
            # linear infill exactly and training only has to learn the
            # correction on top of it
            self.store["recon.head.1.w"].data[:] = 0.0
            self.store["recon.head.1.b"].data[:] = 0.0

    def _bind_freqs(self):
        self.temporal_freqs = self.store["embed.temporal.freqs"]
        self.relpos_freqs = self.store["embed.relpos.freqs"]
        self.lane_freqs = self.store["embed.lane.freqs"]

    def _bind_queries(self):
        self.mode_queries = self.store["dec.queries"]

    @property
    def has_recon_head(self) -> bool:
        return self.config.recon_head and "recon.head.0.w" in self.store

    def add_recon_head(self, seed: int = 0) -> "Predictor":
        """Return a copy of this model with a freshly initialized
        reconstruction branch (used when entering the SSL stage)."""
        cfg_new = ModelConfig(**{**self.config.as_dict(), "recon_head": True})
        fresh = Predictor(cfg_new, seed=seed)
        arrays = fresh.store.state_arrays()
        for name, arr in self.store.state_arrays().items():
            arrays[name] = arr
        fresh.store.load_arrays(arrays)
        return fresh

    def copy(self) -> "Predictor":
        out = Predictor(self.config, seed=0)
        out.store.load_arrays(self.store.state_arrays())
        return out

    # -- feature construction (numpy; all constants w.r.t. the graph) ------

    @staticmethod
    def _anchor_of(history) -> AgentState:
        return history.latest_state()

    def _temporal_features(self, scene: Scene):
        """Per-step tokens in each agent's anchor frame, zeroed where
        masked; returns (feats [A, T, 6], valid [A, T], anchors)."""
        t_h = scene.t_h
        feats = np.zeros((len(scene.agents), t_h, TEMPORAL_FEATS))
        valid = np.zeros((len(scene.agents), t_h), dtype=bool)
        anchors = []
        for i, hist in enumerate(scene.agents):
            anchor = self._anchor_of(hist)
            anchors.append(anchor)
            a_idx = hist.latest_valid_index()
            rot = _rot(-anchor.yaw)
            dp = (hist.states[:, :2] - [anchor.x, anchor.y]) @ rot.T
            dyaw = hist.states[:, 2] - anchor.yaw
            dt_rel = (np.arange(t_h) - a_idx) * scene.dt
            # finite-difference motion trend between consecutive *valid*
            # steps: a single surviving observation carries no trend, so
            # these vanish exactly as the history shrinks to one step
            accel = np.zeros(t_h)
            yaw_rate = np.zeros(t_h)
            vidx = np.flatnonzero(hist.mask)
            if vidx.size > 1:
                elapsed = np.diff(vidx) * scene.dt
                accel[vidx[1:]] = np.diff(hist.states[vidx, 3]) / elapsed
                yaw_rate[vidx[1:]] = np.diff(hist.states[vidx, 2]) / elapsed
            f = np.stack(
                [dp[:, 0], dp[:, 1], np.cos(dyaw), np.sin(dyaw),
                 hist.states[:, 3], dt_rel, accel, yaw_rate], axis=1)
            m = hist.mask.astype(float)[:, None]
            feats[i] = f * m
            valid[i] = hist.mask
        return feats, valid, anchors

    def _lane_tokens_np(self, scene: Scene):
        """Per-lane point features in the lane's own frame plus anchors."""
        geo, sem, anchors, point_ok = [], [], [], []
        max_pts = max((len(l.points) for l in scene.lanes), default=0)
        for lane in scene.lanes:
            pts = lane.points
            mid = len(pts) // 2
            seg = pts[min(mid + 1, len(pts) - 1)] - pts[min(mid, len(pts) - 2)]
            a_yaw = math.atan2(seg[1], seg[0])
            anchors.append(AgentState(pts[mid, 0], pts[mid, 1], a_yaw, 0.0))
            rot = _rot(-a_yaw)
            dp = (pts - pts[mid]) @ rot.T
            dirs = np.diff(pts, axis=0)
            seg_yaw = np.arctan2(dirs[:, 1], dirs[:, 0])
            seg_yaw = np.concatenate([seg_yaw, seg_yaw[-1:]])
            rel = seg_yaw - a_yaw
            att = lane.attrs
            s = np.stack(
                [np.cos(rel), np.sin(rel), att[:, 0], att[:, 1],
                 att[:, 2] / 2.0,
                 np.cos(2 * np.pi * att[:, 3] / 8.0),
                 np.sin(2 * np.pi * att[:, 3] / 8.0)], axis=1)
            pad = max_pts - len(pts)
            geo.append(np.pad(dp, ((0, pad), (0, 0))))
            sem.append(np.pad(s, ((0, pad), (0, 0))))
            ok = np.zeros(max_pts, dtype=bool)
            ok[: len(pts)] = True
            point_ok.append(ok)
        if not scene.lanes:
            return (np.zeros((0, 0, 2)), np.zeros((0, 0, LANE_SEM_FEATS)),
                    [], np.zeros((0, 0), dtype=bool))
        return np.stack(geo), np.stack(sem), anchors, np.stack(point_ok)

    @staticmethod
    def _relpos_np(receivers: list, senders: list, radius: float,
                   edges: np.ndarray | None = None):
        """Pairwise relative-pose features in each receiver's frame.

        Returns (feats [Nr, Ns, 6], edge_mask [Nr, Ns]). By default an
        edge exists when the anchor distance is within the radius; pass
        ``edges`` to override (e.g. nearest-point distance for lanes)."""
        nr, ns = len(receivers), len(senders)
        feats = np.zeros((nr, ns, RELPOS_FEATS))
        ok = np.zeros((nr, ns), dtype=bool)
        for i, r in enumerate(receivers):
            rot = _rot(-r.yaw)
            for j, s in enumerate(senders):
                dp = rot @ np.array([s.x - r.x, s.y - r.y])
                dyaw = s.yaw - r.yaw
                dist = float(np.hypot(dp[0], dp[1]))
                feats[i, j] = [dp[0], dp[1], math.cos(dyaw), math.sin(dyaw),
                               dist, 0.0]
                ok[i, j] = dist <= radius
        if edges is not None:
            ok = np.asarray(edges, dtype=bool).copy()
        return feats, ok

    @staticmethod
    def _lane_edge_mask(receivers: list, lanes, radius: float) -> np.ndarray:
        """Edge iff the receiver is within radius of the lane's NEAREST
        polyline point (anchor distance would orphan long lanes)."""
        ok = np.zeros((len(receivers), len(lanes)), dtype=bool)
        for i, r in enumerate(receivers):
            p = np.array([r.x, r.y])
            for j, lane in enumerate(lanes):
                d = np.min(np.linalg.norm(lane.points - p, axis=1))
                ok[i, j] = d <= radius
        return ok

    # -- embedding helpers (graph ops) --------------------------------------

    def _embed_temporal(self, feats: np.ndarray) -> Tensor:
        t = Tensor(feats)
        x = dc.concat([t, dc.fourier_features(t, self.temporal_freqs)],
                      axis=-1)
        return self.temporal_mlp(x)

    def _embed_relpos(self, feats: np.ndarray) -> Tensor:
        t = Tensor(feats)
        x = dc.concat([t, dc.fourier_features(t, self.relpos_freqs)],
                      axis=-1)
        return self.relpos_mlp(x)

    def _embed_lane_points(self, geo: np.ndarray, sem: np.ndarray) -> Tensor:
        t = Tensor(geo)
        g = dc.concat([t, dc.fourier_features(t, self.lane_freqs)], axis=-1)
        return self.lane_mlp(dc.concat([g, Tensor(sem)], axis=-1))

    @staticmethod
    def _pair(tokens: Tensor, rel: Tensor, nq: int) -> Tensor:
        """[Ns, d] tokens + [Nq, Ns, d] relpos -> [Nq, Ns, 2d] pair feats."""
        ns, d = tokens.shape
        tok = dc.reshape(tokens, (1, ns, d))
        tok = tok + dc.Tensor(np.zeros((nq, ns, d)))  # broadcast to [Nq,Ns,d]
        return dc.concat([tok, rel], axis=-1)

    # -- public operations ---------------------------------------------------

    def embed_relpos(self, scene: Scene):
        """Relative-pose embedding tables between agent anchors (and
        agent->lane), exposed mainly for the geometry-invariance tests."""
        _, _, anchors = self._temporal_features(scene)
        _, _, lane_anchors, _ = self._lane_tokens_np(scene)
        a2a, ok_aa = self._relpos_np(anchors, anchors, self.config.radius)
        a2m, ok_am = self._relpos_np(anchors, lane_anchors, self.config.radius)
        return {
            "a2a": self._embed_relpos(a2a),
            "a2a_edges": ok_aa,
            "a2m": self._embed_relpos(a2m) if lane_anchors else None,
            "a2m_edges": ok_am,
        }

    def encode(self, scene: Scene):
        """Scene -> (h_a [A, d], h_m [M, d], anchors, lane_anchors)."""
        cfg = self.config
        feats, valid, anchors = self._temporal_features(scene)
        a = len(scene.agents)
        for i in range(a):
            if not valid[i].any():
                raise ContractViolation(
                    f"agent {i} has no valid history step")

        tokens = self._embed_temporal(feats)          # [A, T, d]
        t_h = scene.t_h
        anchor_idx = np.array([h.latest_valid_index() for h in scene.agents])
        h0 = dc.getitem(tokens, (np.arange(a), anchor_idx))  # [A, d]

        # temporal: one query per agent over its own valid steps; the
        # step tokens already carry anchor-relative pose and time, so
        # they double as the relative-position half of the pair table
        h_a = dc.reshape(h0, (a, 1, cfg.d))
        rel_t = dc.reshape(tokens, (a, 1, t_h, cfg.d))
        pair_t = dc.concat([rel_t, rel_t], axis=-1)
        t_mask = valid[:, None, :]                    # [A, 1, T]
        for blk in self.temporal_blocks:
            h_a = blk(h_a, pair_t, t_mask)
        h_a = dc.reshape(h_a, (a, cfg.d))

        # lanes: pooled point encodings + lane-to-lane attention
        geo, sem, lane_anchors, point_ok = self._lane_tokens_np(scene)
        m = len(lane_anchors)
        if m > 0:
            pts_emb = self._embed_lane_points(geo, sem)   # [M, P, d]
            w = point_ok.astype(float)
            w = w / w.sum(axis=1, keepdims=True)
            h_m = (pts_emb * Tensor(w[:, :, None])).sum(axis=1)  # [M, d]
            mm_edges = np.zeros((m, m), dtype=bool)
            for i in range(m):
                for j in range(m):
                    d2 = np.linalg.norm(
                        scene.lanes[i].points[:, None, :]
                        - scene.lanes[j].points[None, :, :], axis=-1)
                    mm_edges[i, j] = d2.min() <= cfg.radius
            m2m_np, ok_mm = self._relpos_np(lane_anchors, lane_anchors,
                                            cfg.radius, edges=mm_edges)
            rel_mm = self._embed_relpos(m2m_np)
            am_edges = self._lane_edge_mask(anchors, scene.lanes, cfg.radius)
            a2m_np, ok_am = self._relpos_np(anchors, lane_anchors, cfg.radius,
                                            edges=am_edges)
            rel_am = self._embed_relpos(a2m_np)
        else:
            h_m = Tensor(np.zeros((0, cfg.d)))
            ok_mm = np.zeros((0, 0), dtype=bool)
            ok_am = np.zeros((a, 0), dtype=bool)

        a2a_np, ok_aa = self._relpos_np(anchors, anchors, cfg.radius)
        np.fill_diagonal(ok_aa, False)
        rel_aa = self._embed_relpos(a2a_np)

        for li in range(cfg.n_layers):
            if m > 0:
                h_m = self.m2m_blocks[li](
                    h_m, self._pair(h_m, rel_mm, m), ok_mm)
                h_a = self.a2m_blocks[li](
                    h_a, self._pair(h_m, rel_am, a), ok_am)
            h_a = self.a2a_blocks[li](
                h_a, self._pair(h_a, rel_aa, a), ok_aa)
        return h_a, h_m, anchors, lane_anchors

    def decode_init(self, h_a: Tensor, h_m: Tensor, focal_anchor: AgentState,
                    anchors: list, lane_anchors: list, lane_edges=None,
                    dt: float = 0.1):
        """Mode queries cross-attend the scene -> (proposals_local, h_f).

        The trajectory head predicts a velocity per step; positions are
        the running integral (a zeroed head therefore yields the exactly
        zero trajectory)."""
        cfg = self.config
        k = cfg.k_modes
        q_anchor = [focal_anchor] * k
        qa_np, ok_qa = self._relpos_np(q_anchor, anchors, cfg.radius)
        rel_qa = self._embed_relpos(qa_np)
        h_f = self.dec_a(self.mode_queries, self._pair(h_a, rel_qa, k), ok_qa)
        if len(lane_anchors) > 0:
            qm_np, ok_qm = self._relpos_np(q_anchor, lane_anchors, cfg.radius,
                                           edges=lane_edges)
            rel_qm = self._embed_relpos(qm_np)
            h_f = self.dec_m(h_f, self._pair(h_m, rel_qm, k), ok_qm)
        vel = dc.reshape(self.init_head(h_f), (k, cfg.t_f, 2))
        integrate = np.tril(np.ones((cfg.t_f, cfg.t_f))) * dt
        proposals = dc.matmul(Tensor(integrate), vel)
        return proposals, h_f

    def decode_refine(self, proposals: Tensor, h_f: Tensor, h_a: Tensor,
                      h_m: Tensor, focal_anchor: AgentState, anchors: list,
                      lane_anchors: list, lane_edges=None, dt: float = 0.1):
        """GRU over each proposal -> refinement query -> offsets/scales/probs."""
        cfg = self.config
        k = cfg.k_modes
        times = (np.arange(cfg.t_f) + 1.0) * dt
        h = h_f
        for t in range(cfg.t_f):
            step = dc.concat(
                [dc.getitem(proposals, (slice(None), t)),
                 Tensor(np.full((k, 1), times[t]))], axis=-1)
            h = self.gru(self.step_embed(step), h)

        q_anchor = [focal_anchor] * k
        qa_np, ok_qa = self._relpos_np(q_anchor, anchors, cfg.radius)
        h = self.ref_a(h, self._pair(h_a, self._embed_relpos(qa_np), k), ok_qa)
        if len(lane_anchors) > 0:
            qm_np, ok_qm = self._relpos_np(q_anchor, lane_anchors, cfg.radius,
                                           edges=lane_edges)
            h = self.ref_m(h, self._pair(h_m, self._embed_relpos(qm_np), k),
                           ok_qm)

        offsets = dc.reshape(self.offset_head(h), (k, cfg.t_f, 2))
        refined = proposals + offsets
        scales = dc.softplus(dc.reshape(self.scale_head(h), (k, cfg.t_f, 2)))
        scales = scales + 0.01
        logits = dc.reshape(self.prob_head(h), (k,))
        probs = dc.softmax(logits, axis=-1)
        return refined, scales, probs, logits

    def decode_recon(self, h_a: Tensor, scene: Scene, anchors) -> Tensor:
        """Per-agent history decoding, [A, T_H, 4] in agent-local frames.

        Positions are parameterized as a constant-velocity extrapolation
        from the agent's *earliest* surviving observation plus the
        running integral of a predicted per-step velocity correction —
        the same integrate-a-velocity trick as the trajectory decoder,
        anchored backward instead of forward. A zeroed head therefore
        reproduces the linear infill exactly."""
        if not self.config.recon_head:
            raise ContractViolation(
                "reconstruction branch absent on this model")
        cfg = self.config
        a, t_h, dt = h_a.shape[0], cfg.t_h, scene.dt
        raw = dc.reshape(self.recon_mlp(h_a), (a, t_h, 4))

        base = np.zeros((a, t_h, 2))
        integ = np.zeros((a, t_h, t_h))
        steps = np.arange(t_h)
        for i, (hist, anc) in enumerate(zip(scene.agents, anchors)):
            f = int(np.argmax(hist.mask))
            x, y, yaw, v = hist.states[f]
            r = _rot(anc.yaw)
            p_local = r.T @ (np.array([x, y]) - [anc.x, anc.y])
            psi = yaw - anc.yaw
            vel = v * np.array([np.cos(psi), np.sin(psi)])
            base[i] = p_local + ((steps - f) * dt)[:, None] * vel
            m = integ[i]
            for j in range(t_h):
                if j > f:
                    m[j, f:j] = dt
                elif j < f:
                    m[j, j:f] = -dt
        rv = dc.getitem(raw, (slice(None), slice(None), slice(0, 2)))
        rest = dc.getitem(raw, (slice(None), slice(None), slice(2, 4)))
        pos = Tensor(base) + dc.matmul(Tensor(integ), rv)
        return dc.concat([pos, rest], axis=-1)

    def forward(self, scene: Scene, with_recon: bool | None = None) -> ModelOutput:
        cfg = self.config
        if scene.t_h != cfg.t_h or scene.t_f != cfg.t_f:
            raise ContractViolation(
                f"scene horizon ({scene.t_h},{scene.t_f}) does not match "
                f"model ({cfg.t_h},{cfg.t_f})"
            )
        h_a, h_m, anchors, lane_anchors = self.encode(scene)
        focal_anchor = anchors[scene.focal_index]
        lane_edges = None
        if scene.lanes:
            row = self._lane_edge_mask([focal_anchor], scene.lanes,
                                       cfg.radius)
            lane_edges = np.repeat(row, cfg.k_modes, axis=0)
        proposals, h_f = self.decode_init(h_a, h_m, focal_anchor, anchors,
                                          lane_anchors,
                                          lane_edges=lane_edges, dt=scene.dt)
        refined, scales, probs, logits = self.decode_refine(
            proposals, h_f, h_a, h_m, focal_anchor, anchors, lane_anchors,
            lane_edges=lane_edges, dt=scene.dt)

        if with_recon is None:
            with_recon = cfg.recon_head
        recon_local = (self.decode_recon(h_a, scene, anchors)
                       if with_recon else None)

        rot = _rot(focal_anchor.yaw)
        offset = np.array([focal_anchor.x, focal_anchor.y])
        prop_g = proposals.data @ rot.T + offset
        ref_g = refined.data @ rot.T + offset
        pred = PredictionSet(
            proposals=prop_g, refined=ref_g,
            scales=scales.data.copy(), probs=probs.data.copy(),
        )
        recon_global = None
        if recon_local is not None:
            recon_global = np.zeros_like(recon_local.data)
            for i, anc in enumerate(anchors):
                r = _rot(anc.yaw)
                recon_global[i, :, :2] = (
                    recon_local.data[i, :, :2] @ r.T + [anc.x, anc.y])
                recon_global[i, :, 2] = norm_angle(
                    recon_local.data[i, :, 2] + anc.yaw)
                recon_global[i, :, 3] = recon_local.data[i, :, 3]

        return ModelOutput(
            pred=pred,
            taps=FeatureTaps(h_a, h_m, h_f),
            proposals_local=proposals,
            refined_local=refined,
            scales=scales,
            probs=probs,
            logits=logits,
            recon_local=recon_local,
            recon_global=recon_global,
            anchor=focal_anchor,
            agent_anchors=anchors,
        )

    def predict(self, scene: Scene):
        """Inference entry point: (PredictionSet, FeatureTaps)."""
        out = self.forward(scene, with_recon=False)
        return out.pred, out.taps
