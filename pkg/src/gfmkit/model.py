"""Reference message-passing model with hand-coded reverse-mode gradients.

The model predicts one energy per graph and one 3-vector force per atom from
a cutoff graph, entirely in float64 numpy:

    h0_i      = embedding[Z_i]
    h^{l+1}_i = tanh(W_l h^l_i + U_l agg_{j in N(i)} (h^l_j / (1 + d_ij)) + b_l)
    e_pred    = sum_i head(h^L_i)            head: H -> G -> ... -> 1,
                                             tanh hidden layers, linear output
    F_pred,i  = sum_{j in N(i)} m_ij (x_j - x_i),
                m_ij = u^T tanh(V (h^L_i + h^L_j) + c)

``agg`` is one of mean / sum / max over incoming edges; an empty
neighborhood aggregates to the zero vector. The force head's pair term is
symmetric in (i, j), so contributions cancel pairwise and every structure's
predicted forces sum to zero by construction; only distances and coordinate
differences enter anywhere, giving exact translation invariance.

The multitask loss is L1 in both heads:

    energy_term = mean over graphs of |e_pred - e| / n
    force_term  = mean over all 3n components of |F_pred - F|
    total       = alpha_energy * energy_term + alpha_forces * force_term

``backward`` returns the exact analytic gradient of that total with respect
to the flat parameter vector; a finite-difference oracle pins it in the test
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .records import MAX_Z, GraphRecord

MPNN_KINDS = ("mean-agg", "sum-agg", "max-agg")


@dataclass
class ModelConfig:
    """Architecture + loss hyperparameters of the reference model."""

    mpnn_kind: str = "mean-agg"
    mpnn_layers: int = 3
    mpnn_width: int = 50
    fc_layers: int = 2
    fc_width: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    alpha_energy: float = 1.0
    alpha_forces: float = 100.0

    def __post_init__(self):
        if self.mpnn_kind not in MPNN_KINDS:
            raise ValidationError(
                f"mpnn_kind {self.mpnn_kind!r} not in {MPNN_KINDS}"
            )
        for name in ("mpnn_layers", "mpnn_width", "fc_width", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.fc_layers < 2:
            raise ValidationError("fc_layers must be >= 2 (input and output layers)")
        if self.alpha_energy <= 0 or self.alpha_forces <= 0:
            raise ValidationError("loss weights must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "mpnn_kind": self.mpnn_kind,
            "mpnn_layers": self.mpnn_layers,
            "mpnn_width": self.mpnn_width,
            "fc_layers": self.fc_layers,
            "fc_width": self.fc_width,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "alpha_energy": self.alpha_energy,
            "alpha_forces": self.alpha_forces,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count.

    118H + L(2H^2+H) + [HG+G + max(0,F-2)(G^2+G) + (G+1)] + (H^2+2H)
    """
    h, l = config.mpnn_width, config.mpnn_layers
    f, g = config.fc_layers, config.fc_width
    head = h * g + g + max(0, f - 2) * (g * g + g) + (g + 1)
    return MAX_Z * h + l * (2 * h * h + h) + head + (h * h + 2 * h)


@dataclass
class ModelParams:
    """All weights of the reference model, double precision.

    The flat vector order is: embedding; per message-passing layer W, U, b;
    per head layer A, c; force head V, c, u. ``flatten``/``from_flat`` are
    exact inverses.
    """

    config: ModelConfig
    embedding: np.ndarray  # (118, H)
    layer_w: list  # L x (H, H)
    layer_u: list  # L x (H, H)
    layer_b: list  # L x (H,)
    head_w: list  # (G,H), (G,G) x (F-2), (1,G)
    head_b: list  # (G,) x (F-1), (1,)
    force_v: np.ndarray  # (H, H)
    force_c: np.ndarray  # (H,)
    force_u: np.ndarray  # (H,)

    def arrays(self):
        """Canonical (name, array) sequence defining the flat order."""
        yield "embedding", self.embedding
        for l in range(self.config.mpnn_layers):
            yield f"layer_{l}.w", self.layer_w[l]
            yield f"layer_{l}.u", self.layer_u[l]
            yield f"layer_{l}.b", self.layer_b[l]
        for f in range(self.config.fc_layers):
            yield f"head_{f}.w", self.head_w[f]
            yield f"head_{f}.b", self.head_b[f]
        yield "force.v", self.force_v
        yield "force.c", self.force_c
        yield "force.u", self.force_u

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.arrays()])

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        h, g = config.mpnn_width, config.fc_width
        head_shapes = (
            [(g, h)]
            + [(g, g)] * (config.fc_layers - 2)
            + [(1, g)]
        )
        bias_shapes = [(g,)] * (config.fc_layers - 1) + [(1,)]
        return cls(
            config=config,
            embedding=np.zeros((MAX_Z, h)),
            layer_w=[np.zeros((h, h)) for _ in range(config.mpnn_layers)],
            layer_u=[np.zeros((h, h)) for _ in range(config.mpnn_layers)],
            layer_b=[np.zeros(h) for _ in range(config.mpnn_layers)],
            head_w=[np.zeros(s) for s in head_shapes],
            head_b=[np.zeros(s) for s in bias_shapes],
            force_v=np.zeros((h, h)),
            force_c=np.zeros(h),
            force_u=np.zeros(h),
        )

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        params = cls.zeros(config)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (params.n_params,):
            raise ValidationError(
                f"flat vector has {flat.shape}, model needs ({params.n_params},)"
            )
        off = 0
        for _, arr in params.arrays():
            arr[...] = flat[off : off + arr.size].reshape(arr.shape)
            off += arr.size
        return params


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Embeddings and matrices ~ uniform(-1/sqrt(H), 1/sqrt(H)); biases 0."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.mpnn_width)
    params = ModelParams.zeros(config)
    for name, arr in params.arrays():
        if name.endswith(".b") or name.endswith(".c"):
            continue
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    return params


# --------------------------------------------------------------------------
# Batch packing
# --------------------------------------------------------------------------


@dataclass
class Batch:
    """A list of graphs packed into flat node/edge arrays.

    Node ids are globalized by per-graph offsets; edges are additionally kept
    in dst-sorted order with segment boundaries for reduceat-style
    aggregation.
    """

    z: np.ndarray  # (n_total,) int64
    pos: np.ndarray  # (n_total, 3)
    edge_src: np.ndarray  # (E,) int64
    edge_dst: np.ndarray  # (E,) int64
    edge_w: np.ndarray  # (E,) 1 / (1 + d)
    edge_dx: np.ndarray  # (E, 3) pos[src] - pos[dst]
    node_offsets: np.ndarray  # (G+1,)
    n_per_graph: np.ndarray  # (G,)
    graph_of_node: np.ndarray  # (n_total,)
    energy_true: np.ndarray  # (G,)
    forces_true: np.ndarray  # (n_total, 3)
    # dst-sorted machinery
    order: np.ndarray = field(default=None)  # (E,) stable argsort by dst
    seg_starts: np.ndarray = field(default=None)
    seg_dst: np.ndarray = field(default=None)
    deg: np.ndarray = field(default=None)  # (n_total,) in-degree

    @property
    def n_graphs(self) -> int:
        return int(self.n_per_graph.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.z.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_src.shape[0])


def make_batch(records: list[GraphRecord]) -> Batch:
    if not records:
        raise ValidationError("cannot build a batch from zero records")
    n_per = np.array([r.n_atoms for r in records], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(n_per)])
    z = np.concatenate([r.atomic_numbers.astype(np.int64) for r in records])
    pos = np.concatenate([r.positions for r in records], axis=0)
    forces = np.concatenate([r.forces for r in records], axis=0)
    energy = np.array([r.energy for r in records], dtype=np.float64)
    graph_of_node = np.repeat(np.arange(len(records)), n_per)

    srcs, dsts = [], []
    for g, rec in enumerate(records):
        if rec.edge_count:
            srcs.append(rec.edge_index[:, 0].astype(np.int64) + offsets[g])
            dsts.append(rec.edge_index[:, 1].astype(np.int64) + offsets[g])
    if srcs:
        src = np.concatenate(srcs)
        dst = np.concatenate(dsts)
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
    dx = pos[src] - pos[dst]
    dist = np.sqrt((dx**2).sum(axis=1))
    w = 1.0 / (1.0 + dist)

    order = np.argsort(dst, kind="stable")
    dst_sorted = dst[order]
    if dst_sorted.size:
        seg_dst, seg_starts = np.unique(dst_sorted, return_index=True)
    else:
        seg_dst = np.zeros(0, dtype=np.int64)
        seg_starts = np.zeros(0, dtype=np.int64)
    deg = np.bincount(dst, minlength=z.shape[0]).astype(np.int64)

    return Batch(
        z=z,
        pos=pos,
        edge_src=src,
        edge_dst=dst,
        edge_w=w,
        edge_dx=dx,
        node_offsets=offsets,
        n_per_graph=n_per,
        graph_of_node=graph_of_node,
        energy_true=energy,
        forces_true=forces,
        order=order,
        seg_starts=seg_starts,
        seg_dst=seg_dst,
        deg=deg,
    )


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------


def _aggregate(batch: Batch, msg: np.ndarray, kind: str, cache: dict | None = None):
    """Per-dst aggregation of edge messages; empty neighborhoods give 0."""
    n, h = batch.n_nodes, msg.shape[1]
    agg = np.zeros((n, h))
    if batch.n_edges == 0:
        return agg
    msg_sorted = msg[batch.order]
    if kind == "max-agg":
        seg_max = np.maximum.reduceat(msg_sorted, batch.seg_starts, axis=0)
        agg[batch.seg_dst] = seg_max
        if cache is not None:
            # first sorted-edge index attaining the max, per segment/column
            e = msg_sorted.shape[0]
            expand = np.repeat(
                seg_max,
                np.diff(np.concatenate([batch.seg_starts, [e]])),
                axis=0,
            )
            positions = np.where(
                msg_sorted == expand, np.arange(e)[:, None], e
            )
            cache["argmax_sorted"] = np.minimum.reduceat(
                positions, batch.seg_starts, axis=0
            )
        return agg
    seg_sum = np.add.reduceat(msg_sorted, batch.seg_starts, axis=0)
    if kind == "mean-agg":
        seg_sum = seg_sum / batch.deg[batch.seg_dst][:, None]
    agg[batch.seg_dst] = seg_sum
    return agg


def _aggregate_backward(batch: Batch, dagg: np.ndarray, kind: str, cache: dict):
    """Gradient of _aggregate w.r.t. the edge messages."""
    e, h = batch.n_edges, dagg.shape[1]
    if e == 0:
        return np.zeros((0, h))
    if kind == "sum-agg":
        return dagg[batch.edge_dst]
    if kind == "mean-agg":
        return dagg[batch.edge_dst] / batch.deg[batch.edge_dst][:, None]
    # max: route each segment/column gradient to the argmax edge
    dmsg_sorted = np.zeros((e, h))
    argmax = cache["argmax_sorted"]  # (n_seg, h) sorted-edge indices
    cols = np.tile(np.arange(h), argmax.shape[0])
    np.add.at(dmsg_sorted, (argmax.ravel(), cols), dagg[batch.seg_dst].ravel())
    dmsg = np.zeros((e, h))
    dmsg[batch.order] = dmsg_sorted
    return dmsg


def forward_batch(params: ModelParams, batch: Batch, cache: dict | None = None):
    """Run the model; returns (e_pred (G,), f_pred (n_total, 3)).

    When ``cache`` is a dict, every intermediate needed by the backward pass
    is stored into it.
    """
    cfg = params.config
    h = params.embedding[batch.z - 1]
    layers = []
    for l in range(cfg.mpnn_layers):
        msg = h[batch.edge_src] * batch.edge_w[:, None]
        agg_cache: dict | None = {} if cache is not None else None
        agg = _aggregate(batch, msg, cfg.mpnn_kind, agg_cache)
        z_lin = h @ params.layer_w[l].T + agg @ params.layer_u[l].T + params.layer_b[l]
        h_out = np.tanh(z_lin)
        if cache is not None:
            layers.append(
                {"h_in": h, "agg": agg, "h_out": h_out, "agg_cache": agg_cache}
            )
        h = h_out

    # energy head
    head_inputs = []
    y = h
    for f in range(cfg.fc_layers - 1):
        head_inputs.append(y)
        y = np.tanh(y @ params.head_w[f].T + params.head_b[f])
    head_inputs.append(y)
    node_energy = y @ params.head_w[-1].T + params.head_b[-1]  # (n, 1)
    e_pred = np.add.reduceat(node_energy[:, 0], batch.node_offsets[:-1])
    # reduceat needs a guard for zero-size graphs, which records can't have
    # (n_atoms >= 1), so offsets are strictly increasing.

    # force head
    if batch.n_edges:
        pair = h[batch.edge_dst] + h[batch.edge_src]
        t = np.tanh(pair @ params.force_v.T + params.force_c)
        m = t @ params.force_u
        contrib = m[:, None] * batch.edge_dx
        f_pred = np.zeros((batch.n_nodes, 3))
        np.add.at(f_pred, batch.edge_dst, contrib)
    else:
        pair = np.zeros((0, cfg.mpnn_width))
        t = np.zeros((0, cfg.mpnn_width))
        m = np.zeros(0)
        f_pred = np.zeros((batch.n_nodes, 3))

    if cache is not None:
        cache.update(
            layers=layers,
            h_final=h,
            head_inputs=head_inputs,
            pair=pair,
            t=t,
            m=m,
        )
    return e_pred, f_pred


def predict(params: ModelParams, records: list[GraphRecord]):
    """Convenience wrapper: per-graph energies and per-graph force arrays."""
    batch = make_batch(records)
    e_pred, f_packed = forward_batch(params, batch)
    forces = [
        f_packed[batch.node_offsets[g] : batch.node_offsets[g + 1]]
        for g in range(batch.n_graphs)
    ]
    return e_pred, forces


def forward(params: ModelParams, records):
    """Convenience forward: accepts one record, a list, or a prepacked batch."""
    if isinstance(records, GraphRecord):
        e_pred, forces = predict(params, [records])
        return float(e_pred[0]), forces[0]
    if isinstance(records, Batch):
        return forward_batch(params, records)
    return predict(params, records)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: float
    energy_term: float
    force_term: float
    per_graph_residuals: np.ndarray  # (G,) per-atom energy residuals


def mtl_loss(
    e_pred: np.ndarray,
    f_pred: np.ndarray,
    e_true: np.ndarray,
    f_true: np.ndarray,
    n_per_graph: np.ndarray,
    alpha_energy: float = 1.0,
    alpha_forces: float = 100.0,
) -> LossBreakdown:
    """L1 multitask loss; see module docstring for the exact definition."""
    e_pred = np.asarray(e_pred, dtype=np.float64).ravel()
    e_true = np.asarray(e_true, dtype=np.float64).ravel()
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_true = np.asarray(f_true, dtype=np.float64)
    n_per_graph = np.asarray(n_per_graph, dtype=np.float64).ravel()
    if e_pred.shape != e_true.shape or e_pred.shape != n_per_graph.shape:
        raise ValidationError(
            f"energy shapes differ: {e_pred.shape} vs {e_true.shape} vs {n_per_graph.shape}"
        )
    if f_pred.shape != f_true.shape:
        raise ValidationError(f"force shapes differ: {f_pred.shape} vs {f_true.shape}")
    residuals = (e_pred - e_true) / n_per_graph
    energy_term = float(np.abs(residuals).mean())
    force_term = float(np.abs(f_pred - f_true).mean()) if f_pred.size else 0.0
    total = alpha_energy * energy_term + alpha_forces * force_term
    return LossBreakdown(float(total), energy_term, force_term, residuals)


def batch_loss(params: ModelParams, batch: Batch) -> LossBreakdown:
    e_pred, f_pred = forward_batch(params, batch)
    return mtl_loss(
        e_pred,
        f_pred,
        batch.energy_true,
        batch.forces_true,
        batch.n_per_graph,
        params.config.alpha_energy,
        params.config.alpha_forces,
    )


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------


def loss_and_grad(params: ModelParams, batch: Batch, precomputed=None):
    """Loss plus exact analytic gradient as a flat vector.

    ``precomputed`` may carry a ``(cache, e_pred, f_pred)`` triple from an
    earlier ``forward_batch`` call so callers can time the two passes
    separately without running the forward twice.
    """
    cfg = params.config
    if precomputed is None:
        cache: dict = {}
        e_pred, f_pred = forward_batch(params, batch, cache)
    else:
        cache, e_pred, f_pred = precomputed
    loss = mtl_loss(
        e_pred,
        f_pred,
        batch.energy_true,
        batch.forces_true,
        batch.n_per_graph,
        cfg.alpha_energy,
        cfg.alpha_forces,
    )

    grad = ModelParams.zeros(cfg)
    n_graphs = batch.n_graphs
    n_nodes = batch.n_nodes

    # seed: d(total)/d(e_pred_g) and d(total)/d(F_pred)
    de_pred = (
        cfg.alpha_energy
        * np.sign(loss.per_graph_residuals)
        / (batch.n_per_graph * n_graphs)
    )
    df_pred = cfg.alpha_forces * np.sign(f_pred - batch.forces_true) / (3.0 * n_nodes)

    dh_final = np.zeros((n_nodes, cfg.mpnn_width))

    # --- energy head backward
    ds = de_pred[batch.graph_of_node][:, None]  # (n, 1) node-energy grads
    y_last = cache["head_inputs"][-1]
    grad.head_w[-1] += ds.T @ y_last
    grad.head_b[-1] += ds.sum(axis=0)
    dy = ds @ params.head_w[-1]
    for f in range(cfg.fc_layers - 2, -1, -1):
        y_out = cache["head_inputs"][f + 1]
        y_in = cache["head_inputs"][f]
        dz = dy * (1.0 - y_out**2)
        grad.head_w[f] += dz.T @ y_in
        grad.head_b[f] += dz.sum(axis=0)
        dy = dz @ params.head_w[f]
    dh_final += dy

    # --- force head backward
    if batch.n_edges:
        dcontrib = df_pred[batch.edge_dst]  # (E, 3)
        dm = (dcontrib * batch.edge_dx).sum(axis=1)  # (E,)
        t = cache["t"]
        grad.force_u += t.T @ dm
        dt = dm[:, None] * params.force_u[None, :]
        dpre = dt * (1.0 - t**2)
        grad.force_v += dpre.T @ cache["pair"]
        grad.force_c += dpre.sum(axis=0)
        dpair = dpre @ params.force_v
        np.add.at(dh_final, batch.edge_dst, dpair)
        np.add.at(dh_final, batch.edge_src, dpair)

    # --- message-passing layers backward
    dh = dh_final
    for l in range(cfg.mpnn_layers - 1, -1, -1):
        layer = cache["layers"][l]
        dz = dh * (1.0 - layer["h_out"] ** 2)
        grad.layer_b[l] += dz.sum(axis=0)
        grad.layer_w[l] += dz.T @ layer["h_in"]
        grad.layer_u[l] += dz.T @ layer["agg"]
        dh_in = dz @ params.layer_w[l]
        dagg = dz @ params.layer_u[l]
        dmsg = _aggregate_backward(batch, dagg, cfg.mpnn_kind, layer["agg_cache"])
        if batch.n_edges:
            np.add.at(dh_in, batch.edge_src, dmsg * batch.edge_w[:, None])
        dh = dh_in

    np.add.at(grad.embedding, batch.z - 1, dh)
    return loss, grad.flatten()


def backward(params: ModelParams, batch_or_records) -> np.ndarray:
    """Exact gradient of the multitask loss w.r.t. the flat parameters."""
    batch = (
        batch_or_records
        if isinstance(batch_or_records, Batch)
        else make_batch(batch_or_records)
    )
    _, grad = loss_and_grad(params, batch)
    return grad
