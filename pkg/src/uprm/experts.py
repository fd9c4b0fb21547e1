"""The four physical-world experts.

Each expert maps one modality stream of a video to an n x d token matrix
(one token per frame): human pose graphs, object-relation scene graphs,
background tokens, and coarse whole-frame tokens. All four are pure
functions of (inputs, params) built from the numerics primitives, so they
run identically on plain arrays or on a tape.

Absent modalities never produce zero tokens: each expert owns a learned
null token so the router can still tell "missing" apart from "quiet".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DataError
from .numerics import (
    FfnParams,
    add,
    attention,
    colsum,
    concat_rows,
    ffn_forward,
    gather_rows,
    init_ffn,
    masked_softmax_rows,
    matmul,
    mul_const,
    register_grad_case,
    relu,
    layer_norm_rows,
    shape_of,
    sum_all,
    transpose,
)

N_JOINTS = 17

# COCO keypoint skeleton: nose, eyes, ears, shoulders, elbows, wrists,
# hips, knees, ankles. Undirected; self-loops are added when building
# adjacency, never stored in the edge list.
COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8),
    (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)

POSE_FEATURE_DIM = 16  # canonical lift dimension for joint coordinates

# Same-frame prior on the video->pose cross-attention logits. Tokens have
# no positional code, so temporal alignment is not learnable from content
# alone; this plays the role positional embeddings fill in a pretrained
# backbone. exp(6) / (exp(6) + 63) keeps ~87% of the weight on-frame for
# a 64-frame video while leaving the pattern trainable.
POSE_ALIGN_BIAS = 6.0

DEFAULT_PATCH_GRID = (4, 4)


def lift_coordinates(joints: np.ndarray, p: int = POSE_FEATURE_DIM) -> np.ndarray:
    """Lift (x, y) joint coordinates to a p-dim feature via a fixed basis."""
    joints = np.asarray(joints, dtype=np.float64)
    x, y = joints[:, 0], joints[:, 1]
    basis = np.stack(
        [
            x, y, x * y, x * x, y * y,
            np.sin(np.pi * x), np.cos(np.pi * x),
            np.sin(np.pi * y), np.cos(np.pi * y),
            x ** 3, y ** 3, x * x * y, x * y * y,
            np.sin(2 * np.pi * x), np.cos(2 * np.pi * y),
            np.ones_like(x),
        ],
        axis=1,
    )
    if p > basis.shape[1]:
        raise ContractError(f"coordinate lift supports p <= {basis.shape[1]}, got {p}")
    return basis[:, :p].copy()


@dataclass
class PoseGraph:
    """One skeleton: joint coordinates, undirected edges, node features."""

    joints: np.ndarray  # (n_nodes, 2) in the unit square
    edges: tuple  # undirected (a, b) pairs
    features: object  # (n_nodes, p), ndarray or tape Node

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 2 or self.joints.shape[1] != 2:
            raise ContractError(f"joints must be (n, 2), got {self.joints.shape}")
        n = self.joints.shape[0]
        if self.joints.min() < 0.0 or self.joints.max() > 1.0:
            raise ContractError("joint coordinates must lie in the unit square")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ContractError(f"edge ({a}, {b}) references a missing node")
        if shape_of(self.features)[0] != n:
            raise ContractError(
                f"feature rows {shape_of(self.features)[0]} != node count {n}"
            )

    @property
    def n_nodes(self) -> int:
        return self.joints.shape[0]

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency with self-loops on every node."""
        n = self.n_nodes
        adj = np.eye(n, dtype=bool)
        for a, b in self.edges:
            adj[a, b] = True
            adj[b, a] = True
        return adj


def make_pose_graph(joints: np.ndarray, p: int = POSE_FEATURE_DIM) -> PoseGraph:
    """Canonical 17-joint skeleton with lifted coordinate features."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (N_JOINTS, 2):
        raise ContractError(f"skeleton needs {N_JOINTS} joints, got {joints.shape}")
    return PoseGraph(joints, COCO_EDGES, lift_coordinates(joints, p))


@dataclass
class PoseGraphSequence:
    frames: list  # Optional[PoseGraph] per frame

    def __len__(self):
        return len(self.frames)


@dataclass
class SceneGraph:
    """Entities with unit-square bboxes plus directed relation triples."""

    entities: list  # (category_id, (x, y, w, h))
    relations: list  # (subject_index, relation_id, object_index)

    def __post_init__(self):
        for cat, (x, y, w, h) in self.entities:
            if w <= 0 or h <= 0:
                raise ContractError(f"bbox must have positive size, got ({w}, {h})")
            if x < 0 or y < 0 or x + w > 1.0 + 1e-9 or y + h > 1.0 + 1e-9:
                raise ContractError(f"bbox ({x}, {y}, {w}, {h}) leaves the unit square")


# ---------------------------------------------------------------------------
# human-pose expert


@dataclass
class HpeParams:
    v_attn: object  # (p, p) node-attention matrix
    v_update: object  # (2p, p), maps [aggregated, original] to updated feature
    null_token: object  # (1, p) learned stand-in for pose-free frames
    w_q: object  # (d, d) cross-attention query projection (from video tokens)
    w_k: object  # (p, d) key projection (from pose tokens)
    w_v: object  # (p, d) value projection (from pose tokens)
    msa_q: object  # (d, d)
    msa_k: object  # (d, d)
    msa_v: object  # (d, d)
    msa_o: object  # (d, d)
    ffn: FfnParams  # d -> hidden -> d
    ln1_gamma: object
    ln1_beta: object
    ln2_gamma: object
    ln2_beta: object
    heads: int = 4


def init_hpe(rng: np.random.Generator, d: int, p: int, heads: int = 4,
             hidden: Optional[int] = None) -> HpeParams:
    hidden = hidden or 2 * d
    s = 1.0 / np.sqrt(d)
    return HpeParams(
        v_attn=rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, p)),
        v_update=rng.normal(0.0, 1.0 / np.sqrt(2 * p), size=(2 * p, p)),
        null_token=rng.normal(0.0, 0.5, size=(1, p)),
        w_q=rng.normal(0.0, s, size=(d, d)),
        w_k=rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, d)),
        w_v=rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, d)),
        msa_q=rng.normal(0.0, s, size=(d, d)),
        msa_k=rng.normal(0.0, s, size=(d, d)),
        msa_v=rng.normal(0.0, s, size=(d, d)),
        msa_o=rng.normal(0.0, s, size=(d, d)),
        ffn=init_ffn(rng, d, hidden, d),
        ln1_gamma=np.ones(d),
        ln1_beta=np.zeros(d),
        ln2_gamma=np.ones(d),
        ln2_beta=np.zeros(d),
        heads=heads,
    )


def pose_graph_attention(g: PoseGraph, params: HpeParams) -> PoseGraph:
    """One round of neighborhood attention plus node update.

    Per node k: scores with each neighbor l are (V g_k . V g_l) / sqrt(p),
    softmaxed over the neighborhood only; the aggregate is pushed through
    relu(V_upd [aggregate, original]). Topology is untouched.
    """
    p = shape_of(g.features)[1]
    if shape_of(params.v_attn)[0] != p:
        raise ContractError(
            f"feature dim {p} does not match attention matrix {shape_of(params.v_attn)}"
        )
    h = matmul(g.features, params.v_attn)
    scores = mul_const(matmul(h, transpose(h)), 1.0 / np.sqrt(p))
    beta = masked_softmax_rows(scores, g.adjacency())
    aggregated = matmul(beta, g.features)
    from .numerics import concat_cols  # local import keeps the header short

    updated = relu(matmul(concat_cols(aggregated, g.features), params.v_update))
    return PoseGraph(g.joints, g.edges, updated)


def _msa_ffn_block(x, params: HpeParams):
    # pre-norm? No: residual-then-norm, matching the "LN(x + sublayer(x))" form
    q = matmul(x, params.msa_q)
    k = matmul(x, params.msa_k)
    v = matmul(x, params.msa_v)
    att = matmul(attention(q, k, v, heads=params.heads), params.msa_o)
    t1 = layer_norm_rows(add(x, att), params.ln1_gamma, params.ln1_beta)
    f = ffn_forward(t1, params.ffn)
    return layer_norm_rows(add(t1, f), params.ln2_gamma, params.ln2_beta)


def pose_expert_forward(video, poses: PoseGraphSequence, params: HpeParams):
    """Video tokens attend over per-frame pose tokens, then one MSA+FFN block.

    Pose tokens are the mean of attention-updated node features; frames
    with no detected pose contribute the learned null token instead.
    """
    n = shape_of(video)[0]
    if len(poses) != n:
        raise ContractError(f"{len(poses)} pose frames for {n} video tokens")
    rows = []
    for g in poses.frames:
        if g is None:
            rows.append(params.null_token)
            continue
        updated = pose_graph_attention(g, params)
        rows.append(mul_const(colsum(updated.features), 1.0 / g.n_nodes))
    pose_tokens = concat_rows(*rows)
    # cross-attention: query from the video stream, key/value from poses.
    # The diagonal prior keeps frame t looking mostly at its own pose at
    # init; the tokens carry no positional code, so without it uniform
    # attention averages all frames together and the per-frame signal
    # never reaches the head.
    q = matmul(video, params.w_q)
    k = matmul(pose_tokens, params.w_k)
    v = matmul(pose_tokens, params.w_v)
    fused = attention(q, k, v, heads=1,
                      logit_bias=POSE_ALIGN_BIAS * np.eye(n))
    return _msa_ffn_block(fused, params)


# ---------------------------------------------------------------------------
# object-relation expert


@dataclass
class OreParams:
    category_embed: object  # (n_categories, node_dim)
    patch_proj: object  # (patch_dim, node_dim)
    null_token: object  # (1, node_dim) for entity-free frames
    gtl_weights: list  # L matrices (node_dim, node_dim)
    out_ffn: FfnParams  # node_dim -> hidden -> d
    grid: tuple = DEFAULT_PATCH_GRID


def init_ore(rng: np.random.Generator, d: int, node_dim: int, n_layers: int,
             n_categories: int, patch_dim: int, hidden: Optional[int] = None,
             grid: tuple = DEFAULT_PATCH_GRID) -> OreParams:
    hidden = hidden or 2 * d
    return OreParams(
        category_embed=rng.normal(0.0, 0.5, size=(n_categories, node_dim)),
        patch_proj=rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, node_dim)),
        null_token=rng.normal(0.0, 0.5, size=(1, node_dim)),
        gtl_weights=[
            rng.normal(0.0, 1.0 / np.sqrt(node_dim), size=(node_dim, node_dim))
            for _ in range(n_layers)
        ],
        out_ffn=init_ffn(rng, node_dim, hidden, d),
        grid=grid,
    )


def _patch_centers(grid: tuple) -> np.ndarray:
    """Row-major patch centers: index = row * cols + col, x from col, y from row."""
    rows, cols = grid
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([(c + 0.5) / cols, (r + 0.5) / rows], axis=1)


def _center_in_bbox(centers: np.ndarray, bbox) -> np.ndarray:
    x, y, w, h = bbox
    return (
        (centers[:, 0] >= x) & (centers[:, 0] <= x + w)
        & (centers[:, 1] >= y) & (centers[:, 1] <= y + h)
    )


def mask_video_tokens(frame_patches, graph: SceneGraph, grid: tuple = DEFAULT_PATCH_GRID):
    """Zero every patch whose center falls outside all entity bboxes."""
    rows, cols = grid
    n_patches = shape_of(frame_patches)[0]
    if n_patches != rows * cols:
        raise ContractError(f"{n_patches} patches do not fill a {rows}x{cols} grid")
    centers = _patch_centers(grid)
    keep = np.zeros(n_patches, dtype=bool)
    for _, bbox in graph.entities:
        keep |= _center_in_bbox(centers, bbox)
    return mul_const(frame_patches, keep[:, None].astype(np.float64))


def graph_transformer_layer(f, adjacency: np.ndarray, w):
    """Symmetric-normalized propagation then a dense relu layer.

    Z = D^(-1/2) C D^(-1/2) F with D the degree matrix of C; output is
    relu(Z W). C must be square, symmetric, and carry self-loops, which
    also rules out zero-degree nodes.
    """
    c = np.asarray(adjacency, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ContractError(f"adjacency must be square, got {c.shape}")
    if not np.array_equal(c, c.T):
        raise ContractError("adjacency must be symmetric")
    if not np.all(np.diag(c) == 1.0):
        raise ContractError("adjacency must carry self-loops on every node")
    if shape_of(f)[0] != c.shape[0]:
        raise ContractError(
            f"feature rows {shape_of(f)[0]} != adjacency order {c.shape[0]}"
        )
    deg = c.sum(axis=1)
    norm = c / np.sqrt(np.outer(deg, deg))
    return relu(matmul(matmul(norm, f), w))


def relation_expert_forward(video_patches: list, graphs: list, params: OreParams):
    """Scene graphs over masked patches -> graph transformer -> pooled token.

    Node features are the entity-category embedding plus the projected
    mean of masked patches whose centers fall inside the entity's bbox.
    Relation triples (plus self-loops) define the propagation graph.
    Entity-free frames use the learned null token.
    """
    if len(video_patches) != len(graphs):
        raise ContractError(
            f"{len(video_patches)} patch frames for {len(graphs)} scene graphs"
        )
    centers = _patch_centers(params.grid)
    pooled_rows = []
    for i, (patches, graph) in enumerate(zip(video_patches, graphs)):
        if graph is None or not graph.entities:
            pooled_rows.append(params.null_token)
            continue
        m = len(graph.entities)
        for s, r, o in graph.relations:
            if not (0 <= s < m and 0 <= o < m):
                raise DataError(
                    f"frame {i}: relation triple ({s}, {r}, {o}) "
                    f"references a missing entity (have {m})"
                )
        masked = mask_video_tokens(patches, graph, params.grid)
        node_rows = []
        for cat, bbox in graph.entities:
            inside = _center_in_bbox(centers, bbox)
            count = int(inside.sum())
            # empty bbox contributes no patch evidence, only its category
            sel = (inside / count if count else inside).astype(np.float64)[None, :]
            mean_patch = matmul(sel, masked) if count else np.zeros(
                (1, shape_of(masked)[1])
            )
            proj = matmul(mean_patch, params.patch_proj)
            node_rows.append(add(gather_rows(params.category_embed, [cat]), proj))
        nodes = concat_rows(*node_rows)
        adj = np.eye(m)
        for s, _, o in graph.relations:
            adj[s, o] = 1.0
            adj[o, s] = 1.0
        f = nodes
        for w in params.gtl_weights:
            f = graph_transformer_layer(f, adj, w)
        pooled_rows.append(mul_const(colsum(f), 1.0 / m))
    stacked = concat_rows(*pooled_rows)
    return ffn_forward(stacked, params.out_ffn)


# ---------------------------------------------------------------------------
# background and coarse experts


@dataclass
class VbeParams:
    ffn: FfnParams  # input_dim -> hidden -> d
    null_token: object  # (1, input_dim) for videos with no background stream


def init_vbe(rng: np.random.Generator, d: int, input_dim: int,
             hidden: Optional[int] = None) -> VbeParams:
    hidden = hidden or 2 * d
    return VbeParams(
        ffn=init_ffn(rng, input_dim, hidden, d),
        null_token=rng.normal(0.0, 0.5, size=(1, input_dim)),
    )


def background_expert_forward(bg, params: VbeParams, n_frames: Optional[int] = None):
    """Row-wise FFN refiner; a missing stream becomes n null-token rows."""
    if bg is None:
        if n_frames is None:
            raise ContractError("n_frames is required when the stream is absent")
        bg = gather_rows(params.null_token, [0] * n_frames)
    return ffn_forward(bg, params.ffn)


@dataclass
class CveParams:
    ffn: FfnParams  # input_dim -> hidden -> d


def init_cve(rng: np.random.Generator, d: int, input_dim: int,
             hidden: Optional[int] = None) -> CveParams:
    return CveParams(ffn=init_ffn(rng, input_dim, hidden or 2 * d, d))


def coarse_expert_forward(frames, params: CveParams):
    """Row-wise FFN over the always-present coarse frame encodings."""
    return ffn_forward(frames, params.ffn)


# ---------------------------------------------------------------------------
# gradient cases


def _tiny_pose_graph(rng, n_nodes=5, p=4, features=None):
    joints = rng.uniform(0.1, 0.9, size=(n_nodes, 2))
    edges = tuple((i, (i + 1) % n_nodes) for i in range(n_nodes))
    if features is None:
        features = rng.normal(size=(n_nodes, p))
    return PoseGraph(joints, edges, features)


def _randomize_biases(ffn: FfnParams, rng) -> FfnParams:
    # finite differencing straddles the relu kink when a hidden unit's
    # preactivation sits exactly at zero (which zero biases make likely
    # whenever an upstream relu dies); random biases keep cases off it
    return FfnParams(
        ffn.weight1, rng.normal(0.0, 0.4, size=np.shape(ffn.bias1)),
        ffn.weight2, rng.normal(0.0, 0.4, size=np.shape(ffn.bias2)),
    )


@register_grad_case("pose_graph_attention")
def _case_pga(seed: int):
    rng = np.random.default_rng(seed)
    g = _tiny_pose_graph(rng)
    feats = np.asarray(g.features)
    v_attn = rng.normal(size=(4, 4))
    v_update = rng.normal(size=(8, 4))
    probe = rng.normal(size=(5, 4))

    def f(fn, va, vu):
        graph = PoseGraph(g.joints, g.edges, fn)
        params = HpeParams(
            v_attn=va, v_update=vu, null_token=None, w_q=None, w_k=None,
            w_v=None, msa_q=None, msa_k=None, msa_v=None, msa_o=None,
            ffn=None, ln1_gamma=None, ln1_beta=None, ln2_gamma=None,
            ln2_beta=None,
        )
        out = pose_graph_attention(graph, params)
        return sum_all(mul_const(out.features, probe))

    return f, [feats, v_attn, v_update], None


@register_grad_case("graph_transformer_layer")
def _case_gtl(seed: int):
    rng = np.random.default_rng(seed)
    adj = np.eye(4)
    adj[0, 1] = adj[1, 0] = 1.0
    adj[1, 2] = adj[2, 1] = 1.0
    adj[2, 3] = adj[3, 2] = 1.0
    f0 = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 3))
    probe = rng.normal(size=(4, 3))

    def f(fn, wn):
        return sum_all(mul_const(graph_transformer_layer(fn, adj, wn), probe))

    return f, [f0, w], None


@register_grad_case("pose_expert")
def _case_pose_expert(seed: int):
    order = [
        "v_attn", "v_update", "null_token", "w_q", "w_k", "w_v",
        "msa_q", "msa_k", "msa_v", "msa_o",
        "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    ]
    rng = np.random.default_rng(seed)
    d, p, n = 8, 4, 3
    video = rng.normal(size=(n, d)) * 1.5
    g1 = _tiny_pose_graph(rng, p=p)
    g2 = _tiny_pose_graph(rng, p=p)
    params = init_hpe(rng, d, p, heads=2)
    params.ffn = _randomize_biases(params.ffn, rng)
    poses = PoseGraphSequence([g1, None, g2])
    probe = rng.normal(size=(n, d))
    arrays = [getattr(params, k) for k in order]
    arrays += [params.ffn.weight1, params.ffn.bias1,
               params.ffn.weight2, params.ffn.bias2]
    arrays.append(video)

    def f(*args):
        kw = dict(zip(order, args[: len(order)]))
        kw["ffn"] = FfnParams(*args[len(order) : len(order) + 4])
        kw["heads"] = 2
        out = pose_expert_forward(args[-1], poses, HpeParams(**kw))
        return sum_all(mul_const(out, probe))

    return f, arrays, 6


@register_grad_case("relation_expert")
def _case_relation_expert(seed: int):
    rng = np.random.default_rng(seed)
    d, node_dim, patch_dim, n = 8, 4, 6, 3
    grid = (2, 2)
    patches = [rng.normal(size=(4, patch_dim)) for _ in range(n)]
    graphs = [
        SceneGraph([(1, (0.0, 0.0, 0.6, 0.6)), (3, (0.4, 0.4, 0.5, 0.5))],
                   [(0, 2, 1)]),
        None,
        SceneGraph([(0, (0.1, 0.1, 0.8, 0.8))], []),
    ]
    params = init_ore(rng, d, node_dim, n_layers=2, n_categories=5,
                      patch_dim=patch_dim, grid=grid)
    params.out_ffn = _randomize_biases(params.out_ffn, rng)
    probe = rng.normal(size=(n, d))

    def f(embed, proj, null, w0, w1, fw1, fb1, fw2, fb2):
        p = OreParams(embed, proj, null, [w0, w1],
                      FfnParams(fw1, fb1, fw2, fb2), grid)
        return sum_all(mul_const(relation_expert_forward(patches, graphs, p), probe))

    arrays = [
        params.category_embed, params.patch_proj, params.null_token,
        params.gtl_weights[0], params.gtl_weights[1],
        params.out_ffn.weight1, params.out_ffn.bias1,
        params.out_ffn.weight2, params.out_ffn.bias2,
    ]
    return f, arrays, 6


@register_grad_case("background_expert")
def _case_background_expert(seed: int):
    rng = np.random.default_rng(seed)
    params = init_vbe(rng, 6, 5)
    params.ffn = _randomize_biases(params.ffn, rng)
    probe = rng.normal(size=(3, 6))
    bg = rng.normal(size=(3, 5)) if seed % 2 == 0 else None

    def f(w1, b1, w2, b2, null):
        p = VbeParams(FfnParams(w1, b1, w2, b2), null)
        out = background_expert_forward(bg, p, n_frames=3)
        return sum_all(mul_const(out, probe))

    arrays = [params.ffn.weight1, params.ffn.bias1, params.ffn.weight2,
              params.ffn.bias2, params.null_token]
    return f, arrays, None


@register_grad_case("coarse_expert")
def _case_coarse_expert(seed: int):
    rng = np.random.default_rng(seed)
    params = init_cve(rng, 6, 5)
    params.ffn = _randomize_biases(params.ffn, rng)
    x = rng.normal(size=(3, 5))
    probe = rng.normal(size=(3, 6))

    def f(xn, w1, b1, w2, b2):
        out = coarse_expert_forward(xn, CveParams(FfnParams(w1, b1, w2, b2)))
        return sum_all(mul_const(out, probe))

    return f, [x, params.ffn.weight1, params.ffn.bias1,
               params.ffn.weight2, params.ffn.bias2], None
