"""3D convolutional voxel encoder and the view-contrastive training objective.

Everything here is plain float64 numpy with hand-written backward passes so
that gradients can be checked against finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NoCorrespondencesError
from .geometry import (
    VoxelGrid,
    compose_pose,
    covisibility_mask,
    grid_spec_from_points,
    invert_pose,
    lift_to_grid,
    unproject_depth,
    warp_grid,
    RigidPose,
    GridSpec,
)

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (k, k, k, Cin, Cout)
    bias: np.ndarray  # (Cout,)
    nonlinearity: str = "none"  # "relu" or "none"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k = self.kernel.shape
        if len(k) != 5 or not (k[0] == k[1] == k[2]) or k[0] % 2 == 0:
            raise InputError("kernel must be (k, k, k, Cin, Cout) with odd k")
        if self.bias.shape != (k[4],):
            raise InputError("bias length must equal output channels")
        if self.nonlinearity not in ("relu", "none"):
            raise InputError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def cin(self):
        return self.kernel.shape[3]

    @property
    def cout(self):
        return self.kernel.shape[4]


@dataclass
class EncoderParams:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise InputError("encoder needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.cout != b.cin:
                raise InputError("layer channel counts do not chain")
        for layer in self.layers:
            if not (np.isfinite(layer.kernel).all() and np.isfinite(layer.bias).all()):
                raise InputError("encoder weights must be finite")

    def copy(self):
        return EncoderParams([ConvLayer(l.kernel.copy(), l.bias.copy(), l.nonlinearity)
                              for l in self.layers])

    def flat(self):
        return np.concatenate([np.concatenate([l.kernel.ravel(), l.bias]) for l in self.layers])

    @classmethod
    def init(cls, seed=0, channels=(3, 16, 32), kernel_sizes=(3, 1),
             nonlinearities=("relu", "none")):
        """He-initialised stack; defaults give 3x3x3 (3->16, relu) then 1x1x1 (16->32)."""
        rng = np.random.default_rng(seed)
        layers = []
        for cin, cout, k, nl in zip(channels[:-1], channels[1:], kernel_sizes, nonlinearities):
            fan_in = cin * k ** 3
            kernel = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(k, k, k, cin, cout))
            layers.append(ConvLayer(kernel, np.zeros(cout), nl))
        return cls(layers)


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    negatives_per_anchor: int = 64
    learning_rate: float = 0.1
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InputError("temperature must be positive")
        if not self.learning_rate >= 0:
            raise InputError("learning rate must be non-negative")
        if self.negatives_per_anchor < 1:
            raise InputError("negatives_per_anchor must be >= 1")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")


@dataclass(eq=False)
class FeatureGrid:
    spec: GridSpec
    data: np.ndarray
    occupancy: np.ndarray
    cache: dict = field(default=None, repr=False)


# -- convolution primitives ---------------------------------------------------

def _patches(x, k):
    """im2col for a zero-padded stride-1 3D convolution: (N, Cin*k^3)."""
    if k == 1:
        return x.reshape(-1, x.shape[-1])
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(0, 1, 2))  # (Dx,Dy,Dz,Cin,k,k,k)
    return win.reshape(-1, x.shape[-1] * k ** 3)


def _kernel_matrix(kernel):
    k, _, _, cin, cout = kernel.shape
    return kernel.transpose(3, 0, 1, 2, 4).reshape(cin * k ** 3, cout)


def conv3d(x, kernel, bias):
    """Zero-padded, stride-1 'same' 3D cross-correlation of ``x`` (Dx,Dy,Dz,Cin)."""
    k = kernel.shape[0]
    out = _patches(x, k) @ _kernel_matrix(kernel) + bias
    return out.reshape(x.shape[:3] + (kernel.shape[4],))


def conv3d_backward(x, kernel, grad_out):
    """Gradients of :func:`conv3d` w.r.t. kernel, bias and input."""
    k, _, _, cin, cout = kernel.shape
    g = grad_out.reshape(-1, cout)
    gk = (_patches(x, k).T @ g).reshape(cin, k, k, k, cout).transpose(1, 2, 3, 0, 4)
    gb = g.sum(axis=0)
    # input gradient is a correlation with the flipped, channel-swapped kernel
    flipped = kernel[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
    gx = conv3d(grad_out, flipped, np.zeros(cin))
    return gk, gb, gx


# -- encoder ------------------------------------------------------------------

def encoder_forward(grid, params):
    """Encode a voxel grid into unit-norm per-voxel features.

    The input to the first convolution is ``data * occupancy``. Convolutions
    are zero-padded and stride 1; the final activations are L2-normalised
    wherever occupancy is positive and the activation is nonzero, and are
    zero elsewhere.
    """
    if grid.channels != params.layers[0].cin:
        raise InputError(f"grid has {grid.channels} channels, encoder expects "
                         f"{params.layers[0].cin}")
    # colours are weighted by occupancy so partially covered voxels keep
    # their sub-voxel surface position
    h = grid.data * grid.occupancy[..., None]
    acts = [h]
    pre = []
    for layer in params.layers:
        z = conv3d(h, layer.kernel, layer.bias)
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.nonlinearity == "relu" else z
        acts.append(h)
    norm = np.linalg.norm(h, axis=-1)
    keep = (grid.occupancy > 0) & (norm > NORM_EPS)
    out = np.zeros_like(h)
    out[keep] = h[keep] / norm[keep][:, None]
    cache = {"acts": acts, "pre": pre, "norm": norm, "keep": keep, "out": out}
    return FeatureGrid(grid.spec, out, grid.occupancy.copy(), cache)


def encoder_backward(grid, params, upstream_grad, feat=None):
    """Backpropagate ``upstream_grad`` (d loss / d features) through the encoder.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is an
    :class:`EncoderParams` holding the kernel/bias gradients. ``feat`` may be
    the :class:`FeatureGrid` returned by the matching forward call to reuse
    its activations.
    """
    if feat is None or feat.cache is None:
        feat = encoder_forward(grid, params)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != feat.data.shape:
        raise InputError(f"upstream gradient shape {upstream_grad.shape} does not match "
                         f"features {feat.data.shape}")
    c = feat.cache
    keep, out, norm = c["keep"], c["out"], c["norm"]
    g = np.zeros_like(upstream_grad)
    gk_ = upstream_grad[keep]
    yk = out[keep]
    g[keep] = (gk_ - yk * np.einsum("nc,nc->n", yk, gk_)[:, None]) / norm[keep][:, None]

    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.nonlinearity == "relu":
            g = g * (c["pre"][i] > 0)
        gk, gb, g = conv3d_backward(c["acts"][i], layer.kernel, g)
        grads[i] = ConvLayer(gk, gb, layer.nonlinearity)
    return EncoderParams(grads), g * grid.occupancy[..., None]


# -- contrastive objective ----------------------------------------------------

def _array(x):
    return np.asarray(x.data if isinstance(x, (FeatureGrid, VoxelGrid)) else x, dtype=np.float64)


def sample_negatives(n_anchors, n_neg, rng):
    """For each anchor ``i`` draw ``n_neg`` distinct indices from ``range(n) \\ {i}``.

    When fewer than ``n_neg`` other voxels exist, all of them are used.
    """
    n_neg = min(n_neg, n_anchors - 1)
    out = np.empty((n_anchors, n_neg), dtype=np.int64)
    for i in range(n_anchors):
        pick = rng.choice(n_anchors - 1, size=n_neg, replace=False)
        out[i] = pick + (pick >= i)
    return out


def view_contrastive_loss(feat_a_in_b, feat_b, mask, cfg, negatives=None):
    """InfoNCE over covisible voxels with A->B anchors.

    ``feat_a_in_b`` and ``feat_b`` are ``FeatureGrid`` objects or raw
    ``(Dx, Dy, Dz, C)`` arrays in the same frame. Returns
    ``(loss, grad_a, grad_b)`` with gradients shaped like the feature arrays.
    """
    fa = _array(feat_a_in_b)
    fb = _array(feat_b)
    if fa.shape != fb.shape:
        raise InputError("feature grids must share shape")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != fa.shape[:3]:
        raise InputError("mask shape does not match feature grids")
    idx = np.flatnonzero(mask)
    m = len(idx)
    if m == 0:
        raise NoCorrespondencesError("no correspondences: covisibility mask is empty")
    c = fa.shape[-1]
    a = fa.reshape(-1, c)[idx]
    b = fb.reshape(-1, c)[idx]
    tau = cfg.temperature
    if negatives is None:
        negatives = sample_negatives(m, cfg.negatives_per_anchor, np.random.default_rng(cfg.seed))
    nb = b[negatives]  # (M, N, C)

    pos = np.einsum("mc,mc->m", a, b) / tau
    neg = np.einsum("mc,mnc->mn", a, nb) / tau
    logits = np.concatenate([pos[:, None], neg], axis=1)
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    z = ex.sum(axis=1, keepdims=True)
    lse = np.log(z[:, 0]) + top[:, 0]
    loss = float(np.mean(lse - pos))

    prob = ex / z
    dpos = (prob[:, 0] - 1.0) / (m * tau)
    dneg = prob[:, 1:] / (m * tau)
    ga = dpos[:, None] * b + np.einsum("mn,mnc->mc", dneg, nb)
    gb_rows = dpos[:, None] * a
    gb_neg = dneg[:, :, None] * a[:, None, :]
    gb_sel = gb_rows.copy()
    np.add.at(gb_sel, negatives.ravel(), gb_neg.reshape(-1, c))

    grad_a = np.zeros((fa.size // c, c))
    grad_b = np.zeros((fb.size // c, c))
    grad_a[idx] = ga
    grad_b[idx] = gb_sel
    return loss, grad_a.reshape(fa.shape), grad_b.reshape(fb.shape)


def retrieval_accuracy(feat_a_in_b, feat_b, mask):
    """Fraction of masked anchors whose cosine nearest neighbour is their positive.

    Ties count as failures.
    """
    fa = _array(feat_a_in_b)
    fb = _array(feat_b)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) < 2:
        raise InputError("retrieval accuracy needs at least two masked voxels")
    c = fa.shape[-1]
    a = fa.reshape(-1, c)[idx]
    b = fb.reshape(-1, c)[idx]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    a = a / np.where(na > 0, na, 1.0)[:, None]
    b = b / np.where(nb > 0, nb, 1.0)[:, None]
    sim = a @ b.T
    diag = np.diag(sim).copy()
    np.fill_diagonal(sim, -np.inf)
    return float(np.mean(diag > sim.max(axis=1)))


# -- training -----------------------------------------------------------------

@dataclass
class ScenePair:
    rgb_a: np.ndarray
    depth_a: np.ndarray
    pose_a: RigidPose  # camera-to-world
    rgb_b: np.ndarray
    depth_b: np.ndarray
    pose_b: RigidPose
    intrinsics: object


@dataclass
class PreparedPair:
    grid_a_in_b: VoxelGrid
    grid_b: VoxelGrid
    mask: np.ndarray


def prepare_pair(pair, dims=(32, 32, 32)):
    """Lift both views into camera-frame grids and warp A into B's frame.

    Each view is lifted in its own camera frame; A's grid is centred on A's
    points and B's grid is the same cube carried over by the relative pose,
    so both cover the same physical region. The returned mask keeps
    covisible voxels that are occupied in both grids.
    """
    k = pair.intrinsics
    ident = RigidPose.identity()
    pts_a, _ = unproject_depth(pair.depth_a, k, ident)
    if len(pts_a) == 0:
        return None
    spec_a = grid_spec_from_points(pts_a, dims)
    a_to_b = compose_pose(invert_pose(pair.pose_b), pair.pose_a)
    center_a = spec_a.origin + spec_a.voxel_size * (np.asarray(dims) - 1) / 2.0
    center_b = a_to_b.apply(center_a)
    spec_b = GridSpec(center_b - spec_a.voxel_size * (np.asarray(dims) - 1) / 2.0,
                      spec_a.voxel_size, dims)
    grid_a = lift_to_grid(pair.rgb_a, pair.depth_a, k, ident, spec_a)
    grid_b = lift_to_grid(pair.rgb_b, pair.depth_b, k, ident, spec_b)
    grid_a_in_b = warp_grid(grid_a, a_to_b, spec_b)
    mask = covisibility_mask(spec_b, pair.depth_a, a_to_b, pair.depth_b, ident, k)
    mask &= (grid_a_in_b.occupancy > 0) & (grid_b.occupancy > 0)
    return PreparedPair(grid_a_in_b, grid_b, mask)


def pair_loss_and_grads(prepared, params, cfg, rng_seed):
    fa = encoder_forward(prepared.grid_a_in_b, params)
    fb = encoder_forward(prepared.grid_b, params)
    loss, ga, gb = view_contrastive_loss(
        fa, fb, prepared.mask,
        ContrastiveConfig(cfg.temperature, cfg.negatives_per_anchor, cfg.learning_rate,
                          cfg.epochs, rng_seed))
    grads_a, _ = encoder_backward(prepared.grid_a_in_b, params, ga, fa)
    grads_b, _ = encoder_backward(prepared.grid_b, params, gb, fb)
    total = EncoderParams([ConvLayer(x.kernel + y.kernel, x.bias + y.bias, x.nonlinearity)
                           for x, y in zip(grads_a.layers, grads_b.layers)])
    return loss, total


def step_seed(seed, epoch, index):
    return np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0]


def train_view_prediction(scene_pairs, params0, cfg, dims=(32, 32, 32), on_epoch=None):
    """Plain SGD on the view-contrastive loss, one step per scene pair.

    Returns ``(params, loss_curve)`` where ``loss_curve[e]`` is the mean loss
    over the pairs visited in epoch ``e`` (losses are measured before each
    step). Pairs without covisible voxels are skipped.
    """
    params = params0.copy()
    if cfg.epochs == 0:
        return params, []
    prepared = []
    skipped = 0
    for pair in scene_pairs:
        p = pair if isinstance(pair, PreparedPair) else prepare_pair(pair, dims)
        if p is None or not p.mask.any():
            skipped += 1
            continue
        prepared.append(p)
    if skipped:
        log.warning("skipped %d scene pair(s) with no covisible voxels", skipped)
    if not prepared:
        raise NoCorrespondencesError("no scene pair has any covisible voxels")

    order_rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(prepared))
        losses = []
        for j in order:
            loss, grads = pair_loss_and_grads(prepared[j], params, cfg, step_seed(cfg.seed, epoch, j))
            losses.append(loss)
            if cfg.learning_rate > 0:
                for layer, g in zip(params.layers, grads.layers):
                    layer.kernel -= cfg.learning_rate * g.kernel
                    layer.bias -= cfg.learning_rate * g.bias
        curve.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return params, curve
