"""Three-stage optimisation (coarse, detail, joint) and the block-wise baseline."""

from __future__ import annotations

import copy
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from holosplat.config import RunConfig
from holosplat.metrics import psnr, ssim, total_loss
from holosplat.model import PassOptions, Phi, ViewPass, freeze_coarse, init_phi
from holosplat.optim import Adam, exp_lr
from holosplat.raster import rasterize, rasterize_backward
from holosplat.scene import Camera, GaussianSet, quat_to_rotmat

STAGES = ("init", "coarse", "detail", "joint")
COARSE_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "sh")


class OrderingError(RuntimeError):
    """A stage was requested before the stage it depends on."""


@dataclass
class TrainView:
    cam: Camera
    image: np.ndarray       # (H, W, 3) float32 in [0, 1]
    name: str = ""


class ViewSampler:
    """Uniform sampling without replacement within each epoch."""

    def __init__(self, n: int, rng: np.random.Generator, queue=None):
        if n <= 0:
            raise ValueError("no training views")
        self.n, self.rng = n, rng
        self.queue = [] if queue is None else [int(i) for i in queue]

    def next(self) -> int:
        if not self.queue:
            self.queue = self.rng.permutation(self.n).tolist()
        return self.queue.pop(0)


@dataclass
class TrainState:
    cfg: RunConfig
    coarse: GaussianSet
    phi: Phi
    optim: Adam
    rng: np.random.Generator
    extent: float
    stage: str = "init"              # last completed stage
    queue: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)     # free-form JSON-safe notes (e.g. scene path)

    def require(self, stage: str) -> None:
        done = STAGES.index(self.stage)
        need = STAGES.index(stage)
        if stage == "coarse" and done != 0:
            raise OrderingError("coarse stage must run on a fresh initialisation")
        if need >= 2 and done < need - 1:
            raise OrderingError(f"stage {stage!r} needs the {STAGES[need - 1]!r} stage first")


@dataclass
class StageReport:
    stage: str
    losses: list = field(default_factory=list)
    psnrs: list = field(default_factory=list)
    skipped: int = 0
    n_gaussians: int = 0
    seconds: float = 0.0

    def smoothed(self, where: str = "end", window: int = 100) -> float:
        if not self.losses:
            return float("nan")
        a = self.losses[:window] if where == "start" else self.losses[-window:]
        return float(np.mean(a))


def scene_extent(cameras) -> float:
    """Radius of the camera cloud, padded by 10%, used to scale spatial learning rates."""
    centers = np.array([c.center for c in cameras], dtype=np.float64)
    d = np.linalg.norm(centers - centers.mean(axis=0), axis=1)
    return float(max(d.max(), 1e-6) * 1.1)


def init_state(cfg: RunConfig, seed_points, seed_colors, cameras, dtype=np.float32) -> TrainState:
    if len(seed_points) == 0:
        raise ValueError("seed point cloud is empty")
    coarse = GaussianSet.from_points(seed_points, seed_colors, cfg.sh_degree, cfg.init_opacity, dtype)
    # the implicit branch draws from its own stream, so the coarse stage does not
    # depend on decoder switches (ablations can share one coarse run)
    phi = init_phi(cfg, coarse, phi_rng(cfg.seed), dtype)
    return TrainState(cfg, coarse, phi, Adam(), np.random.default_rng(cfg.seed), scene_extent(cameras),
                      meta={"init_log_scale": float(np.median(coarse.log_scales))})


def phi_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def branch_after_coarse(state: TrainState, **overrides) -> TrainState:
    """Copy of a post-coarse state with config switches changed and a fresh implicit branch.

    Equivalent to a from-scratch run with those switches, since the coarse
    stage never reads the implicit parameters or their random stream.
    """
    if state.stage != "coarse":
        raise OrderingError("branching needs a state that has just finished the coarse stage")
    cfg = replace(state.cfg, **overrides).validate()
    log_scale = state.meta.get("init_log_scale", float(np.median(state.coarse.log_scales)))
    seeds = GaussianSet.zeros(1, cfg.sh_degree, state.coarse.dtype)
    seeds.log_scales[:] = log_scale
    phi = init_phi(cfg, seeds, phi_rng(cfg.seed), state.coarse.dtype)
    freeze_coarse(phi, state.coarse, cfg)
    optim = copy.deepcopy(state.optim)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng.bit_generator.state
    return TrainState(cfg, state.coarse.copy(), phi, optim, rng, state.extent, "coarse",
                      list(state.queue), dict(state.meta))


# ----------------------------------------------------------------------------
# parameter groups
# ----------------------------------------------------------------------------

def _coarse_lrs(cfg: RunConfig, extent: float, pos_lr: float, sh_shape):
    sh_lr = np.full((1, sh_shape[1], 1), cfg.lr_sh / 20.0)
    sh_lr[0, 0, 0] = cfg.lr_sh
    return {"means": pos_lr * extent, "quats": cfg.lr_rotation, "log_scales": cfg.lr_scale,
            "opacity_logits": cfg.lr_opacity, "sh": sh_lr}


def _phi_lr(cfg: RunConfig, name: str) -> float:
    if name == "hash":
        return cfg.lr_hash
    if name == "pool":
        return cfg.lr_offset
    return cfg.lr_mlp


def _step_coarse(state: TrainState, grads: GaussianSet, lrs: dict) -> None:
    params, g = state.coarse.arrays(), grads.arrays()
    for name in COARSE_GROUPS:
        state.optim.step("gs." + name, params[name], g[name], lrs[name])


def _step_phi(state: TrainState, grads: dict) -> None:
    cfg, phi = state.cfg, state.phi
    params = phi.named_params()
    for name, gr in grads.items():
        state.optim.step("phi." + name, params[name], gr, _phi_lr(cfg, name))
    if "pool" in grads:
        phi.pool.clamp_(cfg.offset_cap_frac * phi.diagonal())


# ----------------------------------------------------------------------------
# densification
# ----------------------------------------------------------------------------

class _Densifier:
    def __init__(self, n: int):
        self.reset(n)

    def reset(self, n: int) -> None:
        self.accum = np.zeros(n)
        self.denom = np.zeros(n)

    def add(self, rows, dcenters, touched, width: int, height: int) -> None:
        g = np.asarray(dcenters, np.float64)
        norm = np.hypot(g[:, 0] * width / 2, g[:, 1] * height / 2)
        rows, norm = rows[touched], norm[touched]
        np.add.at(self.accum, rows, norm)
        np.add.at(self.denom, rows, 1.0)

    def mean_grad(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            g = self.accum / self.denom
        return np.nan_to_num(g)


def _logit(p):
    return np.log(p / (1 - p))


def densify_and_prune(state: TrainState, dens: _Densifier, *, max_world_frac=None) -> tuple[int, int, int]:
    """Clone small / split large high-gradient Gaussians, then drop transparent ones.

    Returns (n_cloned, n_split, n_pruned).
    """
    cfg, gs, rng = state.cfg, state.coarse, state.rng
    dt = gs.dtype
    n = len(gs)
    grads = dens.mean_grad()
    scales = np.exp(gs.log_scales.astype(np.float64))
    big = scales.max(axis=1) > cfg.percent_dense * state.extent
    hot = grads >= cfg.densify_grad_threshold
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    clones = gs.take(clone_idx)
    parents = gs.take(np.repeat(split_idx, 2))
    if len(split_idx):
        s = np.exp(parents.log_scales.astype(np.float64))
        samples = rng.normal(size=s.shape) * s
        R = quat_to_rotmat(parents.quats.astype(np.float64))
        parents.means = (np.einsum("nij,nj->ni", R, samples) + parents.means).astype(dt)
        parents.log_scales = np.log(s / (0.8 * 2)).astype(dt)
    keep = np.setdiff1d(np.arange(n), split_idx)
    grown = GaussianSet.concat([gs.take(keep), clones, parents])
    n_new = len(clones) + len(parents)
    for name in COARSE_GROUPS:
        state.optim.remap("gs." + name, keep, n_new)

    opac = 1 / (1 + np.exp(-grown.opacity_logits.astype(np.float64)))
    prune = opac < cfg.min_opacity
    if max_world_frac is not None:
        prune |= np.exp(grown.log_scales.astype(np.float64)).max(axis=1) > max_world_frac * state.extent
    if prune.all():
        prune[np.argmax(opac)] = False
    alive = np.flatnonzero(~prune)
    state.coarse = grown.take(alive)
    for name in COARSE_GROUPS:
        state.optim.remap("gs." + name, alive, 0)
    dens.reset(len(state.coarse))
    return len(clone_idx), len(split_idx), int(prune.sum())


def reset_opacity(state: TrainState, ceiling: float = 0.01) -> None:
    gs = state.coarse
    gs.opacity_logits = np.minimum(gs.opacity_logits, gs.dtype.type(_logit(ceiling)))
    state.optim.reset("gs.opacity_logits", np.arange(len(gs)))


# ----------------------------------------------------------------------------
# loops
# ----------------------------------------------------------------------------

def _log_line(log, stage, it, report: StageReport, n: int) -> None:
    if log is None:
        return
    log(f"stage={stage} iter={it} loss={report.losses[-1]:.6f} "
        f"loss_avg={report.smoothed():.6f} psnr={report.psnrs[-1]:.3f} gaussians={n}")


def _loop(state: TrainState, views, *, stage: str, iterations: int, mode: str,
          train_coarse: bool, train_phi: bool, densify: bool, pos_lr, log=None) -> StageReport:
    if not views:
        raise ValueError("no training images")
    cfg = state.cfg
    opts = PassOptions.from_config(cfg)
    sampler = ViewSampler(len(views), state.rng, state.queue)
    report = StageReport(stage)
    dens = _Densifier(len(state.coarse)) if densify else None
    t0 = time.perf_counter()
    for it in range(1, iterations + 1):
        view = views[sampler.next()]
        vp = ViewPass(state.coarse, state.phi, view.cam, mode, opts)
        if vp.n_v == 0:
            report.skipped += 1
            continue
        out, rc = rasterize(vp.gaussians, view.cam, cfg.background)
        lb, dimg = total_loss(out.color, view.image, cfg.ssim_lambda)
        gvg, dcent = rasterize_backward(vp.gaussians, view.cam, rc, dimg)
        gc, gp = vp.backward(gvg)
        if densify and it < cfg.densify_until:
            rows = vp.rows_to_coarse
            coarse_rows = rows >= 0
            dens.add(rows[coarse_rows], dcent[coarse_rows], rc.touched[coarse_rows],
                     view.cam.width, view.cam.height)
        if train_coarse:
            _step_coarse(state, gc, _coarse_lrs(cfg, state.extent, pos_lr(it), state.coarse.sh.shape))
        if train_phi and gp:
            _step_phi(state, gp)
        report.losses.append(lb.total)
        report.psnrs.append(psnr(out.color, view.image))
        if densify and it < cfg.densify_until:
            if it > cfg.densify_from and it % cfg.densify_interval == 0:
                frac = 0.1 if it > cfg.opacity_reset_interval else None
                densify_and_prune(state, dens, max_world_frac=frac)
            if cfg.opacity_reset_interval > 0 and it % cfg.opacity_reset_interval == 0:
                reset_opacity(state)
        if cfg.log_every and it % cfg.log_every == 0:
            _log_line(log, stage, it, report, len(state.coarse))
    state.queue = sampler.queue
    report.n_gaussians = len(state.coarse)
    report.seconds = time.perf_counter() - t0
    return report


def train_coarse(state: TrainState, views, *, iterations: int | None = None, densify: bool = True,
                 log=None) -> StageReport:
    """Explicit Gaussians only, with clone/split/prune; fixes the box and pool at the end."""
    state.require("coarse")
    cfg = state.cfg
    iters = cfg.iterations_coarse if iterations is None else iterations
    report = _loop(state, views, stage="coarse", iterations=iters, mode="all", train_coarse=True,
                   train_phi=False, densify=densify,
                   pos_lr=lambda it: exp_lr(it, cfg.lr_position_init, cfg.lr_position_final, iters),
                   log=log)
    freeze_coarse(state.phi, state.coarse, cfg)
    state.stage = "coarse"
    return report


def train_detail(state: TrainState, views, *, iterations: int | None = None, log=None) -> StageReport:
    """Implicit parameters only; coarse Gaussians stay bit-identical."""
    state.require("detail")
    cfg = state.cfg
    iters = cfg.iterations_detail if iterations is None else iterations
    report = _loop(state, views, stage="detail", iterations=iters, mode="mixed", train_coarse=False,
                   train_phi=True, densify=False, pos_lr=lambda it: 0.0, log=log)
    state.stage = "detail"
    return report


def train_joint(state: TrainState, views, *, iterations: int | None = None, train_phi: bool | None = None,
                log=None) -> StageReport:
    """Everything trainable, Gaussian count fixed.

    With ``train_phi`` off the implicit branch is dropped from rendering too, so
    the stage is plain coarse fine-tuning (see ``finetune_coarse``).
    """
    state.require("joint")
    cfg = state.cfg
    iters = cfg.iterations_joint if iterations is None else iterations
    use_phi = cfg.joint_train_phi if train_phi is None else train_phi
    report = _loop(state, views, stage="joint", iterations=iters, mode="mixed" if use_phi else "all",
                   train_coarse=True, train_phi=use_phi, densify=False,
                   pos_lr=lambda it: cfg.lr_position_final, log=log)
    state.stage = "joint"
    return report


def finetune_coarse(state: TrainState, views, iterations: int, log=None) -> StageReport:
    """Coarse-only refinement at the final position rate, no densification."""
    cfg = state.cfg
    return _loop(state, views, stage="finetune", iterations=iterations, mode="all", train_coarse=True,
                 train_phi=False, densify=False, pos_lr=lambda it: cfg.lr_position_final, log=log)


def train_all(state: TrainState, views, log=None) -> list[StageReport]:
    return [train_coarse(state, views, log=log), train_detail(state, views, log=log),
            train_joint(state, views, log=log)]


# ----------------------------------------------------------------------------
# divide-and-conquer baseline
# ----------------------------------------------------------------------------

def block_bounds(points, blocks: int):
    """Split the point box into equal slabs along its longest axis; returns (axis, edges)."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    axis = int(np.argmax(hi - lo))
    return axis, np.linspace(lo[axis], hi[axis], blocks + 1)


def train_divided(cfg: RunConfig, seed_points, seed_colors, views, blocks: int, log=None,
                  dtype=np.float32) -> tuple[GaussianSet, list[StageReport]]:
    """Optimise each block independently and concatenate the results."""
    seed_points = np.asarray(seed_points, np.float64)
    axis, edges = block_bounds(seed_points, blocks)
    centers = np.array([v.cam.center for v in views])
    parts, reports = [], []
    for b in range(blocks):
        lo, hi = edges[b], edges[b + 1]
        x = seed_points[:, axis]
        inside = (x >= lo) & ((x < hi) | (b == blocks - 1))
        pad = cfg.block_overlap * (hi - lo)
        # cameras beyond either end of the scene belong to the end blocks
        c_lo = -np.inf if b == 0 else lo - pad
        c_hi = np.inf if b == blocks - 1 else hi + pad
        cam_in = (centers[:, axis] >= c_lo) & (centers[:, axis] <= c_hi)
        bviews = [v for v, k in zip(views, cam_in) if k]
        if not inside.any() or not bviews:
            warnings.warn(f"block {b} has no seeds or no views; skipped", stacklevel=2)
            continue
        state = init_state(cfg, seed_points[inside], np.asarray(seed_colors)[inside],
                           [v.cam for v in bviews], dtype)
        reports.append(train_coarse(state, bviews, log=log))
        parts.append(state.coarse)
    if not parts:
        raise ValueError("every block was empty")
    return GaussianSet.concat(parts), reports


# ----------------------------------------------------------------------------
# rendering and evaluation
# ----------------------------------------------------------------------------

def render_view(state_or_coarse, cam: Camera, mode: str = "mixed", *, phi: Phi | None = None,
                cfg: RunConfig | None = None, with_depth: bool = False):
    """Render one camera from a TrainState (or a bare coarse set with ``mode='all'``)."""
    if isinstance(state_or_coarse, TrainState):
        coarse, phi, cfg = state_or_coarse.coarse, state_or_coarse.phi, state_or_coarse.cfg
    else:
        coarse = state_or_coarse
        cfg = cfg or RunConfig()
    opts = PassOptions.from_config(cfg)
    vp = ViewPass(coarse, phi, cam, mode, opts)
    out, _ = rasterize(vp.gaussians, cam, cfg.background, with_depth=with_depth, keep_cache=False)
    return out


def evaluate(state, views, mode: str = "mixed", **kw) -> list[tuple[float, float]]:
    """Per-view (psnr, ssim)."""
    rows = []
    for v in views:
        img = render_view(state, v.cam, mode, **kw).color
        rows.append((psnr(img, v.image), float(ssim(img, v.image))))
    return rows


def split_views(views, test_every: int):
    """Every k-th view (starting at 0) is held out; k = 0 picks k for about 20 test views."""
    n = len(views)
    k = test_every if test_every > 0 else max(4, n // 20)
    test = [v for i, v in enumerate(views) if i % k == 0]
    train = [v for i, v in enumerate(views) if i % k != 0]
    return train, test
