"""Sharded training of a small dense network over simulated ranks.

Each rank runs in its own thread and talks to the others only through
``Rendezvous`` endpoints.  One optimizer step per rank:

1. for every microbatch, gather each layer's parameters over its Z3 group and
   run the forward pass; walking the layers backwards, gather the parameters
   again, compute the layer gradient and reduce-scatter it over the Z2 group
   in FP32 (or FP64), accumulating the shards across microbatches;
2. all-reduce the accumulated shard across the replicas that hold the same
   gradient shard;
3. run Adam on the rank's optimizer shard (Z1), round the new master values
   to BF16 and gather them over Z1 to rebuild the parameter shard.

The unsharded baseline adds gradients in exactly the grouping the collectives
use, and rounds at the same program points, so the two paths agree bitwise.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .collectives import RankTensor, Rendezvous, to_bf16
from .config import ParallelConfig, ProcessGroup, Topology, build_process_groups, validate_config
from .config import ModelSpec

PRECISIONS = ("fp64", "mixed")
FAULTS = ("reduce_order", "drop_dzp")


class EquivalenceFailure(AssertionError):
    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TinyModel:
    """Dense layers ``y = W x + b`` with tanh between them and a linear head."""

    dims: tuple[int, ...] = (8, 16, 16, 4)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def layer_size(self, i: int) -> int:
        return self.dims[i + 1] * self.dims[i] + self.dims[i + 1]

    @property
    def num_params(self) -> int:
        return sum(self.layer_size(i) for i in range(self.num_layers))

    def init(self, seed: int) -> list[np.ndarray]:
        rng = np.random.default_rng(seed)
        out = []
        for i in range(self.num_layers):
            w = rng.standard_normal((self.dims[i + 1], self.dims[i])) / math.sqrt(self.dims[i])
            b = 0.1 * rng.standard_normal(self.dims[i + 1])
            out.append(np.concatenate([w.ravel(), b]))
        return out

    def unpack(self, i: int, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_out, n_in = self.dims[i + 1], self.dims[i]
        return flat[:n_out * n_in].reshape(n_out, n_in), flat[n_out * n_in:self.layer_size(i)]


def _dtype(precision: str):
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    return np.float64 if precision == "fp64" else np.float32


def _working(master: np.ndarray, precision: str) -> np.ndarray:
    return to_bf16(master) if precision == "mixed" else master.copy()


def layer_forward(model: TinyModel, i: int, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    w, b = model.unpack(i, flat)
    z = x @ w.T + b
    return z if i == model.num_layers - 1 else np.tanh(z)


def layer_backward(model, i, flat, x, y, dy) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the layer's flat parameters and of its input."""
    w, _ = model.unpack(i, flat)
    dz = dy if i == model.num_layers - 1 else dy * (1 - y * y)
    gw = dz.T @ x
    gb = dz.sum(axis=0)
    return np.concatenate([gw.ravel(), gb]), dz @ w


def loss_and_grad(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over samples of 0.5 * ||y - target||^2."""
    diff = y - target
    n = y.shape[0]
    return float(0.5 * np.sum(diff * diff) / n), diff / n


def _pad(v: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=v.dtype)
    out[:v.shape[0]] = v
    return out


def padded_size(n: int, cfg: ParallelConfig) -> int:
    q = math.lcm(cfg.z1, cfg.z2, cfg.z3)
    return -(-n // q) * q


def make_batch(model: TinyModel, dp: int, microbatches: int, mbs: int, seed: int, step: int, precision: str):
    """Inputs and targets indexed [replica][microbatch]."""
    rng = np.random.default_rng([seed, step, 7])
    dt = _dtype(precision)
    x = rng.standard_normal((dp, microbatches, mbs, model.dims[0])).astype(dt)
    t = rng.standard_normal((dp, microbatches, mbs, model.dims[-1])).astype(dt)
    return x, t


def _grad_on_replica(model, params, x, target):
    acts = [x]
    for i in range(model.num_layers):
        acts.append(layer_forward(model, i, params[i], acts[-1]))
    loss, dy = loss_and_grad(acts[-1], target)
    grads = [None] * model.num_layers
    for i in reversed(range(model.num_layers)):
        grads[i], dy = layer_backward(model, i, params[i], acts[i], acts[i + 1], dy)
    return loss, grads


def _adam(master, m, v, g, step, hp: AdamConfig, mask=None):
    dt = master.dtype.type
    m *= dt(hp.beta1)
    m += dt(1 - hp.beta1) * g
    v *= dt(hp.beta2)
    v += dt(1 - hp.beta2) * (g * g)
    mhat = m / dt(1 - hp.beta1 ** step)
    vhat = v / dt(1 - hp.beta2 ** step)
    update = dt(hp.lr) * mhat / (np.sqrt(vhat) + dt(hp.eps))
    if mask is not None:
        update = np.where(mask, update, dt(0))
    master -= update


def _fold(arrays):
    acc = arrays[0].copy()
    for a in arrays[1:]:
        acc += a
    return acc


# --------------------------------------------------------------------------
# Baseline
# --------------------------------------------------------------------------

@dataclass
class BaselineState:
    model: TinyModel
    precision: str
    master: list[np.ndarray]
    working: list[np.ndarray]
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def baseline_init(model: TinyModel, seed: int, precision: str) -> BaselineState:
    dt = _dtype(precision)
    master = [p.astype(dt) for p in model.init(seed)]
    return BaselineState(
        model, precision, master,
        [_working(p, precision) for p in master],
        [np.zeros_like(p) for p in master],
        [np.zeros_like(p) for p in master],
    )


def train_step_baseline(
    state: BaselineState, x, target, hp: AdamConfig = AdamConfig(), reduce_group: int | None = None
) -> list[float]:
    """One unsharded step over ``dp`` replicas' microbatches.

    Gradients are summed in ascending replica order within blocks of
    ``reduce_group`` replicas per microbatch, then across microbatches, then
    across blocks; this is the order the sharded path uses with z2 =
    ``reduce_group``.
    """
    model = state.model
    dp, micro = x.shape[0], x.shape[1]
    z = reduce_group or dp
    losses = []
    per = [[None] * micro for _ in range(dp)]
    for d in range(dp):
        rl = []
        for k in range(micro):
            loss, grads = _grad_on_replica(model, state.working, x[d, k], target[d, k])
            rl.append(loss)
            per[d][k] = grads
        losses.append(sum(rl) / micro)
    state.step += 1
    for i in range(model.num_layers):
        blocks = []
        for start in range(0, dp, z):
            sums = [_fold([per[d][k][i] for d in range(start, start + z)]) for k in range(micro)]
            blocks.append(_fold(sums))
        g = _fold(blocks) / (dp * micro)
        _adam(state.master[i], state.m[i], state.v[i], g, state.step, hp)
        state.working[i] = _working(state.master[i], state.precision)
    return losses


# --------------------------------------------------------------------------
# Sharded path
# --------------------------------------------------------------------------

@dataclass
class ShardedState:
    rank: int
    param_shards: list[np.ndarray]
    grad_shards: list[np.ndarray | None]
    master: list[np.ndarray]
    momentum: list[np.ndarray]
    variance: list[np.ndarray]
    opt_index: int
    step: int = 0


def opt_index(cfg: ParallelConfig, d: int) -> int:
    """Position of rank ``d``'s optimizer shard inside its Z1 group.

    When z2 divides z1 the shard is chosen inside the rank's own gradient
    shard, so the optimizer reads its gradient without communication.
    """
    if cfg.z1 % cfg.z2 == 0:
        return (d % cfg.z2) * (cfg.z1 // cfg.z2) + (d % cfg.z1) // cfg.z2
    return d % cfg.z1


def _slice(v: np.ndarray, idx: int, parts: int) -> np.ndarray:
    step = v.shape[0] // parts
    return v[idx * step:(idx + 1) * step].copy()


def shard_init(model: TinyModel, cfg: ParallelConfig, seed: int, precision: str = "mixed") -> list[ShardedState]:
    dt = _dtype(precision)
    full = [p.astype(dt) for p in model.init(seed)]
    states = []
    for d in range(cfg.dp):
        j = opt_index(cfg, d)
        params, master = [], []
        for p in full:
            padded = _pad(p, padded_size(p.shape[0], cfg))
            params.append(_slice(_working(padded, precision), d % cfg.z3, cfg.z3))
            master.append(_slice(padded, j, cfg.z1))
        states.append(ShardedState(
            rank=d,
            param_shards=params,
            grad_shards=[None] * len(full),
            master=master,
            momentum=[np.zeros_like(s) for s in master],
            variance=[np.zeros_like(s) for s in master],
            opt_index=j,
        ))
    return states


class HZPRun:
    """Thread-per-rank execution of the sharded step."""

    def __init__(self, model: TinyModel, cfg: ParallelConfig, precision: str = "mixed",
                 hp: AdamConfig = AdamConfig(), fault: str | None = None, timeout: float = 60.0):
        if fault is not None and fault not in FAULTS:
            raise ValueError(f"unknown fault {fault!r}")
        if cfg.pp != 1 or cfg.cp != 1 or cfg.tp != 1:
            raise ValueError("the numerical run models pure data parallelism (pp=cp=tp=1)")
        topo = Topology(1, cfg.dp, 1.0, 1.0)
        validate_config(ModelSpec("tiny", model.num_layers, 1), cfg, topo)
        self.model, self.cfg, self.precision, self.hp, self.fault = model, cfg, precision, hp, fault
        self.order = "reversed" if fault == "reduce_order" else "canonical"
        groups = build_process_groups(cfg, topo)
        self._rdv: dict[tuple[str, int], Rendezvous] = {}
        self._groups: dict[tuple[str, int], ProcessGroup] = {}
        for kind in ("Z1", "Z2", "Z3", "DZP-replica"):
            for g in groups[kind]:
                rv = Rendezvous(g, timeout)
                for r in g.ranks:
                    self._rdv[(kind, r)] = rv
                    self._groups[(kind, r)] = g
        self.sizes = [model.layer_size(i) for i in range(model.num_layers)]

    def _gather(self, kind: str, rank: int, shard: np.ndarray, index: int) -> np.ndarray:
        dt = "fp64" if shard.dtype == np.float64 else "fp32"
        return self._rdv[(kind, rank)].all_gather(RankTensor(rank, shard, dt, index)).elems

    def _rank_step(self, st: ShardedState, x, target) -> float:
        cfg, model = self.cfg, self.model
        d = st.rank
        z2_pos = self._groups[("Z2", d)].index_of(d)
        z3_pos = self._groups[("Z3", d)].index_of(d)
        dt = "fp64" if self.precision == "fp64" else "fp32"
        micro = x.shape[0]
        losses = []
        for k in range(micro):
            acts = [x[k]]
            for i in range(model.num_layers):
                full = self._gather("Z3", d, st.param_shards[i], z3_pos)
                acts.append(layer_forward(model, i, full, acts[-1]))
            loss, dy = loss_and_grad(acts[-1], target[k])
            losses.append(loss)
            for i in reversed(range(model.num_layers)):
                full = self._gather("Z3", d, st.param_shards[i], z3_pos)
                g, dy = layer_backward(model, i, full, acts[i], acts[i + 1], dy)
                g = _pad(g, full.shape[0])
                part = self._rdv[("Z2", d)].reduce_scatter(RankTensor(d, g, dt), self.order).elems
                if k == 0:
                    st.grad_shards[i] = part
                else:
                    st.grad_shards[i] += part

        st.step += 1
        for i in range(model.num_layers):
            g = st.grad_shards[i]
            if cfg.dp // cfg.z2 > 1 and self.fault != "drop_dzp":
                g = self._rdv[("DZP-replica", d)].all_reduce(RankTensor(d, g, dt), self.order).elems
            g = g / (cfg.dp * micro)
            n = st.master[i].shape[0]
            if cfg.z1 % cfg.z2 == 0:
                off = ((d % cfg.z1) // cfg.z2) * n
                g1 = g[off:off + n]
            else:
                full_g = self._gather("Z2", d, g, z2_pos)
                g1 = full_g[st.opt_index * n:(st.opt_index + 1) * n]
            pos = np.arange(st.opt_index * n, (st.opt_index + 1) * n)
            _adam(st.master[i], st.momentum[i], st.variance[i], g1, st.step, self.hp, pos < self.sizes[i])
            new = _working(st.master[i], self.precision)
            full = self._gather("Z1", d, new, st.opt_index)
            st.param_shards[i] = _slice(full, d % cfg.z3, cfg.z3)
            st.grad_shards[i] = None
        return sum(losses) / micro

    def step(self, states: list[ShardedState], x, target) -> list[float]:
        """Run one step on every rank concurrently; returns per-replica losses."""
        losses = [0.0] * len(states)
        errors: list[BaseException] = []

        def work(st: ShardedState):
            try:
                losses[st.rank] = self._rank_step(st, x[st.rank], target[st.rank])
            except BaseException as exc:  # noqa: BLE001 - surfaced below
                errors.append(exc)
                for rv in set(self._rdv.values()):
                    rv.abort(exc)

        if len(states) == 1:
            work(states[0])
        else:
            threads = [threading.Thread(target=work, args=(st,)) for st in states]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            raise errors[0]
        return losses


def gather_params(states: list[ShardedState], model: TinyModel, cfg: ParallelConfig) -> list[np.ndarray]:
    """Full working parameters reconstructed from the Z3 shards of rank group 0."""
    out = []
    for i in range(model.num_layers):
        full = np.concatenate([states[d].param_shards[i] for d in range(cfg.z3)])
        out.append(full[:model.layer_size(i)])
    return out


def gather_master(states: list[ShardedState], model: TinyModel, cfg: ParallelConfig) -> list[np.ndarray]:
    out = []
    for i in range(model.num_layers):
        parts = sorted((states[d].opt_index, states[d].master[i]) for d in range(cfg.z1))
        out.append(np.concatenate([p for _, p in parts])[:model.layer_size(i)])
    return out


# --------------------------------------------------------------------------
# Verification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridPoint:
    dp: int
    z1: int
    z2: int
    z3: int
    microbatches: int

    @property
    def cfg(self) -> ParallelConfig:
        return ParallelConfig(dp=self.dp, z1=self.z1, z2=self.z2, z3=self.z3)


def default_grid(dps=(1, 2, 4), microbatches=(1, 2)) -> list[GridPoint]:
    grid = []
    for dp in dps:
        divs = [z for z in range(1, dp + 1) if dp % z == 0]
        for z1 in divs:
            for z2 in divs:
                for z3 in divs:
                    for m in microbatches:
                        grid.append(GridPoint(dp, z1, z2, z3, m))
    return grid


@dataclass
class VerifyOptions:
    precision: str = "fp64"
    steps: int = 3
    seeds: tuple[int, ...] = (0,)
    micro_batch_size: int = 2
    model: TinyModel = field(default_factory=TinyModel)
    hp: AdamConfig = field(default_factory=AdamConfig)
    fault: str | None = None

    @property
    def tolerance(self) -> float:
        return 0.0 if self.precision == "fp64" else 1e-6


def _diff(a: list[np.ndarray], b: list[np.ndarray]):
    worst, where, rel = 0.0, None, 0.0
    for i, (x, y) in enumerate(zip(a, b)):
        d = np.abs(x.astype(np.float64) - y.astype(np.float64))
        if d.size and d.max() > worst:
            worst = float(d.max())
            where = (i, int(d.argmax()))
        scale = float(np.abs(y).max()) if y.size else 0.0
        if scale > 0:
            rel = max(rel, float(d.max()) / scale)
    return worst, rel, where


def verify_point(point: GridPoint, seed: int, opts: VerifyOptions) -> dict:
    model, cfg = opts.model, point.cfg
    sharded = shard_init(model, cfg, seed, opts.precision)
    base = baseline_init(model, seed, opts.precision)
    run = HZPRun(model, cfg, opts.precision, opts.hp, opts.fault)
    per_step = []
    first_bad = None
    for s in range(opts.steps):
        x, t = make_batch(model, cfg.dp, point.microbatches, opts.micro_batch_size, seed, s, opts.precision)
        loss_h = run.step(sharded, x, t)
        loss_b = train_step_baseline(base, x, t, opts.hp, reduce_group=cfg.z2)
        pw, rel_w, at_w = _diff(gather_params(sharded, model, cfg), base.working)
        pm, rel_m, at_m = _diff(gather_master(sharded, model, cfg), base.master)
        max_abs = max(pw, pm)
        ok = max_abs <= opts.tolerance and loss_h == loss_b
        if not ok and first_bad is None:
            tensor = "working" if pw >= pm else "master"
            layer, idx = (at_w if pw >= pm else at_m) or (-1, -1)
            first_bad = {"step": s, "tensor": tensor, "layer": layer, "index": idx}
        per_step.append({"step": s, "max_abs_diff": max_abs, "rel_diff": max(rel_w, rel_m),
                         "loss_match": loss_h == loss_b})
    return {
        "dp": point.dp, "z1": point.z1, "z2": point.z2, "z3": point.z3,
        "microbatches": point.microbatches, "seed": seed,
        "max_abs_diff": max((p["max_abs_diff"] for p in per_step), default=0.0),
        "rel_diff": max((p["rel_diff"] for p in per_step), default=0.0),
        "pass": first_bad is None,
        "first_divergence": first_bad,
        "steps": per_step,
    }


def verify_equivalence(grid, seeds=(0,), steps: int = 3, precision: str = "fp64",
                       fault: str | None = None, raise_on_failure: bool = True,
                       opts: VerifyOptions | None = None) -> dict:
    """Compare sharded and baseline training over a grid; returns a JSON-able report."""
    if opts is None:
        opts = VerifyOptions(precision=precision, steps=steps, seeds=tuple(seeds), fault=fault)
    results = [verify_point(p, seed, opts) for p in grid for seed in opts.seeds]
    report = {
        "precision": opts.precision,
        "steps": opts.steps,
        "tolerance": opts.tolerance,
        "model_params": opts.model.num_params,
        "pass": all(r["pass"] for r in results),
        "configs": results,
    }
    if raise_on_failure and not report["pass"]:
        bad = next(r for r in results if not r["pass"])
        loc = bad["first_divergence"]
        raise EquivalenceFailure(
            f"dp={bad['dp']} z=({bad['z1']},{bad['z2']},{bad['z3']}) m={bad['microbatches']}: "
            f"{loc['tensor']} layer {loc['layer']} element {loc['index']} diverges at step {loc['step']} "
            f"(max abs diff {bad['max_abs_diff']:.3g})",
            report,
        )
    return report


def finite_difference_check(model: TinyModel, seed: int = 0, coords: int = 10, h: float = 1e-6) -> float:
    """Largest relative error of the FP64 backward against central differences."""
    rng = np.random.default_rng(seed)
    params = [p.astype(np.float64) for p in model.init(seed)]
    x = rng.standard_normal((4, model.dims[0]))
    t = rng.standard_normal((4, model.dims[-1]))

    def loss_at(ps):
        a = x
        for i in range(model.num_layers):
            a = layer_forward(model, i, ps[i], a)
        return loss_and_grad(a, t)[0]

    _, grads = _grad_on_replica(model, params, x, t)
    worst = 0.0
    for _ in range(coords):
        i = int(rng.integers(model.num_layers))
        j = int(rng.integers(params[i].shape[0]))
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[i][j] += h
        minus[i][j] -= h
        fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
        worst = max(worst, abs(fd - grads[i][j]) / max(abs(fd), abs(grads[i][j]), 1e-12))
    return worst
