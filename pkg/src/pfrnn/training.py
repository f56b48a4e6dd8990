"""Model assembly, training loop, evaluation, checkpoints, grid search,
and the ablation suite for the maze localization task.

A model is an input encoder (two fully connected layers with ReLU), a
map encoder (two convolutions, flatten, one fully connected layer) whose
output is concatenated to every step's features, a recurrent cell
(particle or plain), and a linear prediction head applied to the mean
particle and to each particle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import cells
from . import losses
from . import maze as maze_mod
from .autodiff import RngStream, Tensor
from .layers import LinearLayer, ConvLayer, RmsProp, clip_grad_norm

log = logging.getLogger(__name__)

CELL_KINDS = ("pf_lstm", "pf_gru", "lstm", "gru", "lstm_bnrelu", "gru_bnrelu")
PF_KINDS = ("pf_lstm", "pf_gru")


@dataclass
class ModelSpec:
    kind: str = "pf_lstm"
    hidden: int = 64
    n_particles: int = 10
    alpha: float = 0.5
    encoder_width: int = 64
    map_channels: tuple = (8, 8)
    map_kernel: int = 3
    map_feat: int = 48
    input_dim: int = 8
    output_dim: int = 4
    use_bn_relu: bool = True  # NoBNReLU ablation flips this (tanh path)
    resample: bool = True  # NoResample ablation flips this

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind: {self.kind!r}")
        for name in ("hidden", "n_particles", "encoder_width", "map_feat",
                     "input_dim", "output_dim", "map_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        self.map_channels = tuple(self.map_channels)

    @property
    def is_pf(self):
        return self.kind in PF_KINDS

    @property
    def effective_particles(self):
        return self.n_particles if self.is_pf else 1


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    clip_norm: float = 3.0
    l2: float = 1e-4
    epochs: int = 30
    seed: int = 0
    bptt_len: int = 0  # 0 = full sequence
    beta: float = 1.0
    pred_weight: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("lr, batch_size, epochs must be positive (batch >= 2)")
        if self.clip_norm <= 0 or self.l2 < 0 or self.bptt_len < 0:
            raise ValueError("clip_norm positive; l2 and bptt_len non-negative")
        if self.beta < 0 or self.pred_weight < 0:
            raise ValueError("loss weights must be non-negative")


def _conv_side(n, kernel, n_layers):
    side = n
    for _ in range(n_layers):
        side -= kernel - 1
        if side < 1:
            raise ValueError("map too small for the conv stack")
    return side


def count_params(spec, map_size):
    """Closed-form trainable parameter count for a spec on an n x n map."""
    e, m, h = spec.encoder_width, spec.map_feat, spec.hidden
    c1, c2 = spec.map_channels
    kk = spec.map_kernel ** 2
    total = (spec.input_dim * e + e) + (e * e + e)  # input encoder
    side = _conv_side(map_size, spec.map_kernel, 2)
    total += (c1 * 2 * kk + c1) + (c2 * c1 * kk + c2)  # conv stack
    total += c2 * side * side * m + m  # map fully connected
    f = e + m
    z = h + f
    if spec.kind == "pf_lstm":
        total += 3 * h * z + 3 * h + (h * z + h) + (h * z + h) + (z + 1) + 2 * h
    elif spec.kind == "pf_gru":
        total += 2 * h * z + 2 * h + (h * z + h) + (h * z + h) + (z + 1) + 2 * h
    elif spec.kind in ("lstm", "lstm_bnrelu"):
        total += 3 * h * z + 3 * h + (h * z + h)
        if spec.kind == "lstm_bnrelu":
            total += 2 * h
    else:
        total += 2 * h * z + 2 * h + (h * z + h)
        if spec.kind == "gru_bnrelu":
            total += 2 * h
    total += h * spec.output_dim + spec.output_dim  # head
    return total


def parity_hidden(pf_spec, baseline_kind, map_size, tolerance=0.10):
    """Smallest baseline hidden size whose parameter count comes within
    tolerance of the particle model's count."""
    target = count_params(pf_spec, map_size)
    best = None
    for h in range(pf_spec.hidden, pf_spec.hidden * 4):
        candidate = replace(pf_spec, kind=baseline_kind, hidden=h)
        c = count_params(candidate, map_size)
        rel = abs(c - target) / max(c, target)
        if best is None or rel < best[1]:
            best = (h, rel)
        if c > target and best[1] <= tolerance:
            break
    if best[1] > tolerance:
        raise ValueError("no baseline hidden size within tolerance")
    return best[0]


class Model:
    """Encoders + recurrent cell + prediction head for one map."""

    def __init__(self, spec, maze, rng):
        self.spec = spec
        self.maze = maze
        n = maze.n
        grid = np.stack([(maze.cells != maze_mod.FREE).astype(np.float64),
                         (maze.cells == maze_mod.BLACK).astype(np.float64)])
        self.map_input = grid
        c1, c2 = spec.map_channels
        k = spec.map_kernel
        side = _conv_side(n, k, 2)
        e = spec.encoder_width
        self.enc1 = LinearLayer(rng, spec.input_dim, e)
        self.enc2 = LinearLayer(rng, e, e)
        self.conv1 = ConvLayer(rng, 2, c1, k)
        self.conv2 = ConvLayer(rng, c1, c2, k)
        self.map_fc = LinearLayer(rng, c2 * side * side, spec.map_feat)
        feat_dim = e + spec.map_feat
        if spec.kind == "pf_lstm":
            self.cell = cells.PfLstmParams(rng, feat_dim, spec.hidden)
        elif spec.kind == "pf_gru":
            self.cell = cells.PfGruParams(rng, feat_dim, spec.hidden)
        elif spec.kind in ("lstm", "lstm_bnrelu"):
            self.cell = cells.LstmParams(rng, feat_dim, spec.hidden,
                                         use_bn_relu=spec.kind.endswith("bnrelu"))
        else:
            self.cell = cells.GruParams(rng, feat_dim, spec.hidden,
                                        use_bn_relu=spec.kind.endswith("bnrelu"))
        self.head = LinearLayer(rng, spec.hidden, spec.output_dim)
        self.cell_config = cells.CellConfig(
            n_particles=spec.effective_particles, alpha=spec.alpha,
            resample=spec.resample, use_bn_relu=spec.use_bn_relu)

    def named_params(self):
        out = {}
        for prefix, layer in (("enc1", self.enc1), ("enc2", self.enc2),
                              ("conv1", self.conv1), ("conv2", self.conv2),
                              ("map_fc", self.map_fc), ("head", self.head)):
            names = ("weight", "bias") if isinstance(layer, LinearLayer) \
                else ("kernels", "bias")
            for name, p in zip(names, layer.params()):
                out[f"{prefix}.{name}"] = p
        layers_in_cell = [("gates", self.cell.gates), ("cand", self.cell.cand)]
        if self.spec.is_pf:
            layers_in_cell += [("noise", self.cell.noise), ("obs", self.cell.obs)]
        for name, layer in layers_in_cell:
            out[f"cell.{name}.weight"], out[f"cell.{name}.bias"] = layer.params()
        bn = getattr(self.cell, "bn", None)
        if bn is not None:
            out["cell.bn.gamma"], out["cell.bn.beta"] = bn.params()
        return out

    def n_params(self):
        return sum(p.data.size for p in self.named_params().values())

    def bn_stats(self):
        bn = getattr(self.cell, "bn", None)
        if bn is None:
            return {}
        state = bn.state()
        return {f"cell.bn.{k}": v for k, v in state.items()}

    def load_bn_stats(self, stats):
        bn = getattr(self.cell, "bn", None)
        if bn is None:
            return
        bn.load_state({k.split(".")[-1]: v for k, v in stats.items()})

    def initial_state(self, n_batch):
        spec = self.spec
        if spec.is_pf:
            return cells.initial_belief(n_batch, spec.n_particles, spec.hidden,
                                        with_cell=spec.kind == "pf_lstm")
        hidden = ad.constant(np.zeros((n_batch, spec.hidden)))
        if spec.kind.startswith("lstm"):
            return (hidden, ad.constant(np.zeros((n_batch, spec.hidden))))
        return (hidden,)

    def detach_state(self, state):
        if isinstance(state, cells.ParticleBelief):
            cell = state.cell.detach() if state.cell is not None else None
            return cells.ParticleBelief(state.hidden.detach(),
                                        state.log_weights.detach(), cell)
        return tuple(t.detach() for t in state)

    def _map_features(self, n_batch):
        x = ad.constant(self.map_input)
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        x = ad.reshape(x, (1, x.data.size))
        x = ad.relu(self.map_fc(x))
        return ad.repeat_rows(x, n_batch)

    def unroll(self, state, inputs, rng, mode="train"):
        """inputs (T, B, input_dim) -> (list of StepOutputs, final state).

        All step encodings happen in one batched pass; the map encoding
        is computed once and shared by every step.
        """
        n_steps, n_batch, _ = inputs.shape
        flat = ad.constant(inputs.reshape(n_steps * n_batch, -1))
        enc = ad.relu(self.enc2(ad.relu(self.enc1(flat))))
        map_feat = self._map_features(n_batch)
        outputs = []
        for t in range(n_steps):
            x_t = ad.narrow(enc, 0, t * n_batch, n_batch)
            feat = ad.concat([x_t, map_feat], axis=1)
            state, step_out = self._step(state, feat, rng, mode)
            outputs.append(step_out)
        return outputs, state

    def _step(self, state, feat, rng, mode):
        spec = self.spec
        k = spec.effective_particles
        if spec.kind == "pf_lstm":
            state, aux = cells.pf_lstm_step(state, feat, self.cell,
                                            self.cell_config, rng, mode=mode)
            mean_pred = self.head(cells.mean_particle(state))
            part_pred = self.head(aux["hidden_pre"])
            out = losses.StepOutputs(mean_pred, part_pred, aux["log_weights_pre"])
        elif spec.kind == "pf_gru":
            state, aux = cells.pf_gru_step(state, feat, self.cell,
                                           self.cell_config, rng, mode=mode)
            mean_pred = self.head(cells.mean_particle(state))
            part_pred = self.head(aux["hidden_pre"])
            out = losses.StepOutputs(mean_pred, part_pred, aux["log_weights_pre"])
        elif spec.kind.startswith("lstm"):
            hidden, cell_state = cells.lstm_step(
                state[0], state[1], feat, self.cell,
                use_bn_relu=spec.kind.endswith("bnrelu"), mode=mode)
            state = (hidden, cell_state)
            mean_pred = self.head(hidden)
            out = losses.StepOutputs(mean_pred, mean_pred,
                                     ad.constant(np.zeros((feat.data.shape[0], 1))))
        else:
            hidden = cells.gru_step(state[0], feat, self.cell,
                                    use_bn_relu=spec.kind.endswith("bnrelu"),
                                    mode=mode)
            state = (hidden,)
            mean_pred = self.head(hidden)
            out = losses.StepOutputs(mean_pred, mean_pred,
                                     ad.constant(np.zeros((feat.data.shape[0], 1))))
        assert out.n_particles == k
        return state, out


def build_model(spec, maze, rng):
    return Model(spec, maze, rng)


def compile_trajectories(trajs, n):
    """Trajectory dicts -> (inputs (N, T, 8), targets (N, T, 4))."""
    inputs = np.stack([maze_mod.encode_inputs(t["actions"], t["obs"], n)
                       for t in trajs])
    targets = np.stack([maze_mod.encode_targets(t["poses"], n) for t in trajs])
    return inputs, targets


# ---------------------------------------------------------------------------
# checkpoints


_CKPT_MAGIC = b"PFRNN-CKPT\x01\n"


@dataclass
class Checkpoint:
    spec: ModelSpec
    config: TrainConfig
    params: dict
    bn_stats: dict
    history: list = field(default_factory=list)
    map_grid: list = field(default_factory=list)
    diverged: bool = False


def snapshot(model, config, history, diverged=False):
    return Checkpoint(
        spec=model.spec, config=config,
        params={k: v.data.copy() for k, v in model.named_params().items()},
        bn_stats={k: v.copy() for k, v in model.bn_stats().items()},
        history=list(history), map_grid=model.maze.grid_strings(),
        diverged=diverged)


def save_checkpoint(ckpt, path):
    blobs = list(ckpt.params.items()) + list(ckpt.bn_stats.items())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        trailer = {
            "spec": asdict(ckpt.spec),
            "config": asdict(ckpt.config),
            "history": ckpt.history,
            "map_grid": ckpt.map_grid,
            "diverged": ckpt.diverged,
            "n_stat_blobs": len(ckpt.bn_stats),
        }
        fh.write(json.dumps(trailer, sort_keys=True).encode())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (n_blobs,) = struct.unpack("<Q", fh.read(8))
        blobs = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            blobs[name] = data.astype(np.float64)
        trailer = json.loads(fh.read().decode())
    spec_d = trailer["spec"]
    spec_d["map_channels"] = tuple(spec_d["map_channels"])
    spec = ModelSpec(**spec_d)
    config = TrainConfig(**trailer["config"])
    n_stats = trailer["n_stat_blobs"]
    names = list(blobs)
    params = {k: blobs[k] for k in names[:len(names) - n_stats]}
    stats = {k: blobs[k] for k in names[len(names) - n_stats:]}
    return Checkpoint(spec=spec, config=config, params=params, bn_stats=stats,
                      history=trailer["history"], map_grid=trailer["map_grid"],
                      diverged=trailer["diverged"])


def restore_model(ckpt):
    maze = maze_mod.MazeMap.from_grid_strings(ckpt.map_grid)
    model = Model(ckpt.spec, maze, RngStream(0))
    named = model.named_params()
    if set(named) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the spec")
    for name, tensor in named.items():
        if tensor.data.shape != ckpt.params[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        tensor.data[...] = ckpt.params[name]
    model.load_bn_stats(ckpt.bn_stats)
    return model


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, inputs, targets, eval_seeds=(101, 211, 307),
             batch_size=128):
    """Last-step and full-sequence MSE in eval mode.

    Particle models sample noise and ancestors, so they run once per
    eval seed; the reported value is the mean over seeds, with the
    spread kept alongside.
    """
    seeds = list(eval_seeds) if model.spec.is_pf else [0]
    per_seed_last = []
    per_seed_seq = []
    for seed in seeds:
        rng = RngStream(seed)
        last_sq = []
        seq_sq = []
        with ad.no_grad():
            for start in range(0, inputs.shape[0], batch_size):
                chunk = inputs[start:start + batch_size]
                tchunk = targets[start:start + batch_size]
                state = model.initial_state(chunk.shape[0])
                outs, _ = model.unroll(state, chunk.transpose(1, 0, 2), rng,
                                       mode="eval")
                preds = np.stack([o.mean_pred.data for o in outs])
                err = (preds - tchunk.transpose(1, 0, 2)) ** 2
                last_sq.append(err[-1].mean(axis=1))
                seq_sq.append(err.mean(axis=(0, 2)))
        per_seed_last.append(float(np.concatenate(last_sq).mean()))
        per_seed_seq.append(float(np.concatenate(seq_sq).mean()))
    return {
        "last_step_mse": float(np.mean(per_seed_last)),
        "last_step_mse_std": float(np.std(per_seed_last)),
        "sequence_mse": float(np.mean(per_seed_seq)),
        "per_seed": per_seed_last,
    }


def evaluate_checkpoint(ckpt, inputs, targets, eval_seeds=(101, 211, 307)):
    return evaluate(restore_model(ckpt), inputs, targets, eval_seeds=eval_seeds)


# ---------------------------------------------------------------------------
# training


def train(model, train_data, val_data, config):
    """RMSProp training with best-validation checkpointing.

    train_data/val_data: (inputs (N, T, in), targets (N, T, out)).
    Full-sequence gradients by default; config.bptt_len > 0 truncates,
    detaching the recurrent state between windows. Returns (best
    checkpoint, history). NaN loss or gradients abort the run and the
    last good checkpoint is returned with diverged=True.
    """
    inputs, targets = train_data
    n_total = inputs.shape[0]
    if n_total < 2:
        raise ValueError("need at least 2 training trajectories")
    params = model.named_params()
    opt = RmsProp(params.values(), lr=config.lr)
    noise_rng = RngStream(config.seed)
    order_rng = RngStream(config.seed + 7919)
    loss_config = losses.LossConfig(task="regression", beta=config.beta,
                                    pred_weight=config.pred_weight)
    history = []
    best = None
    best_metric = math.inf
    diverged = False

    for epoch in range(config.epochs):
        perm = order_rng.permutation(n_total)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_total, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least two rows
            batch_in = inputs[idx].transpose(1, 0, 2)
            batch_tg = targets[idx].transpose(1, 0, 2)
            n_steps = batch_in.shape[0]
            window = config.bptt_len or n_steps
            state = model.initial_state(len(idx))
            batch_loss = 0.0
            try:
                for w0 in range(0, n_steps, window):
                    w1 = min(w0 + window, n_steps)
                    outs, state = model.unroll(state, batch_in[w0:w1],
                                               noise_rng, mode="train")
                    loss = losses.combined_loss(outs, batch_tg[w0:w1],
                                                loss_config)
                    if not np.isfinite(loss.data):
                        raise FloatingPointError("loss is not finite")
                    grads = ad.gradients(loss, list(params.values()))
                    clip_grad_norm(grads, config.clip_norm)
                    if config.l2 > 0.0:
                        for g, p in zip(grads, params.values()):
                            g += config.l2 * p.data
                    opt.step(grads)
                    state = model.detach_state(state)
                    batch_loss += float(loss.data)
            except FloatingPointError as exc:
                log.warning("training diverged: %s", exc)
                diverged = True
                break
            epoch_loss += batch_loss
            n_batches += 1
        if diverged:
            break
        val = evaluate(model, val_data[0], val_data[1], eval_seeds=(997,))
        row = {"epoch": epoch,
               "train_loss": epoch_loss / max(n_batches, 1),
               "val_last_step_mse": val["last_step_mse"],
               "val_sequence_mse": val["sequence_mse"]}
        history.append(row)
        if val["last_step_mse"] < best_metric:
            best_metric = val["last_step_mse"]
            best = snapshot(model, config, history)
    if best is None:
        best = snapshot(model, config, history, diverged=True)
    best.history = history
    best.diverged = diverged
    return best, history


# ---------------------------------------------------------------------------
# grid search and ablations


def _run_one(spec, config, maze, train_data, val_data, test_data):
    model = Model(spec, maze, RngStream(config.seed))
    ckpt, history = train(model, train_data, val_data, config)
    best_model = restore_model(ckpt)
    val = evaluate(best_model, val_data[0], val_data[1])
    row = {"val_last_step_mse": val["last_step_mse"],
           "train_loss_final": history[-1]["train_loss"] if history else math.nan,
           "epochs_run": len(history),
           "diverged": ckpt.diverged}
    if test_data is not None:
        test = evaluate(best_model, test_data[0], test_data[1])
        row["test_last_step_mse"] = test["last_step_mse"]
        row["test_last_step_mse_std"] = test["last_step_mse_std"]
    return ckpt, row


def _safe_run_one(task):
    try:
        _, metrics = _run_one(*task)
        return metrics, None
    except Exception as exc:  # the caller records the failure and moves on
        return None, str(exc)


def _map_tasks(tasks, workers):
    """Run (spec, config, ...) tasks, optionally in worker processes.

    Results come back in task order either way, so sweeps stay
    deterministic regardless of the worker count.
    """
    if workers <= 1:
        return [_safe_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_safe_run_one, tasks))


def grid_search(grid, maze, train_data, val_data, test_data=None,
                csv_path=None, workers=1):
    """Train every (spec, config) pair; rank by validation last-step MSE.

    Failures are recorded as rows with status "failed" and the search
    continues. Returns rows ranked best first.
    """
    grid = list(grid)
    results = _map_tasks(
        [(spec, config, maze, train_data, val_data, test_data)
         for spec, config in grid], workers)
    rows = []
    for (spec, config), (metrics, error) in zip(grid, results):
        row = {"kind": spec.kind, "hidden": spec.hidden,
               "n_particles": spec.effective_particles, "alpha": spec.alpha,
               "lr": config.lr, "batch_size": config.batch_size,
               "clip_norm": config.clip_norm, "l2": config.l2,
               "epochs": config.epochs, "seed": config.seed,
               "beta": config.beta, "status": "ok"}
        if error is None:
            row.update(metrics)
        else:
            log.warning("grid cell failed: %s", error)
            row["status"] = "failed"
            row["error"] = error
        rows.append(row)
    rows.sort(key=lambda r: r.get("val_last_step_mse", math.inf))
    if csv_path:
        write_csv(rows, csv_path)
    return rows


ABLATION_VARIANTS = ("P1", "P5", "P10", "P20", "P30", "NoResample",
                     "NoBNReLU", "NoELBO", "ELBOonly", "Baseline-BNReLU")


def ablation_suite(base_spec, base_config, maze, train_data, val_data,
                   test_data, csv_path=None, workers=1):
    """Particle count sweep plus structural ablations, one table.

    Exactly ten rows: P1/P5/P10/P20/P30, NoResample, NoBNReLU, NoELBO,
    ELBOonly, and a gated baseline with BN-ReLU at parameter parity.
    """
    if not base_spec.is_pf:
        raise ValueError("ablation base must be a particle model")
    runs = []
    for k in (1, 5, 10, 20, 30):
        runs.append((f"P{k}", replace(base_spec, n_particles=k), base_config))
    runs.append(("NoResample", replace(base_spec, resample=False), base_config))
    runs.append(("NoBNReLU", replace(base_spec, use_bn_relu=False), base_config))
    runs.append(("NoELBO", base_spec, replace(base_config, beta=0.0)))
    runs.append(("ELBOonly", base_spec, replace(base_config, pred_weight=0.0)))
    baseline_kind = "lstm_bnrelu" if base_spec.kind == "pf_lstm" else "gru_bnrelu"
    h = parity_hidden(base_spec, baseline_kind, maze.n)
    runs.append(("Baseline-BNReLU",
                 replace(base_spec, kind=baseline_kind, hidden=h), base_config))

    results = _map_tasks(
        [(spec, config, maze, train_data, val_data, test_data)
         for _, spec, config in runs], workers)
    rows = []
    for (name, spec, config), (metrics, error) in zip(runs, results):
        row = {"variant": name, "kind": spec.kind, "hidden": spec.hidden,
               "n_particles": spec.effective_particles, "beta": config.beta,
               "pred_weight": config.pred_weight, "status": "ok"}
        if error is None:
            row.update(metrics)
        else:
            log.warning("ablation %s failed: %s", name, error)
            row["status"] = "failed"
            row["error"] = error
        rows.append(row)
    if csv_path:
        write_csv(rows, csv_path)
    return rows


def write_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
