"""Surrogate-gradient BPTT, MSE loss, Adam and the train/validate loop."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from . import tensor as K
from .data import batches, prefetch, stack_pairs
from .errors import ConfigError, DivergenceError, ShapeError, TapeError
from .neuron import lif_backward_sequence

log = logging.getLogger(__name__)


def mse_loss(output, reference):
    """Mean squared error over every element, and its gradient w.r.t. ``output``."""
    output = np.asarray(output)
    reference = np.asarray(reference)
    if output.shape != reference.shape:
        raise ShapeError("output and reference shapes differ", output.shape, reference.shape)
    diff = output.astype(np.float64) - reference
    loss = float(np.mean(np.square(diff)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(output.dtype, copy=False)


def _accumulate(store, key, value):
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def bptt_backward(graph, tape, grad_output):
    """Replay ``tape`` backwards and return ``{param_name: gradient}``.

    Every timestep contributes to the shared weights; spikes are
    differentiated through the fast-sigmoid surrogate and the membrane
    recurrence through beta. Parameters the loss does not reach get zeros.
    """
    if tape is None or not tape.complete:
        raise TapeError("bptt_backward needs the tape of a completed forward pass")
    if tape.consumed:
        raise TapeError("tape has already been replayed")
    tape.consumed = True
    steps = tape.meta["timesteps"]
    lif_cfg = tape.meta["lif"]
    grads = {name: np.zeros_like(p) for name, p in graph.params.items()}
    cot = {tape.output: np.asarray(grad_output, dtype=graph.dtype)}

    for node in reversed(tape.nodes):
        g = cot.pop(node.name, None)
        saved, node.saved = node.saved, {}
        if g is None or node.op == "input":
            continue
        layer = graph[node.name]
        if node.op == "lif":
            vs = saved["vs"]
            decay = graph.decay(layer)
            if saved["spiking"]:
                gi, gd = lif_backward_sequence(vs, g, decay, lif_cfg, spiking=True)
            else:
                gi, gd = lif_backward_sequence(vs, None, decay, lif_cfg, grad_last_v=g, spiking=False)
            grads[node.name + ".decay"] += gd
            parent = node.parents[0]
            if tape[parent].saved.get("static"):
                gi = gi.sum(axis=0)
            _accumulate(cot, parent, gi)
        elif node.op in ("conv", "deconv"):
            x = saved["x"]
            backward = K.conv2d_backward if node.op == "conv" else K.deconv2d_backward
            params = graph.conv_params(layer)
            parent = node.parents[0]
            need = tape[parent].op != "input"
            if saved["static"]:
                gx, gw, gb = backward(g, x, params, input_grad=need)
            else:
                gx, gw, gb = backward(g.reshape((-1,) + g.shape[2:]), x.reshape((-1,) + x.shape[2:]), params,
                                      input_grad=need)
            grads[node.name + ".weight"] += gw
            grads[node.name + ".bias"] += gb
            if need:
                _accumulate(cot, parent, gx.reshape(x.shape))
        elif node.op == "pool":
            pool = saved["pool"]
            gx = K.maxpool2x2_backward(g.reshape((-1,) + g.shape[2:]), pool)
            _accumulate(cot, node.parents[0], gx.reshape((steps, -1) + gx.shape[1:]))
        elif node.op == "concat":
            a, b = K.concat_channels_backward(g.reshape((-1,) + g.shape[2:]), saved["a_channels"])
            a = a.reshape(g.shape[:2] + a.shape[1:])
            b = b.reshape(g.shape[:2] + b.shape[1:])
            if not saved["drop_a"]:
                _accumulate(cot, node.parents[0], a)
            _accumulate(cot, node.parents[1], b)
        else:
            raise TapeError(f"no backward rule for op {node.op!r}")
    return grads


def loss_and_grads(graph, raw, reference, cfg=None):
    """One forward/backward pass. Returns ``(loss, grads, output)``."""
    out, tape, _ = network.forward(graph, raw, cfg)
    loss, g = mse_loss(out, reference)
    return loss, bptt_backward(graph, tape, g), out


# ----------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place. Returns ``params``."""
    for k, g in grads.items():
        if k not in params or params[k].shape != np.shape(g):
            raise ShapeError(f"gradient {k!r} does not match its parameter",
                             np.shape(g), params[k].shape if k in params else ())
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        params[k] -= update.astype(params[k].dtype, copy=False)
    return params


# --------------------------------------------------------------------- loop

@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    validation_start_epoch: int = 50
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    lr_min: float | None = None

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.validation_start_epoch <= self.epochs:
            problems.append(f"validation_start_epoch must lie in [1, epochs], got {self.validation_start_epoch}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr:
            problems.append(f"lr_min must lie in [0, lr], got {self.lr_min}")
        if problems:
            raise ConfigError("invalid schedule: " + "; ".join(problems))

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch: constant, or cosine-annealed to ``lr_min`` when set."""
        if self.lr_min is None:
            return self.lr
        frac = (epoch - 1) / self.epochs
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_mse: float | None
    seconds: float


@dataclass
class TrainResult:
    best: network.LayerGraph
    best_epoch: int
    best_val_mse: float
    final: network.LayerGraph
    history: list = field(default_factory=list)


METRICS_FIELDS = ("epoch", "train_mse", "val_mse")
TIMING_FIELDS = ("epoch", "seconds")


def evaluate(graph, pairs, batch_size=4):
    """Mean MSE of ``graph`` over ``pairs`` (no tape recorded)."""
    total, count = 0.0, 0
    for raw, ref in batches(pairs, batch_size, epoch_seed=None):
        out, _ = network.infer(graph, raw)
        loss, _ = mse_loss(out, ref)
        total += loss * raw.shape[0]
        count += raw.shape[0]
    return total / count


def _append_row(path, fields, row):
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(fields)
        w.writerow(row)


def train(train_pairs, val_pairs, cfg, sched, out_dir=None, on_epoch=None):
    """Train from scratch and keep the parameters with the lowest validation loss.

    Validation runs from ``sched.validation_start_epoch`` on; if ``val_pairs``
    is empty the training pairs are used for it. With ``out_dir`` set,
    ``best.ckpt`` is rewritten whenever validation improves and one row per
    epoch goes to ``metrics.csv`` (wall time goes to ``timing.csv`` so the
    metrics file stays reproducible).
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ConfigError("training set is empty")
    val_pairs = list(val_pairs) or train_pairs
    for pair in train_pairs[:1]:
        if pair.raw.shape[1:] != cfg.input_shape:
            raise ConfigError(f"pair shape {pair.raw.shape[1:]} does not match config input {cfg.input_shape}")
    graph = network.build(cfg, sched.seed)
    adam = AdamState.for_params(graph.params, lr=sched.lr)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for name in ("metrics.csv", "timing.csv"):
            path = os.path.join(out_dir, name)
            if os.path.exists(path):
                os.remove(path)
    best, best_epoch, best_val = None, 0, math.inf
    last_finite = network.serialize(graph)
    history = []
    for epoch in range(1, sched.epochs + 1):
        t0 = time.perf_counter()
        adam.lr = sched.lr_at(epoch)
        total, count = 0.0, 0
        for raw, ref in prefetch(batches(train_pairs, sched.batch_size, epoch_seed=(sched.seed, epoch))):
            loss, grads, _ = loss_and_grads(graph, raw, ref)
            if not math.isfinite(loss):
                ckpt = None
                if out_dir is not None:
                    ckpt = os.path.join(out_dir, "last_finite.ckpt")
                    with open(ckpt, "wb") as fh:
                        fh.write(last_finite)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch, ckpt)
            adam_step(graph.params, grads, adam)
            total += loss * raw.shape[0]
            count += raw.shape[0]
        train_mse = total / count
        val_mse = None
        if epoch >= sched.validation_start_epoch:
            val_mse = evaluate(graph, val_pairs, sched.batch_size)
            if val_mse < best_val:
                best, best_epoch, best_val = graph.copy(), epoch, val_mse
                if out_dir is not None:
                    network.save(best, os.path.join(out_dir, "best.ckpt"))
        last_finite = network.serialize(graph)
        entry = EpochLog(epoch, train_mse, val_mse, time.perf_counter() - t0)
        history.append(entry)
        if out_dir is not None:
            _append_row(os.path.join(out_dir, "metrics.csv"), METRICS_FIELDS,
                        (epoch, repr(train_mse), "" if val_mse is None else repr(val_mse)))
            _append_row(os.path.join(out_dir, "timing.csv"), TIMING_FIELDS, (epoch, f"{entry.seconds:.3f}"))
        log.info("epoch %d train_mse %.6f val_mse %s (%.1fs)", epoch, train_mse,
                 "-" if val_mse is None else f"{val_mse:.6f}", entry.seconds)
        if on_epoch is not None:
            on_epoch(entry, graph)
    if best is None:
        best, best_epoch, best_val = graph.copy(), sched.epochs, evaluate(graph, val_pairs, sched.batch_size)
    return TrainResult(best, best_epoch, best_val, graph, history)


def predict(graph, pairs, batch_size=4):
    """Network outputs for each pair, in order, as ``(3, H, W)`` arrays."""
    outs = []
    for raw, _ in batches(pairs, batch_size, epoch_seed=None):
        out, _ = network.infer(graph, raw)
        outs.extend(out)
    return outs


__all__ = [
    "mse_loss", "bptt_backward", "loss_and_grads", "AdamState", "adam_step", "TrainSchedule",
    "TrainResult", "EpochLog", "train", "evaluate", "predict", "stack_pairs",
]
