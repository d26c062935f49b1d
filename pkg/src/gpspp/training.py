"""Grouped input masking, noisy nodes/edges, composite loss, Adam and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import RngStream, Tensor, no_grad, ops
from .encodings import featurize
from .exceptions import ConfigError, NumericError, TrainingDiverged
from .model import GPSModel, MaskingGroup, ModelConfig
from .packer import PackSpec, collate_pack, pack_stream

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

# Independent random streams so that changing one mechanism never shifts another.
_SHUFFLE, _GROUP, _CORRUPT, _DROPOUT, _SIGNS = range(5)


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 4e-4
    warmup_epochs: float = 10
    total_epochs: int = 50  # 450 for the full schedule
    grad_clip: float = 5.0
    p_corrupt: float = 0.01
    loss_weights: tuple = (1.0, 1.2, 1.2)
    masking_ratio: tuple = (1.0, 3.0, 1.0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    packs_per_step: int = 1
    max_steps: int | None = None
    corrupted_only_ce: bool = False
    flip_eigvec_signs: bool = True
    shuffle: bool = True
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "masking_ratio", tuple(float(r) for r in self.masking_ratio))
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights must be three nonnegative numbers")
        if len(self.masking_ratio) != 3 or min(self.masking_ratio) < 0 or sum(self.masking_ratio) == 0:
            raise ConfigError("masking_ratio must be three nonnegative numbers, not all zero")
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ConfigError(f"p_corrupt={self.p_corrupt} outside [0, 1]")
        if self.peak_lr <= 0 or self.grad_clip <= 0 or self.total_epochs < 1 or self.packs_per_step < 1:
            raise ConfigError("peak_lr, grad_clip, total_epochs and packs_per_step must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs]")

    def replace(self, **changes) -> "TrainConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls().replace(**values)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a TOML file with optional ``[model]`` and ``[train]`` tables.

    A file with neither table is treated as a flat model config.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if "model" not in data and "train" not in data:
        return ModelConfig.from_dict(data), TrainConfig()
    return ModelConfig.from_dict(data.get("model", {})), TrainConfig.from_dict(data.get("train", {}))


# ---------------------------------------------------------------- masking

def sample_masking_group(rng: np.random.Generator, ratio=(1, 3, 1)) -> MaskingGroup:
    probs = np.asarray(ratio, dtype=float)
    return MaskingGroup(int(rng.choice(3, p=probs / probs.sum())))


def sample_masking_groups(rng: np.random.Generator, size: int, ratio=(1, 3, 1)) -> np.ndarray:
    """Vectorised form of :func:`sample_masking_group`; returns integer group codes."""
    probs = np.asarray(ratio, dtype=float)
    return rng.choice(3, size=size, p=probs / probs.sum())


def eval_masking_group(has_positions: bool, cfg: ModelConfig | None = None) -> MaskingGroup:
    """Spatial inputs are hidden whenever positions are missing."""
    if not has_positions or (cfg is not None and not cfg.uses_3d):
        return MaskingGroup.MASK_SPATIAL
    return MaskingGroup.NO_MASK


# ---------------------------------------------------------------- noisy nodes / edges

def corrupt_categories(cats, vocab, p_corrupt, rng, valid=None, paired=False):
    """Replace entries with a uniformly drawn *different* category.

    Columns with a single category are never touched.  With ``paired`` the
    rows are treated as ``(2k, 2k+1)`` reverse-edge pairs that share one draw.
    Returns ``(new_cats, changed_mask)``.
    """
    cats = np.asarray(cats, dtype=np.int64)
    vocab = np.asarray(vocab, dtype=np.int64)
    n_rows = len(cats)
    if paired and n_rows % 2:
        raise ConfigError("paired corruption needs an even number of rows")
    draw_rows = n_rows // 2 if paired else n_rows
    hit = rng.random((draw_rows, len(vocab))) < p_corrupt
    shift = rng.integers(1, np.maximum(vocab, 2), size=(draw_rows, len(vocab)))
    hit &= vocab[None, :] >= 2
    if paired:
        hit = np.repeat(hit, 2, axis=0)
        shift = np.repeat(shift, 2, axis=0)
    if valid is not None:
        hit &= np.asarray(valid, dtype=bool)[:, None]
    new = np.where(hit, (cats + shift) % vocab[None, :], cats)
    return new, hit


def corrupt_features(graph, p_corrupt, rng, node_vocab, edge_vocab):
    """Corrupt a single graph's categorical features.

    Returns ``(corrupted_graph, node_mask, edge_mask)``.  Topology, positions
    and target are shared with the input.
    """
    node_cats, node_hit = corrupt_categories(graph.node_cats, node_vocab, p_corrupt, rng)
    edge_cats, edge_hit = corrupt_categories(graph.edge_cats, edge_vocab, p_corrupt, rng,
                                             paired=graph.is_paired())
    return graph.replace(node_cats=node_cats, edge_cats=edge_cats), node_hit, edge_hit


def _batch_pairs_aligned(batch) -> bool:
    s, r = batch.senders, batch.receivers
    m = int(batch.edge_mask.sum())
    if m % 2:
        return False
    return bool(np.all(s[0:m:2] == r[1:m:2]) and np.all(r[0:m:2] == s[1:m:2]))


def corrupt_batch(batch, p_corrupt, rng, node_vocab, edge_vocab):
    """Corrupt the valid rows of a collated batch in place of a copy."""
    node_cats, node_hit = corrupt_categories(batch.node_cats, node_vocab, p_corrupt, rng, batch.node_mask)
    paired = _batch_pairs_aligned(batch)
    edge_cats, edge_hit = corrupt_categories(batch.edge_cats, edge_vocab, p_corrupt, rng, batch.edge_mask,
                                             paired=paired and len(batch.edge_cats) % 2 == 0)
    return dataclasses.replace(batch, node_cats=node_cats, edge_cats=edge_cats), node_hit, edge_hit


# ---------------------------------------------------------------- loss

def _column_ce(logits, targets, rows, vocab, only=None):
    """Sum of per-entry cross-entropies and the number of entries."""
    if logits is None or len(rows) == 0:
        return None, 0
    picked = ops.gather_rows(logits, rows)
    total, count = None, 0
    offset = 0
    for c, v in enumerate(vocab):
        keep = np.ones(len(rows), dtype=bool) if only is None else only[rows, c]
        if keep.any():
            sel = np.flatnonzero(keep)
            column = ops.gather_rows(picked[:, offset:offset + v], sel)
            term = ops.sum(ops.cross_entropy(column, targets[rows[sel], c]))
            total = term if total is None else total + term
            count += len(sel)
        offset += v
    return total, count


def composite_loss(output, batch, node_targets, edge_targets, node_vocab, edge_vocab,
                   weights=(1.0, 1.2, 1.2), node_hit=None, edge_hit=None):
    """``w0 * MAE + w1 * CE_nodes + w2 * CE_edges``.

    MAE averages over graphs with a finite target; each CE averages over all
    (entry, column) pairs of valid rows, or over corrupted entries only when
    hit masks are given.  Returns ``(loss, terms)`` with float terms.
    """
    w_mae, w_node, w_edge = weights
    labelled = np.flatnonzero(batch.graph_mask & np.isfinite(batch.targets))
    terms = {"mae": float("nan"), "ce_nodes": float("nan"), "ce_edges": float("nan")}
    loss = None

    def add(term):
        nonlocal loss
        loss = term if loss is None else loss + term

    if len(labelled):
        err = ops.gather_rows(output.prediction, labelled) - batch.targets[labelled]
        mae = ops.mean(ops.absolute(err))
        terms["mae"] = float(mae.data)
        if w_mae:
            add(mae * w_mae)

    for key, logits, targets, rows, vocab, hit, weight in (
        ("ce_nodes", output.node_logits, node_targets, np.flatnonzero(batch.node_mask), node_vocab, node_hit, w_node),
        ("ce_edges", output.edge_logits, edge_targets, np.flatnonzero(batch.edge_mask), edge_vocab, edge_hit, w_edge),
    ):
        total, count = _column_ce(logits, targets, rows, vocab, hit)
        if count:
            ce = total * (1.0 / count)
            terms[key] = float(ce.data)
            if weight:
                add(ce * weight)

    if loss is None:
        loss = Tensor(np.array(0.0))
    return loss, terms


# ---------------------------------------------------------------- optimiser

def learning_rate(step, peak_lr, warmup_steps, total_steps) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    warm = step / warmup_steps if warmup_steps > 0 else 1.0
    decay_span = total_steps - warmup_steps
    decay = 1.0 - (step - warmup_steps) / decay_span if decay_span > 0 else 0.0
    return peak_lr * min(warm, max(0.0, decay))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericError(f"non-finite gradient in {bad[:5]}")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    """Adam with global-norm gradient clipping applied before the moment updates."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=5.0):
        self.beta1, self.beta2, self.eps, self.grad_clip = beta1, beta2, eps, grad_clip
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> float:
        grads, norm = clip_by_global_norm(grads, self.grad_clip)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = params[name]
            data = p.data if isinstance(p, Tensor) else p
            data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def adam_step(params, grads, optimizer: Adam, step, cfg: TrainConfig, warmup_steps, total_steps) -> float:
    """One clipped Adam update at the scheduled learning rate; returns the pre-clip grad norm."""
    lr = learning_rate(step, cfg.peak_lr, warmup_steps, total_steps)
    return optimizer.step(params, grads, lr)


# ---------------------------------------------------------------- evaluation

def predict(model: GPSModel, featurized, spec: PackSpec = PackSpec(), group=None) -> np.ndarray:
    """Deterministic predictions (no dropout) in input order."""
    featurized = list(featurized)
    out = np.full(len(featurized), np.nan)
    if not featurized:
        return out
    with no_grad():
        for pack in pack_stream([f.graph for f in featurized], spec):
            batch = collate_pack(pack, featurized, pad=False)
            g = group if group is not None else eval_masking_group(batch.has_positions, model.config)
            pred = model(batch, g).prediction.data
            out[pack.graph_ids] = pred[: pack.g_used]
    return out


def mean_absolute_error(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    ok = np.isfinite(target)
    if not ok.any():
        return float("nan")
    return float(np.mean(np.abs(pred[ok] - target[ok])))


def _targets(graphs):
    return np.array([np.nan if g.target is None else g.target for g in graphs])


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: GPSModel
    history: list
    summary: dict


METRIC_FIELDS = ("epoch", "step", "split", "mae", "loss", "ce_nodes", "ce_edges", "lr")


def _epoch_packs(train_feats, cfg: TrainConfig, spec, epoch):
    order = np.arange(len(train_feats))
    if cfg.shuffle:
        order = RngStream(cfg.seed, _SHUFFLE).generator(epoch).permutation(len(train_feats))
    return pack_stream([train_feats[i].graph for i in order], spec, ids=[int(i) for i in order])


def train(dataset, split, model_config: ModelConfig, train_config: TrainConfig = TrainConfig(),
          spec: PackSpec = PackSpec(), out_dir=None, featurized=None, model: GPSModel | None = None,
          callback=None) -> TrainResult:
    """Train a model on ``split.train_indices``; evaluate on both index sets each epoch.

    Every random decision (shuffle, masking group, corruption, dropout,
    eigenvector signs) is drawn from a stream keyed by ``(seed, epoch,
    step)``, so two runs with the same inputs produce identical logs.
    """
    cfg = train_config
    node_vocab, edge_vocab = dataset.node_vocab, dataset.edge_vocab
    if featurized is None:
        featurized = [featurize(g, model_config.k_lap, model_config.k_rw,
                                model_config.max_spd, model_config.max_degree) for g in dataset]
    train_feats = [featurized[i] for i in split.train_indices]
    eval_feats = [featurized[i] for i in split.eval_indices]
    if not train_feats:
        raise ConfigError("the split has no training graphs")
    train_y, eval_y = _targets(f.graph for f in train_feats), _targets(f.graph for f in eval_feats)

    if model is None:
        model = GPSModel(model_config, node_vocab, edge_vocab, seed=cfg.seed)
        # Start the regression head at the training mean so early steps fit structure, not offset.
        if np.isfinite(train_y).any():
            model.params["decoder/dense2/b"].data[:] = np.nanmean(train_y)

    packs_per_epoch = len(_epoch_packs(train_feats, cfg, spec, 0))
    steps_per_epoch = max(1, math.ceil(packs_per_epoch / cfg.packs_per_step))
    total_steps = steps_per_epoch * cfg.total_epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if cfg.max_steps is not None and cfg.max_steps < steps_per_epoch * cfg.total_epochs:
        warmup_steps = round(total_steps * cfg.warmup_epochs / cfg.total_epochs)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.grad_clip)
    history: list = []
    last_good = model.state()
    last_good_path = None
    step = 0
    epoch = 0

    def record(row):
        history.append(row)
        if callback is not None:
            callback(row)

    while step < total_steps:
        packs = _epoch_packs(train_feats, cfg, spec, epoch)
        sums = {"loss": 0.0, "ce_nodes": 0.0, "ce_edges": 0.0, "n": 0}
        for start in range(0, len(packs), cfg.packs_per_step):
            if step >= total_steps:
                break
            group_rng = RngStream(cfg.seed, _GROUP).generator(epoch, step)
            model.zero_grad()
            step_loss = 0.0
            chunk = packs[start:start + cfg.packs_per_step]
            for k, pack in enumerate(chunk):
                sign_rng = RngStream(cfg.seed, _SIGNS).generator(epoch, step, k) if cfg.flip_eigvec_signs else None
                batch = collate_pack(pack, train_feats, pad=False, sign_rng=sign_rng)
                group = sample_masking_group(group_rng, cfg.masking_ratio)
                if not batch.has_positions or not model_config.uses_3d:
                    group = MaskingGroup.MASK_SPATIAL
                clean_nodes, clean_edges = batch.node_cats, batch.edge_cats
                node_hit = edge_hit = None
                if cfg.p_corrupt > 0:
                    crng = RngStream(cfg.seed, _CORRUPT).generator(epoch, step, k)
                    batch, node_hit, edge_hit = corrupt_batch(batch, cfg.p_corrupt, crng, node_vocab, edge_vocab)
                drng = RngStream(cfg.seed, _DROPOUT).generator(epoch, step, k)
                output = model(batch, group, drng)
                loss, terms = composite_loss(
                    output, batch, clean_nodes, clean_edges, node_vocab, edge_vocab, cfg.loss_weights,
                    node_hit if cfg.corrupted_only_ce else None, edge_hit if cfg.corrupted_only_ce else None)
                if not math.isfinite(float(loss.data)):
                    raise _diverged(model, last_good, last_good_path, out_dir, epoch, step)
                (loss * (1.0 / len(chunk))).backward()
                step_loss += float(loss.data) / len(chunk)
                for key in ("ce_nodes", "ce_edges"):
                    if math.isfinite(terms[key]):
                        sums[key] += terms[key] / len(chunk)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            try:
                adam_step(model.params, grads, optimizer, step, cfg, warmup_steps, total_steps)
            except NumericError as exc:
                raise _diverged(model, last_good, last_good_path, out_dir, epoch, step, exc) from exc
            sums["loss"] += step_loss
            sums["n"] += 1
            step += 1
        epoch += 1
        last_good = model.state()
        if out_dir is not None:
            last_good_path = out_dir / "checkpoint.gpsp"
            model.save(last_good_path, {"epoch": epoch, "step": step})

        if epoch % cfg.eval_every == 0 or step >= total_steps:
            lr = learning_rate(step, cfg.peak_lr, warmup_steps, total_steps)
            n = max(sums["n"], 1)
            record({"epoch": epoch, "step": step, "split": "train",
                    "mae": mean_absolute_error(predict(model, train_feats, spec), train_y),
                    "loss": sums["loss"] / n, "ce_nodes": sums["ce_nodes"] / n,
                    "ce_edges": sums["ce_edges"] / n, "lr": lr})
            if eval_feats:
                record({"epoch": epoch, "step": step, "split": "eval",
                        "mae": mean_absolute_error(predict(model, eval_feats, spec), eval_y),
                        "loss": float("nan"), "ce_nodes": float("nan"), "ce_edges": float("nan"), "lr": lr})
            log.info("epoch %d step %d train mae %.5f", epoch, step, history[-1 - bool(eval_feats)]["mae"])

    summary = {
        "epochs": epoch,
        "steps": step,
        "num_params": model.num_params,
        "final_train_mae": _last(history, "train"),
        "final_eval_mae": _last(history, "eval"),
        "best_eval_mae": _best(history, "eval"),
        "split": split.name,
        "seed": cfg.seed,
        "model_config": model_config.to_dict(),
        "train_config": cfg.to_dict(),
    }
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", history)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(jsonable(summary), fh, indent=2)
    return TrainResult(model, history, summary)


def _diverged(model, last_good, last_good_path, out_dir, epoch, step, cause=None):
    model.load_state(last_good)
    path = last_good_path
    if out_dir is not None:
        path = out_dir / "last_good.gpsp"
        model.save(path, {"epoch": epoch, "step": step, "diverged": True})
    reason = f": {cause}" if cause else ""
    return TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, step {step}{reason}", checkpoint=path)


def _last(history, split):
    rows = [r["mae"] for r in history if r["split"] == split]
    return rows[-1] if rows else None


def _best(history, split):
    rows = [r["mae"] for r in history if r["split"] == split and math.isfinite(r["mae"])]
    return min(rows) if rows else None


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

