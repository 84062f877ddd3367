"""Training loops: online synthesis, fixed pairs, joint models and ablations."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ConfigError, CorpusError, TrainingDiverged, check_image, check_same_shape
from .evaluation import EvalReport, evaluate
from .losses import DEFAULT_WEIGHTS, LossWeights, PredictionSet, supervised_loss, total_loss
from .model import NetConfig, ROLES, VARIANTS, build_network, save_checkpoint
from .synth import MODEL_TAGS, sample_pair

logger = logging.getLogger(__name__)

MODES = ("unsupervised", "supervised", "joint_loss", "joint_models", "sequence")
ABLATION_FLAGS = ("drop_floor", "drop_ceiling", "drop_recons")
DEFAULT_EPOCHS = {"subtract_clip": 60, "linear_add": 30}


@dataclass
class TrainConfig:
    model_tag: str = "subtract_clip"
    batch_size: int = 8
    learning_rate: float = 0.01
    epochs: int | None = None
    weights: LossWeights | None = None
    n_inputs: int = 2
    ablation: frozenset = frozenset()
    mode: str = "unsupervised"
    variant: str = "latent_code"
    seed: int = 0
    steps_per_epoch: int = 100
    patch_size: int = 256
    restart_per_pair: bool = False

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.weights is None and self.model_tag in DEFAULT_WEIGHTS:
            self.weights = LossWeights.for_model(self.model_tag)
        if self.epochs is None and self.model_tag in DEFAULT_EPOCHS:
            self.epochs = DEFAULT_EPOCHS[self.model_tag]

    def errors(self) -> list:
        errs = []
        if self.model_tag not in MODEL_TAGS:
            errs.append(f"model_tag: must be one of {list(MODEL_TAGS)}, got {self.model_tag!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            errs.append(f"batch_size: must be an integer >= 1, got {self.batch_size!r}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate > 0:
            errs.append(f"learning_rate: must be > 0, got {self.learning_rate!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            errs.append(f"epochs: must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.n_inputs, int) or self.n_inputs < 2:
            errs.append(f"n_inputs: must be an integer >= 2, got {self.n_inputs!r}")
        bad = set(self.ablation) - set(ABLATION_FLAGS)
        if bad:
            errs.append(f"ablation: unknown flags {sorted(bad)}")
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {list(MODES)}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            errs.append(f"variant: must be one of {list(VARIANTS)}, got {self.variant!r}")
        if self.mode == "joint_models" and self.variant != "latent_code":
            errs.append("variant: joint_models needs the latent_code variant")
        if not isinstance(self.steps_per_epoch, int) or self.steps_per_epoch < 1:
            errs.append(f"steps_per_epoch: must be an integer >= 1, got {self.steps_per_epoch!r}")
        if not isinstance(self.patch_size, int) or self.patch_size < 16:
            errs.append(f"patch_size: must be an integer >= 16, got {self.patch_size!r}")
        if not isinstance(self.seed, int):
            errs.append(f"seed: must be an integer, got {self.seed!r}")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    @property
    def drop_terms(self):
        return tuple(flag[len("drop_"):] for flag in sorted(self.ablation))

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def net_config(self) -> NetConfig:
        tags = MODEL_TAGS if self.mode == "joint_models" else (None,)
        return NetConfig(variant=self.variant, model_tags=tags)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d


@dataclass
class TrainLog:
    config: dict
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def last(self, key="total"):
        return self.rows[-1][key]

    def curve(self, key="total"):
        return [row[key] for row in self.rows]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"config": self.config}) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"epochs": self.epochs, "wall_clock": self.wall_clock}) + "\n")


def _stack(images):
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1)
                                      for im in images]))


def _predict(net, x, tags=None):
    """Background and reflection predictions for a stacked batch.

    For the latent-code variant both codes go through a single batched pass;
    ``tags`` selects per-sample code pairs in joint-model training.
    """
    if net.variant != "latent_code":
        return net.predict_both(x)
    n = x.shape[0]
    tags = tags if tags is not None else [None] * n
    scales, shifts = [], []
    for role in ROLES:
        codes = [net.get_code(role, t) for t in tags]
        scales.append(torch.stack([c.scale for c in codes]))
        shifts.append(torch.stack([c.shift for c in codes]))
    out = net.forward_codes(torch.cat([x, x]), torch.cat(scales), torch.cat(shifts))
    return out[:n], out[n:]


def _step_loss(net, inputs, cfg: TrainConfig, gt=None, tags=None):
    """Loss for one mini-batch. ``inputs`` is a list of ``n`` tensors ``(N, 3, H, W)``."""
    n, batch = len(inputs), inputs[0].shape[0]
    x = torch.cat(inputs)
    per_tags = None if tags is None else list(tags) * n
    b_all, r_all = _predict(net, x, per_tags)
    bs, rs = list(b_all.split(batch)), list(r_all.split(batch))
    row = {}
    total = x.new_zeros(())
    if cfg.mode != "supervised":
        weights = cfg.weights or LossWeights()
        brk = total_loss(PredictionSet(bs, rs, inputs), weights, drop=cfg.drop_terms)
        row.update(brk.to_dict())
        total = total + brk.total
    if cfg.mode in ("supervised", "joint_loss"):
        if gt is None:
            raise ValueError(f"mode {cfg.mode!r} needs ground-truth layers")
        gt_b, gt_rs = gt
        sup = torch.stack([supervised_loss(bs[k], rs[k], gt_b, gt_rs[k]) for k in range(n)]).mean()
        row["supervised"] = float(sup.detach())
        total = total + sup
    row["total"] = float(total.detach())
    return total, row


def _check_finite(total, row, step):
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss at step {step}: {row}")


def _shared_storage(net):
    return [p.data_ptr() for p in net.shared_parameters()]


class _Loop:
    """Shared optimization loop; ``batches`` yields ``(inputs, gt, tags)``."""

    def __init__(self, net, cfg: TrainConfig, log: TrainLog):
        self.net = net
        self.cfg = cfg
        self.log = log
        self.opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))

    def run(self, batches, steps, steps_per_epoch, callback=None):
        net, log = self.net, self.log
        net.train()
        storage = _shared_storage(net)
        start = time.perf_counter()
        epoch_rows = []
        for _ in range(steps):
            inputs, gt, tags = next(batches)
            self.opt.zero_grad(set_to_none=True)
            total, row = _step_loss(net, inputs, self.cfg, gt, tags)
            step = len(log.rows)
            row = {"step": step, "epoch": step // steps_per_epoch, **row}
            _check_finite(total, row, step)
            total.backward()
            self.opt.step()
            log.rows.append(row)
            epoch_rows.append(row)
            if callback is not None:
                callback(step, net)
            if len(epoch_rows) == steps_per_epoch:
                self._close_epoch(epoch_rows, storage)
                epoch_rows = []
        if epoch_rows:
            self._close_epoch(epoch_rows, storage)
        log.wall_clock += time.perf_counter() - start
        net.eval()

    def _close_epoch(self, rows, storage):
        if _shared_storage(self.net) != storage:
            raise RuntimeError("shared weights were reallocated during training")
        summary = {"epoch": rows[0]["epoch"], "steps": len(rows),
                   "mean_total": float(np.mean([r["total"] for r in rows]))}
        self.log.epochs.append(summary)
        logger.info("epoch %(epoch)d mean loss %(mean_total).6f", summary)


def _corpus_batches(corpus, cfg: TrainConfig, rng):
    need_gt = cfg.mode in ("supervised", "joint_loss")
    while True:
        if cfg.mode == "joint_models":
            tags = [MODEL_TAGS[int(k)] for k in rng.integers(0, len(MODEL_TAGS), cfg.batch_size)]
        else:
            tags = [cfg.model_tag] * cfg.batch_size
        pairs = [sample_pair(corpus, t, rng, cfg.patch_size, cfg.n_inputs) for t in tags]
        inputs = [_stack([p.inputs[k] for p in pairs]) for k in range(cfg.n_inputs)]
        gt = None
        if need_gt:
            gt = (_stack([p.gt_b for p in pairs]),
                  [_stack([p.gt_r[k] for p in pairs]) for k in range(cfg.n_inputs)])
        yield inputs, gt, tags if cfg.mode == "joint_models" else None


def _fixed_batches(groups, batch_size):
    """Cycle through fixed image groups (each a tuple of ``n`` images)."""
    tensors = [[_stack([im]) for im in g] for g in groups]
    k = 0
    while True:
        chunk = [tensors[(k + j) % len(tensors)] for j in range(min(batch_size, len(tensors)))]
        k = (k + len(chunk)) % len(tensors)
        yield [torch.cat([c[i] for c in chunk]) for i in range(len(chunk[0]))], None, None


def train(cfg: TrainConfig, corpus, checkpoint_path=None, net=None):
    """Train on pairs synthesized online from ``corpus``. Returns ``(net, log)``."""
    cfg.validate()
    if cfg.mode == "sequence":
        raise ConfigError("mode: use train_on_sequence for sequence mode")
    if len(corpus.train) < 1 + cfg.n_inputs:
        raise CorpusError(f"training split has {len(corpus.train)} images, "
                          f"need at least {1 + cfg.n_inputs}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = net if net is not None else build_network(cfg.net_config(), cfg.seed)
    log = TrainLog(config=cfg.to_dict())
    _Loop(net, cfg, log).run(_corpus_batches(corpus, cfg, rng), cfg.total_steps, cfg.steps_per_epoch)
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path, extra={"config": cfg.to_dict()})
    return net, log


def train_joint_models(cfg: TrainConfig, corpus, checkpoint_path=None):
    """One shared network with four codes, mixing both synthesis models per batch."""
    if cfg.mode != "joint_models":
        raise ConfigError(f"mode: train_joint_models needs mode 'joint_models', got {cfg.mode!r}")
    return train(cfg, corpus, checkpoint_path)


def fit_groups(groups, cfg: TrainConfig, net=None, steps=None, log=None, callback=None):
    """Optimize a network on fixed image groups (no ground truth is used)."""
    cfg.validate()
    if not groups:
        raise ValueError("no training groups given")
    checked = []
    for g in groups:
        g = [check_image(im) for im in g]
        if len(g) < 2:
            raise ValueError("each group needs at least two images")
        check_same_shape(*g)
        checked.append(g)
    if cfg.mode not in ("unsupervised", "sequence"):
        raise ConfigError(f"mode: fixed-pair training is label-free, got {cfg.mode!r}")
    torch.manual_seed(cfg.seed)
    net = net if net is not None else build_network(cfg.net_config(), cfg.seed)
    log = log if log is not None else TrainLog(config=cfg.to_dict())
    steps = cfg.total_steps if steps is None else steps
    _Loop(net, cfg, log).run(_fixed_batches(checked, cfg.batch_size), steps, cfg.steps_per_epoch,
                             callback)
    return net, log


def train_on_sequence(pairs, cfg: TrainConfig, net=None, return_logs=False):
    """Fit each real pair in turn and emit its two predicted backgrounds.

    By default the network is fine-tuned continually across pairs;
    ``cfg.restart_per_pair`` reinitializes it for every pair.
    """
    from .evaluation import predict_background

    if not pairs:
        raise ValueError("sequence is empty")
    outputs, logs = [], []
    for pair in pairs:
        if cfg.restart_per_pair:
            net = None
        net, log = fit_groups([pair], cfg, net=net)
        outputs.append(tuple(predict_background(net, im) for im in pair))
        logs.append(log)
    if return_logs:
        return outputs, logs, net
    return outputs


ABLATIONS = {
    "wo_floor": {"ablation": {"drop_floor"}},
    "wo_ceiling": {"ablation": {"drop_ceiling"}},
    "wo_recons": {"ablation": {"drop_recons"}},
    "split_feature": {"variant": "split_feature"},
    "six_channel": {"variant": "six_channel"},
    "two_networks": {"variant": "two_network"},
    "more_inputs": {"n_inputs": 3},
    "supervised": {"mode": "supervised"},
    "joint_loss": {"mode": "joint_loss"},
    "full": {},
}


def ablation_config(name, base_cfg: TrainConfig) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    delta = dict(ABLATIONS[name])
    if "ablation" in delta:
        delta["ablation"] = frozenset(base_cfg.ablation) | delta["ablation"]
    return dataclasses.replace(base_cfg, **delta)


def run_ablation(name, base_cfg: TrainConfig, corpus, n_eval=8, checkpoint_path=None):
    """Train one ablation and score it on pairs synthesized from the test split."""
    cfg = ablation_config(name, base_cfg)
    if len(corpus.test) < 1 + 2:
        raise CorpusError(f"test split has {len(corpus.test)} images; need at least 3 to evaluate")
    net, _ = train(cfg, corpus, checkpoint_path)
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    for k in range(n_eval):
        pair = sample_pair(corpus, cfg.model_tag, rng, cfg.patch_size, 2, split="test")
        rows.append((f"test{k:04d}", pair.i1, pair.gt_b, None))
    report: EvalReport = evaluate(net, rows)
    report.config = {**cfg.to_dict(), "ablation_name": name}
    return net, report


def save_log(log: TrainLog, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.write_jsonl(path)
