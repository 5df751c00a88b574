"""The prompt tuning loop: supervised loss, self-consistency anchoring to the
frozen model, SGD on the prompts only, and per-epoch prompt aggregation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..encoders import cosine_logits, encode_image, make_sequence, pretrain_contrastive
from ..ensembling import AggregationState, finalize, update
from ..numcore import Graph, NonFiniteError, Tensor
from ..prompting import (
    CANONICAL_TEMPLATE, init_prompts, prompted_encode_image, prompted_encode_text, template_embedding,
)
from ..regularizers import (
    TemplatePool, ensembled_class_features, feature_stage_view, final_loss, scl_combined,
    scl_feature_loss, scl_logits_loss,
)
from .data import Split, generate_dataset
from .evaluation import evaluate_base_to_novel

log = logging.getLogger(__name__)


@dataclass
class Counters:
    iterations: int = 0
    non_prompt_grads: int = 0
    novel_examples_seen: int = 0
    novel_tokens_seen: int = 0


@dataclass
class TrainResult:
    final_prompts: object
    aggregated_prompts: object
    loss_trace: list
    counters: Counters
    curves: list = field(default_factory=list)

    @property
    def inference_prompts(self):
        return self.aggregated_prompts if self.aggregated_prompts is not None else self.final_prompts

    def per_epoch_losses(self, epochs):
        per = {}
        for row in self.loss_trace:
            per.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(per[e])) for e in range(1, epochs + 1)]


_PAIR_CACHE = {}


def pretraining_pairs(data, config, pool, seed):
    rng = np.random.default_rng([seed, 7])
    picks = rng.integers(len(pool), size=len(data.pretrain))
    return [(x, pool.instantiate(config, int(t), int(y)))
            for x, y, t in zip(data.pretrain.x, data.pretrain.y, picks)]


def prepare(run, seed):
    """Dataset and frozen encoder for one seed; cached since both are immutable."""
    spec = dataclasses.replace(run.data, seed=seed)
    key = (run.encoder, spec, run.pretrain_epochs, run.pretrain_distractors, seed)
    if key not in _PAIR_CACHE:
        data = generate_dataset(spec)
        pool = TemplatePool.default(run.encoder)
        pair = pretrain_contrastive(run.encoder, pretraining_pairs(data, run.encoder, pool, seed),
                                    run.pretrain_epochs, seed, distractors=run.pretrain_distractors)
        _PAIR_CACHE[key] = (data, pair)
    return _PAIR_CACHE[key]


def few_shot_subset(split, classes, shots, seed):
    """``shots`` samples per class in original order; all of them when shots equals the class size."""
    rng = np.random.default_rng([seed, 2])
    keep = []
    for k in classes:
        idx = np.flatnonzero(split.y == k)
        if shots > len(idx):
            raise ValueError(f"{shots} shots requested but class {k} has {len(idx)} samples")
        keep.append(idx if shots == len(idx) else rng.choice(idx, shots, replace=False))
    keep = np.sort(np.concatenate(keep))
    return Split(split.x[keep], split.y[keep])


def frozen_text_targets(pair, run, classes):
    cfg = pair.config
    if run.use_textual_diversity:
        pool = TemplatePool.default(cfg)
        if run.n_templates is not None:
            pool = pool.head(run.n_templates)
    else:
        pool = TemplatePool([" ".join(CANONICAL_TEMPLATE) + " {class}"])
    normalize = run.scl.feature_stage == "post_normalization"
    return ensembled_class_features(pair, pool, classes, normalize=normalize)


@dataclass
class FrozenTargets:
    """What the frozen model says about the tuning set; fixed for the whole run."""
    image: np.ndarray  # per tuning sample
    text: np.ndarray  # per class
    probs: np.ndarray  # per tuning sample


def frozen_targets(pair, run, classes, x):
    cfg = pair.config
    with nc.no_grad():
        f = encode_image(pair, x).data.reshape(len(x), cfg.d)
    if run.scl.feature_stage == "post_normalization":
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
    g = frozen_text_targets(pair, run, classes)
    with nc.no_grad():
        probs = nc.softmax_rows(cosine_logits(Tensor(f), Tensor(g), cfg.tau)).data
    return FrozenTargets(f, g, probs)


def batch_loss(pair, prompts, run, x, y, seqs, targets=None, idx=None):
    """Final objective on one batch; ``y`` indexes ``seqs``, ``idx`` indexes ``targets.image``.

    Returns (loss Tensor, dict of component values).
    """
    propagate, stage = run.prompt.propagate, run.scl.feature_stage
    fp = prompted_encode_image(pair, prompts, x, propagate)
    gp = prompted_encode_text(pair, prompts, seqs, propagate)
    probs = nc.softmax_rows(cosine_logits(fp, gp, pair.config.tau))
    onehot = np.zeros((len(y), len(seqs)))
    onehot[np.arange(len(y)), y] = 1.0
    ce = nc.scalar_mul(nc.sum(nc.log(probs) * Tensor(onehot)), -1.0 / len(y))
    row = {"ce": ce.item()}
    if run.use_scl:
        idx = np.arange(len(y)) if idx is None else idx
        s_img = scl_feature_loss(feature_stage_view(fp, stage), Tensor(targets.image[idx]),
                                 run.scl.matching_metric, run.scl.feature_reduction)
        s_txt = scl_feature_loss(feature_stage_view(gp, stage), Tensor(targets.text),
                                 run.scl.matching_metric, run.scl.feature_reduction)
        s_log = scl_logits_loss(probs, Tensor(targets.probs[idx]), run.scl.kl_direction)
        loss = final_loss(ce, scl_combined(s_img, s_txt, s_log, run.scl))
        row.update(scl_image=s_img.item(), scl_text=s_txt.item(), scl_logits=s_log.item())
    else:
        loss = ce
    row["total"] = loss.item()
    return loss, row


def _init(run, pair, seed):
    p = run.prompt
    emb = None
    if p.template_init and p.T == len(CANONICAL_TEMPLATE):
        emb = template_embedding(pair)
    return init_prompts(pair.config, p.J, p.V, p.T, seed, emb)


def train(run, pair, data, seed=None, classes=None, tuning=None):
    """Tune prompts on the base classes; returns TrainResult."""
    seed = run.seeds[0] if seed is None else seed
    cfg = pair.config
    classes = list(data.base_classes if classes is None else classes)
    novel = set(range(data.spec.C)) - set(classes)
    if tuning is None:
        tuning = data.train.select(classes)
        if run.shots is not None:
            tuning = few_shot_subset(tuning, classes, run.shots, seed)
    local = {k: i for i, k in enumerate(classes)}
    y_local = np.array([local[int(k)] for k in tuning.y])

    prompts = _init(run, pair, seed)
    params = prompts.parameters()
    param_ids = {id(p) for p in params}
    seqs = [make_sequence(cfg, CANONICAL_TEMPLATE, k) for k in classes]
    propagate = run.prompt.propagate
    counters = Counters()

    targets = frozen_targets(pair, run, classes, tuning.x) if run.use_scl else None

    agg = None
    if run.use_gpa and prompts.J:
        agg = AggregationState(run.ensembling_mode, run.epochs, run.gpa_mu, run.gpa_sigma2, run.ema_beta)

    rng = np.random.default_rng([seed, 1])
    trace, curves = [], []
    n = len(tuning)
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, run.batch_size):
            idx = order[start:start + run.batch_size]
            counters.novel_examples_seen += int(np.isin(tuning.y[idx], list(novel)).sum())
            counters.novel_tokens_seen += sum(1 for k in classes if k in novel)
            with Graph():
                loss, row = batch_loss(pair, prompts, run, tuning.x[idx], y_local[idx], seqs, targets, idx)
                row = {"epoch": epoch, "iteration": counters.iterations + 1, **row}
                if not np.isfinite(row["total"]):
                    raise NonFiniteError(f"non-finite loss at iteration {row['iteration']}: {row}")
                grads = nc.backward(loss, params=params) if params else {}
            counters.non_prompt_grads += sum(1 for t in grads if id(t) not in param_ids)
            if params:
                nc.sgd_step(params, grads, run.learning_rate)
            counters.iterations += 1
            trace.append(row)
        if agg is not None:
            update(agg, prompts, epoch)
        if run.eval_every_epoch:
            live = prompts.clone(requires_grad=False)
            rep = evaluate_base_to_novel(pair, live, data, propagate)
            curves.append([epoch, rep.base_acc, rep.novel_acc])
    aggregated = finalize(agg) if agg is not None else None
    return TrainResult(prompts.clone(requires_grad=False), aggregated, trace, counters, curves)
