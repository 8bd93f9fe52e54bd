"""End-to-end experiment pathways.

The flow mirrors the three-stage recipe the lab studies:

1. pretrain_base     - masked-frame-prediction proxy for self-supervised
                       pretraining on an (imbalanced) unlabeled mixture.
2. upstream_finetune - full CTC fine-tuning on one language; the kept
                       checkpoint is the epoch with the lowest validation
                       CTC loss (earliest on ties).
3. derive_subnetwork - one-shot global L1 prune of the upstream encoder.
4. downstream_finetune - masked training on the target language: 10 epochs
                       when upstream and downstream languages match,
                       otherwise 1 epoch with everything but the CTC head
                       frozen and then 10 full epochs. The mask is
                       re-applied after every optimizer step, so pruned
                       weights stay exactly zero.
5. evaluate / run_grid / averaging - CER measurement and the sweep +
                       aggregation used for the bias analyses.

Determinism: every stage draws from generators keyed by (seed, stage,
epoch, ...); a rerun with equal inputs reproduces results bit for bit.
Grid cells are independent; a failed cell is recorded, not fatal.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .ctc import ctc_loss_node, ctc_loss_value, greedy_decode, log_softmax_rows
from .metrics import cer
from .model import EncoderConfig, encode, forward_values, init_model, rng_for
from .optim import AdamHyper, AdamState, adam_step
from .params import ParameterTree
from .pruning import Mask, apply_mask, global_l1_prune, union_mask
from .synthlang import Utterance, text_to_labels

MASK_FRACTION = 0.30
FREEZE_EPOCHS = 1


class MissingCellError(KeyError):
    """An averaging query needs a grid cell that is not in the results."""


def derive_seed(*key) -> int:
    digest = hashlib.sha256("/".join(str(k) for k in key).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    freeze_first_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass(frozen=True)
class ExperimentSpec:
    upstream_language: str
    downstream_language: str
    sparsities: tuple[float, ...]
    mask_source: tuple = ("self",)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed required")
        for s in self.sparsities:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"sparsity {s} outside [0, 1]")
        kind = self.mask_source[0]
        if kind not in ("self", "other", "union"):
            raise ValueError(f"unknown mask source {kind!r}")

    def mask_label(self) -> str:
        kind = self.mask_source[0]
        if kind == "self":
            return "self"
        if kind == "other":
            return f"other:{self.mask_source[1]}"
        return "union:" + "+".join(self.mask_source[1])

    def mask_languages(self) -> tuple[str, ...]:
        kind = self.mask_source[0]
        if kind == "self":
            return (self.upstream_language,)
        if kind == "other":
            return (self.mask_source[1],)
        return tuple(self.mask_source[1])


@dataclass
class RunResult:
    upstream: str
    downstream: str
    mask_source: str
    sparsity: float
    seed: int
    cer: float
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_val_loss: float = math.nan
    error: str | None = None

    def sort_key(self):
        return (self.upstream, self.downstream, self.mask_source, self.sparsity, self.seed)


@dataclass
class UpstreamResult:
    model: ParameterTree         # final-epoch weights
    best: ParameterTree          # lowest-validation-loss checkpoint
    best_epoch: int              # 1-based
    train_losses: list[float]
    val_losses: list[float]


@dataclass
class DownstreamResult:
    model: ParameterTree
    train_losses: list[float]
    val_losses: list[float]
    epochs_run: int
    best_val_loss: float


def split_language(utts: Iterable[Utterance], language: str) -> list[Utterance]:
    return [u for u in utts if u.language_id == language]


def _ctc_utterance_loss(leaves: dict[str, ad.Tensor], config: EncoderConfig,
                        utt: Utterance) -> ad.Tensor:
    dtype = leaves["ctc_head/weight"].dtype
    hidden = encode(leaves, config, ad.constant(utt.frames, dtype=dtype))
    logits = ad.add(ad.matmul(hidden, leaves["ctc_head/weight"]), leaves["ctc_head/bias"])
    return ctc_loss_node(ad.log_softmax_last(logits), text_to_labels(utt.text))


def _mean_loss(nodes: Sequence[ad.Tensor]) -> ad.Tensor:
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return ad.scale(total, 1.0 / len(nodes))


def _train_epoch(params: ParameterTree, state: AdamState, utts: Sequence[Utterance],
                 config: TrainConfig, rng: np.random.Generator,
                 loss_builder: Callable, trainable: Callable[[str], bool],
                 mask: Mask | None,
                 step_hook: Callable[[ParameterTree], None] | None = None,
                 ) -> tuple[ParameterTree, AdamState, float]:
    hyper = AdamHyper(lr=config.lr)
    order = rng.permutation(len(utts))
    loss_sum = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = [utts[i] for i in order[start:start + config.batch_size]]
        leaves = ad.make_leaves(params)
        nodes = [loss_builder(leaves, u, rng) for u in batch]
        loss_node = _mean_loss(nodes)
        loss_sum += float(loss_node.data) * len(batch)
        grads = ad.backward(loss_node)
        params, state = adam_step(params, grads, state, hyper, trainable)
        if mask is not None:
            params = apply_mask(params, mask)
        if step_hook is not None:
            step_hook(params)
    return params, state, loss_sum / max(1, len(utts))


def validation_ctc_loss(params: ParameterTree, utts: Sequence[Utterance]) -> float:
    """Mean per-utterance CTC loss, no graph construction."""
    total = 0.0
    for utt in utts:
        logits = forward_values(params, utt.frames)
        total += ctc_loss_value(log_softmax_rows(logits), text_to_labels(utt.text))
    return total / max(1, len(utts))


def pretrain_base(corpus_train: Sequence[Utterance], model_config: EncoderConfig,
                  config: TrainConfig,
                  epoch_losses: list[float] | None = None) -> ParameterTree:
    """Masked-frame-prediction proxy pretraining; returns final-epoch weights.

    30% of each utterance's frames are replaced by a learned mask vector;
    the encoder plus a regression head reconstruct the originals under L2
    loss. The CTC head is untouched. The transient pretraining parameters
    are stripped from the returned tree. Pass a list as epoch_losses to
    capture the mean training loss of each epoch.
    """
    if not corpus_train:
        raise ValueError("pretraining corpus is empty")
    params = init_model(model_config, config.seed)
    d, fdim = model_config.model_dim, model_config.input_dim
    params["pretrain/mask_vector"] = (
        rng_for(config.seed, "init", "pretrain/mask_vector")
        .uniform(-1, 1, size=fdim) / math.sqrt(fdim)).astype(np.float32)
    params["pretrain/regressor_weight"] = (
        rng_for(config.seed, "init", "pretrain/regressor_weight")
        .uniform(-1, 1, size=(d, fdim)) / math.sqrt(d)).astype(np.float32)
    params["pretrain/regressor_bias"] = np.zeros(fdim, dtype=np.float32)
    state = AdamState.zeros(params)

    def msp_loss(leaves, utt: Utterance, rng: np.random.Generator) -> ad.Tensor:
        frames = utt.frames
        t = frames.shape[0]
        k = max(1, int(round(MASK_FRACTION * t)))
        masked_idx = rng.permutation(t)[:k]
        row_mask = np.zeros((t, 1), dtype=np.float32)
        row_mask[masked_idx] = 1.0
        corrupted = frames.copy()
        corrupted[masked_idx] = 0.0
        x = ad.add(ad.constant(corrupted),
                   ad.mul(ad.constant(row_mask), leaves["pretrain/mask_vector"]))
        hidden = encode(leaves, model_config, x)
        pred = ad.add(ad.matmul(hidden, leaves["pretrain/regressor_weight"]),
                      leaves["pretrain/regressor_bias"])
        diff = ad.sub(pred, ad.constant(frames))
        masked_sq = ad.mul(ad.mul(diff, diff), ad.constant(row_mask))
        return ad.scale(ad.sum_all(masked_sq), 1.0 / (k * fdim))

    trainable = lambda path: not path.startswith("ctc_head/")
    for epoch in range(config.epochs):
        rng = rng_for(config.seed, "pretrain", epoch)
        params, state, epoch_loss = _train_epoch(params, state, corpus_train, config, rng,
                                                 msp_loss, trainable, mask=None)
        if epoch_losses is not None:
            epoch_losses.append(epoch_loss)

    for path in [p for p in params.paths() if p.startswith("pretrain/")]:
        del params[path]
    return params


def select_best_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch with the lowest validation loss; ties go to the earliest."""
    if not val_losses:
        return 0
    return min(range(len(val_losses)), key=lambda i: (val_losses[i], i)) + 1


def upstream_finetune(base: ParameterTree, language: str,
                      corpus: dict[str, list[Utterance]],
                      config: TrainConfig) -> UpstreamResult:
    """Full-model CTC fine-tuning with lowest-validation-loss checkpointing.

    With config.freeze_first_epoch the fresh CTC head gets one head-only
    epoch before full training starts (protects the pretrained encoder from
    random-head burn-in); that extra epoch is recorded like any other and
    is eligible for checkpoint selection.
    """
    train = split_language(corpus["train"], language)
    val = split_language(corpus["val"], language)
    if not train:
        raise ValueError(f"no training utterances for language {language!r}")
    model_config = base.config

    def loss(leaves, utt, rng):
        return _ctc_utterance_loss(leaves, model_config, utt)

    params = base.copy()
    state = AdamState.zeros(params)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best: ParameterTree = params.copy()
    head_only = lambda path: path.startswith("ctc_head/")
    full = lambda path: True
    schedule = ([head_only] * FREEZE_EPOCHS if config.freeze_first_epoch else []) \
        + [full] * config.epochs
    for epoch, trainable in enumerate(schedule):
        rng = rng_for(config.seed, "upstream", language, epoch)
        params, state, train_loss = _train_epoch(
            params, state, train, config, rng, loss, trainable, mask=None)
        train_losses.append(train_loss)
        val_losses.append(validation_ctc_loss(params, val) if val else train_loss)
        if select_best_epoch(val_losses) == epoch + 1:
            best = params.copy()
    return UpstreamResult(model=params, best=best,
                          best_epoch=select_best_epoch(val_losses),
                          train_losses=train_losses, val_losses=val_losses)


def derive_subnetwork(model: ParameterTree, sparsity: float) -> Mask:
    """The model's subnetwork: global L1 prune of its encoder weights."""
    return global_l1_prune(model, sparsity)


def downstream_finetune(model: ParameterTree, mask: Mask, language: str,
                        corpus: dict[str, list[Utterance]], config: TrainConfig,
                        matched: bool,
                        step_hook: Callable[[ParameterTree], None] | None = None,
                        epoch_hook: Callable[[int, ParameterTree], None] | None = None,
                        ) -> DownstreamResult:
    """Masked downstream training; see the module docstring for the schedule."""
    train = split_language(corpus["train"], language)
    val = split_language(corpus["val"], language)
    if not train:
        raise ValueError(f"no training utterances for language {language!r}")
    model_config = model.config

    def loss(leaves, utt, rng):
        return _ctc_utterance_loss(leaves, model_config, utt)

    params = apply_mask(model, mask)
    state = AdamState.zeros(params)
    train_losses: list[float] = []
    val_losses: list[float] = []

    head_only = lambda path: path.startswith("ctc_head/")
    full = lambda path: True
    freeze = config.freeze_first_epoch or not matched
    schedule = ([head_only] * FREEZE_EPOCHS if freeze else []) + [full] * config.epochs
    for epoch, trainable in enumerate(schedule):
        rng = rng_for(config.seed, "downstream", language, epoch)
        params, state, train_loss = _train_epoch(
            params, state, train, config, rng, loss, trainable, mask=mask,
            step_hook=step_hook)
        train_losses.append(train_loss)
        val_losses.append(validation_ctc_loss(params, val) if val else train_loss)
        if epoch_hook is not None:
            epoch_hook(epoch, params)

    return DownstreamResult(model=params, train_losses=train_losses,
                            val_losses=val_losses, epochs_run=len(schedule),
                            best_val_loss=min(val_losses) if val_losses else math.nan)


def evaluate(params: ParameterTree, test_utts: Sequence[Utterance]) -> float:
    """Greedy-decoded micro CER over a test split."""
    if not test_utts:
        raise ValueError("test split is empty")
    refs = [text_to_labels(u.text) for u in test_utts]
    hyps = [greedy_decode(forward_values(params, u.frames)) for u in test_utts]
    return cer(refs, hyps)


@dataclass
class GridContext:
    """Everything a grid needs besides the experiment specs: shared base,
    corpora, per-stage train configs."""
    base: ParameterTree
    corpus: dict[str, list[Utterance]]
    upstream_config: TrainConfig
    downstream_config: TrainConfig


class GridRunner:
    """Executes grid cells with memoized upstream models and masks.

    Upstream models and masks are pure functions of (language, seed) and
    (mask languages, sparsity, seed), so memoization cannot change any
    result; it only avoids retraining shared stages. A cell failure is
    recorded on its RunResult and does not stop the grid.
    """

    def __init__(self, ctx: GridContext):
        self.ctx = ctx
        self.upstream_cache: dict[tuple[str, int], UpstreamResult] = {}
        self.mask_cache: dict[tuple[tuple[str, ...], float, int], Mask] = {}

    def upstream_for(self, language: str, seed: int) -> UpstreamResult:
        key = (language, seed)
        if key not in self.upstream_cache:
            cfg = replace(self.ctx.upstream_config,
                          seed=derive_seed(seed, "upstream", language))
            self.upstream_cache[key] = upstream_finetune(
                self.ctx.base, language, self.ctx.corpus, cfg)
        return self.upstream_cache[key]

    def mask_for(self, languages: tuple[str, ...], sparsity: float, seed: int) -> Mask:
        key = (languages, sparsity, seed)
        if key not in self.mask_cache:
            masks = [derive_subnetwork(self.upstream_for(lang, seed).best, sparsity)
                     for lang in languages]
            combined = masks[0]
            for m in masks[1:]:
                combined = union_mask(combined, m)
            self.mask_cache[key] = combined
        return self.mask_cache[key]

    def run_cell(self, spec: ExperimentSpec, sparsity: float, seed: int) -> RunResult:
        result = RunResult(upstream=spec.upstream_language,
                           downstream=spec.downstream_language,
                           mask_source=spec.mask_label(),
                           sparsity=sparsity, seed=seed, cer=math.nan)
        try:
            up = self.upstream_for(spec.upstream_language, seed)
            mask = self.mask_for(spec.mask_languages(), sparsity, seed)
            matched = spec.upstream_language == spec.downstream_language
            cfg = replace(self.ctx.downstream_config,
                          seed=derive_seed(seed, "downstream",
                                           spec.upstream_language,
                                           spec.downstream_language,
                                           spec.mask_label(), sparsity))
            down = downstream_finetune(up.best, mask, spec.downstream_language,
                                       self.ctx.corpus, cfg, matched)
            test = split_language(self.ctx.corpus["test"], spec.downstream_language)
            result.cer = evaluate(down.model, test)
            result.train_losses = down.train_losses
            result.val_losses = down.val_losses
            result.epochs_run = down.epochs_run
            result.best_val_loss = down.best_val_loss
        except Exception as exc:  # cell isolation
            result.error = f"{type(exc).__name__}: {exc}"
        return result

    def run(self, specs: Sequence[ExperimentSpec]) -> list[RunResult]:
        results = [self.run_cell(spec, sparsity, seed)
                   for spec in specs
                   for seed in spec.seeds
                   for sparsity in spec.sparsities]
        results.sort(key=RunResult.sort_key)
        return results


def run_grid(specs: Sequence[ExperimentSpec], ctx: GridContext) -> list[RunResult]:
    """Execute every (spec x sparsity x seed) cell; canonical result order."""
    return GridRunner(ctx).run(specs)


def _grouped_mean(results: Sequence[RunResult], fixed: str, fixed_value: str,
                  other: str, exclude_matched: bool,
                  mask_label: str) -> dict[float, float]:
    pool = [r for r in results if r.mask_source == mask_label and r.error is None]
    rows = [r for r in pool if getattr(r, fixed) == fixed_value]
    if exclude_matched:
        rows = [r for r in rows if r.upstream != r.downstream]
    if not rows:
        raise MissingCellError(f"no results with {fixed}={fixed_value!r}")
    # every partner language seen anywhere in the grid must have a cell here
    partners = sorted({getattr(r, other) for r in pool})
    if exclude_matched and fixed_value in partners:
        partners.remove(fixed_value)
    sparsities = sorted({r.sparsity for r in rows})
    out: dict[float, float] = {}
    for s in sparsities:
        cells = []
        for p in partners:
            matching = [r.cer for r in rows
                        if getattr(r, other) == p and r.sparsity == s]
            if not matching:
                raise MissingCellError(
                    f"missing cell {fixed}={fixed_value!r} {other}={p!r} sparsity={s}")
            cells.extend(matching)
        out[s] = float(np.mean(cells))
    return out


def avg_subnetwork_performance(results: Sequence[RunResult], upstream: str,
                               exclude_matched: bool = True,
                               mask_label: str = "self") -> dict[float, float]:
    """Per-sparsity mean CER of one upstream subnetwork across downstream languages.

    exclude_matched=True drops the upstream==downstream cell (the
    cross-language generalization view); False keeps it (the table view).
    """
    return _grouped_mean(results, "upstream", upstream, "downstream",
                         exclude_matched, mask_label)


def avg_downstream_language(results: Sequence[RunResult], language: str,
                            exclude_matched: bool = True,
                            mask_label: str = "self") -> dict[float, float]:
    """Per-sparsity mean CER for one downstream language across upstream models."""
    return _grouped_mean(results, "downstream", language, "upstream",
                         exclude_matched, mask_label)
