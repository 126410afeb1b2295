"""Fine-tuning with a gradient-masked loss.

Flagged label tokens stay in the teacher-forced context but contribute no
loss term and no gradient. Loss is the per-sample sum over kept tokens,
averaged over the samples of a batch; checkpoints are selected by
validation exact match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import EOS_ID, TokenizedExample, strip_noise, subseed
from .filtering import FilterConfig, NoiseMask, apply_filters, complementarity_report
from .model import (
    ModelConfig,
    ModelParams,
    OptState,
    TrainingError,
    forward_tensors,
    init,
    optimizer_step,
)
from .numerics import ContractError, GradientTape
from .scoring import score_dataset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0
    val_fraction: float = 0.1
    report_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def masked_loss(
    params: ModelParams,
    example: TokenizedExample,
    mask: NoiseMask | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of negative log-probabilities over kept label tokens, with
    gradients from one tape. Input positions never contribute; a fully
    masked sample yields loss 0 and all-zero gradients."""
    n_out = len(example.output_ids)
    if mask is not None and len(mask.noise) != n_out:
        raise ContractError(
            f"example {example.id!r}: mask length {len(mask.noise)} != label length {n_out}"
        )
    kept = [k for k in range(n_out) if mask is None or not mask.noise[k]]
    names = params.names()
    if not kept:
        return 0.0, {n: np.zeros_like(params[n].value) for n in names}
    rows = np.array([example.l_input + k - 1 for k in kept], dtype=np.intp)
    cols = np.array([example.output_ids[k] for k in kept], dtype=np.intp)
    with GradientTape() as tape:
        logits, _, _ = forward_tensors(params, example.tokens)
        loss = nm.sequence_nll(logits, rows, cols)
    grads = tape.gradients(loss, params.values())
    return float(loss.value), dict(zip(names, grads))


def evaluate(params: ModelParams, eval_set: list[TokenizedExample]) -> float:
    """Greedy-decoding exact match. The label is compared after stripping
    its trailing EOS; generation stops at EOS or shortly past label length.

    Decoding stops early once a token diverges from the target, which
    cannot change the verdict (greedy decoding is deterministic token by
    token), only the cost."""
    if not eval_set:
        raise ValueError("evaluate needs a non-empty set")
    from .model import forward

    correct = 0
    for ex in eval_set:
        target = ex.output_ids
        if target and target[-1] == EOS_ID:
            target = target[:-1]
        seq = list(ex.input_ids)
        ok = len(seq) + len(target) < params.config.max_seq
        if ok:
            for expected in target + [EOS_ID]:
                nxt = int(np.argmax(forward(params, seq).logits[-1]))
                if nxt != expected:
                    ok = False
                    break
                seq.append(nxt)
        correct += int(ok)
    return correct / len(eval_set)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0


def _epoch_pass(
    params: ModelParams,
    examples: list[TokenizedExample],
    masks: dict[str, NoiseMask] | None,
    config: TrainConfig,
    rng: np.random.Generator,
    opt_state: OptState,
) -> float:
    """One shuffled epoch of batched updates; returns mean per-sample loss."""
    order = rng.permutation(len(examples))
    total_loss = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = [examples[i] for i in order[start : start + config.batch_size]]
        acc: dict[str, np.ndarray] | None = None
        for ex in batch:
            mask = masks.get(ex.id) if masks else None
            loss, grads = masked_loss(params, ex, mask)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss on sample {ex.id!r}")
            total_loss += loss
            if acc is None:
                acc = grads
            else:
                for name, g in grads.items():
                    acc[name] += g
        scale = 1.0 / len(batch)
        for name in acc:
            acc[name] *= scale
        optimizer_step(params, acc, opt_state, config.learning_rate, config.optimizer)
    return total_loss / len(examples)


def train(
    params: ModelParams,
    dataset: list[TokenizedExample],
    masks: dict[str, NoiseMask] | None,
    config: TrainConfig,
    val_set: list[TokenizedExample] | None = None,
) -> TrainResult:
    """Epoch loop with seeded shuffling and validation-based selection.

    Samples whose mask covers every label token are dropped up front (and
    counted in the log). The checkpoint with the highest validation exact
    match is returned; ties go to the earlier epoch. A non-finite loss
    aborts with the best checkpoint so far plus a diagnostic log entry.
    """
    if val_set is None:
        from .data import _id_rank

        ordered = sorted(dataset, key=lambda ex: (_id_rank(ex.id), ex.id))
        n_val = max(1, int(len(ordered) * config.val_fraction))
        val_set = ordered[:n_val]
        dataset = ordered[n_val:]

    usable = []
    dropped = 0
    for ex in dataset:
        mask = masks.get(ex.id) if masks else None
        if mask is not None and all(mask.noise):
            dropped += 1
        else:
            usable.append(ex)
    if not usable:
        raise TrainingError("every training sample is fully masked")

    work = params.copy()
    opt_state = OptState()
    rng = np.random.default_rng(config.seed)
    result = TrainResult(params=work.copy(), best_epoch=0, best_val_acc=-1.0)
    for epoch in range(1, config.epochs + 1):
        try:
            train_loss = _epoch_pass(work, usable, masks, config, rng, opt_state)
        except TrainingError as exc:
            result.log.append({"epoch": epoch, "error": str(exc)})
            break
        val_acc = evaluate(work, val_set)
        if epoch % config.report_every == 0 or epoch == config.epochs:
            result.log.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_acc": val_acc,
                    "dropped_fully_masked": dropped,
                }
            )
        if val_acc > result.best_val_acc:
            result.best_val_acc = val_acc
            result.best_epoch = epoch
            result.params = work.copy()
    return result


def warmup_base(
    params: ModelParams,
    dataset: list[TokenizedExample],
    config: TrainConfig,
    epochs: int,
) -> ModelParams:
    """Unmasked pretraining pass used to prepare a base checkpoint: the
    scorers need a model with some competence before its attention,
    confidence and embedding geometry carry any signal."""
    work = params.copy()
    opt_state = OptState()
    rng = np.random.default_rng(subseed(config.seed, "warmup"))
    for _ in range(epochs):
        _epoch_pass(work, dataset, None, config, rng, opt_state)
    return work


def prepare_base(
    model_config: ModelConfig,
    train_config: TrainConfig,
    base_epochs: int,
    seed: int,
    task: str = "addition",
    task_size: int = 300,
    background_size: int = 120,
    decoration_rate: float = 0.97,
) -> ModelParams:
    """Build a base checkpoint from scratch on pretraining data disjoint
    from any fine-tuning corpus: heavily decorated task-format documents
    plus off-task symbol documents.

    The decorated documents teach the base the corpus's formatting-junk
    style, so decorations later score as high-confidence (zero knowledge
    novelty) while genuine task tokens stay novel; the symbol documents
    give off-task symbols a trained embedding identity. The base never
    sees the noisy labels it will later score."""
    from .data import gen_synth, tokenize

    params = init(model_config)
    if base_epochs <= 0:
        return params
    corpus = gen_synth(task, task_size, decoration_rate, subseed(seed, "base-task"))
    corpus += gen_synth("symbol_noise", background_size, 0.0, subseed(seed, "base-background"))
    examples = [tokenize(r) for r in corpus]
    return warmup_base(params, examples, train_config, base_epochs)


def run_experiment(
    dataset: list[TokenizedExample],
    filter_config: FilterConfig,
    train_config: TrainConfig,
    model_config: ModelConfig = ModelConfig(),
    base_params: ModelParams | None = None,
    base_epochs: int = 14,
    split_counts: tuple[int, int, int] | None = None,
    ri_agg: str = "mean",
    domain_source: str = "all_tokens",
    distance_metric: str = "euclidean",
) -> dict:
    """Twin-arm comparison: fine-tune the same base checkpoint with and
    without noise masks and report both test accuracies.

    The base model used for scoring is the shared initial checkpoint,
    before any fine-tuning; both arms consume identical data in identical
    order, so the mask is the only difference. Validation and test labels
    are compared against their de-noised form when ground-truth flags are
    present (synthetic corpora), since the clean label is the actual target.
    """
    from .data import DatasetRecord, split_records

    as_records = [DatasetRecord(ex.id, input_ids=ex.input_ids, output_ids=ex.output_ids) for ex in dataset]
    by_id = {ex.id: ex for ex in dataset}
    train_recs, val_recs, test_recs = split_records(as_records, counts=split_counts)
    train_ex = [by_id[r.id] for r in train_recs]
    val_ex = [strip_noise(by_id[r.id]) for r in val_recs]
    test_ex = [strip_noise(by_id[r.id]) for r in test_recs]

    if base_params is None:
        base_params = prepare_base(model_config, train_config, base_epochs, train_config.seed)

    score_result = score_dataset(
        base_params, train_ex, agg=ri_agg, domain_source=domain_source, metric=distance_metric
    )
    masks, stats = apply_filters(score_result.scores, filter_config)
    mask_by_id = {m.id: m for m in masks}

    normal = train(base_params.copy(), train_ex, None, train_config, val_set=val_ex)
    masked = train(base_params.copy(), train_ex, mask_by_id, train_config, val_set=val_ex)

    report = {
        "seed": train_config.seed,
        "normal_acc": evaluate(normal.params, test_ex),
        "xtf_acc": evaluate(masked.params, test_ex),
        "normal_val_acc": normal.best_val_acc,
        "xtf_val_acc": masked.best_val_acc,
        "filtered_fraction": stats.flagged_tokens / stats.total_tokens if stats.total_tokens else 0.0,
        "per_attribute_counts": stats.per_attribute_counts,
        "total_label_tokens": stats.total_tokens,
        "complementarity": complementarity_report(masks),
        "score_errors": score_result.errors,
    }
    if any(ex.noise is not None for ex in train_ex):
        from .data import filter_quality

        report["filter_quality"] = filter_quality(masks, train_ex)
    return report
