"""Training loops: sequence transduction, masked-token pretraining, probing.

All loops run AdamW with linear warmup on the float64 tape, draw batches from
a seeded generator, and collect a checkpoint series — deep copies (and
optionally on-disk directories) taken at step 0 and every ``checkpoint_every``
updates.  A non-finite loss aborts the run with ``TrainingDiverged`` carrying
every checkpoint collected before the failure.

The probe is a 1-layer decoder trained to emit a sentence's bracketed parse
(``( ( A1 B1 ) C1 )`` as a token stream) while cross-attending to the frozen
encoder's final states; its predictions are repaired by ``delinearize`` and
scored with corpus PARSEVAL.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import treeval, trees
from .datasets import RESERVED, Corpus, TransductionExample, Vocab
from .encoder import EncoderConfig, TransformerModel, save_checkpoint
from .errors import ContractViolation, TrainingDiverged
from .numerics import (
    NEG_MASK,
    OptimizerState,
    Tensor,
    backward,
    cross_entropy,
    optimizer_step,
)

log = logging.getLogger("spantree.training")

OPEN, CLOSE = "(", ")"


@dataclass
class CheckpointInfo:
    """One collected checkpoint plus metrics measured when it was taken."""

    step: int
    model: TransformerModel
    train_loss: float | None = None
    iid_acc: float | None = None
    cg_acc: float | None = None
    path: str | None = None


def _check_finite(loss_value: float, step: int, series: list[CheckpointInfo]):
    if not np.isfinite(loss_value):
        raise TrainingDiverged(
            f"non-finite loss at step {step}; keeping {len(series)} checkpoints",
            checkpoints=series,
        )


def _encode_examples(examples, vocab: Vocab):
    return [(vocab.encode(ex.source), vocab.encode(ex.target)) for ex in examples]


def exact_match_accuracy(
    model: TransformerModel,
    examples: list[TransductionExample],
    max_new: int | None = None,
    limit: int | None = None,
    chunk: int = 64,
) -> float:
    """Fraction of examples whose greedy decode equals the target exactly."""
    subset = examples[: limit] if limit else list(examples)
    if not subset:
        raise ContractViolation("exact_match_accuracy: empty evaluation split")
    vocab = model.vocab
    if max_new is None:
        max_new = max(len(ex.target) for ex in subset) + 2
    correct = 0
    for lo in range(0, len(subset), chunk):
        batch = subset[lo : lo + chunk]
        decoded = model.greedy_decode([vocab.encode(ex.source) for ex in batch], max_new)
        for out, ex in zip(decoded, batch):
            if out == vocab.encode(ex.target):
                correct += 1
    return correct / len(subset)


def _maybe_save(model: TransformerModel, out_dir: str | None, step: int) -> str | None:
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"step-{step:05d}")
    return save_checkpoint(model, path)


def train_seq2seq(
    config: EncoderConfig,
    corpus: Corpus,
    steps: int = 3000,
    checkpoint_every: int = 200,
    seed: int = 0,
    batch_size: int = 32,
    base_lr: float = 3e-4,
    warmup_steps: int = 300,
    weight_decay: float = 0.01,
    eval_limit: int | None = 200,
    out_dir: str | None = None,
) -> list[CheckpointInfo]:
    """Train source->target transduction; returns the checkpoint series.

    Checkpoints (step 0, every ``checkpoint_every``, and the final step) carry
    exact-match accuracy on the iid-validation and compositional-test splits,
    each truncated to ``eval_limit`` examples.
    """
    if not corpus.train:
        raise ContractViolation("train_seq2seq: corpus has no train split")
    vocab = corpus.vocab
    config.vocab_size = len(vocab)
    model = TransformerModel(config, vocab, "seq2seq", rng=np.random.default_rng(seed))
    state = OptimizerState(
        base_lr=base_lr, warmup_steps=warmup_steps, weight_decay=weight_decay
    )
    pairs = _encode_examples(corpus.train, vocab)
    batch_rng = np.random.default_rng([seed, 1])
    series: list[CheckpointInfo] = []
    params = list(model.params.values())
    running: list[float] = []

    def collect(step: int, loss: float | None):
        snap = model.clone()
        info = CheckpointInfo(step=step, model=snap, train_loss=loss)
        if corpus.iid_val:
            info.iid_acc = exact_match_accuracy(snap, corpus.iid_val, limit=eval_limit)
        if corpus.cg_test:
            info.cg_acc = exact_match_accuracy(snap, corpus.cg_test, limit=eval_limit)
        info.path = _maybe_save(snap, out_dir, step)
        series.append(info)
        log.info(
            "step %d loss %s iid %s cg %s", step, loss, info.iid_acc, info.cg_acc
        )

    collect(0, None)
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, len(pairs), size=batch_size)
        loss = model.seq2seq_loss([pairs[i] for i in idx])
        _check_finite(float(loss.value), step, series)
        running.append(float(loss.value))
        backward(loss, params)
        optimizer_step(model.params, state)
        model.step = step
        if step % checkpoint_every == 0 or step == steps:
            collect(step, float(np.mean(running)))
            running.clear()
    return series


# ---------------------------------------------------------------------------
# masked-token pretraining
# ---------------------------------------------------------------------------


def mask_positions(rng: np.random.Generator, length: int, frac: float = 0.15) -> np.ndarray:
    """Choose positions to mask: floor(frac*n) plus a Bernoulli on the
    remainder (so the long-run fraction is exactly ``frac``), never fewer
    than one position."""
    if length < 2:
        raise ContractViolation("mask_positions needs length >= 2")
    want = frac * length
    count = int(np.floor(want))
    if rng.random() < want - count:
        count += 1
    count = max(1, min(count, length))
    return rng.choice(length, size=count, replace=False)


def make_mlm_batch(
    rng: np.random.Generator, sentences: list[list[int]], vocab: Vocab, frac: float = 0.15
):
    """Pad a batch and mask a seeded subset of real positions per sentence."""
    width = max(len(s) for s in sentences)
    original = np.full((len(sentences), width), vocab.pad, dtype=np.int64)
    for b, s in enumerate(sentences):
        original[b, : len(s)] = s
    masked = original.copy()
    loss_mask = np.zeros_like(original, dtype=np.float64)
    for b, s in enumerate(sentences):
        pos = mask_positions(rng, len(s), frac)
        masked[b, pos] = vocab.mask
        loss_mask[b, pos] = 1.0
    return masked, original, loss_mask


def masked_prediction_accuracy(
    model: TransformerModel,
    sentences: list[list[int]],
    seed: int = 0,
    frac: float = 0.15,
    limit: int | None = 256,
    chunk: int = 64,
) -> float:
    """Top-1 accuracy at masked positions under a fixed masking draw."""
    usable = [s for s in sentences if len(s) >= 2]
    usable = usable[:limit] if limit else usable
    if not usable:
        raise ContractViolation("masked_prediction_accuracy: no usable sentences")
    rng = np.random.default_rng([seed, 99])
    hit = total = 0
    for lo in range(0, len(usable), chunk):
        masked, original, loss_mask = make_mlm_batch(rng, usable[lo : lo + chunk], model.vocab, frac)
        pad_additive = np.where(original == model.vocab.pad, NEG_MASK, 0.0)[:, None, None, :]
        final = model.encoder_states_t(masked, [pad_additive] * model.config.enc_layers)[-1]
        logits = final.value @ model.params["mlm.w"].value + model.params["mlm.b"].value
        pred = logits.argmax(axis=-1)
        hit += int(((pred == original) & (loss_mask > 0)).sum())
        total += int(loss_mask.sum())
    return hit / total


def train_mlm(
    config: EncoderConfig,
    corpus: Corpus,
    steps: int = 3000,
    checkpoint_every: int = 200,
    seed: int = 0,
    batch_size: int = 32,
    base_lr: float = 3e-4,
    warmup_steps: int = 300,
    weight_decay: float = 0.01,
    mask_frac: float = 0.15,
    out_dir: str | None = None,
) -> list[CheckpointInfo]:
    """Masked-token pretraining on the corpus's source sentences.

    Sentences shorter than two tokens are skipped.  Checkpoint accuracy
    fields hold masked-token prediction accuracy on the iid-val and cg-test
    sources (there is no decoder to exact-match with).
    """
    vocab = corpus.vocab
    sentences = [vocab.encode(ex.source) for ex in corpus.train if len(ex.source) >= 2]
    if not sentences:
        raise ContractViolation("train_mlm: no trainable sentences")
    config.vocab_size = len(vocab)
    model = TransformerModel(config, vocab, "mlm", rng=np.random.default_rng(seed))
    state = OptimizerState(
        base_lr=base_lr, warmup_steps=warmup_steps, weight_decay=weight_decay
    )
    batch_rng = np.random.default_rng([seed, 2])
    series: list[CheckpointInfo] = []
    params = list(model.params.values())
    running: list[float] = []
    iid_sents = [vocab.encode(ex.source) for ex in corpus.iid_val]
    cg_sents = [vocab.encode(ex.source) for ex in corpus.cg_test]

    def collect(step: int, loss: float | None):
        snap = model.clone()
        info = CheckpointInfo(step=step, model=snap, train_loss=loss)
        if any(len(s) >= 2 for s in iid_sents):
            info.iid_acc = masked_prediction_accuracy(snap, iid_sents, seed=seed)
        if any(len(s) >= 2 for s in cg_sents):
            info.cg_acc = masked_prediction_accuracy(snap, cg_sents, seed=seed)
        info.path = _maybe_save(snap, out_dir, step)
        series.append(info)
        log.info("mlm step %d loss %s", step, loss)

    collect(0, None)
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, len(sentences), size=batch_size)
        masked, original, loss_mask = make_mlm_batch(
            batch_rng, [sentences[i] for i in idx], vocab, mask_frac
        )
        loss = model.mlm_loss(masked, original, loss_mask)
        _check_finite(float(loss.value), step, series)
        running.append(float(loss.value))
        backward(loss, params)
        optimizer_step(model.params, state)
        model.step = step
        if step % checkpoint_every == 0 or step == steps:
            collect(step, float(np.mean(running)))
            running.clear()
    return series


# ---------------------------------------------------------------------------
# probing for linearized trees
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    probe: TransformerModel
    p_parseval: float
    precision: float
    recall: float
    repaired: int
    coerced: int
    heldout: int


def probe_vocab_for(vocab: Vocab) -> Vocab:
    """Probe output vocabulary: the source tokens plus bracket tokens."""
    return Vocab(vocab.id_to_token[len(RESERVED) :] + [OPEN, CLOSE])


def _frozen_memory(encoder: TransformerModel, sources: list[list[int]]):
    """Final encoder states with gradients cut, plus the cross-attention mask."""
    src, additive = encoder._pad_sources(sources)
    memory = encoder.encoder_states_t(src, [additive] * encoder.config.enc_layers)[-1]
    return Tensor(memory.value), additive


def predicted_tree(decoded_tokens: list[str], n_leaves: int):
    """Tree from probe output: delinearize, then coerce any leaf-count
    mismatch (or unusable output) to a right-branching fallback."""
    tree, repaired = treeval.delinearize(decoded_tokens)
    coerced = False
    if tree is None or trees.leaf_count(tree) != n_leaves:
        tree, coerced = trees.right_branching(n_leaves), True
    return tree, repaired, coerced


def evaluate_probe(
    probe: TransformerModel,
    encoder: TransformerModel,
    examples: list[TransductionExample],
    max_new: int | None = None,
    chunk: int = 64,
) -> tuple[float, float, float, int, int]:
    """Corpus PARSEVAL of repaired probe decodes against gold trees."""
    if not examples:
        raise ContractViolation("evaluate_probe: empty evaluation set")
    if max_new is None:
        max_new = max(3 * len(ex.source) for ex in examples) + 2
    pairs = []
    repaired_count = coerced_count = 0
    for lo in range(0, len(examples), chunk):
        batch = examples[lo : lo + chunk]
        memory, additive = _frozen_memory(
            encoder, [encoder.vocab.encode(ex.source) for ex in batch]
        )
        decoded = probe.decode_with_memory(memory, additive, max_new)
        for out, ex in zip(decoded, batch):
            if ex.tree is None:
                raise ContractViolation("evaluate_probe: example has no gold tree")
            n_leaves = trees.leaf_count(ex.tree)
            tree, repaired, coerced = predicted_tree(probe.vocab.decode(out), n_leaves)
            repaired_count += int(repaired)
            coerced_count += int(coerced)
            pairs.append((tree, ex.tree))
    precision, recall, f1 = treeval.corpus_parseval(pairs)
    return precision, recall, f1, repaired_count, coerced_count


def train_probe(
    encoder: TransformerModel,
    train_examples: list[TransductionExample],
    heldout_examples: list[TransductionExample],
    steps: int = 1500,
    seed: int = 0,
    batch_size: int = 32,
    base_lr: float = 3e-4,
    warmup_steps: int = 150,
    weight_decay: float = 0.01,
    dec_layers: int = 1,
) -> ProbeResult:
    """Fit a small decoder to emit bracketed parses off frozen encoder states.

    The encoder is never updated; its final states enter the probe as
    constants.  Returns the probe plus held-out PARSEVAL (p_parseval).
    """
    usable = [ex for ex in train_examples if ex.tree is not None]
    if not usable:
        raise ContractViolation("train_probe: no examples with gold trees")
    probe_vocab = probe_vocab_for(encoder.vocab)
    max_target = max(3 * len(ex.source) for ex in usable) + 2
    config = EncoderConfig(
        enc_layers=encoder.config.enc_layers,
        dec_layers=dec_layers,
        heads=encoder.config.heads,
        d_model=encoder.config.d_model,
        d_ff=encoder.config.d_ff,
        vocab_size=len(probe_vocab),
        max_len=max(encoder.config.max_len, max_target),
    )
    probe = TransformerModel(config, probe_vocab, "probe", rng=np.random.default_rng(seed))
    state = OptimizerState(
        base_lr=base_lr, warmup_steps=warmup_steps, weight_decay=weight_decay
    )
    sources = [encoder.vocab.encode(ex.source) for ex in usable]
    targets = [
        probe_vocab.encode(treeval.linearize(ex.tree, ex.source)) for ex in usable
    ]
    batch_rng = np.random.default_rng([seed, 3])
    params = list(probe.params.values())
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, len(usable), size=batch_size)
        memory, additive = _frozen_memory(encoder, [sources[i] for i in idx])
        tgt_in, tgt_out, weights = probe._pad_targets([targets[i] for i in idx])
        logits = probe.decoder_logits(tgt_in, memory, additive)
        loss = cross_entropy(logits, tgt_out, weights)
        _check_finite(float(loss.value), step, [])
        backward(loss, params)
        optimizer_step(probe.params, state)
        probe.step = step
    precision, recall, f1, repaired, coerced = evaluate_probe(
        probe, encoder, heldout_examples
    )
    return ProbeResult(
        probe=probe,
        p_parseval=f1,
        precision=precision,
        recall=recall,
        repaired=repaired,
        coerced=coerced,
        heldout=len(heldout_examples),
    )
