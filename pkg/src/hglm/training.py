"""AdamW with decoupled decay, warmup+cosine schedule, the training
objective, and a deterministic token-budgeted train/eval loop.

Schedule bookkeeping is token-based: warmup and decay horizons are counted
in tokens, not steps, and two runs that consume identical token streams with
identical seeds produce bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Corpus, CorpusError, batch_iterator, window_count
from .model import LanguageModel, ModelConfig, init_weights, lm_forward
from .tensor import Tensor, cross_entropy

METRICS_CSV_HEADER = "step,tokens_seen,lr,train_loss,val_loss,val_ppl"


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_tokens: int = 0
    total_tokens: int = 0
    batch_tokens: int = 256
    seq_len: int = 64
    seed: int = 6198
    zloss_coeff: float = 1e-4
    min_lr_fraction: float = 0.1
    grad_clip: float = 1.0  # global L2 clip; 0 disables

    def __post_init__(self):
        if not 0 <= self.warmup_tokens <= max(self.total_tokens, 0):
            raise ValueError(
                f"warmup_tokens {self.warmup_tokens} must lie in [0, total_tokens={self.total_tokens}]"
            )
        if self.seq_len <= 0 or self.batch_tokens <= 0:
            raise ValueError("seq_len and batch_tokens must be positive")
        if self.batch_tokens % self.seq_len != 0:
            raise ValueError(
                f"batch_tokens {self.batch_tokens} must be a multiple of seq_len {self.seq_len}"
            )


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init_for(cls, model: LanguageModel) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in model.parameters()},
            v={name: np.zeros_like(p.data) for name, p in model.parameters()},
            step=0,
        )


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    tokens_seen: int
    lr: float
    train_loss: float
    val_loss: float | None = None
    val_ppl: float | None = None


def lr_at(tokens_seen: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to min_lr_fraction * peak_lr."""
    if not 0 <= tokens_seen <= cfg.total_tokens:
        raise ValueError(f"tokens_seen {tokens_seen} outside [0, {cfg.total_tokens}]")
    if cfg.warmup_tokens > 0 and tokens_seen <= cfg.warmup_tokens:
        # At the boundary this is peak_lr exactly (t/w = 1.0).
        return cfg.peak_lr * tokens_seen / cfg.warmup_tokens
    span = cfg.total_tokens - cfg.warmup_tokens
    if span <= 0:
        return cfg.peak_lr
    progress = (tokens_seen - cfg.warmup_tokens) / span
    floor = cfg.min_lr_fraction * cfg.peak_lr
    return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def loss(logits: Tensor, targets, zloss_coeff: float) -> Tensor:
    """Mean token cross-entropy plus the squared-log-partition penalty."""
    return cross_entropy(logits, targets, z_coeff=zloss_coeff)


def _decay_exempt(name: str) -> bool:
    return name == "embedding" or name.endswith("gamma")


def adamw_step(params, state: OptimizerState, lr: float, cfg: TrainConfig) -> OptimizerState:
    """One bias-corrected Adam update with decoupled multiplicative decay.

    params is an iterable of (name, Tensor); tensors with grad None are
    treated as zero-gradient. Norm scales and the token embedding are exempt
    from decay. Mutates weights and state in place and returns the state.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay != 0.0 and not _decay_exempt(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return state


def clip_gradients(model: LanguageModel, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in model.parameters():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in model.parameters():
            if p.grad is not None:
                p.grad *= scale
    return norm


def evaluate(model: LanguageModel, val_tokens, seq_len: int) -> tuple[float, float]:
    """Mean token cross-entropy over non-overlapping windows, and its exp."""
    tokens = val_tokens.tokens if isinstance(val_tokens, Corpus) else np.asarray(val_tokens)
    n = window_count(tokens.shape[0], seq_len)
    if n == 0:
        raise CorpusError(
            f"validation stream of {tokens.shape[0]} tokens has no window of length {seq_len}"
        )
    total = 0.0
    for w in range(n):
        start = w * seq_len
        logits = lm_forward(tokens[start : start + seq_len], model)
        total += float(cross_entropy(logits, tokens[start + 1 : start + seq_len + 1]).data)
    val_loss = total / n
    return val_loss, math.exp(val_loss)


def train(
    model: LanguageModel,
    corpus: Corpus,
    tcfg: TrainConfig,
    *,
    state: OptimizerState | None = None,
    tokens_seen: int = 0,
    stop_after_tokens: int | None = None,
    log_every: int = 50,
    val_corpus: Corpus | None = None,
    eval_every: int = 0,
    allow_wrap: bool = False,
) -> tuple[list[MetricsRecord], OptimizerState]:
    """Run the token budget down, logging metrics at a fixed cadence.

    Fully deterministic given (corpus, tcfg, initial weights): the batch
    stream is a seeded permutation and every update is sequential. Passing
    state/tokens_seen resumes an interrupted run on the same stream;
    stop_after_tokens pauses mid-schedule without altering it.
    """
    if state is None:
        state = OptimizerState.init_for(model)
    corpus.check_vocab(model.config.vocab_size)
    steps = tcfg.total_tokens // tcfg.batch_tokens
    if stop_after_tokens is not None:
        steps = min(steps, stop_after_tokens // tcfg.batch_tokens)
    done = tokens_seen // tcfg.batch_tokens
    seqs_per_step = tcfg.batch_tokens // tcfg.seq_len
    if not allow_wrap:
        needed = steps * seqs_per_step
        have = window_count(len(corpus), tcfg.seq_len)
        if needed > have:
            raise CorpusError(
                f"run needs {needed} windows of {tcfg.seq_len} tokens but the corpus has {have}"
            )
    records: list[MetricsRecord] = []
    if steps == done:
        return records, state
    batches = batch_iterator(
        corpus, tcfg.seq_len, tcfg.batch_tokens, tcfg.seed,
        skip_tokens=tokens_seen, allow_wrap=allow_wrap,
    )
    for step in range(done + 1, steps + 1):
        step_loss = 0.0
        for _ in range(seqs_per_step):
            inputs, targets = next(batches)
            seq_loss = loss(lm_forward(inputs, model), targets, tcfg.zloss_coeff)
            seq_loss.backward()
            step_loss += float(seq_loss.data)
        step_loss /= seqs_per_step
        if seqs_per_step > 1:
            for _, p in model.parameters():
                if p.grad is not None:
                    p.grad /= seqs_per_step
        if tcfg.grad_clip > 0:
            clip_gradients(model, tcfg.grad_clip)
        tokens_seen += tcfg.batch_tokens
        lr = lr_at(min(tokens_seen, tcfg.total_tokens), tcfg)
        adamw_step(model.parameters(), state, lr, tcfg)
        for _, p in model.parameters():
            p.grad = None
        if step % log_every == 0 or step == steps:
            val_loss = val_ppl = None
            if val_corpus is not None and eval_every and (
                step % eval_every == 0 or step == steps
            ):
                val_loss, val_ppl = evaluate(model, val_corpus, tcfg.seq_len)
            records.append(
                MetricsRecord(
                    step=step,
                    tokens_seen=tokens_seen,
                    lr=lr,
                    train_loss=step_loss,
                    val_loss=val_loss,
                    val_ppl=val_ppl,
                )
            )
    return records, state


def metrics_csv_lines(records: list[MetricsRecord]) -> list[str]:
    lines = [METRICS_CSV_HEADER]
    for r in records:
        val_loss = "" if r.val_loss is None else repr(r.val_loss)
        val_ppl = "" if r.val_ppl is None else repr(r.val_ppl)
        lines.append(
            f"{r.step},{r.tokens_seen},{r.lr!r},{r.train_loss!r},{val_loss},{val_ppl}"
        )
    return lines


def write_metrics_csv(records: list[MetricsRecord], fh) -> None:
    for line in metrics_csv_lines(records):
        fh.write(line + "\n")


def compare_models(
    cfg_a: ModelConfig,
    cfg_b: ModelConfig,
    tcfg: TrainConfig,
    corpus: Corpus,
    *,
    val_corpus: Corpus | None = None,
    log_every: int = 50,
    eval_every: int = 0,
) -> tuple[list[MetricsRecord], list[MetricsRecord], LanguageModel, LanguageModel]:
    """Train both shapes on the identical token stream with identical seeds.

    Pairing is by construction: the same corpus, seed and batching feed both
    runs, so the metric streams are step-aligned.
    """
    results = []
    models = []
    for cfg in (cfg_a, cfg_b):
        model = init_weights(cfg, seed=tcfg.seed)
        records, _ = train(
            model, corpus, tcfg,
            log_every=log_every, val_corpus=val_corpus, eval_every=eval_every,
        )
        results.append(records)
        models.append(model)
    return results[0], results[1], models[0], models[1]


PAIRED_CSV_HEADER = (
    "step,tokens_seen,lr,"
    "train_loss_a,val_loss_a,val_ppl_a,train_loss_b,val_loss_b,val_ppl_b"
)


def paired_csv_lines(records_a: list[MetricsRecord], records_b: list[MetricsRecord]) -> list[str]:
    if len(records_a) != len(records_b):
        raise ValueError("paired runs logged different numbers of records")
    lines = [PAIRED_CSV_HEADER]
    for ra, rb in zip(records_a, records_b):
        if (ra.step, ra.tokens_seen) != (rb.step, rb.tokens_seen):
            raise ValueError(f"paired records diverge at step {ra.step} vs {rb.step}")
        cells = [str(ra.step), str(ra.tokens_seen), repr(ra.lr)]
        for r in (ra, rb):
            cells.append(repr(r.train_loss))
            cells.append("" if r.val_loss is None else repr(r.val_loss))
            cells.append("" if r.val_ppl is None else repr(r.val_ppl))
        lines.append(",".join(cells))
    return lines
