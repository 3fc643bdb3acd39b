import math

import numpy as np
import pytest

from hglm.data import Corpus, CorpusError, load_checkpoint, save_checkpoint
from hglm.model import ModelConfig, init_weights
from hglm.tensor import Tensor
from hglm.training import (
    MetricsRecord,
    OptimizerState,
    TrainConfig,
    adamw_step,
    compare_models,
    evaluate,
    loss,
    lr_at,
    metrics_csv_lines,
    paired_csv_lines,
    train,
)

from gradcheck import fd_gradient, max_rel_err


def tiny_model(seed=0, **overrides):
    base = dict(d_model=16, d_h=8, n_layers=1, n_heads=2, ffn_kind="hourglass",
                ffn_blocks=2, vocab_size=32, max_seq=16)
    base.update(overrides)
    cfg = ModelConfig(**base)
    return cfg, init_weights(cfg, seed=seed)


def repeated_corpus(n_bytes: int) -> Corpus:
    pattern = b"the quick brown fox jumps over the lazy dog. " * 4 + b"0123456789\n"
    blob = (pattern * (n_bytes // len(pattern) + 1))[:n_bytes]
    return Corpus.from_bytes(blob)


# -- schedule ---------------------------------------------------------------------


SCHED = TrainConfig(peak_lr=6e-4, warmup_tokens=1000, total_tokens=11000, min_lr_fraction=0.1)


def test_lr_starts_at_zero():
    assert lr_at(0, SCHED) == 0.0


def test_lr_peak_at_warmup_end():
    assert lr_at(1000, SCHED) == SCHED.peak_lr


def test_lr_cosine_midpoint():
    mid = (SCHED.warmup_tokens + SCHED.total_tokens) // 2
    expected = (SCHED.peak_lr + SCHED.min_lr_fraction * SCHED.peak_lr) / 2
    assert math.isclose(lr_at(mid, SCHED), expected, rel_tol=1e-12)


def test_lr_floor_at_end():
    assert math.isclose(lr_at(11000, SCHED), 0.1 * SCHED.peak_lr, rel_tol=1e-12)


def test_lr_is_continuous():
    prev = lr_at(0, SCHED)
    worst = 0.0
    for t in range(1, SCHED.total_tokens + 1):
        cur = lr_at(t, SCHED)
        worst = max(worst, abs(cur - prev))
        prev = cur
    # One-token increments move lr by at most peak/warmup.
    assert worst <= SCHED.peak_lr / SCHED.warmup_tokens + 1e-15


def test_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_at(-1, SCHED)
    with pytest.raises(ValueError):
        lr_at(SCHED.total_tokens + 1, SCHED)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_tokens=10, total_tokens=5)
    with pytest.raises(ValueError):
        TrainConfig(batch_tokens=100, seq_len=64, total_tokens=1000)


def test_train_config_defaults_match_recipe():
    cfg = TrainConfig()
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay) == (0.9, 0.95, 1e-8, 0.1)
    assert cfg.seed == 6198


# -- loss --------------------------------------------------------------------------


def test_loss_uniform_logits():
    logits = Tensor(np.zeros((4, 256)))
    out = loss(logits, [1, 2, 3, 4], zloss_coeff=0.0)
    assert abs(float(out.data) - math.log(256)) < 1e-12


def test_loss_zloss_term():
    logits = Tensor(np.zeros((2, 4)))
    base = float(loss(logits, [0, 1], zloss_coeff=0.0).data)
    with_z = float(loss(logits, [0, 1], zloss_coeff=0.5).data)
    assert math.isclose(with_z - base, 0.5 * math.log(4) ** 2, rel_tol=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits_data = rng.uniform(-2, 2, (5, 7))
    logits = Tensor(logits_data, requires_grad=True)
    targets = [0, 3, 6, 1, 1]
    loss(logits, targets, zloss_coeff=1e-2).backward()
    numeric = fd_gradient(
        lambda: float(loss(Tensor(logits_data), targets, zloss_coeff=1e-2).data),
        logits_data,
    )
    assert max_rel_err(logits.grad, numeric) < 1e-4


# -- adamw --------------------------------------------------------------------------


def test_zero_gradient_step_is_pure_decay():
    cfg, model = tiny_model(seed=2)
    tcfg = TrainConfig(total_tokens=0)
    state = OptimizerState.init_for(model)
    before = {name: p.data.copy() for name, p in model.parameters()}
    lr = 1e-2
    adamw_step(model.parameters(), state, lr, tcfg)
    for name, p in model.parameters():
        if name == "embedding" or name.endswith("gamma"):
            assert np.array_equal(p.data, before[name]), name
        else:
            assert np.array_equal(p.data, before[name] * (1.0 - lr * tcfg.weight_decay)), name


def test_repeated_zero_grad_steps_shrink_exactly():
    cfg, model = tiny_model(seed=3)
    tcfg = TrainConfig(total_tokens=0)
    state = OptimizerState.init_for(model)
    expected = model.layers[0].w_q.data.copy()
    lr = 5e-3
    for _ in range(4):
        adamw_step(model.parameters(), state, lr, tcfg)
        expected *= 1.0 - lr * tcfg.weight_decay  # one exact shrink per step
    assert np.array_equal(model.layers[0].w_q.data, expected)


def test_first_step_moves_by_lr_sign():
    # With eps -> 0 the bias-corrected first update is exactly -lr * sign(g).
    cfg, model = tiny_model(seed=4)
    tcfg = TrainConfig(total_tokens=0, weight_decay=0.0, adam_eps=1e-300)
    state = OptimizerState.init_for(model)
    w = model.layers[0].w_q
    before = w.data.copy()
    g = np.random.default_rng(5).normal(0, 1, w.data.shape)
    w.grad = g.copy()
    lr = 1e-3
    adamw_step(model.parameters(), state, lr, tcfg)
    assert np.allclose(w.data, before - lr * np.sign(g), atol=1e-12)


def test_two_optimizers_agree_bitwise():
    results = []
    for _ in range(2):
        cfg, model = tiny_model(seed=6)
        tcfg = TrainConfig(total_tokens=0)
        state = OptimizerState.init_for(model)
        rng = np.random.default_rng(7)
        for _, p in model.parameters():
            p.grad = rng.normal(0, 1, p.data.shape)
        for step in range(3):
            adamw_step(model.parameters(), state, 1e-3, tcfg)
        results.append({name: p.data.copy() for name, p in model.parameters()})
    for name in results[0]:
        assert np.array_equal(results[0][name], results[1][name])


# -- evaluate ------------------------------------------------------------------------


def test_evaluate_zero_head_is_uniform():
    cfg, model = tiny_model(seed=8, vocab_size=256)
    model.head.data[:] = 0.0
    val = repeated_corpus(400)
    val_loss, val_ppl = evaluate(model, val, seq_len=16)
    assert abs(val_loss - math.log(256)) < 1e-12
    assert math.isclose(val_ppl, 256.0, rel_tol=1e-12)


def test_evaluate_ppl_is_exp_loss():
    cfg, model = tiny_model(seed=9, vocab_size=256)
    val = repeated_corpus(300)
    val_loss, val_ppl = evaluate(model, val, seq_len=8)
    assert math.isclose(val_ppl, math.exp(val_loss), rel_tol=1e-15)


def test_evaluate_deterministic():
    cfg, model = tiny_model(seed=10, vocab_size=256)
    val = repeated_corpus(300)
    assert evaluate(model, val, 8) == evaluate(model, val, 8)


def test_evaluate_rejects_empty():
    cfg, model = tiny_model(seed=11)
    with pytest.raises(CorpusError):
        evaluate(model, Corpus(tokens=np.array([], dtype=np.int64)), 8)


# -- train loop ------------------------------------------------------------------------


def test_zero_budget_returns_model_unchanged():
    cfg, model = tiny_model(seed=12, vocab_size=256)
    before = {name: p.data.copy() for name, p in model.parameters()}
    records, state = train(model, repeated_corpus(500), TrainConfig(total_tokens=0))
    assert records == []
    assert state.step == 0
    for name, p in model.parameters():
        assert np.array_equal(p.data, before[name])


def test_train_rejects_insufficient_corpus():
    cfg, model = tiny_model(seed=13, vocab_size=256)
    tcfg = TrainConfig(total_tokens=4096, batch_tokens=128, seq_len=32, warmup_tokens=0)
    with pytest.raises(CorpusError):
        train(model, repeated_corpus(200), tcfg)


def test_train_determinism():
    tcfg = TrainConfig(peak_lr=1e-3, warmup_tokens=128, total_tokens=1280,
                       batch_tokens=128, seq_len=32, seed=6198)
    streams = []
    for _ in range(2):
        cfg, model = tiny_model(seed=14, vocab_size=256, max_seq=64)
        records, _ = train(model, repeated_corpus(4000), tcfg, log_every=2)
        streams.append(records)
    assert streams[0] == streams[1]  # bit-identical metric stream


def test_tiny_run_learns_repeated_text():
    # 200 steps on repeated text must land well under the uniform baseline.
    cfg = ModelConfig(d_model=64, d_h=24, n_layers=2, n_heads=4,
                      ffn_kind="hourglass", ffn_blocks=2, vocab_size=256, max_seq=64)
    model = init_weights(cfg, seed=6198)
    tcfg = TrainConfig(peak_lr=3e-3, warmup_tokens=1280, total_tokens=256 * 200,
                       batch_tokens=256, seq_len=64, seed=6198)
    records, _ = train(model, repeated_corpus(60000), tcfg, log_every=20)
    final = records[-1].train_loss
    assert final < 0.7 * math.log(256), f"final loss {final}"


def test_resume_matches_straight_run():
    tcfg = TrainConfig(peak_lr=1e-3, warmup_tokens=256, total_tokens=2560,
                       batch_tokens=256, seq_len=32, seed=6198)
    corpus = repeated_corpus(6000)

    cfg, straight = tiny_model(seed=15, vocab_size=256, max_seq=64)
    records_full, _ = train(straight, corpus, tcfg, log_every=1)

    cfg, resumed = tiny_model(seed=15, vocab_size=256, max_seq=64)
    first, state = train(resumed, corpus, tcfg, stop_after_tokens=1024, log_every=1)
    # Resume bookkeeping continues the full schedule.
    rest, _ = train(resumed, corpus, tcfg, state=state, tokens_seen=1024, log_every=1)
    for name, p in straight.parameters():
        q = dict(resumed.parameters())[name]
        assert np.array_equal(p.data, q.data), name


def test_checkpoint_resume_bit_exact(tmp_path):
    tcfg = TrainConfig(peak_lr=1e-3, warmup_tokens=256, total_tokens=2048,
                       batch_tokens=256, seq_len=32, seed=6198)
    corpus = repeated_corpus(5000)

    cfg, straight = tiny_model(seed=16, vocab_size=256, max_seq=64)
    train(straight, corpus, tcfg)

    cfg, partial = tiny_model(seed=16, vocab_size=256, max_seq=64)
    _, state = train(partial, corpus, tcfg, stop_after_tokens=1024)
    path = str(tmp_path / "mid.ckpt")
    save_checkpoint(partial, path, state=state, tokens_seen=1024)
    loaded, loaded_state, tokens_seen = load_checkpoint(path)
    train(loaded, corpus, tcfg, state=loaded_state, tokens_seen=tokens_seen)

    for (name, p), (_, q) in zip(straight.parameters(), loaded.parameters()):
        assert np.array_equal(p.data, q.data), name


def test_paired_streams_identical_batches():
    # Two different shapes consuming the same (corpus, seed) see identical data.
    corpus = repeated_corpus(4000)
    tcfg = TrainConfig(peak_lr=1e-3, warmup_tokens=128, total_tokens=768,
                       batch_tokens=128, seq_len=32, seed=6198)
    cfg_a = ModelConfig(d_model=16, d_h=48, n_layers=1, n_heads=2,
                        ffn_kind="conventional", vocab_size=256, max_seq=32)
    cfg_b = ModelConfig(d_model=16, d_h=8, n_layers=1, n_heads=2,
                        ffn_kind="hourglass", ffn_blocks=4, vocab_size=256, max_seq=32)
    ra, rb, _, _ = compare_models(cfg_a, cfg_b, tcfg, corpus, log_every=1)
    assert [r.step for r in ra] == [r.step for r in rb]
    assert [r.tokens_seen for r in ra] == [r.tokens_seen for r in rb]
    assert [r.lr for r in ra] == [r.lr for r in rb]


# -- metrics CSV --------------------------------------------------------------------


def test_metrics_csv_schema():
    records = [
        MetricsRecord(step=1, tokens_seen=256, lr=0.001, train_loss=5.0),
        MetricsRecord(step=2, tokens_seen=512, lr=0.002, train_loss=4.0,
                      val_loss=4.5, val_ppl=math.exp(4.5)),
    ]
    lines = metrics_csv_lines(records)
    assert lines[0] == "step,tokens_seen,lr,train_loss,val_loss,val_ppl"
    assert lines[1] == "1,256,0.001,5.0,,"
    assert lines[2].startswith("2,512,0.002,4.0,4.5,")


def test_paired_csv_alignment_guard():
    a = [MetricsRecord(step=1, tokens_seen=256, lr=0.1, train_loss=1.0)]
    b = [MetricsRecord(step=2, tokens_seen=512, lr=0.1, train_loss=1.0)]
    with pytest.raises(ValueError):
        paired_csv_lines(a, b)
