import math

import numpy as np
import pytest

from subnetlab.model import EncoderConfig, init_model
from subnetlab.pipeline import (ExperimentSpec, GridContext, GridRunner, MissingCellError,
                                RunResult, TrainConfig, avg_downstream_language,
                                avg_subnetwork_performance, derive_subnetwork,
                                downstream_finetune, evaluate, pretrain_base, run_grid,
                                split_language, upstream_finetune, validation_ctc_loss)
from subnetlab.synthlang import (CorpusSpec, build_corpus, make_embedding_table,
                                 make_language)

CFG = EncoderConfig(num_layers=1, model_dim=16, num_heads=2, ffn_dim=24,
                    input_dim=8, vocab_size=27, max_len=128)


@pytest.fixture(scope="module")
def corpus():
    langs = {"A": make_language(21, language_id="A"),
             "B": make_language(22, language_id="B")}
    table = make_embedding_table(9, CFG.input_dim)
    return build_corpus(CorpusSpec({"A": 0.5, "B": 0.5}, 40), langs, seed=9,
                        input_dim=CFG.input_dim, embedding_table=table)


def test_pretrain_zero_epochs_returns_initialization(corpus):
    out = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=0, seed=4))
    assert out.equals_bitwise(init_model(CFG, seed=4))


def test_pretrain_deterministic_and_loss_decreases(corpus):
    losses1, losses2 = [], []
    a = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=6, seed=4),
                      epoch_losses=losses1)
    b = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=6, seed=4),
                      epoch_losses=losses2)
    assert a.equals_bitwise(b)
    assert losses1 == losses2
    assert losses1[-1] < losses1[0]
    assert not any(p.startswith("pretrain/") for p in a.paths())
    assert a.paths() == init_model(CFG, seed=4).paths()


def test_pretrain_empty_corpus_rejected():
    with pytest.raises(ValueError):
        pretrain_base([], CFG, TrainConfig(epochs=1, seed=0))


def test_best_epoch_rule():
    from subnetlab.pipeline import select_best_epoch
    assert select_best_epoch([2.0, 1.1, 1.3]) == 2
    assert select_best_epoch([1.0, 1.0]) == 1  # tie -> earliest
    assert select_best_epoch([3.0]) == 1
    assert select_best_epoch([]) == 0


def test_upstream_selects_lowest_validation_epoch(corpus):
    result = upstream_finetune(init_model(CFG, seed=1), "A", corpus,
                               TrainConfig(epochs=3, seed=2))
    assert len(result.val_losses) == len(result.train_losses) == 3
    best = min(range(3), key=lambda i: (result.val_losses[i], i))
    assert result.best_epoch == best + 1
    assert min(result.val_losses) == result.val_losses[result.best_epoch - 1]
    # returned checkpoint really is the argmin snapshot
    assert validation_ctc_loss(result.best, split_language(corpus["val"], "A")) == \
        pytest.approx(min(result.val_losses))


def test_downstream_matched_schedule_and_projection(corpus):
    up = upstream_finetune(init_model(CFG, seed=1), "A", corpus, TrainConfig(epochs=1, seed=2))
    mask = derive_subnetwork(up.best, 0.6)
    seen = []

    def step_hook(params):
        seen.append(max(float(np.abs(params[p][mask[p] == 0]).max()) if (mask[p] == 0).any()
                        else 0.0 for p in mask))

    res = downstream_finetune(up.best, mask, "A", corpus,
                              TrainConfig(epochs=2, seed=3), matched=True,
                              step_hook=step_hook)
    assert res.epochs_run == 2
    assert len(res.train_losses) == len(res.val_losses) == 2
    assert seen and max(seen) == 0.0  # pruned weights exactly zero after every step
    for p in mask:
        assert np.all(res.model[p][mask[p] == 0] == 0.0)


def test_downstream_unmatched_freezes_everything_but_head(corpus):
    up = upstream_finetune(init_model(CFG, seed=1), "A", corpus, TrainConfig(epochs=1, seed=2))
    mask = derive_subnetwork(up.best, 0.3)
    start = up.best.copy()
    snapshots = {}
    res = downstream_finetune(up.best, mask, "B", corpus,
                              TrainConfig(epochs=1, seed=3), matched=False,
                              epoch_hook=lambda e, p: snapshots.setdefault(e, p.copy()))
    assert res.epochs_run == 2  # 1 frozen + config.epochs
    masked_start = start.copy()
    for p in mask:
        masked_start[p] = masked_start[p] * mask[p]
    after_freeze = snapshots[0]
    for path in start.paths():
        if not path.startswith("ctc_head/"):
            assert np.array_equal(after_freeze[path].view(np.uint8),
                                  masked_start[path].view(np.uint8)), path
    assert not np.array_equal(after_freeze["ctc_head/weight"], start["ctc_head/weight"])


def test_evaluate_contract(corpus):
    params = init_model(CFG, seed=5)
    test = split_language(corpus["test"], "A")
    first, second = evaluate(params, test), evaluate(params, test)
    assert first == second
    assert first > 50.0  # untrained model decodes mostly garbage
    with pytest.raises(ValueError):
        evaluate(params, [])


def test_evaluate_perfect_decoder_scores_zero(corpus, monkeypatch):
    # oracle logits: nearest-embedding per frame (noise-free corpus, 1 frame/char)
    langs = {"A": make_language(21, language_id="A")}
    table = make_embedding_table(9, CFG.input_dim)
    clean = build_corpus(CorpusSpec({"A": 1.0}, 12), langs, seed=9,
                         input_dim=CFG.input_dim, noise_sigma=0.0,
                         embedding_table=table)
    no_repeat = [u for u in clean["test"] + clean["train"] + clean["val"]
                 if all(a != b for a, b in zip(u.text, u.text[1:]))][:5]
    assert no_repeat

    def oracle(params, frames):
        # with sigma=0 every frame equals an embedding row, possibly repeated
        idx = np.argmin(((frames[:, None, :] - table[None]) ** 2).sum(-1), axis=1)
        logits = np.full((frames.shape[0], CFG.vocab_size), -10.0, dtype=np.float32)
        logits[np.arange(frames.shape[0]), idx + 1] = 10.0
        return logits

    import subnetlab.pipeline as pl
    monkeypatch.setattr(pl, "forward_values", oracle)
    collapsible = [u for u in no_repeat]
    assert evaluate(init_model(CFG, seed=5), collapsible) == 0.0


def _fake_results():
    rows = []
    for up, down, s, cer in [("A", "A", 0.9, 10.0), ("A", "B", 0.9, 20.0),
                             ("A", "C", 0.9, 30.0), ("B", "A", 0.9, 40.0),
                             ("B", "B", 0.9, 50.0), ("B", "C", 0.9, 60.0)]:
        rows.append(RunResult(upstream=up, downstream=down, mask_source="self",
                              sparsity=s, seed=0, cer=cer))
    return rows


def test_avg_subnetwork_performance_semantics():
    rows = _fake_results()
    assert avg_subnetwork_performance(rows, "A")[0.9] == pytest.approx(25.0)
    assert avg_subnetwork_performance(rows, "A", exclude_matched=False)[0.9] == \
        pytest.approx(20.0)
    assert avg_subnetwork_performance(rows, "B")[0.9] == pytest.approx(50.0)


def test_avg_downstream_language_semantics():
    rows = _fake_results()
    # downstream A from foreign upstream B only
    assert avg_downstream_language(rows, "A")[0.9] == pytest.approx(40.0)
    assert avg_downstream_language(rows, "C")[0.9] == pytest.approx(45.0)
    # grid with a single foreign upstream: the mean is that cell
    single = [r for r in rows if r.upstream == "A"]
    assert avg_downstream_language(single, "C")[0.9] == pytest.approx(30.0)


def test_avg_missing_cell_is_named():
    rows = _fake_results()[:-1]  # drop (B, C)
    with pytest.raises(MissingCellError, match="downstream='C'"):
        avg_subnetwork_performance(rows, "B")
    with pytest.raises(MissingCellError, match="no results"):
        avg_subnetwork_performance(rows, "Z")


def test_table_style_average_arithmetic():
    values = {"En": 11.74, "Es": 6.61, "As": 11.53, "Xh": 10.57}
    rows = [RunResult(upstream="En", downstream=d, mask_source="self",
                      sparsity=0.7, seed=0, cer=c) for d, c in values.items()]
    avg = avg_subnetwork_performance(rows, "En", exclude_matched=False)[0.7]
    assert avg == pytest.approx(10.11, abs=0.01)


def test_run_grid_cardinality_order_and_determinism(corpus):
    base = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=1, seed=4))
    ctx = GridContext(base=base, corpus=corpus,
                      upstream_config=TrainConfig(epochs=1, seed=0),
                      downstream_config=TrainConfig(epochs=1, seed=0))
    specs = [ExperimentSpec(u, d, (0.5, 0.9), ("self",), (0,))
             for u in ("A", "B") for d in ("A", "B")]
    results = run_grid(specs, ctx)
    assert len(results) == 8
    assert all(r.error is None for r in results)
    keys = [r.sort_key() for r in results]
    assert keys == sorted(keys)
    again = run_grid(specs, ctx)
    assert [r.cer for r in results] == [r.cer for r in again]
    assert run_grid([], ctx) == []


def test_run_grid_isolates_cell_failures(corpus):
    base = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=1, seed=4))
    ctx = GridContext(base=base, corpus=corpus,
                      upstream_config=TrainConfig(epochs=1, seed=0),
                      downstream_config=TrainConfig(epochs=1, seed=0))
    specs = [ExperimentSpec("A", "A", (0.9,), ("self",), (0,)),
             ExperimentSpec("A", "ZZ", (0.9,), ("self",), (0,))]  # no such corpus language
    results = run_grid(specs, ctx)
    by_down = {r.downstream: r for r in results}
    assert by_down["A"].error is None and not math.isnan(by_down["A"].cer)
    assert by_down["ZZ"].error is not None and math.isnan(by_down["ZZ"].cer)


def test_run_grid_mask_exchange_and_union(corpus):
    base = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=1, seed=4))
    ctx = GridContext(base=base, corpus=corpus,
                      upstream_config=TrainConfig(epochs=3, lr=3e-3, seed=0),
                      downstream_config=TrainConfig(epochs=1, seed=0))
    runner = GridRunner(ctx)
    res_other = runner.run_cell(ExperimentSpec("A", "A", (0.8,), ("other", "B"), (0,)), 0.8, 0)
    assert res_other.error is None
    assert res_other.mask_source == "other:B"
    mask_a = runner.mask_for(("A",), 0.8, 0)
    mask_b = runner.mask_for(("B",), 0.8, 0)
    union = runner.mask_for(("A", "B"), 0.8, 0)
    for p in union:
        assert np.array_equal(union[p], mask_a[p] | mask_b[p])
    # the exchanged-mask run applied B's mask to A's model: A's upstream weights
    # survive exactly where B's mask says so
    assert any(not np.array_equal(mask_a[p], mask_b[p]) for p in mask_a)


def test_upstream_and_mask_memoization(corpus):
    base = pretrain_base(corpus["train"], CFG, TrainConfig(epochs=1, seed=4))
    ctx = GridContext(base=base, corpus=corpus,
                      upstream_config=TrainConfig(epochs=1, seed=0),
                      downstream_config=TrainConfig(epochs=1, seed=0))
    runner = GridRunner(ctx)
    first = runner.upstream_for("A", 0)
    assert runner.upstream_for("A", 0) is first
    mask = runner.mask_for(("A",), 0.9, 0)
    assert runner.mask_for(("A",), 0.9, 0) is mask
