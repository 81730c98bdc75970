"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py`` to see the PASS/FAIL lines in the
terminal summary. The two trained models are built once per session.
"""

import itertools
import math
import time
from decimal import Decimal

import numpy as np
import pytest
import torch

from regressformer import data as D
from regressformer import evaluation as E
from regressformer.data import Example
from regressformer.decoding import beam_search
from regressformer.encodings import EncodingConfig, numeral_encoding
from regressformer.masking import FactorizationOrder, build_attention_masks
from regressformer.model import ModelConfig, RegressionTransformer, gradients, nll_loss, rank_masks
from regressformer.objectives import CGEN, PROPERTY, TrainerConfig, alternation, cgen_step, encode_examples, sc_step, train
from regressformer.tokenizer import PropertySpec, Vocabulary, detokenize_number, tokenize_number

pytestmark = pytest.mark.slow

# model and schedule for the synthetic regression runs
REGRESSION_TRAINER = TrainerConfig(steps=10_000, batch_size=32, lr=1e-3, lr_schedule="cosine", alpha=1.0, seed=0)
DECORATION_TRAINER = TrainerConfig(steps=3_000, batch_size=32, lr=1e-3, lr_schedule="cosine", alpha=1.0, seed=0)
MODEL = ModelConfig(n_layers=2, d_e=64, n_heads=4)


# -- fast identities ----------------------------------------------------------


def test_c01_tokenizer_round_trip(criterion):
    with criterion(1, "tokenizer round trip", budget=1.0) as c:
        rng = np.random.default_rng(2024)
        places = rng.integers(0, 4, size=10_000)
        mags = rng.integers(-999_999, 1_000_000, size=10_000)
        exact = 0
        for d, m in zip(places, mags):
            x = Decimal(int(m) // 10 ** (3 - int(d))).scaleb(-int(d))
            exact += detokenize_number(tokenize_number(str(x))) == x
        c.check(exact == 10_000, f"{exact}/10000 exact")


def test_c02_numeral_encoding_geometry(criterion):
    with criterion(2, "float NE geometry on 0..100", budget=1.0) as c:
        cfg = EncodingConfig(mode="float", ne_dim=16)
        ne = np.stack([numeral_encoding(tokenize_number(str(x)), cfg) for x in range(101)])
        dist = np.sqrt(((ne[:, None] - ne[None]) ** 2).sum(-1))
        symmetric = np.array_equal(dist, dist.T)
        bad = 0
        for a in range(101):
            gap = np.abs(np.arange(101) - a)
            for g in range(1, gap.max()):
                if gap.tolist().count(g + 1) and dist[a, gap == g].max() >= dist[a, gap == g + 1].min():
                    bad += 1
        c.check(symmetric and bad == 0, f"symmetric={symmetric}, monotonicity violations={bad}")


def test_c03_mask_oracle(criterion):
    with criterion(3, "attention masks vs brute force", budget=1.0) as c:
        checked, wrong = 0, 0
        for T in range(1, 6):
            for z in itertools.permutations(range(T)):
                rank = {pos: r for r, pos in enumerate(z)}
                content = np.array([[rank[j] <= rank[i] for j in range(T)] for i in range(T)])
                query = np.array([[rank[j] < rank[i] for j in range(T)] for i in range(T)])
                m = build_attention_masks(FactorizationOrder(np.array(z), 0))
                wrong += not (np.array_equal(m.content, content) and np.array_equal(m.query, query))
                checked += 1
        c.check(checked == 153 and wrong == 0, f"{checked} permutations, {wrong} mismatches")


def test_c04_gradient_check(criterion):
    with criterion(4, "finite-difference gradient check", budget=30.0) as c:
        vocab = Vocabulary.build([PropertySpec("q", 1, 1)], list("ABC"))
        cfg = ModelConfig(n_layers=1, d_e=8, d_ff=16, n_heads=2, encoding=EncodingConfig(ne_dim=4, d_e=8))
        model = RegressionTransformer.for_vocab(cfg, vocab, seed=5).double()
        ids = torch.as_tensor([vocab.ids(["<q>", "5_0", "A", "B", "C"])])
        z = np.array([2, 0, 4, 1, 3])
        content, query = rank_masks(torch.as_tensor(FactorizationOrder(z, 2).ranks())[None])
        targets = torch.as_tensor(z[2:])[None]
        gold = ids[0, targets]

        def loss_fn():
            return nll_loss(model(ids, content, query, targets), gold)

        grads = gradients(loss_fn(), model)
        worst, h = 0.0, 1e-5
        with torch.no_grad():
            for name, p in model.named_parameters():
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + h
                    up = loss_fn().item()
                    flat[i] = old - h
                    down = loss_fn().item()
                    flat[i] = old
                    num = (up - down) / (2 * h)
                    ana = grads[name].view(-1)[i].item()
                    worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        c.check(worst <= 1e-3, f"max relative error {worst:.2e}")


def test_c05_objective_identities(criterion):
    with criterion(5, "sc(alpha=0) == cgen and alternation") as c:
        vocab = Vocabulary.build([PropertySpec("p", 1, 2)], list("ABCD"))
        rng = np.random.default_rng(0)
        batch = encode_examples(
            [Example(list(rng.choice(list("ABCD"), size=n)), {"p": round(float(rng.random()), 2)}) for n in (6, 9, 7)],
            vocab,
        )
        model = RegressionTransformer.for_vocab(ModelConfig(n_layers=1, d_e=16, d_ff=32, n_heads=2), vocab, seed=0)
        a = sc_step(model, batch, np.random.default_rng(5), vocab, alpha=0.0)
        b = cgen_step(model, batch, np.random.default_rng(5), vocab)
        schedule = [alternation(s, 50) for s in range(100)] == [PROPERTY] * 50 + [CGEN] * 50
        c.check(torch.equal(a, b) and schedule, f"bit-exact={torch.equal(a, b)}, schedule={schedule}")


def test_c06_beam_correctness(criterion):
    with criterion(6, "beam search vs enumeration", budget=1.0) as c:
        ok_full = ok_greedy = True
        for seed in range(20):
            rng = np.random.default_rng(seed)
            table = [{(): rng.normal(size=3)}, {(i,): rng.normal(size=3) for i in range(3)}]
            table = [{k: v - np.log(np.exp(v).sum()) for k, v in t.items()} for t in table]

            def fn(items, t, prefixes, table=table):
                return np.stack([table[t][tuple(p)] for p in prefixes])

            combos = sorted(
                itertools.product(range(3), repeat=2), key=lambda cb: -(table[0][()][cb[0]] + table[1][cb[:1]][cb[1]])
            )
            (full,) = beam_search(fn, [2], width=9)
            ok_full &= [b.choices for b in full] == combos
            first = int(np.argmax(table[0][()]))
            greedy = (first, int(np.argmax(table[1][(first,)])))
            (one,) = beam_search(fn, [2], width=1)
            ok_greedy &= one[0].choices == greedy
        c.check(ok_full and ok_greedy, f"exhaustive={ok_full}, greedy={ok_greedy} over 20 tables")


def test_c07_metric_oracles(criterion):
    with criterion(7, "metric oracles") as c:
        errs = [
            abs(E.rmse([1, 2, 5], [1, 2, 3]) - math.sqrt(4 / 3)),
            abs(E.r2([1, 2, 5], [1, 2, 3]) - (1 - 4 / 2)),
            abs(E.pcc([1, 2, 3, 4], [2, 4, 5, 9]) - 11 / math.sqrt(5 * 26)),
            abs(E.spearman([1, 2, 2, 3], [1, 2, 3, 4]) - 4.5 / math.sqrt(4.5 * 5)),
            abs(E.spearman([3, 1, 2, 2, 5], [10, 30, 20, 20, 0]) - (-1.0)),
        ]
        c.check(max(errs) <= 1e-9, f"max error {max(errs):.1e}")


# -- trained models -----------------------------------------------------------


@pytest.fixture(scope="session")
def regression_run():
    full = D.synth_generate(D.FRACTION_OF_A, 21_000, length=20, alphabet=10, seed=0, decimals=2)
    train_set, test_set = full[:20_000], full[20_000:]
    vocab = Vocabulary.build([PropertySpec("frac", 1, 2)], D.text_symbols([full]))
    start = time.perf_counter()
    result = train(train_set, vocab, REGRESSION_TRAINER, MODEL)
    result.model.eval()
    return {
        "model": result.model,
        "vocab": vocab,
        "train": train_set,
        "test": test_set,
        "train_seconds": time.perf_counter() - start,
    }


@pytest.fixture(scope="session")
def sweeps(regression_run):
    r = regression_run
    seeds = r["test"][:100]
    start = time.perf_counter()
    external = E.primer_sweep(
        r["model"], r["vocab"], seeds, E.text_oracle(D.synthetic_oracle(D.FRACTION_OF_A)),
        n_primers=10, mask_fraction=0.4, train_texts={tuple(ex.tokens) for ex in r["train"]},
    )  # fmt: skip
    seconds = time.perf_counter() - start
    own = E.primer_sweep(r["model"], r["vocab"], seeds, E.self_oracle(r["model"], r["vocab"], "frac"), n_primers=10)
    return external, own, seconds


def test_c08_synthetic_regression(criterion, regression_run):
    r = regression_run
    with criterion(8, "synthetic regression") as c:
        rep, _, _ = E.regression_eval(r["model"], r["vocab"], r["test"])
        ok = rep.spearman_rho >= 0.8 and rep.rmse <= 0.10 and r["train_seconds"] <= 1800
        c.check(ok, f"rho={rep.spearman_rho:.4f} rmse={rep.rmse:.4f} train={r['train_seconds']:.0f}s")


def test_c09_conditional_generation(criterion, sweeps):
    external, _, seconds = sweeps
    with criterion(9, "primer sweep") as c:
        rep = external.report
        ok = rep.spearman_rho >= 0.5 and rep.zero_var_fraction <= 0.10 and rep.novelty_fraction >= 0.90 and seconds <= 300
        c.check(
            ok,
            f"rho={rep.spearman_rho:.3f} 0-Var={rep.zero_var_fraction:.2f} "
            f"novelty={rep.novelty_fraction:.3f} sweep={seconds:.0f}s",
        )


def test_c11_self_external_agreement(criterion, sweeps):
    external, own, _ = sweeps
    with criterion(11, "self vs external rho sign") as c:
        a, b = external.report.spearman_rho, own.report.spearman_rho
        c.check(np.sign(a) == np.sign(b) != 0, f"external={a:.3f} self={b:.3f}")


def test_c12_knn_baseline(criterion, regression_run):
    r = regression_run
    with criterion(12, "k-NN baseline") as c:
        pairs = [(ex.tokens, ex.props["frac"]) for ex in r["train"]]
        golds = [ex.props["frac"] for ex in r["test"]]
        knn = E.regression_report(E.knn_baseline(pairs, [ex.tokens for ex in r["test"]], k=25), golds)
        model, _, _ = E.regression_eval(r["model"], r["vocab"], r["test"])
        ok = knn.spearman_rho >= 0.5 and model.spearman_rho > knn.spearman_rho and model.rmse < knn.rmse
        c.check(
            ok,
            f"knn rho={knn.spearman_rho:.4f} rmse={knn.rmse:.4f}; "
            f"model rho={model.spearman_rho:.4f} rmse={model.rmse:.4f}",
        )


def test_c10_decoration(criterion):
    with criterion(10, "segment decoration", budget=600.0) as c:
        full = D.synth_generate(D.SEGMENTED_YIELD, 10_100, length=20, alphabet=10, seed=0, decimals=2)
        train_set, test_set = full[:10_000], full[10_000:]
        vocab = Vocabulary.build([PropertySpec("yield", 1, 2)], D.text_symbols([full]))
        model = train(train_set, vocab, DECORATION_TRAINER, MODEL).model
        oracle = E.text_oracle(D.synthetic_oracle(D.SEGMENTED_YIELD, 10))
        texts = {tuple(ex.tokens) for ex in train_set}
        rep = E.decoration_eval(model, vocab, test_set, oracle, segment=0, boost=0.2, top_k=5, train_texts=texts)
        segs = {tuple(ex.segment(0)) for ex in train_set}
        strict = E.decoration_eval(model, vocab, test_set, oracle, segment=0, boost=0.2, top_k=5, train_segments=segs)
        c.check(
            rep.success_rate >= 0.5,
            f"success={rep.success_rate:.2f} gain={rep.mean_improvement:.3f} "
            f"(segment-level filter: success={strict.success_rate:.2f})",
        )
