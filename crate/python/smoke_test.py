"""Smoke test for the compre_probe extension module.

Build and install first, e.g.

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/compre_probe-*.whl
"""

import math
import os
import tempfile

import compre_probe as cp


def main():
    assert cp.tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    toks = [f"t{i}" for i in range(10)]
    assert cp.extract_context(toks, 30) == ["t0", "t1", "t2"]
    assert cp.extract_context(toks, 20, mode="end") == ["t8", "t9"]
    assert abs(sum(cp.softmax([1.0, 2.0, 3.0])) - 1.0) < 1e-12
    assert math.isclose(cp.oracle_context_free_accuracy(0.5, 4), 0.625)

    item = cp.McqItem("q1", "the cat sat", "Where ?", ["mat", "hat"], 0)
    corpus = cp.Corpus("tiny", [item, cp.McqItem("q2", "a b", "Who ?", ["x", "y", "z"], 2)])
    assert len(corpus) == 2 and corpus.validate() == []
    try:
        cp.McqItem("bad", "c", "q ?", ["only"], 0)
    except ValueError:
        pass
    else:
        raise AssertionError("one-option item accepted")

    train = cp.generate_synth(size=2000, leak_rate=1.0, seed=1)
    test = cp.generate_synth(size=500, leak_rate=1.0, seed=2)
    cf = cp.train_toy(train, mode="context_free", learning_rate=0.3)
    ev = cp.evaluate(cf, test, mode="context_free")
    print("context-free accuracy with full leakage:", round(ev.accuracy, 3))
    assert ev.accuracy > 0.9
    assert len(ev.predictions) == len(test)

    probs = cf.score(test.items[0], mode="context_free")
    assert abs(sum(probs) - 1.0) < 1e-9

    matcher = cp.Scorer.keyword_matcher()
    front = cp.generate_synth(size=300, position_profile="front", seed=3)
    pos = cp.positional_study(matcher, front, tau=20)
    print("keyword matcher, front profile:", pos)
    assert pos["beginning"] == 1.0 and pos["end"] < 0.5

    curve = cp.sweep_tau(matcher, front)
    assert [t for t, _ in curve] == list(range(0, 101, 10))
    assert curve[-1][1] == 1.0

    rows = cp.world_knowledge_report(matcher, cf, [test])
    assert rows[0]["corpus"] == test.name and rows[0]["random"] == 0.25

    labels = cp.classify(matcher, cf, test)
    assert {l for _, l, _ in labels} <= {"zero", "partial", "full"}

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        cf.save(path)
        again = cp.Scorer.load(path)
        assert again.score(test.items[0], mode="context_free") == probs
        ens = cp.Scorer.ensemble([cf, again])
        assert math.isclose(cp.evaluate(ens, test, mode="context_free").accuracy, ev.accuracy)
        out = os.path.join(d, "s.jsonl")
        assert cp.cli_main(["synth", "--out", out, "--size", "10"]) == 0
        assert len(cp.Corpus.load(out)) == 10
        assert cp.cli_main(["synth", "--bogus"]) == 1

    print("smoke test passed")


if __name__ == "__main__":
    main()
