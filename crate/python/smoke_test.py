"""Smoke test for the sentorder_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import os
import tempfile

import sentorder_py as so


def main():
    with tempfile.TemporaryDirectory() as tmp:
        syn = os.path.join(tmp, "syn")
        docs, heldout, pairs = so.make_synthetic(syn, seed=3, docs=20, sentences=6, pairs=40)
        assert (docs, heldout) == (20, 50), (docs, heldout)

        with open(os.path.join(syn, "train.txt")) as f:
            corpus = so.Corpus.from_text(f.read())
        assert len(corpus) == 20 and corpus.sentence_count() == 120

        vocab = so.Vocab.build(corpus, 1000)
        first = corpus.documents()[0][0]
        assert all(i > 4 for i in vocab.encode(first))

        sampler = so.Sampler(corpus, vocab, "pn3", max_len=32)
        assert sampler.labels() == ["IsNext", "IsPrev", "DiffDoc"]
        batch = sampler.sample(50, seed=5, workers=2)
        again = sampler.sample(50, seed=5, workers=2)
        assert [e.tokens for e in batch] == [e.tokens for e in again]
        assert all(e.tokens[0] == 2 and len(e.tokens) <= 32 for e in batch)

        assert so.build_target("IsNext", "pn3") == [1.0, 0.0, 0.0]
        smooth = so.build_target("IsNextInadj", "pnsmth")
        assert all(math.isclose(a, b) for a, b in zip(smooth, [0.8, 0.1, 0.1]))

        assert so.lr_at(0, 1000, lr_max=1e-4, warmup=0.1) < so.lr_at(99, 1000, lr_max=1e-4, warmup=0.1)
        assert so.grad_check(seed=10) < 1e-4

        run = os.path.join(tmp, "run")
        model, rows = so.pretrain(corpus, vocab, "pn3", steps=10, seed=1, out=run, batch_size=8, max_len=32, metrics_every=5)
        assert rows and rows[-1][0] == 10
        assert model.num_parameters() > 0 and model.scheme() == "pn3"

        probs = model.predict(vocab, first, corpus.documents()[0][1])
        assert len(probs) == 3 and math.isclose(sum(probs), 1.0, rel_tol=1e-9)

        acc, per_label = so.evaluate_order(model, corpus, vocab, n=30, seed=1)
        assert 0.0 <= acc <= 1.0 and set(per_label) <= {"IsNext", "IsPrev", "DiffDoc"}

        loaded = so.Model.load(os.path.join(run, "final"))
        assert loaded.predict(vocab, first, first) == model.predict(vocab, first, first)

        report = so.probe_swap(model, vocab, os.path.join(syn, "pairs.tsv"), seed=1, runs=1)
        assert 0.0 <= report["accuracy_original"] <= 1.0

    print("smoke test ok")


if __name__ == "__main__":
    main()
