"""Smoke test for the `dlf` extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math
import os
import random
import tempfile

import dlf


def synthetic(n, vocab, seed):
    rng = random.Random(seed)
    weights = [[rng.uniform(-1.5, 1.5) for _ in range(v)] for v in vocab]
    rows, labels = [], []
    for _ in range(n):
        row = [rng.randrange(1, v) for v in vocab]
        z = sum(w[i] for w, i in zip(weights, row))
        labels.append(int(rng.random() < 1 / (1 + math.exp(-z))))
        rows.append(row)
    return rows, labels


def main():
    assert abs(dlf.logloss([0.5, 0.5], [1.0, 0.0]) - math.log(2)) < 1e-12
    assert dlf.auc([0.1, 0.9, 0.4], [0.0, 1.0, 1.0]) == 1.0
    assert "naf" in dlf.FUSION_MODES and "no_gate" in dlf.ABLATIONS

    vocab = [8, 6, 10]
    model = dlf.Model(vocab, d=8, rank=4, layers=2, seed=3)
    print(model)
    assert model.n_fields == 3
    assert "head.weight" in model.param_names()
    values, shape = model.param("head.weight")
    assert shape == [1, 24] and len(values) == 24

    rows, labels = synthetic(1200, vocab, 0)
    before = model.loss(rows[:840], labels[:840])
    history = model.fit(rows[:840], labels[:840], rows[840:1080], labels[840:1080],
                        lr=0.01, batch_size=64, epochs=4, seed=3)
    after = model.loss(rows[:840], labels[:840])
    print("epochs:", [round(h["val_auc"], 4) for h in history])
    assert after < before, (before, after)
    auc, logloss = model.evaluate(rows[1080:], labels[1080:])
    print(f"test auc {auc:.4f} logloss {logloss:.4f}")
    assert auc > 0.6

    probs = model.predict([rows[0], rows[0], [0, 0, 0]])
    assert probs[0] == probs[1] and all(0 < p < 1 for p in probs)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.dlfc")
        model.save(path)
        again = dlf.Model.load(path)
        assert again.predict(rows[:50]) == model.predict(rows[:50])

    for name in model.param_names():
        values, _ = model.param(name)
        model.set_param(name, [0.0] * len(values))
    assert model.predict(rows[:5]) == [0.5] * 5

    try:
        dlf.Model(vocab, d=8, rank=9)
    except ValueError as e:
        assert "rank" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    try:
        model.predict([[99, 0, 0]])
    except ValueError as e:
        assert "outside vocabulary" in str(e)
    else:
        raise AssertionError("out-of-range id accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
