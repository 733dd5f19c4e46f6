"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin && maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/syscall_novelty-*.whl
"""

import math
import os
import tempfile

import syscall_novelty as sn

SMALL = """
train_count = 300
val_count = 60
test_count = 60
width = 16
heads = 2
d_e = 8
max_epochs = 1
"""


def main():
    train = sn.generate_split("train_id", SMALL)
    val = sn.generate_split("val_id", SMALL)
    test_id = sn.generate_split("test_id", SMALL)
    test_mix = sn.generate_split("test_mixture", SMALL)
    assert len(train) == 300 and train[0].label == "id"
    assert sum(train[0].deltas_ns) == train[0].timestamps_ns[-1] - train[0].timestamps_ns[0]

    req = sn.Request(["open", "read", "close"], [0, 1000, 3000])
    assert req.deltas_ns == [0, 1000, 2000] and len(req) == 3

    ngram = sn.Model.fit_ngram(train, n=4, alpha=0.01)
    id_pp = ngram.score(test_id)
    mix_pp = ngram.score(test_mix)
    auc = sn.auroc(id_pp, mix_pp)
    threshold, f = sn.calibrate_threshold(ngram.score(val), ngram.score(sn.generate_split("val_mixture", SMALL)))
    precision, recall, f_test = sn.detection_metrics(id_pp, mix_pp, threshold)
    print(f"4-gram mixture: AuROC {auc:.3f}, threshold {threshold:.3f}, test F {f_test:.3f}")
    assert auc > 0.9 and f_test > 0.8

    assert math.isclose(sn.perplexity_of(16 * math.log(0.95), 16), 1 / 0.95)
    assert math.isclose(ngram.perplexity(train[0]), math.exp(-ngram.log_prob(train[0]) / len(train[0])))

    lstm = sn.Model.train(train, val, "lstm", SMALL)
    ce, acc = lstm.evaluate(val)
    print(f"lstm after one epoch: val CE {ce:.3f} nats, accuracy {acc:.3f}")
    assert math.isfinite(ce) and 0.0 <= acc <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "lstm.ckpt")
        lstm.save(path, seed=7)
        loaded, seed = sn.Model.load(path)
        assert seed == 7 and loaded.architecture == "lstm"
        assert loaded.score(test_id[:5]) == lstm.score(test_id[:5])

    curve = lstm.inject_delays(val[0], sn.log_grid(1e3, 1e6, 5), [0, 1, 2])
    assert len(curve) == 5
    print("smoke test passed")


if __name__ == "__main__":
    main()
