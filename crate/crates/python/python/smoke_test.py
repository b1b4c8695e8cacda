"""Smoke test for the edgeprune Python extension.

Build the extension first:

    cargo build -p edgeprune-py --release

then run `python3 crates/python/python/smoke_test.py`. The script copies the
built library next to a temporary `edgeprune.so` and imports it.
"""

import json
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", "..", ".."))


def find_library():
    explicit = os.environ.get("EDGEPRUNE_LIB")
    if explicit:
        return explicit
    for profile in ("release", "debug"):
        for name in ("libedgeprune_py.so", "libedgeprune_py.dylib"):
            path = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(path):
                return path
    sys.exit("extension not built; run `cargo build -p edgeprune-py --release`")


def main():
    tmp = tempfile.mkdtemp()
    shutil.copy(find_library(), os.path.join(tmp, "edgeprune.so"))
    sys.path.insert(0, tmp)
    import edgeprune as ep

    # Compiled model: its ground truth reproduces the full model.
    c = ep.Compiled("reverse")
    model, gt = c.model, c.ground_truth
    assert gt.n_kept == 8, gt
    tokens = [c.encode(["1", "2", "3"])]
    full = model.logits(tokens)
    circ = model.circuit_logits(tokens, tokens, gt, ablation="zero")
    argmax = lambda row: max(range(len(row)), key=row.__getitem__)
    assert [argmax(r) for r in full[0][1:]] == [argmax(r) for r in circ[0][1:]]
    assert [argmax(r) for r in full[0][1:]] == c.encode(["3", "2", "1"])[1:]

    # Circuit round trip and export.
    again = ep.Circuit.from_json(model, gt.to_json(model))
    assert again == gt
    assert json.loads(gt.to_json(model))["model_config_hash"] == model.config_hash
    assert gt.to_dot(model).count("->") == 8
    common, overlap, _ = gt.intersection(ep.Circuit.full(model))
    assert common == gt and overlap == 1.0

    # Short pruning run with the fixture's configuration.
    cfg = json.loads(c.prune_config())
    cfg["steps"] = 20
    cfg["sparsity_warmup_steps"] = 10
    cfg["lr_warmup_steps"] = 5
    circuit, sparsity = ep.prune(model, c.dataset(32, 1), json.dumps(cfg))
    assert len(sparsity) == 20 and 0 <= circuit.n_kept <= model.n_edges

    # Toy task with a random model: baselines and evaluation run.
    task = ep.Task.generate("ioi", seed=1, n_names=6, train=8, validation=8, test=8)
    pairs = task.split("train")
    m = ep.Model.random(1, 2, 8, task.vocab_size, 16, seed=3)
    scores = ep.eap(m, pairs)
    assert len(scores) == m.n_edges and all(s >= 0 for s in scores)
    top = ep.eap_circuit(m, pairs, 4)
    assert top.n_kept == 4
    assert ep.acdc(m, pairs, float("inf")).n_kept == 0
    report = task.evaluate(m, ep.Circuit.full(m), split="test")
    assert report["exact_match"] == 1.0 and abs(report["kl"]) < 1e-6, report
    assert ep.kl(m, ep.Circuit.full(m), pairs) < 1e-6

    try:
        ep.Compiled("sort")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown program accepted")

    shutil.rmtree(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
