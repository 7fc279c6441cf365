#!/usr/bin/env python3
"""Smoke test for the epgs_py extension module.

Build the module first:

    cargo build --release -p epgs-py

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile


def locate_library():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for profile in ("release", "debug"):
        cand = os.path.join(root, "target", profile, "libepgs_py.so")
        if os.path.exists(cand):
            return cand
    raise SystemExit("libepgs_py.so not found; run `cargo build --release -p epgs-py` first")


def import_module():
    lib = locate_library()
    tmp = tempfile.mkdtemp(prefix="epgs_py_")
    shutil.copy(lib, os.path.join(tmp, "epgs_py.so"))
    sys.path.insert(0, tmp)
    import epgs_py

    return epgs_py


def check(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        raise SystemExit(1)


def main():
    epgs_py = import_module()
    check("module import", True)

    corpus = epgs_py.Corpus.generate(
        n_facts=6, n_singletons=4, n_transient=3, redundancy=4, n_templates=6, seed=5
    )
    check(
        "corpus counts",
        corpus.train_sequence_count() == 6 * 4 + 4 and corpus.eval_example_count() == 13,
        f"{corpus.train_sequence_count()} train / {corpus.eval_example_count()} eval",
    )

    model = epgs_py.Model.init(
        vocab_size=256, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=16, seed=1
    )
    loss, grad_norm = model.train(corpus, steps=400, batch_size=16, learning_rate=1e-3, seed=2)
    check("training converges", loss < 0.1, f"final loss {loss:.4f}, grad norm {grad_norm:.4f}")

    prompt, reference, category = corpus.example(0)
    ids, probs = model.greedy(prompt)
    check(
        "greedy recalls a trained fact",
        category == "fact" and ids == reference and all(p > 0.5 for p in probs),
        f"answer {ids} vs reference {reference}",
    )

    score0, _, cos0 = model.epgs_score(corpus, 0, sigma=0.0)
    check("zero-noise identity", score0 == 0.0 and cos0 == 1.0, f"S={score0}, cos={cos0}")

    score, norm, cos = model.epgs_score(corpus, 0, sigma=0.1, seed=9)
    product_ok = abs(score - norm * (1.0 - cos)) <= 1e-12
    check(
        "EPGS product identity",
        math.isfinite(score) and score >= 0.0 and product_ok,
        f"S={score:.6g}",
    )

    lam = model.lambda_max(corpus, 0, iters=15, seed=3)
    check("power iteration runs", math.isfinite(lam), f"lambda_max={lam:.6g}")

    kl = model.kl_stability(corpus, 0, rho=0.2, n_samples=4, seed=4)
    check("KL stability non-negative", kl >= 0.0, f"kl={kl:.6g}")

    a = epgs_py.auroc([0.8, 0.3, 0.6, 0.2], [1, 1, 0, 0])
    check("AUROC hand case", abs(a - 0.75) < 1e-12, f"auroc={a}")

    report = json.loads(epgs_py.benchmark_json(model, corpus, seed=11))
    check(
        "benchmark report well-formed",
        report["n_examples"] == 13 and "epgs" in report["auroc"],
        f"stubborn subset size {report['n_stubborn_subset']}",
    )

    # Round-trip a checkpoint through a temp file.
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        reloaded = epgs_py.Model.load(path)
        ids2, _ = reloaded.greedy(prompt)
        check("checkpoint round-trip", ids2 == ids)

    print("smoke test OK")


if __name__ == "__main__":
    main()
