"""Quick check of the compiled `dept` module.

Run after `maturin develop` (or with the built library on PYTHONPATH):

    python crates/py/python/smoke_test.py
"""

import math

import dept


def tensors():
    a = dept.Tensor([1.0, 2.0, 3.0, 4.0], [2, 2], requires_grad=True)
    b = dept.Tensor([0.5, -1.0, 2.0, 0.0], [2, 2])
    loss = a.matmul(b).sum()
    loss.backward()
    assert a.shape == [2, 2]
    assert math.isclose(loss.values()[0], 10.0)
    assert a.grad() == [-0.5, 2.0, -0.5, 2.0]


def budget():
    sol = dept.solve_budget(100, 768, 256, 40)
    assert sol["r"] == 45, sol


def adapters():
    backbone = dept.Backbone({"vocab_size": 64, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
                              "max_seq_len": 16, "max_prompt_len": 24}, seed=1)
    vanilla = dept.Adapter.vanilla(backbone, 8)
    decomposed = dept.Adapter.dept(backbone, 4, 2)
    assert decomposed.variant == "dept" and decomposed.rank == 2
    assert decomposed.trainable_params <= vanilla.trainable_params
    seqs = [[3, 30, 31], [4, 40]]
    logits = decomposed.logits(backbone, seqs)
    assert len(logits) == 2 and all(len(row) == 64 for row in logits)
    assert len(backbone.logits(seqs)[1]) == 64
    assert dept.flop_count(backbone, 12)["total"] > 0


def training():
    cfg = dept.resolve_config({
        "backbone": {"vocab_size": 64, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
                     "max_seq_len": 16, "max_prompt_len": 24},
        "pretrain": {"max_prefix": 8},
        "task": {"n_train": 32, "n_eval": 16},
        "peft": {"budget_len": 8, "m": 4},
    }, {"train.steps": 10, "train.eval_every": 5, "train.batch_size": 8})
    backbone = dept.Backbone(cfg["backbone"], seed=2)
    adapter, report = dept.train(backbone, cfg, seed=3)
    assert len(report["curve"]) == 2
    metric = dept.evaluate(backbone, adapter, cfg)
    assert 0.0 <= metric["accuracy"] <= 1.0


if __name__ == "__main__":
    for check in (tensors, budget, adapters, training):
        check()
        print(f"ok {check.__name__}")
    print(f"dept {dept.__version__}: all checks passed")
