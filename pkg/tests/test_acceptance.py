"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line to the terminal
(bypassing capture) and then asserts. The reference schedule is the default
:class:`ExperimentConfig`: 10 Gaussian classes in 16 dimensions, base 5,
five steps of one class, 100 train samples per class, memory 5 per class.
"""

import time

import numpy as np
import pytest

from balanced_il import autodiff as ad
from balanced_il import experiment as ex
from balanced_il.autodiff import Tape, Tensor, backward, grad_check
from balanced_il.losses import (
    ClassPrior,
    balanced_ce_gradient,
    balanced_softmax_ce,
    build_lambda,
    combined_loss,
    distillation_loss,
    rescaled_softmax_ce,
    standard_softmax_ce,
)
from balanced_il.memory import herding_select
from balanced_il.model import ClassifierModel
from balanced_il.trainer import (
    MetaState,
    TrainConfig,
    meta_alpha_update,
    step_context,
    virtual_update,
)

SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, seconds, budget, detail):
        ok = ok and (budget is None or seconds < budget)
        limit = f" (limit {budget:.0f} s)" if budget else ""
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  "
                  f"[{seconds:.1f} s{limit}]")
        return ok

    return emit


def reference(**fields) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig()
    for key, value in fields.items():
        cfg.set(key.replace("__", "."), value)
    return cfg


def run_seeds(**fields):
    return [ex.execute(reference(run__seed=s, **fields)) for s in SEEDS]


def old_accuracy(report):
    return report.group(0, report.newest_group[0])


# ----------------------------------------------------------------------------


def test_criterion_1_loss_equivalences(verdict):
    t0 = time.perf_counter()
    worst = {"equal_counts": 0.0, "scale": 0.0, "old_zero": 0.0}
    alpha_exact = relaxed_exact = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, b = int(rng.integers(3, 8)), int(rng.integers(1, 9))
        n_old = int(rng.integers(1, n))
        z = rng.normal(scale=4, size=(b, n))
        y = rng.integers(0, n, size=b)
        y_new = rng.integers(n_old, n, size=b)
        counts = rng.integers(1, 500, size=n)
        old = set(range(n_old))

        eq = balanced_softmax_ce(z, y, np.full(n, counts[0])).item()
        worst["equal_counts"] = max(worst["equal_counts"],
                                    abs(eq - standard_softmax_ce(z, y).item()))

        prior = ClassPrior(counts, old, alpha=1.0)
        alpha_exact &= build_lambda(prior, "alpha").tobytes() == build_lambda(
            prior, "balanced").tobytes()

        no_old = counts.copy()
        no_old[:n_old] = 0
        relaxed = build_lambda(ClassPrior(counts, old, epsilon=0.0), "relaxed")
        balanced = build_lambda(ClassPrior(no_old, old), "balanced")
        relaxed_exact &= relaxed.tobytes() == balanced.tobytes()
        relaxed_exact &= (balanced_softmax_ce(z, y_new, relaxed).item()
                          == balanced_softmax_ce(z, y_new, balanced).item())

        c = float(rng.uniform(1e-3, 1e3))
        worst["scale"] = max(worst["scale"], abs(balanced_softmax_ce(z, y, counts).item()
                                                 - balanced_softmax_ce(z, y, c * counts).item()))

        flat_new = np.where(np.arange(n) < n_old, 0.0, float(counts[-1]))
        masked = balanced_softmax_ce(z, y_new, flat_new).item()
        restricted = standard_softmax_ce(z[:, n_old:], y_new - n_old).item()
        worst["old_zero"] = max(worst["old_zero"], abs(masked - restricted))

    seconds = time.perf_counter() - t0
    ok = (worst["equal_counts"] <= 1e-12 and worst["scale"] <= 1e-10
          and worst["old_zero"] <= 1e-12 and alpha_exact and relaxed_exact)
    detail = (f"equal-counts {worst['equal_counts']:.1e}, alpha=1 exact {alpha_exact}, "
              f"eps=0 exact {relaxed_exact}, scale {worst['scale']:.1e}, "
              f"old-zero {worst['old_zero']:.1e}")
    assert verdict(1, ok, seconds, 10, detail)


def _op_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    other, pos = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
    w34, w32, w3, w4, w33 = (rng.normal(size=s) for s in [(3, 4), (3, 2), (3,), (4,), (3, 3)])
    idx = rng.integers(0, 4, size=3)

    def proj(t, w):
        return ad.sum(ad.mul(t, w))

    return {
        "matmul_left": (lambda x: proj(ad.matmul(x, b), w32), a),
        "matmul_right": (lambda x: proj(ad.matmul(a, x), w32), b),
        "add": (lambda x: proj(ad.add(x, other), w34), a),
        "sub": (lambda x: proj(ad.sub(other, x), w34), a),
        "mul": (lambda x: proj(ad.mul(x, other), w34), a),
        "scalar_mul": (lambda x: proj(ad.mul(other, x), w34), np.array(0.7 + rng.normal())),
        "scale": (lambda x: proj(ad.scale(x, -1.7), w34), a),
        "negate": (lambda x: proj(ad.negate(x), w34), a),
        "relu": (lambda x: proj(ad.relu(x), w34), a + np.sign(a) * 0.05),
        "exp": (lambda x: proj(ad.exp(x), w34), a),
        "log": (lambda x: proj(ad.log(x), w34), pos),
        "sum_all": (lambda x: ad.scale(ad.sum(x), 0.3), a),
        "sum_axis": (lambda x: proj(ad.sum(x, axis=1), w3), a),
        "mean": (lambda x: proj(ad.mean(x, axis=0), w4), a),
        "logsumexp": (lambda x: proj(ad.logsumexp(x, axis=1), w3), a),
        "add_rowwise": (lambda x: proj(ad.add_rowwise(other, x), w34), w4.copy()),
        "sub_colwise": (lambda x: proj(ad.sub_colwise(other, x), w34), w3.copy()),
        "pick": (lambda x: proj(ad.pick(x, idx), w3), a),
        "take_cols": (lambda x: proj(ad.take_cols(x, [2, 0, 2]), w33), a),
    }


def _loss_cases(rng):
    z = rng.normal(scale=2, size=(5, 6))
    y = rng.integers(0, 6, size=5)
    counts = rng.integers(1, 100, size=6).astype(float)
    lam = counts.copy()
    lam[:2] = 0.0
    y_live = rng.integers(2, 6, size=5)
    teacher = rng.normal(size=(5, 4))
    return {
        "standard": (lambda t: standard_softmax_ce(t, y), z),
        "balanced": (lambda t: balanced_softmax_ce(t, y, counts), z),
        "balanced_masked": (lambda t: balanced_softmax_ce(t, y_live, lam), z),
        "rescaled": (lambda t: rescaled_softmax_ce(t, y, counts), z),
        "distillation": (lambda t: distillation_loss(t, teacher, 2.0, 4), z),
        "combined": (lambda t: combined_loss(balanced_softmax_ce(t, y, counts),
                                             distillation_loss(t, teacher, 2.0, 4), 4, 6), z),
    }


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    worst_fd = {}
    for trial in range(100):
        for family in (_op_cases, _loss_cases):
            for name, (f, x) in family(np.random.default_rng(10_000 + trial)).items():
                worst_fd[name] = max(worst_fd.get(name, 0.0), grad_check(f, x, h=1e-5))

    worst_analytic, worst_distill = 0.0, 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(2, 8))
        z = rng.normal(scale=3, size=(4, n))
        lam = rng.integers(0, 50, size=n).astype(float)
        lam[rng.integers(n)] = 7.0
        y = rng.choice(np.flatnonzero(lam > 0), size=4)
        zt = Tensor(z, requires_grad=True)
        with Tape():
            backward(balanced_softmax_ce(zt, y, lam))
        worst_analytic = max(worst_analytic,
                             np.max(np.abs(zt.grad - balanced_ce_gradient(z, y, lam))))

        zhat = rng.normal(scale=3, size=(4, n))
        zt = Tensor(np.concatenate([zhat, rng.normal(size=(4, 2))], axis=1), requires_grad=True)
        with Tape():
            backward(distillation_loss(zt, zhat, 2.0))
        worst_distill = max(worst_distill, np.max(np.abs(zt.grad)))

    seconds = time.perf_counter() - t0
    name, err = max(worst_fd.items(), key=lambda kv: kv[1])
    ok = err < 1e-5 and worst_analytic <= 1e-10 and worst_distill < 1e-10
    detail = (f"{len(worst_fd)} ops/losses, worst grad_check {err:.1e} ({name}); "
              f"analytic q-onehot {worst_analytic:.1e}; distillation at match {worst_distill:.1e}")
    assert verdict(2, ok, seconds, 60, detail)


def test_criterion_3_hypergradient_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    h, alpha, inner_lr = 1e-4, 0.5, 0.5
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = ClassifierModel(3, 2, hidden=(), seed=seed, init_scale=1.0)
        x, xv = rng.normal(size=(8, 3)), rng.normal(size=(6, 3))
        y = np.array([0, 1, 1, 1, 0, 1, 1, 1])
        yv = np.array([0, 1, 0, 1, 0, 1])
        teacher = rng.normal(size=(8, 1))
        # class 0 is old, so lambda = [alpha * 2, 6] depends on alpha
        ctx = step_context(np.array([2, 6]), 1, 2, TrainConfig(loss="meta"))

        meta = MetaState(alpha=alpha, alpha_lr=1.0, clip=(1e-6, 10.0))
        analytic = alpha - meta_alpha_update(model, (x, y), (xv, yv), meta, inner_lr, ctx, teacher)

        def val_loss(a):
            theta = virtual_update(model, x, y, ctx, a, inner_lr, teacher)
            return standard_softmax_ce(model.forward(xv, theta), yv).item()

        fd = (val_loss(alpha + h) - val_loss(alpha - h)) / (2 * h)
        worst = max(worst, abs(analytic - fd) / abs(fd))
    seconds = time.perf_counter() - t0
    assert verdict(3, worst < 1e-4, seconds, 30,
                   f"worst relative error {worst:.1e} over 20 seeded 2-class linear models")


def _greedy_oracle(f, m):
    mu = f.mean(axis=0)
    chosen, objective = [], []
    for _ in range(m):
        d, x = min((np.linalg.norm(mu - f[chosen + [x]].mean(axis=0)), x)
                   for x in range(len(f)) if x not in chosen)
        chosen.append(x)
        objective.append(d)
    return objective


def test_criterion_4_herding_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, min(3, n) + 1))
        f = rng.normal(size=(n, int(rng.integers(1, 5))))
        got = herding_select(f, m)
        mu = f.mean(axis=0)
        ours = [np.linalg.norm(mu - f[got[:s]].mean(axis=0)) for s in range(1, m + 1)]
        worst = max(worst, np.max(np.abs(np.subtract(ours, _greedy_oracle(f, m)))))
    prefix_ok = True
    for _ in range(100):
        n = int(rng.integers(1, 13))
        f = rng.normal(size=(n, 3))
        full = herding_select(f, n)
        prefix_ok &= all(herding_select(f, m) == full[:m] for m in range(1, n + 1))
    seconds = time.perf_counter() - t0
    assert verdict(4, worst < 1e-12 and prefix_ok, seconds, 30,
                   f"worst objective gap {worst:.1e} over 200 trials; prefix property {prefix_ok}")


def test_criterion_5_bias_reproduction(verdict):
    t0 = time.perf_counter()
    standard = run_seeds(loss__mode="standard")
    balanced = run_seeds(loss__mode="balanced")
    seconds = time.perf_counter() - t0

    gaps = [100 * (r.final.newest_accuracy - old_accuracy(r.final)) for r in standard]
    aia_s = np.mean([r.average_incremental_accuracy for r in standard])
    aia_b = np.mean([r.average_incremental_accuracy for r in balanced])
    old_s = [100 * old_accuracy(r.final) for r in standard]
    old_b = [100 * old_accuracy(r.final) for r in balanced]
    ok_a = all(g >= 20 for g in gaps)
    ok_b = aia_b - aia_s >= 5
    ok_c = all(b > s for b, s in zip(old_b, old_s))
    detail = (f"(a) new-old recall gap {[round(g, 1) for g in gaps]}; "
              f"(b) AIA balanced {aia_b:.2f} vs standard {aia_s:.2f}; "
              f"(c) final old acc balanced {[round(v, 1) for v in old_b]} "
              f"vs standard {[round(v, 1) for v in old_s]}")
    assert verdict(5, ok_a and ok_b and ok_c, seconds, 300, detail)


def test_criterion_6_alpha_tradeoff(verdict):
    t0 = time.perf_counter()
    alphas = [0.1, 0.25, 0.5, 1.0]
    base = np.zeros(len(alphas))
    for s in SEEDS:
        rows = ex.sweep(reference(loss__mode="alpha", run__seed=s), "alpha", alphas)
        base += [r.final_base_accuracy for r in rows]
    base /= len(SEEDS)
    seconds = time.perf_counter() - t0
    ok = all(a >= b for a, b in zip(base, base[1:]))
    detail = "final base accuracy by alpha: " + ", ".join(
        f"{a}: {v:.2f}" for a, v in zip(alphas, base))
    assert verdict(6, ok, seconds, 600, detail)


def test_criterion_7_no_memory(verdict):
    t0 = time.perf_counter()
    balanced = run_seeds(loss__mode="balanced", memory__size=0)
    relaxed = run_seeds(loss__mode="relaxed", loss__epsilon="0.2%", memory__size=0)
    seconds = time.perf_counter() - t0

    def mean(records, fn):
        return float(np.mean([100 * fn(r.final) for r in records]))

    b_new, b_base = mean(balanced, lambda f: f.newest_accuracy), mean(balanced,
                                                                      lambda f: f.base_accuracy)
    r_new = mean(relaxed, lambda f: f.newest_accuracy)
    b_all, r_all = mean(balanced, lambda f: f.top1_accuracy), mean(relaxed,
                                                                   lambda f: f.top1_accuracy)
    ok = b_new < 0.25 * b_base and r_new > b_new and r_all > b_all
    detail = (f"balanced new {b_new:.2f} vs base {b_base:.2f}; relaxed new {r_new:.2f}; "
              f"overall relaxed {r_all:.2f} vs balanced {b_all:.2f}")
    assert verdict(7, ok, seconds, 600, detail)


def test_criterion_8_memory_trend(verdict):
    t0 = time.perf_counter()
    gaps = {}
    for size in (1, 5, 20):
        s = run_seeds(loss__mode="standard", memory__size=size)
        b = run_seeds(loss__mode="balanced", memory__size=size)
        gaps[size] = float(np.mean([y.average_incremental_accuracy - x.average_incremental_accuracy
                                    for x, y in zip(s, b)]))
    seconds = time.perf_counter() - t0
    ok = gaps[1] > gaps[5] and gaps[1] > gaps[20]
    detail = "balanced - standard AIA gap by memory size: " + ", ".join(
        f"{k}: {v:.2f}" for k, v in gaps.items())
    assert verdict(8, ok, seconds, 900, detail)


def test_criterion_9_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    verdicts = {}
    for mode in ("standard", "balanced", "relaxed", "meta"):
        cfg = reference(loss__mode=mode, run__out=str(tmp_path))
        if mode == "meta":
            cfg.set("meta.val_fraction", 0.4)
        path = tmp_path / f"{cfg.run_id}_record.json"
        ex.run(cfg)
        first = path.read_bytes()
        path.unlink()
        ex.run(cfg)
        verdicts[mode] = path.read_bytes() == first
    seconds = time.perf_counter() - t0
    assert verdict(9, all(verdicts.values()), seconds, None,
                   f"repeated run records byte-identical: {verdicts}")
