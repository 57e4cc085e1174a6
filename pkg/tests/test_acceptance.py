"""Acceptance criteria 1-10; each test records one PASS/FAIL line.

Criteria 5-7 share one desk experiment (12 training runs, about half an
hour on one CPU core), computed once per session.
"""

import time

import numpy as np
import pytest

from normshift import datagen
from normshift.augment import AdaConfig, ada_maximize, ascent_objective_grad
from normshift.checks import LAYER_CASES, gradient_suite
from normshift.cli import main
from normshift.evalkit import brier
from normshift.experiments import DESK_ADA, mean_by_level, run_desk
from normshift.model import ModelConfig, build_model, closed_form_param_count, forward, parameter_report
from normshift.norms import GroupSpec, NormConfig, group_forward, init_norm, sn_forward
from normshift.numcore import grad_check, ops

SIGMOID_MINUS_3 = 0.047426
DESK_BUDGET_S = 30 * 60


def pct(v):
    return f"{100 * v:.2f}"


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    start = time.time()
    outcomes = run_desk(out_dir=out)
    return {"outcomes": outcomes, "seconds": time.time() - start, "dir": out}


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite(acceptance):
    start = time.time()
    errors = gradient_suite(seeds=range(5))
    seconds = time.time() - start
    worst = max(errors, key=errors.get)
    required = {"conv", "fc", "pool", "relu", "cross_entropy", "bn", "gn", "in", "ln", "sn", "as", "ar", "asr"}
    ok = required <= set(LAYER_CASES) and errors[worst] < 1e-5 and seconds < 120
    acceptance(1, ok, f"max rel error {errors[worst]:.2e} ({worst}) over {len(errors)} layers x 5 seeds "
                      f"in {seconds:.1f}s")


# ---------------------------------------------------------------- 2


def _oracle_standardize(x, axes):
    mu = x.mean(axis=axes, keepdims=True)
    sd = np.sqrt(((x - mu) ** 2).mean(axis=axes, keepdims=True))
    return (x - mu) / (sd + 1e-5)


def test_criterion_2_reduction_equivalences(acceptance):
    worst = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 8, 6, 6)) * rng.uniform(0.5, 3) + rng.standard_normal((4, 8, 1, 1))
        ones, zeros = np.ones(8), np.zeros(8)
        inorm = _oracle_standardize(x, (2, 3))
        lnorm = _oracle_standardize(x, (1, 2, 3))

        as_state = init_norm("as", 8, NormConfig(kind="as"), rng=seed, dtype=np.float64)
        as_state.rho_mu.data[...] = -np.inf
        as_state.rho_sigma.data[...] = -np.inf
        diffs = {
            "as(lambda=0)-in": as_state.forward(x).data - inorm,
            "gn(G=C)-in": group_forward(x, GroupSpec(8), ones, zeros).data - inorm,
            "gn(G=1)-ln": group_forward(x, GroupSpec(1), ones, zeros).data - lnorm,
        }
        sn = init_norm("sn", 8, NormConfig(kind="sn", include_bn=True), dtype=np.float64)
        bn_oracle = _oracle_standardize(x, (0, 2, 3))
        for i, (name, ref) in enumerate([("bn", bn_oracle), ("in", inorm), ("ln", lnorm)]):
            logits = np.full(3, -40.0)
            logits[i] = 40.0
            sn.mean_logits.data[...] = logits
            sn.std_logits.data[...] = logits
            diffs[f"sn(one-hot {name})-{name}"] = sn_forward(x, sn, mode="train").data - ref
        for k, d in diffs.items():
            worst[k] = max(worst.get(k, 0.0), float(np.abs(d).max()))
    name = max(worst, key=worst.get)
    acceptance(2, worst[name] <= 1e-6, f"max abs difference {worst[name]:.1e} ({name}) over {len(worst)} "
                                       f"reductions x 5 seeds")


# ---------------------------------------------------------------- 3


def test_criterion_3_sample_independence(acceptance):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 8, 5, 5)) * 2 + rng.standard_normal((6, 8, 1, 1))
    split_err, train_eval_equal = {}, {}
    for kind in ("in", "ln", "gn", "sn", "asr"):
        state = init_norm(kind, 8, NormConfig(kind=kind, groups=4), rng=1, dtype=np.float64)
        full = state.forward(x, "train").data
        per = np.concatenate([state.forward(x[i:i + 1], "train").data for i in range(len(x))])
        split_err[kind] = float(np.abs(full - per).max())
        train_eval_equal[kind] = bool(np.array_equal(full, state.forward(x, "eval").data))
    bn = init_norm("bn", 8, NormConfig(kind="bn"), dtype=np.float64)
    full = bn.forward(x, "train").data
    halves = np.concatenate([bn.forward(x[:3], "train").data, bn.forward(x[3:], "train").data])
    bn_gap = float(np.abs(full - halves).max())
    ok = max(split_err.values()) <= 1e-6 and all(train_eval_equal.values()) and bn_gap > 1e-3
    acceptance(3, ok, f"max split error {max(split_err.values()):.1e}, train==eval bitwise for "
                      f"{sum(train_eval_equal.values())}/5 kinds, BN split gap {bn_gap:.3f}")


# ---------------------------------------------------------------- 4


def _mean_ce(model, images, labels):
    return float(ops.softmax_cross_entropy(forward(model, images)[0], labels)[0].data)


def test_criterion_4_ada_mechanics(desk, acceptance):
    test = datagen.gen_source(1, 1000)
    models = {o.norm: o.model for o in desk["outcomes"] if not o.ada and o.seed == 0}
    parts = []

    # (a) alpha = 0 is the identity
    ident = all(np.array_equal(ada_maximize(m, test.subset(np.arange(100)), AdaConfig(step_size=0.0)).images,
                               test.images[:100]) for m in models.values())
    parts.append(("a", ident, "alpha=0 bitwise identity"))

    # (b) one eta=0 step follows the finite-difference input gradient
    tiny = build_model(ModelConfig(input_dims=(3, 8, 8), conv_channels=(4, 4), fc_widths=(6,), num_classes=3,
                                   norm=NormConfig(kind="asr"), seed=3), dtype=np.float64)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(0.2, 0.8, (4, 3, 8, 8))
    y = np.array([0, 1, 2, 0])
    fd_err = grad_check(lambda x: ops.softmax_cross_entropy(forward(tiny, x)[0], y, reduction="sum")[0], x0)
    g, _, _ = ascent_objective_grad(tiny, x0, y, forward(tiny, x0, want_features=True)[1].data, 0.0)
    step = ada_maximize(tiny, (x0, y), AdaConfig(eta=0.0, step_size=0.01, inner_steps=1)).images
    one_step = fd_err < 1e-4 and np.allclose(step, np.clip(x0 + 0.01 * g, 0, 1), atol=1e-12, rtol=0)
    parts.append(("b", one_step, f"one-step fd error {fd_err:.1e}"))

    # (c) 25 eta=0 ascent steps raise the loss on >= 90% of 32-image batches
    frac = {}
    for norm, m in models.items():
        up = []
        for start in range(0, 992, 32):
            b = test.subset(np.arange(start, start + 32))
            aug = ada_maximize(m, b, AdaConfig(eta=0.0, step_size=DESK_ADA.step_size))
            up.append(_mean_ce(m, aug.images, b.labels) > _mean_ce(m, b.images, b.labels))
        frac[norm] = float(np.mean(up))
    parts.append(("c", min(frac.values()) >= 0.9,
                  "loss up on " + ", ".join(f"{k} {100 * v:.0f}%" for k, v in frac.items()) + " of batches"))

    # (d) final semantic distance is non-increasing in eta
    batch = test.subset(np.arange(500))
    dist = {}
    for norm, m in models.items():
        z_src = forward(m, batch.images, want_features=True)[1].data
        row = []
        for eta in (0.0, 1.0, 10.0, 100.0):
            with np.errstate(all="ignore"):
                aug = ada_maximize(m, batch, AdaConfig(eta=eta, step_size=DESK_ADA.step_size))
                z = forward(m, aug.images, want_features=True)[1].data
            row.append(float(np.mean(0.5 * np.sum((z.astype(np.float64) - z_src) ** 2, axis=1))))
        dist[norm] = row
    mono = all(all(b <= a for a, b in zip(r, r[1:])) for r in dist.values())
    parts.append(("d", mono, "distance over eta 0/1/10/100: " + "; ".join(
        f"{k} " + "/".join(f"{v:.3g}" for v in r) for k, r in dist.items())))

    failed = [p for p, ok, _ in parts if not ok]
    detail = " | ".join(f"({p}) {'ok' if ok else 'FAIL'}: {d}" for p, ok, d in parts)
    acceptance(4, not failed, detail)


# ---------------------------------------------------------------- 5-7


def test_criterion_5_directional_accuracy(desk, acceptance):
    outs = desk["outcomes"]
    acc = {(n, a): mean_by_level(outs, n, a) for n in ("bn", "asr") for a in (False, True)}
    erm_gap5 = acc["asr", False][5] - acc["bn", False][5]
    ada_avg = {n: np.mean(list(acc[n, True].values())) for n in ("bn", "asr")}
    ada_gap = ada_avg["asr"] - ada_avg["bn"]
    gaps = {a: [acc["asr", a][lvl] - acc["bn", a][lvl] for lvl in range(1, 6)] for a in (False, True)}
    nondecreasing = all(all(y >= x for x, y in zip(g, g[1:])) for g in gaps.values())
    in_budget = desk["seconds"] <= DESK_BUDGET_S
    ok = erm_gap5 >= 0.02 and ada_gap >= 0.01 and nondecreasing and in_budget
    table = "; ".join(f"{'ada' if a else 'erm'}-{n} " + "/".join(pct(acc[n, a][lvl]) for lvl in range(1, 6))
                      for a in (False, True) for n in ("bn", "asr"))
    acceptance(5, ok, f"(a) ERM level-5 gap {pct(erm_gap5)} pts; (b) ADA 5-level gap {pct(ada_gap)} pts; "
                      f"gaps by level ERM {'/'.join(pct(g) for g in gaps[False])} ADA "
                      f"{'/'.join(pct(g) for g in gaps[True])}; runtime {desk['seconds'] / 60:.1f} min; "
                      f"level accuracies {table}")


def test_criterion_6_residual_weights_increase(desk, acceptance):
    runs = sorted((o for o in desk["outcomes"] if o.ada and o.norm == "asr"), key=lambda o: o.seed)
    details, oks = [], []
    for o in runs:
        last = max(o.trajectory.steps())
        layers = sorted({e[1] for e in o.trajectory.entries})
        final = {layer: dict(zip(("mu", "sigma"), next(e[2:4] for e in o.trajectory.entries
                                                        if e[0] == last and e[1] == layer)))
                 for layer in layers}
        init = {layer: next(e[2] for e in o.trajectory.entries if e[0] == 0 and e[1] == layer) for layer in layers}
        mean_mu = np.mean([f["mu"] for f in final.values()])
        mean_sigma = np.mean([f["sigma"] for f in final.values()])
        ok = (mean_mu > SIGMOID_MINUS_3 and mean_sigma > SIGMOID_MINUS_3
              and all(final[layer]["sigma"] > init[layer] for layer in layers))
        oks.append(ok)
        per_layer = ", ".join(f"{layer} {final[layer]['sigma']:.4f}" for layer in layers)
        details.append(f"seed {o.seed}{'' if ok else ' (fails)'}: mean lambda_mu {mean_mu:.4f}, "
                       f"mean lambda_sigma {mean_sigma:.4f}, lambda_sigma per layer {per_layer} "
                       f"(init {SIGMOID_MINUS_3}) at step {last}")
    # the desk ASR+ADA run is seed 0; the other seeds are reported alongside
    acceptance(6, oks[0], "; ".join(details))


def test_criterion_7_brier_at_highest_level(desk, acceptance):
    outs = desk["outcomes"]
    b = {n: mean_by_level(outs, n, True, "brier")[5] for n in ("bn", "asr")}
    acceptance(7, b["asr"] <= b["bn"], f"ADA level-5 Brier ASR {b['asr']:.4f} vs BN {b['bn']:.4f} "
                                       f"(mean of 3 seeds)")


# ---------------------------------------------------------------- 8


def test_criterion_8_brier_units(acceptance):
    onehot = np.eye(10)[[3]]
    uniform = np.full((1, 10), 0.1)
    wrong = np.eye(10)[[4]]
    values = (brier(onehot, [3]), brier(uniform, [3]), brier(wrong, [3]))
    ok = values[0] == 0.0 and abs(values[1] - 0.09) <= 1e-15 and abs(values[2] - 0.2) <= 1e-15
    acceptance(8, ok, "one-hot {:.17g}, uniform {:.17g}, worst {:.17g}".format(*values))


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, acceptance):
    import json

    doc = {"data": {"n_train": 300, "n_test": 100}, "norm": {"kind": "asr"},
           "train": {"epochs": 2, "batch_size": 32, "seed": 5},
           "ada": {"enabled": True, "interval": 5, "aug_rounds": 2, "inner_steps": 3, "step_size": 0.003},
           "eval": {"grid": ["source", "corruption:gaussian_noise:3", "style:invert"]}}
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    files = ("metrics.csv", "checkpoint.nsck", "trajectory.csv")
    args = ["train", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]
    codes = [main(args)]
    first = {f: (tmp_path / "run" / f).read_bytes() for f in files}
    codes.append(main(args))
    same = {f: (tmp_path / "run" / f).read_bytes() == first[f] for f in files}
    bn_doc = {**doc, "norm": {"kind": "bn"}, "ada": {"enabled": False}}
    cfg.write_text(json.dumps(bn_doc))
    bn_args = ["train", "--config", str(cfg), "--out-dir", str(tmp_path / "bn")]
    codes.append(main(bn_args))
    bn_first = {f: (tmp_path / "bn" / f).read_bytes() for f in files[:2]}
    codes.append(main(bn_args))
    same.update({f"bn/{f}": (tmp_path / "bn" / f).read_bytes() == bn_first[f] for f in files[:2]})
    ok = codes == [0, 0, 0, 0] and all(same.values())
    acceptance(9, ok, f"byte-identical on repeat: {sum(same.values())}/{len(same)} files "
                      f"(ASR+ADA and BN runs), exit codes {codes}")


# ---------------------------------------------------------------- 10


def test_criterion_10_parameter_accounting(acceptance):
    cfg = ModelConfig()
    report = parameter_report(cfg)
    closed = {kind: closed_form_param_count(ModelConfig(norm=NormConfig(kind=kind))) for kind in ("bn", "asr")}
    ok = (report["bn"] == closed["bn"] and report["asr"] == closed["asr"]
          and report["overhead"] == closed["asr"] - closed["bn"] == 2383)
    acceptance(10, ok, f"BN {report['bn']}, ASR {report['asr']}, overhead {report['overhead']} "
                       f"({report['overhead_pct']:.2f}%), closed form {closed['asr'] - closed['bn']}")

