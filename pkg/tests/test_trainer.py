import math

import numpy as np
import pytest

from graphda import autodiff as ad
from graphda.graph import select_labeled_per_class
from graphda.synth import SbmSpec, generate_pair
from graphda.trainer import (
    Adam, AblationFlags, ConfigError, TrainConfig, divergence_diagnostic, evaluate, forward,
    lambda2_schedule, load_checkpoint, lr_schedule, run_experiment, train_step, Domain,
)
from toy import TOY_CONFIG, grads_of, toy_setup

L1, L2, L3 = 0.3, 0.08, 0.7


def test_lr_schedule_values():
    assert lr_schedule(0.01, 0.0) == 0.01
    assert abs(lr_schedule(0.01, 1.0) - 0.01 * 11 ** -0.75) <= 1e-12
    assert lr_schedule(0.01, 1.0) == pytest.approx(1.6556e-3, abs=1e-7)
    grid = [lr_schedule(0.01, p) for p in np.linspace(0, 1, 1001)]
    assert all(a >= b for a, b in zip(grid, grid[1:]))


def test_lambda2_schedule_values():
    assert lambda2_schedule(0.1, 0.0) == 0.0
    assert lambda2_schedule(0.1, 1.0) == pytest.approx(0.0999909, abs=1e-7)
    grid = [lambda2_schedule(0.1, p) for p in np.linspace(0, 1, 1001)]
    assert all(a <= b for a, b in zip(grid, grid[1:]))
    assert max(grid) <= 0.1
    clamp = [lambda2_schedule(0.1, p, "clamp") for p in np.linspace(0, 1, 1001)]
    assert clamp[0] == 0.0 and max(clamp) == 0.1
    assert all(a <= b for a, b in zip(clamp, clamp[1:]))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=-1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(sample_sizes=(3,), layer_dims=(4, 4)).validate()
    cfg = TrainConfig(layer_dims=(7, 3), sample_sizes=(2, 2))
    assert TrainConfig.from_dict(cfg.as_dict()) == cfg


def test_ablation_flags():
    assert AblationFlags.parse(["gv"]).disable_contrastive
    assert AblationFlags.parse(["LV"]).disable_contrastive
    with pytest.raises(ConfigError):
        AblationFlags.parse(["gv", "lv"])
    with pytest.raises(ConfigError):
        AblationFlags.parse(["xx"])
    assert AblationFlags().label() == "full"
    assert AblationFlags.parse(["da"]).label() == "-DA"


def test_routing_equals_two_pass_oracle():
    model, source, target, inputs = toy_setup()
    routed = grads_of(model, forward(model, source, target, inputs, L1, L2, L3).routed)
    plain = forward(model, source, target, inputs, L1, L2, L3, mode="plain")
    enc = grads_of(model, plain.encoder_objective)
    cls = grads_of(model, plain.classifier_objective)
    for k in model.encoder_tensors():
        assert np.max(np.abs(routed[k] - enc[k])) <= 1e-10, k
    for k in model.classifier_tensors():
        assert np.max(np.abs(routed[k] - cls[k])) <= 1e-10, k


def test_entropy_path_on_prototypes_is_negated_entropy_gradient():
    model, source, target, inputs = toy_setup()
    with_en = grads_of(model, forward(model, source, target, inputs, L1, L2, L3).routed)
    without = grads_of(model, forward(model, source, target, inputs, L1, L2, 0.0).routed)
    en_only = grads_of(model, forward(model, source, target, inputs, L1, L2, L3, mode="plain").en)
    assert np.max(np.abs((with_en["cls"] - without["cls"]) - (-L3 * en_only["cls"]))) <= 1e-10


def test_routing_matches_finite_differences_of_each_objective():
    model, source, target, inputs = toy_setup()
    routed = grads_of(model, forward(model, source, target, inputs, L1, L2, L3).routed)

    def objective(which):
        def f():
            out = forward(model, source, target, inputs, L1, L2, L3, mode="plain")
            return (out.encoder_objective if which == "enc" else out.classifier_objective).item()
        return f

    from conftest import central_difference, rel_err
    for k, t in model.tensors().items():
        which = "cls" if k == "cls" else "enc"
        numeric = central_difference(objective(which), t.value)
        assert rel_err(routed[k], numeric) <= 1e-5, k


def test_without_domain_adaptation_entropy_does_not_reach_parameters():
    flags = AblationFlags(disable_domain_adaptation=True)
    model, source, target, inputs = toy_setup(flags)
    out = forward(model, source, target, inputs, L1, L2, L3)
    routed = grads_of(model, out.routed)
    base = grads_of(model, out.ce + ad.scalar_mul(out.cl, L1))
    for k in routed:
        assert np.array_equal(routed[k], base[k])
    assert out.en.item() > 0


def test_global_view_ablation_is_local_only():
    flags = AblationFlags(disable_global_view=True)
    model, source, target, inputs = toy_setup(flags)
    assert model.w_b is None and not model.encoder.global_weights
    assert model.w_c.shape[0] == TOY_CONFIG.layer_dims[-1]
    out = forward(model, source, target, inputs, L1, L2, L3)
    assert out.cl is None


def test_supervised_reduction():
    model, source, target, inputs = toy_setup()
    out = forward(model, source, target, inputs, 0.0, 0.0, 0.0)
    routed = grads_of(model, out.routed)
    ce = grads_of(model, out.ce)
    for k in routed:
        assert np.allclose(routed[k], ce[k], atol=1e-15)


def test_adam_first_step_by_hand():
    w = ad.parameter([1.0, -2.0])
    w.grad = np.array([0.5, 0.25])
    opt = Adam({"w": w}, weight_decay=0.1)
    opt.step(0.01)
    g = np.array([0.5, 0.25]) + 0.1 * np.array([1.0, -2.0])
    # bias-corrected first step is lr * g / (|g| + eps)
    assert np.allclose(w.value, np.array([1.0, -2.0]) - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_sign_asymmetry_changes_training():
    """Minimizing entropy in both players is not the adversarial game."""
    def run(adversarial):
        model, source, target, inputs = toy_setup()
        opt = Adam(model.tensors())
        for _ in range(5):
            out = forward(model, source, target, inputs, L1, L3, L3, mode="routed" if adversarial else "plain")
            model.zero_grad()
            ad.backward(out.routed if adversarial else out.encoder_objective)
            opt.step(0.01)
        return model.state()

    a, b = run(True), run(False)
    assert np.max(np.abs(a["cls"] - b["cls"])) > 1e-4


def test_train_step_needs_unlabeled_target():
    model, source, target, inputs = toy_setup()
    full = target.graph.with_labeled(np.arange(target.graph.num_nodes))
    with pytest.raises(ConfigError):
        train_step(model, source, Domain(full, target.diffusion), inputs, Adam(model.tensors()),
                   TOY_CONFIG, 0.01, 0.0)


def test_divergence_diagnostic_cases():
    h = np.array([0.1, 0.5, 0.9])
    d = divergence_diagnostic(h, h, 0.5)
    assert d["source_frac"] == d["target_frac"]
    zero = divergence_diagnostic(h, h[:2], 0.0)
    assert zero["source_frac"] == zero["target_frac"] == 1.0
    top = divergence_diagnostic(h, h, math.log(3) + 1e-9)
    assert top["source_frac"] == top["target_frac"] == 0.0
    assert d["bound"] == 2 * d["target_frac"]


def _small_pair(seed=0, n=2):
    src, tgt, _ = generate_pair(SbmSpec(num_nodes=60, attr_dim=20, intra_prob=0.15, inter_prob=0.02, seed=seed))
    return src, tgt.with_labeled(select_labeled_per_class(tgt, n, seed))


SMALL = TrainConfig(layer_dims=(16, 8), sample_sizes=(4, 4), batch_size=16, topk=8, epochs=6,
                    temperature=0.05, eta0=0.005)


def test_determinism_and_checkpoint(tmp_path):
    src, tgt = _small_pair()
    a = run_experiment(src, tgt, SMALL, checkpoint_path=tmp_path / "m.ckpt")
    b = run_experiment(src, tgt, SMALL)
    assert a.rows == b.rows and a.accuracy == b.accuracy
    model, config, flags = load_checkpoint(tmp_path / "m.ckpt")
    assert config == SMALL and flags == AblationFlags()
    assert evaluate(model, Domain.build(tgt, config), config).accuracy == a.accuracy
    for k, v in a.model.state().items():
        assert np.array_equal(v, model.state()[k])


def test_per_class_accuracy_averages_to_overall():
    src, tgt = _small_pair(1)
    rep = run_experiment(src, tgt, SMALL)
    counts = np.bincount(tgt.labels[tgt.unlabeled], minlength=3)
    weighted = sum(rep.per_class[c] * counts[c] for c in range(3)) / counts.sum()
    assert weighted == pytest.approx(rep.accuracy, abs=1e-12)


def test_overall_loss_decreases():
    src, tgt = _small_pair(2)
    rep = run_experiment(src, tgt, TrainConfig(**{**SMALL.as_dict(), "epochs": 10}))
    first = np.mean([r["overall"] for r in rep.rows if r["epoch"] == 1])
    last = np.mean([r["overall"] for r in rep.rows if r["epoch"] == 10])
    assert last < first


def test_da_ablation_reports_zero_lambda2():
    src, tgt = _small_pair()
    rep = run_experiment(src, tgt, SMALL, AblationFlags(disable_domain_adaptation=True))
    assert all(r["lambda2"] == 0.0 for r in rep.rows)
    assert all(r["overall"] == pytest.approx(r["L_CE"] + 0.1 * r["L_CL"]) for r in rep.rows)
