import logging

import numpy as np
import pytest

from cfalab import autodiff as ad
from cfalab import losses as L
from cfalab.errors import ConfigError, DivergedRunError, EmptyInputError
from cfalab.harness import experiments, gradcheck
from cfalab.harness.config import TrainConfig, dump_config, parse_config
from cfalab.harness.train import (
    HISTORY_FIELDS,
    AdamW,
    compute_losses,
    evaluate,
    focal_config_for,
    generation_accuracy,
    subsample,
    train,
)
from cfalab.metrics import balanced_accuracy
from cfalab.model import CfaModel, make_batch
from cfalab.synthdata import generate_dataset, split_records

SMALL = parse_config(
    """
    data.n_total = 240
    data.n_ood = 80
    optim.epochs = 2
    optim.lr = 3e-3
    """
)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SMALL.data)


# -- config -------------------------------------------------------------------------------


def test_config_round_trip():
    cfg = parse_config("seed = 4\narm = focal_cal\ndata.noise_sigma = 1.5  # comment\nloss.sim_kind = dot\n")
    assert cfg.seed == 4 and cfg.arm == "focal_cal" and cfg.data.noise_sigma == 1.5 and cfg.loss.sim_kind == "dot"
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text",
    ["arm = everything", "optim.lr = -1", "optim.epochs = 0", "data.bogus = 1", "nosuch.key = 1", "seed", "data.n_total = ten",
     "loss.sim_kind = l1", "train_fraction = 0"],
)
def test_config_errors(text):
    with pytest.raises((ConfigError, ValueError)):
        parse_config(text)


# -- optimizer -------------------------------------------------------------------------------


def test_adamw_single_step_reference():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    AdamW(["w"], lr=0.1, weight_decay=0.01).step(p, g)
    m = 0.1 * g["w"] / (1 - 0.9)
    v = 0.001 * g["w"] ** 2 / (1 - 0.999)
    expected = np.array([1.0, -2.0]) - 0.1 * (m / (np.sqrt(v) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p["w"], expected, rtol=1e-15)


# -- training ---------------------------------------------------------------------------------


def test_zero_learning_rate_keeps_weights(small_data):
    cfg = SMALL.with_(optim=SMALL.optim.__class__(lr=0.0, epochs=1))
    ckpt, _ = train(cfg, small_data, eval_splits=())
    init = CfaModel.init(cfg.model_config(), cfg.seed)
    for k, v in init.params.items():
        np.testing.assert_allclose(ckpt.model.params[k], v, rtol=0, atol=1e-12)


def test_training_is_deterministic(small_data):
    a = train(SMALL, small_data)[1]
    b = train(SMALL, small_data)[1]
    assert a.digest() == b.digest()
    assert a.to_csv() == b.to_csv()
    assert [r["epoch"] for r in a.rows] == list(range(1, SMALL.optim.epochs + 1))
    assert set(a.reports) == {"val", "test", "ood"}
    assert a.to_csv().splitlines()[0] == "seed," + ",".join(HISTORY_FIELDS)


def test_frozen_encoder_is_byte_identical(small_data):
    cfg = SMALL.with_(arm="full_cfa")
    before = CfaModel.init(cfg.model_config(), cfg.seed).encoder_bytes()
    ckpt, _ = train(cfg, small_data, eval_splits=())
    assert ckpt.model.encoder_bytes() == before


def test_full_finetune_moves_the_encoder(small_data):
    cfg = SMALL.with_(arm="frozen_vs_fullft")
    before = CfaModel.init(cfg.model_config(), cfg.seed).encoder_bytes()
    ckpt, _ = train(cfg, small_data, eval_splits=())
    assert ckpt.model.encoder_bytes() != before


def test_total_equals_weighted_components(small_data):
    cfg = SMALL.with_(arm="full_cfa")
    train_set = split_records(small_data, "train")
    model = CfaModel.init(cfg.model_config(), 0)
    batch = make_batch(train_set[:32])
    tape = ad.Tape()
    bundle = compute_losses(model, tape, model.bind(tape), batch, cfg, focal_config_for(cfg, train_set))
    c = bundle.components()
    lc = cfg.loss
    assert abs(c["total"] - (c["focal"] + lc.lambda1 * c["align"] + lc.lambda2 * c["cal"] + lc.lambda3 * c["gen"])) <= 1e-10


@pytest.mark.parametrize("arm", ["ce_only", "focal_only", "focal_align", "focal_cal"])
def test_ablation_arms_switch_terms_off(small_data, arm):
    cfg = SMALL.with_(arm=arm)
    train_set = split_records(small_data, "train")
    model = CfaModel.init(cfg.model_config(), 0)
    tape = ad.Tape()
    b = compute_losses(model, tape, model.bind(tape), make_batch(train_set[:16]), cfg, focal_config_for(cfg, train_set))
    c = b.components()
    assert (c["align"] != 0) == (arm == "focal_align")
    assert (c["cal"] != 0) == (arm == "focal_cal")
    assert c["gen"] == 0


def test_ce_arm_uses_plain_cross_entropy(small_data):
    fc = focal_config_for(SMALL.with_(arm="ce_only"), split_records(small_data, "train"))
    assert fc.gamma == 0.0 and set(fc.alpha_weights) == {1.0}


def test_divergence_names_epoch_and_batch(small_data):
    cfg = SMALL.with_(optim=SMALL.optim.__class__(lr=1e200, epochs=2))
    with pytest.raises(DivergedRunError) as info:
        train(cfg, small_data)
    assert info.value.epoch >= 1 and info.value.batch >= 0
    assert "epoch" in str(info.value)


def test_focal_loss_falls_over_training():
    # default data and optimizer settings, full objective
    _, hist = train(TrainConfig(), eval_splits=())
    assert len(hist.rows) == 20
    assert hist.rows[-1]["focal"] < hist.rows[0]["focal"]


def test_separable_data_is_learned():
    cfg = parse_config("data.noise_sigma = 0\noptim.lr = 3e-3\noptim.epochs = 10\ndata.n_ood = 200")
    data = generate_dataset(cfg.data)
    ckpt, hist = train(cfg, data)
    assert hist.reports["test"].b_acc >= 0.95
    assert generation_accuracy(ckpt.model, split_records(data, "test"), cfg.data.signature_len) >= 0.9


# -- evaluation --------------------------------------------------------------------------------


def test_evaluate_is_repeatable(small_data):
    model = CfaModel.init(SMALL.model_config(), 0)
    a = evaluate(model, "test", small_data)
    b = evaluate(model, "test", small_data)
    assert a.to_csv() == b.to_csv()
    with pytest.raises(EmptyInputError):
        evaluate(model, "holdout", small_data)
    with pytest.raises(EmptyInputError):
        evaluate(model, "ood", [r for r in small_data if r.split != "ood"])


def test_random_model_is_at_chance_on_balanced_pairs():
    cfg = parse_config("data.n_classes = 2\ndata.imbalance_rho = 1\ndata.n_total = 400\ndata.n_ood = 0")
    data = generate_dataset(cfg.data)
    test = split_records(data, "test")
    vals = []
    for seed in range(20):
        model = CfaModel.init(cfg.with_(seed=seed).model_config(), seed)
        vals.append(evaluate(model, "test", data).b_acc)
    # one random network can separate by luck; over init seeds it sits at chance
    assert abs(np.mean(vals) - 0.5) <= 0.1, vals
    assert len(test) == 80


# -- subsampling --------------------------------------------------------------------------------


def test_subsample_is_stratified_and_deterministic(small_data):
    train_set = split_records(small_data, "train")
    a, empty = subsample(train_set, 0.5, 3, 8)
    b, _ = subsample(train_set, 0.5, 3, 8)
    assert [r.id for r in a] == [r.id for r in b]
    assert [r.id for r in subsample(train_set, 0.5, 4, 8)[0]] != [r.id for r in a]
    full = np.bincount([r.class_id for r in train_set], minlength=8)
    half = np.bincount([r.class_id for r in a], minlength=8)
    assert np.all(np.abs(half - 0.5 * full) <= 0.5)
    assert empty == []
    assert subsample(train_set, 1.0, 0, 8)[0] == train_set


def test_tiny_fraction_folds_out_empty_classes(small_data, caplog):
    with caplog.at_level(logging.WARNING):
        kept, empty = subsample(split_records(small_data, "train"), 0.05, 0, 8)
    assert empty and "folding" in caplog.text
    assert not set(empty) & {r.class_id for r in kept}


def test_excluded_classes_leave_bacc_only(small_data):
    model = CfaModel.init(SMALL.model_config(), 0)
    full = evaluate(model, "test", small_data)
    part = evaluate(model, "test", small_data, exclude_classes=[7])
    recs = split_records(small_data, "test")
    probs = model.predict_proba(recs)
    labels = np.array([r.class_id for r in recs])
    keep = labels != 7
    assert part.b_acc == balanced_accuracy(probs[keep].argmax(1), labels[keep], 8)
    assert part.ece == full.ece and part.auroc_macro == full.auroc_macro


# -- protocols ------------------------------------------------------------------------------------


def test_ablation_table(small_data):
    table = experiments.ablate(SMALL, [0, 1, 2], dataset=small_data)
    lines = table.to_csv().splitlines()
    assert lines[0] == "arm,B-ACC,AUROC,ECE,seeds"
    assert all(ln.endswith(",0 1 2") for ln in lines[1:])
    assert [ln.split(",")[0] for ln in lines[1:]] == list(experiments.ABLATION_ARMS)
    runs = table.runs_csv().splitlines()
    assert len(runs) == 1 + 5 * 3
    assert len({ln.split(",")[5] for ln in runs[1:]}) == 1  # one dataset digest
    lo, hi = table.spread("full_cfa", "B-ACC")
    assert lo <= table.median("full_cfa", "B-ACC") <= hi


def test_ablation_needs_three_seeds(small_data):
    with pytest.raises(ValueError):
        experiments.ablate(SMALL, [0, 1], dataset=small_data)


def test_ablation_continues_past_a_diverged_arm(small_data, monkeypatch):
    real = experiments.train

    def flaky(cfg, dataset, eval_splits):
        if cfg.arm == "focal_cal":
            raise DivergedRunError(1, 0, float("nan"))
        return real(cfg, dataset, eval_splits=eval_splits)

    monkeypatch.setattr(experiments, "train", flaky)
    experiments.clear_cache()
    table = experiments.ablate(SMALL.with_(optim=SMALL.optim.__class__(epochs=1, lr=3e-3)), [0, 1, 2], dataset=small_data)
    assert {r.arm for r in table.failed()} == {"focal_cal"}
    assert len([r for r in table.runs if r.ok]) == 12
    assert table.to_csv().splitlines()[4] == "focal_cal,nan,nan,nan,"


def test_full_fraction_matches_plain_training(small_data):
    experiments.clear_cache()
    eff = experiments.data_efficiency(SMALL, [1.0], [0, 1, 2], dataset=small_data)
    for model, arm in experiments.EFFICIENCY_ARMS.items():
        for res in eff.runs[(model, 1.0)]:
            _, hist = train(SMALL.with_(arm=arm, seed=res.seed), small_data, eval_splits=("ood",))
            assert res.b_acc == hist.reports["ood"].b_acc
        assert eff.drop(model, 1.0) == 0.0
    assert eff.to_csv().splitlines()[0] == "model,fraction,B-ACC,drop,seeds"


def test_single_point_sweep_reproduces_full_arm(small_data):
    experiments.clear_cache()
    sens = experiments.sensitivity(SMALL, [0.5], [0, 1, 2], dataset=small_data)
    experiments.clear_cache()
    table = experiments.ablate(SMALL, [0, 1, 2], arms=["full_cfa"], dataset=small_data)
    assert sens.median_bacc(0.5) == table.median("full_cfa", "B-ACC")
    assert sens.to_csv().splitlines()[0] == "lambda3,B-ACC,gen_acc,seeds"
    with pytest.raises(ValueError):
        experiments.sensitivity(SMALL, [], [0], dataset=small_data)


# -- gradient gate --------------------------------------------------------------------------------


def test_gradcheck_all_passes():
    summary = gradcheck.gradcheck_all()
    assert summary.passed
    assert len(summary.checks) >= 6
    names = {c.objective for c in summary.checks}
    assert {"focal_loss", "align_loss[cosine]", "cal_loss", "gen_loss", "focal_pool", "cfa_total"} <= names


def test_gradcheck_catches_sign_flip(monkeypatch):
    real = L.focal_loss

    def flipped(logits, targets, cfg):
        good = real(logits, targets, cfg)
        return ad.custom_op([logits], good.value, lambda g: (-_grad_of(real, logits, targets, cfg) * g,))

    monkeypatch.setattr(L, "focal_loss", flipped)
    summary = gradcheck.gradcheck_all()
    assert not summary.passed
    failing = {obj for obj, _, _ in summary.failures()}
    assert "focal_loss" in failing and "cfa_total" in failing
    assert "align_loss[cosine]" not in failing


def _grad_of(fn, logits, targets, cfg):
    tape = ad.Tape()
    z = tape.leaf(logits.value)
    return ad.backward(fn(z, targets, cfg), [z])[0]
