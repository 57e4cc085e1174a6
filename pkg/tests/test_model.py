import numpy as np
import pytest

from normshift.model import (
    CheckpointError,
    ModelConfig,
    build_model,
    closed_form_param_count,
    forward,
    load_checkpoint,
    norm_param_count,
    parameter_report,
    predict_proba,
    read_checkpoint,
    save_checkpoint,
)
from normshift.norms import NORM_KINDS, NormConfig
from normshift.numcore import Tensor, grad_check, param_grad_check, softmax_cross_entropy


def config(kind="asr", **kw):
    return ModelConfig(norm=NormConfig(kind=kind), **kw)


def tiny(kind="asr", seed=0):
    return ModelConfig(input_dims=(3, 8, 8), conv_channels=(4, 4), fc_widths=(6,), num_classes=2,
                       norm=NormConfig(kind=kind, groups=2), seed=seed)


def test_desk_parameter_counts_are_hand_derived():
    # convs 448 + 4640, fc 147584 + 1290; BN adds 2C per layer
    assert build_model(config("bn")).num_params() == 154058
    report = parameter_report(config())
    assert report["asr"] == 156441
    assert report["overhead"] == 2383
    assert report["overhead_pct"] == pytest.approx(1.5468, abs=1e-4)


@pytest.mark.parametrize("kind", NORM_KINDS)
def test_closed_form_count_matches_built_model(kind):
    cfg = config(kind)
    assert build_model(cfg).num_params() == closed_form_param_count(cfg)


def test_pretrain_variant_adds_two_logits_per_layer():
    base = norm_param_count("asr", 32, NormConfig())
    assert norm_param_count("asr", 32, NormConfig(pretrain_variant=True)) == base + 2
    assert norm_param_count("none", 32, NormConfig()) == 0


def test_none_kind_has_no_norm_parameters():
    model = build_model(config("none"))
    assert model.norm_layers() == []
    assert not any("norm" in p.name for p in model.params())


def test_residual_logits_are_named_per_layer():
    names = {p.name for p in build_model(config()).params()}
    for layer in ("norm1", "norm2"):
        assert f"{layer}.rho_mu" in names and f"{layer}.rho_sigma" in names


def test_forward_shapes_and_features(rng):
    model = build_model(config())
    x = rng.random((4, 3, 24, 24)).astype(np.float32)
    logits, feats = forward(model, x, "eval", want_features=True)
    assert logits.shape == (4, 10) and feats.shape == (4, 128)
    assert logits.data.dtype == np.float32
    assert np.all(feats.data >= 0)
    p = predict_proba(model, x, batch_size=3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_build_is_deterministic_per_seed():
    a, b, c = (build_model(config(seed=s)) for s in (3, 3, 4))
    assert a.checksum() == b.checksum() != c.checksum()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_dims=(3, 24))
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(fc_widths=())


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    model = build_model(config())
    x = rng.random((3, 3, 24, 24)).astype(np.float32)
    save_checkpoint(model, tmp_path / "m.nsck", meta={"step": 7})
    loaded = load_checkpoint(tmp_path / "m.nsck")
    assert loaded.checksum() == model.checksum()
    assert np.array_equal(forward(loaded, x)[0].data, forward(model, x)[0].data)
    assert read_checkpoint(tmp_path / "m.nsck").meta == {"step": 7}


def test_bn_buffers_survive_round_trip(tmp_path, rng):
    model = build_model(config("bn"))
    forward(model, rng.random((4, 3, 24, 24)).astype(np.float32), "train")
    save_checkpoint(model, tmp_path / "bn.nsck")
    loaded = load_checkpoint(tmp_path / "bn.nsck")
    for key, arr in model.buffers().items():
        assert np.array_equal(loaded.buffers()[key], arr)


def test_corrupt_checkpoints_are_rejected(tmp_path):
    path = tmp_path / "m.nsck"
    save_checkpoint(build_model(tiny()), path)
    raw = path.read_bytes()
    cases = {"magic": b"XXXX" + raw[4:], "truncated": raw[:-3], "trailing": raw + b"\0",
             "version": raw[:4] + (99).to_bytes(4, "little") + raw[8:]}
    for name, data in cases.items():
        bad = tmp_path / f"{name}.nsck"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.nsck")


def test_checkpoint_with_mismatched_config_is_rejected(tmp_path):
    from normshift.model import write_checkpoint

    model = build_model(tiny())
    header = {"config": {**model.config.to_dict(), "conv_channels": [8, 4]}, "meta": {}}
    write_checkpoint(tmp_path / "x.nsck", header, model.named_tensors())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.nsck")


@pytest.mark.parametrize("kind", ["asr", "bn", "gn", "none"])
def test_end_to_end_gradients_match_finite_differences(kind, rng):
    model = build_model(tiny(kind, seed=2), dtype=np.float64)
    # move off the init, where dead encoder units put decoder ReLUs exactly on their kink
    for p in model.params():
        p.data = np.asarray(p.data + 0.1 * rng.standard_normal(p.shape))
    x0 = rng.random((3, 3, 8, 8))
    labels = np.array([0, 1, 1])

    def loss_of(x):
        logits, _ = forward(model, x, "train")
        return softmax_cross_entropy(logits, labels)[0]

    if kind == "bn":
        running = {k: v.copy() for k, v in model.buffers().items()}
    assert grad_check(loss_of, x0) < 1e-4
    errs = param_grad_check(lambda: loss_of(Tensor(x0)), model.params())
    assert max(errs.values()) < 1e-4
    if kind == "bn":
        assert any(not np.array_equal(running[k], v) for k, v in model.buffers().items())


def test_eval_mode_is_batch_independent_without_batch_stats(rng):
    model = build_model(config())
    x = rng.random((6, 3, 24, 24)).astype(np.float32)
    full = forward(model, x, "eval")[0].data
    parts = np.concatenate([forward(model, x[i:i + 2], "eval")[0].data for i in range(0, 6, 2)])
    assert np.abs(full - parts).max() <= 1e-5
