import struct

import numpy as np
import pytest

from lantern import model as M
from lantern.autodiff import ShapeError, Tensor
from lantern.synth import GeneratorConfig, generate_dataset, stack
from lantern.training import (
    FORMAT_VERSION,
    MAGIC,
    AdamState,
    Batch,
    BatchStream,
    CheckpointError,
    TrainConfig,
    adam_step,
    build_variant,
    load_checkpoint,
    model_config_for,
    save_checkpoint,
    split_users,
    train,
    train_step,
)

CFG = M.LanternConfig(survey_dim=6, external_dim=5, n_keys=7, d_embed=16, d_proj=32, n_tokens=4, d_ffn=24)


def _scalar(w):
    return {"w": Tensor(np.array([w]), requires_grad=True)}


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize(
    "kw",
    [dict(learning_rate=0.0), dict(beta2=1.0), dict(batch_size=0), dict(variant="late"), dict(val_fraction=1.0)],
)
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon) == (1e-3, 0.9, 0.99, 1e-8)
    assert (cfg.batch_size, cfg.epochs, cfg.steps_per_epoch, cfg.validation_steps) == (32, 10, 50, 10)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    params = M.init_params(CFG, 0)
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    new, state = adam_step(params, grads, AdamState.zeros(params), TrainConfig())
    assert state.t == 1
    for k in params:
        assert new[k].data.tobytes() == params[k].data.tobytes()


def test_adam_first_step_is_lr_sign():
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=(4, 3)), requires_grad=True)}
    g = rng.normal(size=(4, 3))
    new, _ = adam_step(params, {"w": g}, AdamState.zeros(params), TrainConfig())
    np.testing.assert_allclose(new["w"].data - params["w"].data, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_matches_hand_recurrence():
    cfg = TrainConfig(learning_rate=0.05)
    params = _scalar(1.0)
    state = AdamState.zeros(params)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 2.0, 0.01], start=1):
        params, state = adam_step(params, {"w": np.array([g])}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
        assert abs(float(params["w"].data[0]) - w) < 1e-15
    assert state.t == 4


@pytest.mark.parametrize("lr", [1e-3, 0.1])
def test_adam_scalar_quadratic_converges(lr):
    cfg = TrainConfig(learning_rate=lr)
    params = _scalar(0.0)
    state = AdamState.zeros(params)
    dist = []
    for _ in range(100):
        w = params["w"].data
        params, state = adam_step(params, {"w": 2.0 * (w - 3.0)}, state, cfg)
        dist.append(abs(float(params["w"].data[0]) - 3.0))
    windows = [np.mean(dist[i:i + 20]) for i in range(0, 100, 20)]
    assert all(b < a for a, b in zip(windows, windows[1:]))
    if lr == 1e-3:
        assert all(b < a for a, b in zip(dist, dist[1:]))
    else:
        assert dist[-1] < 0.5


@pytest.mark.parametrize("c", [1.0, 100.0])
def test_adam_first_step_scale_invariant(c):
    g = np.array([0.7, -0.02, 3.0])
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    ref, _ = adam_step(params, {"w": g}, AdamState.zeros(params), TrainConfig())
    scaled, _ = adam_step(params, {"w": c * g}, AdamState.zeros(params), TrainConfig())
    np.testing.assert_allclose(scaled["w"].data, ref["w"].data, atol=1e-6 * 1e-3)


def test_adam_shape_mismatch():
    params = _scalar(0.0)
    with pytest.raises(ShapeError, match="w"):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), TrainConfig())


# ---------------------------------------------------------------------------
# variants


def test_variant_parameter_sets():
    fused, survey, external = (build_variant(v, CFG) for v in ("fused", "survey_only", "external_only"))
    assert fused.param_count() > survey.param_count()
    assert survey.param_count() == M.count_params({n: M.param_shapes(CFG)[n] for n in survey.param_names()})
    assert not any(n.startswith(("xattn.", "gate.", "external_enc.")) for n in survey.param_names())
    assert not any(n.startswith(("xattn.", "gate.", "survey_enc.")) for n in external.param_names())
    # shared encoder and head shapes
    shapes = M.param_shapes(CFG)
    assert set(survey.param_names()) <= set(shapes) and set(external.param_names()) <= set(shapes)


def test_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        build_variant("early_fusion", CFG)


@pytest.mark.parametrize("variant, moved", [("survey_only", "x_e"), ("external_only", "x_s")])
def test_variant_isolation(variant, moved):
    asm = build_variant(variant, CFG)
    params = asm.init_params(3)
    rng = np.random.default_rng(0)
    x = {"x_s": rng.normal(size=(5, 6)), "x_e": rng.normal(size=(5, 5))}
    base, gate = asm.forward(x["x_s"], x["x_e"], params)
    assert gate is None
    x[moved] = x[moved] + rng.normal(size=x[moved].shape) * 10
    out, _ = asm.forward(x["x_s"], x["x_e"], params)
    assert out.data.tobytes() == base.data.tobytes()


def test_fused_depends_on_both_inputs():
    asm = build_variant("fused", CFG)
    params = asm.init_params(3)
    rng = np.random.default_rng(0)
    x_s, x_e = rng.normal(size=(5, 6)), rng.normal(size=(5, 5))
    base = asm.predict(x_s, x_e, params)
    assert not np.allclose(asm.predict(x_s + 1, x_e, params), base)
    assert not np.allclose(asm.predict(x_s, x_e + 1, params), base)


def test_predict_batches_match_single_pass():
    asm = build_variant("fused", CFG)
    params = asm.init_params(0)
    rng = np.random.default_rng(1)
    x_s, x_e = rng.normal(size=(11, 6)), rng.normal(size=(11, 5))
    np.testing.assert_allclose(asm.predict(x_s, x_e, params, batch_size=4), asm.predict(x_s, x_e, params), atol=1e-15)


# ---------------------------------------------------------------------------
# train_step


def _batch(seed=0, n=8, zero_mask=False):
    rng = np.random.default_rng(seed)
    mask = np.zeros((n, 7), dtype=np.int8) if zero_mask else rng.choice([-1, 0, 1], size=(n, 7)).astype(np.int8)
    return Batch(rng.normal(size=(n, 6)), rng.normal(size=(n, 5)), mask)


def test_all_zero_mask_step_is_a_no_op():
    asm = build_variant("fused", CFG)
    params = asm.init_params(0)
    state = AdamState.zeros(params)
    loss, new, new_state = train_step(_batch(zero_mask=True), params, state, asm, TrainConfig(), np.random.default_rng(0))
    assert loss == 0.0
    assert new_state.t == 0
    assert all(new[k].data.tobytes() == params[k].data.tobytes() for k in params)


def test_train_step_is_deterministic():
    asm = build_variant("fused", CFG)

    def trajectory():
        params = asm.init_params(0)
        state = AdamState.zeros(params)
        rng = np.random.default_rng(5)
        out = []
        for s in range(5):
            loss, params, state = train_step(_batch(s), params, state, asm, TrainConfig(), rng)
            out.append(loss)
        return out

    assert trajectory() == trajectory()


@pytest.mark.parametrize("variant", ["fused", "survey_only"])
def test_two_hundred_steps_reduce_loss(variant):
    # labels are a fixed linear rule of the survey features
    rng = np.random.default_rng(0)
    x_s, x_e = rng.normal(size=(256, 6)), rng.normal(size=(256, 5))
    w = rng.normal(size=(6, 7))
    mask = np.where(x_s @ w > 0, 1, -1).astype(np.int8)
    asm = build_variant(variant, CFG)
    params = asm.init_params(0)
    state = AdamState.zeros(params)
    cfg = TrainConfig(learning_rate=3e-3)
    step_rng = np.random.default_rng(1)
    initial = float(M.masked_bce_loss(asm.forward(x_s, x_e, params)[0], mask).data)
    for s in range(200):
        idx = np.random.default_rng([7, s]).choice(256, 32, replace=False)
        _, params, state = train_step(Batch(x_s[idx], x_e[idx], mask[idx]), params, state, asm, cfg, step_rng)
    final = float(M.masked_bce_loss(asm.forward(x_s, x_e, params)[0], mask).data)
    assert final < 0.8 * initial


# ---------------------------------------------------------------------------
# data plumbing


def test_split_is_deterministic_and_partitions():
    tr, va = split_users(1000, 0.1, seed=3)
    assert len(va) == 100 and len(tr) == 900
    assert np.array_equal(np.sort(np.concatenate([tr, va])), np.arange(1000))
    tr2, va2 = split_users(1000, 0.1, seed=3)
    assert np.array_equal(va, va2)
    assert not np.array_equal(va, split_users(1000, 0.1, seed=4)[1])


def test_batch_stream_repeats_and_reshuffles():
    stream = BatchStream(np.arange(10), 4, np.random.default_rng(0))
    drawn = np.concatenate([next(stream) for _ in range(5)])
    assert len(drawn) == 20
    assert sorted(drawn[:10]) == list(range(10)) and sorted(drawn[10:]) == list(range(10))
    assert not np.array_equal(drawn[:10], drawn[10:])


def test_batch_stream_empty():
    with pytest.raises(ValueError):
        BatchStream(np.arange(0), 4, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# train


@pytest.fixture(scope="module")
def population():
    return generate_dataset(GeneratorConfig(n_users=5000, n_keys=60, seed=0))


def test_desk_training_reduces_validation_loss(population):
    manifest, records = population
    result = train(population, TrainConfig(), model_config_for(manifest))
    assert len(result.log) == 10
    assert result.log[-1].val_loss < result.log[0].val_loss
    csv = result.log_csv().splitlines()
    assert csv[0] == "epoch,train_loss,val_loss" and len(csv) == 11


def test_same_seed_same_log(population):
    small = stack(population[1][:400])
    cfg = TrainConfig(epochs=2, steps_per_epoch=10, validation_steps=2)
    a = train(small, cfg, model_config_for(population[0]))
    b = train(small, cfg, model_config_for(population[0]))
    assert a.log_csv() == b.log_csv()
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_repeat_covers_more_steps_than_users(population):
    tiny = stack(population[1][:20])
    result = train(tiny, TrainConfig(epochs=1, steps_per_epoch=30, batch_size=16), model_config_for(population[0]))
    assert result.state.t == 30


def test_empty_dataset_rejected(population):
    with pytest.raises(ValueError, match="empty"):
        train([], TrainConfig(), model_config_for(population[0]))


# ---------------------------------------------------------------------------
# checkpoints


@pytest.fixture
def trained(tmp_path):
    asm = build_variant("fused", CFG)
    params = asm.init_params(0)
    state = AdamState.zeros(params)
    _, params, state = train_step(_batch(), params, state, asm, TrainConfig(), np.random.default_rng(0))
    path = tmp_path / "model.lntn"
    save_checkpoint(path, params, state, {"model": CFG.to_dict(), "train": {"seed": 0}})
    return asm, params, state, path


def test_checkpoint_roundtrip_is_bitwise(trained):
    asm, params, state, path = trained
    ck = load_checkpoint(path)
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].data.tobytes() == params[k].data.tobytes()
        assert ck.state.m[k].tobytes() == state.m[k].tobytes()
        assert ck.state.v[k].tobytes() == state.v[k].tobytes()
    assert ck.state.t == state.t == 1
    assert ck.configs["model"] == CFG.to_dict()
    x = _batch(9)
    assert asm.predict(x.x_s, x.x_e, ck.params).tobytes() == asm.predict(x.x_s, x.x_e, params).tobytes()


def test_checkpoint_starts_with_magic_and_version(trained):
    raw = trained[3].read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == FORMAT_VERSION


def test_checkpoint_float32_roundtrip(tmp_path):
    params = {"a": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))}
    save_checkpoint(tmp_path / "f32", params)
    back = load_checkpoint(tmp_path / "f32").params["a"].data
    assert back.dtype == np.float32 and back.tobytes() == params["a"].data.tobytes()


def test_truncated_checkpoint(trained):
    path = trained[3]
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(trained):
    path = trained[3]
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(trained):
    path = trained[3]
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(trained):
    path = trained[3]
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
