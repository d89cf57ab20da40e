import re
import json
import math
import pytest
import numpy as np
from app import config, trainer
from app.adapters import AdapterConfig, Variant
from app.checkpoint import load_checkpoint
from app.errors import ConfigurationError, ContractError, NumericalError, ShapeError
from app.synth_qa import TASKS, DataConfig, build_split
from app.tensor import Tensor
from app.trainer import (
    AdamWState,
    AnswerHead,
    PromptAwareModel,
    TrainConfig,
    adamw_step,
    adapter_config_from,
    epoch_batches,
    lr_schedule,
    train,
)

DATA = DataConfig(sizes={t.value: 8 for t in TASKS}, train_fraction=0.5)
FAST = TrainConfig(warmup_steps=2, max_epochs=2, iters_per_epoch=3, batch_size=2)


@pytest.fixture(scope="module")
def split():
    return build_split(DATA, 0)


def small_adapter(variant=Variant.global_plus_local, **kw):
    dims = dict(N=9, M=8, C=8, D=6, C_i=8, E=8, C_prime=8)
    return AdapterConfig(variant=variant, **{**dims, **kw})


def without_wall(metrics):
    return [{k: v for k, v in m.items() if k != "wall_ms"} for m in metrics]


# --- SCHEDULE ---


def test_schedule_endpoints():
    cfg = TrainConfig()
    assert cfg.total_steps == 2000
    assert lr_schedule(0, cfg) == 1e-6
    assert lr_schedule(1000, cfg) == pytest.approx(8e-5, rel=1e-12)
    assert abs(lr_schedule(cfg.total_steps - 1, cfg) - 1e-5) <= 1e-12


def test_schedule_is_continuous_at_the_junction():
    cfg = TrainConfig()
    below = lr_schedule(cfg.warmup_steps - 1e-9, cfg)
    assert below == pytest.approx(cfg.lr_peak, rel=1e-9)
    assert lr_schedule(cfg.warmup_steps, cfg) == pytest.approx(cfg.lr_peak, rel=1e-12)


def test_schedule_shape():
    cfg = TrainConfig()
    warm = [lr_schedule(s, cfg) for s in range(0, 1001)]
    decay = [lr_schedule(s, cfg) for s in range(1000, 2000)]
    assert all(a < b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(decay, decay[1:]))
    assert min(decay) >= cfg.lr_min


def test_schedule_without_room_for_decay():
    cfg = TrainConfig(warmup_steps=10, max_epochs=1, iters_per_epoch=5)
    assert lr_schedule(10, cfg) == cfg.lr_min


def test_schedule_rejects_negative_step():
    with pytest.raises(ContractError):
        lr_schedule(-1, TrainConfig())


# --- CONFIG ---


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.beta1, cfg.beta2, cfg.weight_decay) == (0.9, 0.999, 0.05)
    assert (cfg.lr_start, cfg.lr_peak, cfg.lr_min, cfg.warmup_steps) == (1e-6, 8e-5, 1e-5, 1000)


@pytest.mark.parametrize(
    "overrides",
    [{"lr_start": 8e-5}, {"lr_min": 1e-4}, {"beta1": 1.0}, {"batch_size": 0}, {"eps": 0.0}],
)
def test_train_config_validation(overrides):
    with pytest.raises(ConfigurationError):
        TrainConfig(**overrides)


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict(config.DEFAULT_CONFIG["train"], seed=7)
    assert cfg.seed == 7 and cfg.frozen == ("encoder.*",)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_freeze_mask_globs():
    cfg = TrainConfig(frozen=("encoder.*", "adapter.local.*"))
    assert cfg.is_frozen("encoder.image.table")
    assert cfg.is_frozen("adapter.local.mlp.0.w")
    assert not cfg.is_frozen("adapter.global.attn.w_o")
    assert not cfg.is_frozen("head.w")


# --- ADAMW ---


def test_adamw_scalar_hand_case():
    cfg = TrainConfig(weight_decay=0.05)
    p = Tensor([[1.0]], requires_grad=True)
    lr, g = 0.1, 0.5
    adamw_step({"adapter.w": p}, {"adapter.w": np.array([[g]])}, AdamWState(), lr, cfg)

    m_hat = ((1 - cfg.beta1) * g) / (1 - cfg.beta1)
    v_hat = ((1 - cfg.beta2) * g * g) / (1 - cfg.beta2)
    expected = 1.0 * (1 - lr * cfg.weight_decay) - lr * m_hat / (math.sqrt(v_hat) + cfg.eps)
    assert abs(p.item() - expected) <= 1e-12


def test_adamw_zero_gradient_without_decay_is_a_no_op():
    cfg = TrainConfig(weight_decay=0.0)
    values = np.random.default_rng(0).normal(size=(3, 2))
    p = Tensor(values.copy(), requires_grad=True)
    state = adamw_step({"adapter.w": p}, {"adapter.w": np.zeros((3, 2))}, AdamWState(), 1e-3, cfg)
    assert np.array_equal(p.values, values)
    assert state.step == 1


def test_adamw_leaves_frozen_parameters_alone():
    cfg = TrainConfig()
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    state = adamw_step({"encoder.text.table": p}, {"encoder.text.table": np.ones((2, 2))}, AdamWState(), 1e-2, cfg)
    assert np.array_equal(p.values, np.ones((2, 2)))
    assert "encoder.text.table" not in state.m


def test_adamw_rejects_non_finite_gradients():
    cfg = TrainConfig()
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2)), requires_grad=True)
    grads = {"adapter.a": np.ones((1, 2)), "adapter.b": np.array([[1.0, np.inf]])}
    with pytest.raises(NumericalError, match="adapter.b.*step 1"):
        adamw_step({"adapter.a": a, "adapter.b": b}, grads, AdamWState(), 1e-2, cfg)
    assert np.array_equal(a.values, np.ones((1, 2)))


def test_adamw_rejects_gradient_shape_mismatch():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        adamw_step({"adapter.w": p}, {"adapter.w": np.ones((1, 2))}, AdamWState(), 1e-2, TrainConfig())


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    cfg = TrainConfig()
    rng = np.random.default_rng(3)
    init = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]

    p = Tensor(init.copy(), requires_grad=True)
    state = AdamWState()
    ref = torch.tensor(init.copy(), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW(
        [ref], lr=1e-2, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    for g in grads:
        adamw_step({"adapter.w": p}, {"adapter.w": g}, state, 1e-2, cfg)
        ref.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
    assert np.allclose(p.values, ref.detach().numpy(), atol=1e-12, rtol=0)


# --- MODEL ---


def test_answer_head_logits_cover_vocabulary():
    head = AnswerHead.initialize(5, 21)
    logits = head.logits(Tensor(np.ones((3, 5))))
    assert logits.shape == (1, 21)
    assert np.array_equal(logits.values, np.zeros((1, 21)))


def test_adapter_config_follows_data_grid():
    cfg = config.load_configuration(None, seed=4)
    adapter_cfg = adapter_config_from(cfg, DataConfig(rows=2, cols=4))
    assert adapter_cfg.N == 8
    assert adapter_cfg.C == cfg["encoder"]["C"] and adapter_cfg.seed == 4


def test_model_parameter_names(split):
    model = PromptAwareModel.for_split(small_adapter(), DATA, 1234)
    names = [n for n, _ in model.named_parameters()]
    assert names[:2] == ["encoder.image.table", "encoder.text.table"]
    assert names[-1] == "head.w"
    assert any(n.startswith("projector.") for n in names)
    assert len(names) == len(set(names))


def test_model_rejects_grid_mismatch():
    with pytest.raises(ConfigurationError):
        PromptAwareModel.build(small_adapter(N=4), 3, 3, 1234, DATA.vocab_signature())


def test_untrained_model_predicts_first_answer_on_ties(split):
    model = PromptAwareModel.for_split(small_adapter(), DATA, 1234)
    assert model.predict(split.test[0]) == model.answers[0]


def test_state_dict_round_trip(split):
    a = PromptAwareModel.for_split(small_adapter(seed=1), DATA, 1234)
    b = PromptAwareModel.for_split(small_adapter(seed=2), DATA, 1234)
    b.load_state_dict(a.state_dict())
    for (name, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(x.values, y.values), name


def test_load_state_dict_rejects_foreign_parameters():
    model = PromptAwareModel.for_split(small_adapter(), DATA, 1234)
    state = model.state_dict()
    state["adapter.extra"] = np.zeros((1, 1))
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)


def test_unknown_answer_is_rejected():
    model = PromptAwareModel.for_split(small_adapter(), DATA, 1234)
    with pytest.raises(ConfigurationError):
        model.answer_index("purple")


def test_stored_weights_are_divided_by_the_multiplier(split):
    cfg, signature = small_adapter(), DATA.vocab_signature()
    scaled = PromptAwareModel.build(cfg, 3, 3, 1234, signature)
    plain = PromptAwareModel.build(cfg, 3, 3, 1234, signature, weight_multiplier=1.0)
    assert scaled.config_dict()["weight_multiplier"] == trainer.WEIGHT_MULTIPLIER

    for (name, a), (_, b) in zip(scaled.named_parameters(), plain.named_parameters()):
        factor = 1.0 if name.startswith("encoder.") else trainer.WEIGHT_MULTIPLIER
        assert np.allclose(a.values * factor, b.values, rtol=1e-14, atol=0), name

    head = np.random.default_rng(0).normal(size=plain.head.w.shape)
    plain.head.w.values = head
    scaled.head.w.values = head / trainer.WEIGHT_MULTIPLIER
    for qa in split.test[:3]:
        assert np.allclose(scaled.forward(qa)[0].values, plain.forward(qa)[0].values, rtol=1e-10, atol=1e-12)


def test_multiplier_must_be_positive():
    with pytest.raises(ConfigurationError, match="multiplier"):
        PromptAwareModel.build(small_adapter(), 3, 3, 1234, DATA.vocab_signature(), weight_multiplier=0.0)


# --- BATCHES ---


def test_epoch_batches_are_seeded():
    cfg = TrainConfig(iters_per_epoch=7, batch_size=3, seed=5)
    first = epoch_batches(cfg, 0, 10)
    assert first == epoch_batches(cfg, 0, 10)
    assert first != epoch_batches(cfg, 1, 10)
    assert len(first) == 7 and all(len(b) == 3 for b in first)
    assert all(0 <= i < 10 for b in first for i in b)


# --- TRAINING ---


def test_first_loss_is_log_of_answer_count(split):
    result = train(FAST, small_adapter(), split)
    assert len(result.metrics) == FAST.total_steps
    assert result.metrics[0]["loss"] == pytest.approx(math.log(21), rel=1e-12)
    assert list(result.metrics[0]) == ["step", "lr", "loss", "grad_norm", "epoch", "wall_ms"]


def test_zero_steps_leaves_initialization(split, tmp_path):
    cfg = TrainConfig(max_epochs=0, iters_per_epoch=5)
    result = train(cfg, small_adapter(), split, out_dir=tmp_path)
    _, init = load_checkpoint(tmp_path / "checkpoint_init.npz")
    _, final = load_checkpoint(result.checkpoint)
    assert result.metrics == []
    assert set(init) == set(final)
    assert all(np.array_equal(init[n], final[n]) for n in init)


def test_training_writes_artifacts(split, tmp_path):
    run_config = config.load_configuration(None, seed=0)
    result = train(FAST, small_adapter(), split, out_dir=tmp_path, run_config=run_config)
    for name in ("checkpoint_init.npz", "checkpoint_epoch1.npz", "checkpoint_epoch2.npz", "checkpoint_final.npz"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "checkpoint_final.npz").read_bytes() == (tmp_path / "checkpoint_epoch2.npz").read_bytes()

    lines = result.metrics_path.read_text().splitlines()
    assert [json.loads(line) for line in lines] == result.metrics
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config_hash"] == config.config_hash(run_config)
    assert run["model_config_hash"] == result.model.config_hash()


def test_training_is_deterministic(split, tmp_path):
    a = train(FAST, small_adapter(), split, out_dir=tmp_path / "a")
    b = train(FAST, small_adapter(), split, out_dir=tmp_path / "b")
    assert without_wall(a.metrics) == without_wall(b.metrics)
    _, sa = load_checkpoint(a.checkpoint)
    _, sb = load_checkpoint(b.checkpoint)
    assert all(np.array_equal(sa[n], sb[n]) for n in sa)


def test_metrics_files_match_byte_for_byte_without_wall_time(split, tmp_path):
    wall = re.compile(rb', "wall_ms": \d+')
    a = train(FAST, small_adapter(), split, out_dir=tmp_path / "a")
    b = train(FAST, small_adapter(), split, out_dir=tmp_path / "b")
    raw_a, raw_b = a.metrics_path.read_bytes(), b.metrics_path.read_bytes()
    assert len(wall.findall(raw_a)) == FAST.total_steps
    assert wall.sub(b"", raw_a) == wall.sub(b"", raw_b)


def test_worker_count_does_not_change_results(split):
    serial = train(FAST, small_adapter(), split)
    parallel = train(TrainConfig(**{**FAST.to_dict(), "workers": 2}), small_adapter(), split)
    assert without_wall(serial.metrics) == without_wall(parallel.metrics)


@pytest.mark.parametrize("frozen", [("encoder.*",), (), ("encoder.*", "adapter.local.*")])
def test_frozen_parameters_survive_training(split, tmp_path, frozen):
    cfg = TrainConfig(**{**FAST.to_dict(), "frozen": frozen})
    result = train(cfg, small_adapter(), split, out_dir=tmp_path)
    _, init = load_checkpoint(tmp_path / "checkpoint_init.npz")
    _, final = load_checkpoint(result.checkpoint)

    for name in init:
        if cfg.is_frozen(name) or name.startswith("encoder."):
            assert np.array_equal(init[name], final[name]), name
    assert not np.array_equal(init["head.w"], final["head.w"])


def test_training_rejects_a_moved_frozen_tensor(split, mocker):
    built = []
    real_build = PromptAwareModel.for_split

    def capture(*args, **kwargs):
        model = real_build(*args, **kwargs)
        built.append(model)
        return model

    def drift(params, grads, state, lr, cfg):
        built[0].image_encoder.embedding_table.values += 1.0
        return state

    mocker.patch.object(PromptAwareModel, "for_split", side_effect=capture)
    mocker.patch("app.trainer.adamw_step", side_effect=drift)
    with pytest.raises(ContractError, match="encoder.image.table"):
        train(FAST, small_adapter(), split)


def test_non_finite_loss_dumps_batch(split, tmp_path, mocker):
    real = trainer._item_loss
    mocker.patch(
        "app.trainer._item_loss",
        side_effect=lambda model, qa, wrt: (float("nan"), real(model, qa, wrt)[1]),
    )
    with pytest.raises(NumericalError, match="batch ids"):
        train(FAST, small_adapter(), split, out_dir=tmp_path)

    dump = json.loads((tmp_path / "nan_batch.json").read_text())
    assert dump["step"] == 0
    assert dump["batch_ids"] == epoch_batches(FAST, 0, len(split.train))[0]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_trends_down_on_default_task(seed):
    cfg = config.load_configuration(None, seed=seed)
    data_cfg = DataConfig.from_dict(cfg["data"])
    data = build_split(data_cfg, seed)
    result = train(
        TrainConfig.from_dict(cfg["train"], seed),
        adapter_config_from(cfg, data_cfg),
        data,
        encoder_seed=cfg["encoder"]["seed"],
    )
    losses = [m["loss"] for m in result.metrics]
    assert len(losses) == 2000
    assert np.mean(losses[1900:2000]) < np.mean(losses[0:100])


@pytest.mark.slow
def test_only_trainable_parameters_move_in_500_steps(tmp_path):
    cfg = config.load_configuration(None, seed=0)
    data_cfg = DataConfig.from_dict(cfg["data"])
    train_cfg = TrainConfig.from_dict({**cfg["train"], "max_epochs": 1, "iters_per_epoch": 500}, seed=0)
    result = train(train_cfg, adapter_config_from(cfg, data_cfg), build_split(data_cfg, 0), out_dir=tmp_path)

    _, init = load_checkpoint(tmp_path / "checkpoint_init.npz")
    _, final = load_checkpoint(result.checkpoint)
    for name in init:
        if name.startswith("encoder."):
            assert init[name].tobytes() == final[name].tobytes(), name
        else:
            assert not np.array_equal(init[name], final[name]), name
