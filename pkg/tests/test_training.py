import json

import numpy as np
import pytest

from lilac import synthbench as sb
from lilac import training as tr
from lilac.checkpoint import Checkpoint, file_digest
from lilac.flowdecoder import FlowGenerator
from lilac.numerics import tensor as T

SMALL = {"d_model": 16, "d_txt": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 1}
SMALL_REFINER = {"d_model": 16, "d_txt": 16, "n_heads": 2, "n_layers": 1}


@pytest.fixture(scope="module")
def episodes():
    return [sb.generate_episode(sb.sample_scene_spec(s), f"ep{s:05d}") for s in range(6)]


def small_cfg(**kw):
    base = dict(seed=1, lr=1e-3, batch_size=4, max_steps=4, model=SMALL)
    base.update(kw)
    return tr.TrainConfig(**base)


# -- configuration --------------------------------------------------------------------------
@pytest.mark.parametrize("kw", [{"lr": -1e-4}, {"batch_size": 0}, {"lambda_sem": -0.5},
                                {"max_steps": -1}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        tr.TrainConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = small_cfg(no_vp=True)
    assert tr.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="learning_rate"):
        tr.TrainConfig.from_dict({"learning_rate": 0.1})


def test_zero_learning_rate_is_allowed():
    assert tr.TrainConfig(lr=0.0).lr == 0.0


def test_no_srl_zeroes_semantic_weight():
    assert tr.TrainConfig(lambda_sem=2.5, no_srl=True).effective_lambda_sem == 0.0
    assert tr.TrainConfig(lambda_sem=2.5).effective_lambda_sem == 2.5


# -- optimiser ----------------------------------------------------------------------------
def test_adam_matches_hand_update():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = tr.Adam([p], lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = np.zeros(2)
    v = np.zeros(2)
    x = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)


def test_adam_first_step_moves_by_lr():
    p = T.Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([42.0])
    tr.Adam([p], lr=0.01).step()
    assert p.data[0] == pytest.approx(2.99, abs=1e-9)


def test_clip_gradients():
    a = T.Tensor(np.zeros(2), requires_grad=True)
    b = T.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    norm, clipped = tr.clip_gradients([a, b], 1.0)
    assert norm == 5.0 and clipped
    np.testing.assert_allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8])
    norm, clipped = tr.clip_gradients([a, b], 2.0)
    assert norm == pytest.approx(1.0) and not clipped


def test_batch_order_covers_each_epoch():
    order = tr._batch_order(10, 5, 6, seed=3)
    for epoch in range(3):
        seen = np.concatenate(order[2 * epoch:2 * epoch + 2])
        assert sorted(seen.tolist()) == list(range(10))
    assert all(np.array_equal(a, b) for a, b in zip(order, tr._batch_order(10, 5, 6, seed=3)))


# -- flow generator training --------------------------------------------------------------
def test_same_seed_same_checkpoint(episodes, tmp_path):
    a = tr.train_flow(episodes, small_cfg(), tmp_path / "a")
    b = tr.train_flow(episodes, small_cfg(), tmp_path / "b")
    assert file_digest(a.checkpoint_path) == file_digest(b.checkpoint_path)
    assert a.log.losses() == b.log.losses()
    c = tr.train_flow(episodes, small_cfg(seed=2))
    assert c.checkpoint.digest() != a.checkpoint.digest()


def test_log_fields_and_files(episodes, tmp_path):
    res = tr.train_flow(episodes, small_cfg(), tmp_path)
    lines = (tmp_path / "flow_train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    entry = json.loads(lines[0])
    assert set(entry) == {"step", "loss", "l_flow", "l_sem", "grad_norm", "clipped", "wall_time"}
    assert entry["loss"] == pytest.approx(entry["l_flow"] + entry["l_sem"])
    assert res.checkpoint.meta["ablations"] == {"no_srl": False, "no_vp": False}


def test_no_srl_logs_flow_loss_only(episodes):
    res = tr.train_flow(episodes, small_cfg(no_srl=True))
    for e in res.log.entries:
        assert "l_sem" not in e and e["loss"] == e["l_flow"]
    assert res.checkpoint.meta["ablations"] == {"no_srl": True, "no_vp": False}


def test_first_step_lowers_loss_on_a_frozen_batch(episodes):
    cfg = small_cfg(lr=1e-4, batch_size=6, max_steps=1)
    data = tr.prepare_flow_data(episodes, cfg)
    model = FlowGenerator(tr.flow_model_config(cfg, episodes))
    with T.no_grad():
        before = model.losses(data, 1.0)["total"].item()
    tr.train_flow(episodes, cfg, model=model)
    with T.no_grad():
        after = model.losses(data, 1.0)["total"].item()
    assert after < before


def test_checkpoint_restores_generation(episodes, tmp_path):
    res = tr.train_flow(episodes, small_cfg(), tmp_path)
    loaded = tr.load_flow_model(res.checkpoint_path)
    data = tr.prepare_flow_data(episodes[:2], small_cfg())
    assert np.array_equal(np.stack(loaded.generate(data)), np.stack(res.model.generate(data)))


def test_ablation_mismatch(episodes):
    ckpt = tr.train_flow(episodes, small_cfg(max_steps=1, no_vp=True)).checkpoint
    tr.check_ablations(ckpt, {"no_vp": True, "no_srl": False})
    with pytest.raises(tr.AblationMismatch, match="no_vp"):
        tr.check_ablations(ckpt, {"no_vp": False})
    tr.check_ablations(ckpt, {"no_vp": False}, force=True)


def test_loading_wrong_kind(episodes):
    res = tr.train_refiner(episodes, small_cfg(max_steps=1, model=SMALL_REFINER))
    with pytest.raises(ValueError, match="refiner"):
        tr.load_flow_model(res.checkpoint)


def test_non_finite_loss_keeps_last_good(episodes, tmp_path, monkeypatch):
    real = FlowGenerator.losses
    calls = {"n": 0}

    def poisoned(self, batch, lam):
        calls["n"] += 1
        out = real(self, batch, lam)
        if calls["n"] == 3:
            out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(FlowGenerator, "losses", poisoned)
    with pytest.raises(tr.NonFiniteLoss) as info:
        tr.train_flow(episodes, small_cfg(), tmp_path)
    assert info.value.last_good == str(tmp_path / "flow_last_good.ckpt")
    ckpt = Checkpoint.load(info.value.last_good)
    assert ckpt.meta["step"] == 2
    assert all(np.isfinite(v).all() for v in ckpt.tensors.values())


# -- refiner training -----------------------------------------------------------------------
def test_refiner_starts_at_coarse_loss(episodes):
    from lilac.detokenizer import TrajectoryRefiner, RefinerConfig, trajectory_loss, coarse_trajectory

    model = TrajectoryRefiner(RefinerConfig(**SMALL_REFINER))
    coarse = [coarse_trajectory(e.gt_flow, e.depth, e.camera) for e in episodes]
    per = [trajectory_loss(c.poses, e.gt_trajectory) for c, e in zip(coarse, episodes)]
    assert tr.refiner_loss_on(model, episodes) == pytest.approx(np.mean(per), abs=1e-9)


def test_refiner_reduces_systematic_offset(episodes):
    shifted = tr.with_trajectory_offset(episodes)
    cfg = small_cfg(lr=3e-3, batch_size=6, max_steps=60, model=SMALL_REFINER)
    res = tr.train_refiner(shifted, cfg)
    before = res.log.losses()[0]
    after = tr.refiner_loss_on(res.model, shifted)
    assert after < 0.7 * before


def test_refiner_same_seed_same_digest(episodes):
    cfg = small_cfg(max_steps=3, model=SMALL_REFINER)
    a = tr.train_refiner(episodes, cfg).checkpoint
    b = tr.train_refiner(episodes, cfg).checkpoint
    assert a.digest() == b.digest()
    assert a.meta["flow_source"] == "gt"


def test_refiner_flow_source_validation(episodes):
    with pytest.raises(ValueError):
        tr.train_refiner(episodes, small_cfg(), flow_source="teacher")
    with pytest.raises(ValueError, match="flow model"):
        tr.train_refiner(episodes, small_cfg(), flow_source="predicted")


def test_trajectory_offset_is_applied(episodes):
    shifted = tr.with_trajectory_offset(episodes[:1], translation=(0.1, 0.0, 0.0), rotvec=(0, 0, 0))
    for p, q in zip(episodes[0].gt_trajectory, shifted[0].gt_trajectory):
        np.testing.assert_allclose(q.translation - p.translation, [0.1, 0, 0])
        np.testing.assert_array_equal(q.rotation, p.rotation)
