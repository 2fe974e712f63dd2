import logging

import numpy as np
import pytest

from pointrt import autodiff as ad
from pointrt.em import EmConfig
from pointrt.learn import (
    Adam,
    TrainConfig,
    cir_loss,
    constrain,
    initial_raw,
    loss_and_grad,
    physical,
    raw_from_params,
    simulate_cir,
    total_loss,
    train,
)
from pointrt.pipeline import SimulationConfig, build_links, reference_cirs, simulate
from pointrt.trace import TraceConfig


@pytest.fixture(scope="module")
def corner_links(corner_prep):
    res = simulate(corner_prep.scene, SimulationConfig(trace=TraceConfig(max_depth=2)), prepared=corner_prep)
    return res, build_links(res, reference_cirs(res))


def test_loss_anchors():
    h = np.random.default_rng(0).normal(size=129) + 1j * np.random.default_rng(1).normal(size=129)
    assert cir_loss(h, h) == 0.0
    assert abs(cir_loss(np.zeros_like(h), h) - 1.0) <= 1e-12
    assert abs(cir_loss(2 * h, h) - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        cir_loss(h[:5], h)
    with pytest.raises(ValueError):
        cir_loss(h, np.zeros_like(h))


def test_constraint_maps_and_inverse():
    raw = raw_from_params([1.5, 9.0], [0.0001, 2.0], [0.01, 0.99])
    np.testing.assert_allclose(physical(raw), [[1.5, 0.0001, 0.01], [9.0, 2.0, 0.99]], rtol=1e-10)
    np.testing.assert_allclose(physical(initial_raw(3)), np.tile([3.0, 0.01, 0.3], (3, 1)), rtol=1e-12)
    extreme = np.array([[-800.0, -800.0, -800.0], [800.0, 800.0, 800.0]])
    p = physical(extreme)
    assert (p[:, 0] >= 1).all() and (p[:, 1] >= 0).all() and ((p[:, 2] >= 0) & (p[:, 2] <= 1)).all()
    m = constrain(ad.Var(extreme))
    assert np.isfinite(m.relative_permittivity.value).all()


def test_adam_first_step_is_lr_times_sign():
    opt = Adam((3,), TrainConfig(learning_rate=0.1))
    out = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_zero_learning_rate_keeps_parameters(corner_links):
    res, links = corner_links
    h = train(links, 2, TrainConfig(learning_rate=0.0, iterations=5), num_receivers=1)
    assert np.all(h.params == h.params[0])
    assert np.isfinite(h.loss).all()


def test_unused_material_gets_no_gradient(corner_links):
    res, links = corner_links
    link = links[0]
    raw = initial_raw(3)  # one extra material never seen on any path
    _, grad = loss_and_grad(link, raw, EmConfig())
    assert np.all(grad[2] == 0)
    assert np.any(grad[:2] != 0)
    h = train(links, 3, TrainConfig(iterations=3), num_receivers=1)
    assert h.used.tolist() == [True, True, False]
    np.testing.assert_array_equal(h.params[-1, 2], h.params[0, 2])


def test_training_reduces_loss_and_is_deterministic(corner_links, tmp_path):
    res, links = corner_links
    cfg = TrainConfig(learning_rate=0.05, iterations=150, seed=4)
    a = train(links, 2, cfg, num_receivers=1)
    b = train(links, 2, cfg, num_receivers=1)
    assert total_loss(links, a.raw) < 0.2 * total_loss(links, initial_raw(2))
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    head = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert head[:3] == ["iteration", "loss", "label_0_relative_permittivity"]


def test_receiver_without_paths_is_skipped(corner_links, caplog):
    res, links = corner_links
    with caplog.at_level(logging.WARNING, logger="pointrt.learn"):
        h = train(links, 2, TrainConfig(iterations=6, seed=1), num_receivers=3)
    skipped = h.rx != 0
    assert skipped.any() and np.isnan(h.loss[skipped]).all()
    assert "no paths" in caplog.text


def test_simulated_cir_matches_reference(corner_links):
    res, links = corner_links
    target = links[0].target
    np.testing.assert_allclose(simulate_cir(res.link(0, 0), res.scene.materials), target, atol=1e-15)
    raw = raw_from_params(*np.array([[m.relative_permittivity, m.conductivity, m.scattering_coefficient]
                                     for m in res.scene.materials.values()]).T)
    assert loss_and_grad(links[0], raw, EmConfig())[0] < 1e-20
