import numpy as np
import pytest

from hmnet import nn_core as nn
from hmnet.datasets import Neighbor, build_scenes, synth_generate
from hmnet.harness import RunConfig
from hmnet.model import HMNet, ModelConfig, SceneBatch
from hmnet.objectives import ConfigurationError

OBS, PRED = 6, 8


def _cfg(**kw) -> RunConfig:
    base = dict(obs_len=OBS, pred_len=PRED, embed=4, enc_hidden_s=8, enc_hidden_v=6, enc_hidden_a=5,
                dec_hidden_s=8, dec_hidden_v=6, dec_hidden_a=5, proj_dim=3, goal_dim=3, latent=3,
                cvae_hidden=6, conv1_channels=4, conv2_channels=3, seed=2)
    base.update(kw)
    return RunConfig(**base)


def _scenes(n=100, seed=0):
    cfg = _cfg()
    tracks = synth_generate("lane_change", n, 0.1, seed=seed, multi_agent=True,
                            n_steps=2 * (OBS + PRED), change_prob=0.5)
    tracks = [t.downsample(2) for t in tracks]
    return build_scenes(tracks, OBS, PRED, cfg.field_config())


@pytest.fixture(scope="module")
def scenes():
    return _scenes()


def test_variant_parameter_counts():
    counts = [HMNet(_cfg(variant=v).model_config()).store.num_params() for v in ("S", "V", "V+A")]
    assert counts[0] < counts[1] < counts[2]
    with pytest.raises(ConfigurationError):
        ModelConfig(variant="A")


def test_shapes_and_units(scenes):
    model = HMNet(_cfg().model_config())
    batch = SceneBatch.collate(scenes[:5])
    res = model.forward(batch)
    assert res.Y.mu.shape == res.V.mu.shape == res.A.mu.shape == (5, PRED, 2)
    pred = model.predict(batch)
    np.testing.assert_allclose(pred[:, 0], res.Y.means() * model.cfg.scales["s"], atol=1e-12)
    multi = model.predict(batch, "multimodal", k=4, rng=0)
    assert multi.shape == (5, 4, PRED, 2)
    np.testing.assert_array_equal(multi, model.predict(batch, "multimodal", k=4, rng=0))
    with pytest.raises(ConfigurationError):
        model.forward(batch, "multimodal", training=False)


def test_targets_follow_difference_convention(scenes):
    batch = SceneBatch.collate(scenes[:3])
    tg = batch.targets()
    f = batch.frequency
    np.testing.assert_allclose(tg["v"][:, 0], (batch.future[:, 0] - batch.history[:, -1]) * f, atol=1e-12)
    np.testing.assert_allclose(tg["v"][:, 1:], np.diff(batch.future, axis=1) * f, atol=1e-12)
    assert tg["a"].shape == (3, PRED, 2)


# ------------------------------------------------------------ hierarchy


def _grads_after(model, batch, pick):
    model.store.zero_grad()
    res = model.forward(batch)
    nn.reverse_gradients(pick(res))
    return {name: p.grad.copy() for name, p in model.store.items()}


def test_location_loss_reaches_upper_decoders(scenes):
    model = HMNet(_cfg().model_config())
    batch = SceneBatch.collate(scenes[:4])
    g = _grads_after(model, batch, lambda r: nn.tsum(nn.square(r.Y.mu)) + nn.tsum(r.Y.sigma))
    for o in ("v", "a"):
        for part in ("W_ih", "W_hh", "b"):
            assert np.abs(g[f"dec.{o}.lstm.{part}"]).max() > 0, (o, part)


def test_acceleration_loss_stays_out_of_location_decoder(scenes):
    model = HMNet(_cfg().model_config())
    batch = SceneBatch.collate(scenes[:4])
    g = _grads_after(model, batch, lambda r: nn.tsum(nn.square(r.A.mu)) + nn.tsum(r.A.sigma))
    for name in model.store.names("dec.s."):
        assert not g[name].any(), name
    assert any(g[name].any() for name in model.store.names("dec.a."))


def test_zero_goal_embedding_multimodal_equals_unimodal(scenes):
    model = HMNet(_cfg().model_config())
    model.store["dec.s.goal.W"].data[:] = 0.0
    model.store["dec.s.goal.b"].data[:] = 0.0
    batch = SceneBatch.collate(scenes[:6])
    uni = model.forward(batch, "unimodal")
    multi = model.forward(batch, "multimodal", training=True, rng=3)
    for part in ("mu", "sigma", "rho"):
        np.testing.assert_array_equal(getattr(multi.Y, part).data, getattr(uni.Y, part).data)
    pred_u = model.predict(batch)
    np.testing.assert_array_equal(model.predict(batch, "multimodal", k=1, rng=1), pred_u)
    # K copies run as one tiled batch: equal up to BLAS rounding
    pred_m = model.predict(batch, "multimodal", k=5, rng=1)
    for j in range(5):
        np.testing.assert_allclose(pred_m[:, j], pred_u[:, 0], rtol=0, atol=1e-12)


# ------------------------------------------------------------ social field


def _far_neighbor(rng, ego_history):
    """A neighbor whose last position is just outside the field, longitudinally or laterally."""
    hist = ego_history.copy()
    if rng.random() < 0.5:
        off = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(30.5, 60.0), rng.uniform(-3.0, 3.0)])
    else:
        off = np.array([rng.uniform(-25.0, 25.0), rng.choice([-1.0, 1.0]) * rng.uniform(5.6, 12.0)])
    return Neighbor(10_000 + int(rng.integers(1000)), hist - hist[-1] + off)


def test_out_of_field_neighbors_have_no_influence(scenes):
    """Remove-and-compare on 100 scenes: social tensor and every prediction bit-equal."""
    assert len(scenes) >= 100
    base = scenes[:100]
    assert sum(bool(s.neighbors) for s in base) >= 50
    rng = np.random.default_rng(11)
    extra = []
    for sc in base:
        far = [_far_neighbor(rng, sc.history) for _ in range(int(rng.integers(1, 3)))]
        extra.append(type(sc)(**{**sc.__dict__, "neighbors": sc.neighbors + far}))
    # +31 m straight ahead is the named boundary case
    first = extra[0]
    first.neighbors.append(Neighbor(99_999, first.history - first.history[-1] + [31.0, 0.0]))

    model = HMNet(_cfg().model_config())
    b0, b1 = SceneBatch.collate(base), SceneBatch.collate(extra)
    with nn.no_grad():
        r0, r1 = model.forward(b0), model.forward(b1)
    np.testing.assert_array_equal(r0.social.data, r1.social.data)
    for tr in ("Y", "V", "A"):
        np.testing.assert_array_equal(getattr(r0, tr).mu.data, getattr(r1, tr).mu.data)
    np.testing.assert_array_equal(model.predict(b0, "multimodal", k=3, rng=4),
                                  model.predict(b1, "multimodal", k=3, rng=4))


def test_in_field_neighbor_does_influence(scenes):
    sc = next(s for s in scenes if s.neighbors)
    bare = type(sc)(**{**sc.__dict__, "neighbors": []})
    model = HMNet(_cfg().model_config())
    with nn.no_grad():
        a = model.forward(SceneBatch.collate([sc])).social.data
        b = model.forward(SceneBatch.collate([bare])).social.data
    assert not np.array_equal(a, b)


def test_social_off_ignores_neighbors(scenes):
    model = HMNet(_cfg(use_social=False).model_config())
    sc = next(s for s in scenes if s.neighbors)
    bare = type(sc)(**{**sc.__dict__, "neighbors": []})
    np.testing.assert_array_equal(model.predict(SceneBatch.collate([sc])),
                                  model.predict(SceneBatch.collate([bare])))
    assert not model.store.names("social")


def test_loss_is_deterministic_given_seed(scenes):
    model = HMNet(_cfg(mode="multimodal").model_config())
    batch = SceneBatch.collate(scenes[:4])
    a = model.loss(batch, "multimodal", "nll", rng=5).value
    b = model.loss(batch, "multimodal", "nll", rng=5).value
    assert a == b and np.isfinite(a)
