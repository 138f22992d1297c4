import math
import warnings

import numpy as np
import pytest
import torch
from scipy import stats

from lensflow.errors import GeometryError, NonFiniteError
from lensflow.flow import (
    FIX_CIRCLE,
    FIX_DISK,
    KL_FLOOR_SIGMAS,
    CouplingLayer,
    FlowTransform,
    PriorParams,
    centred_angle,
    circle_scale,
    coupling_forward,
    disk_to_plane,
    flow_backward_gradients,
    flow_forward,
    kl_terms,
    load_checkpoint,
    log_model_density,
    make_mlp,
    mlp_forward,
    plane_to_disk,
    prior_logpdf,
    prior_sample,
    save_checkpoint,
)
from lensflow.geometry import uniform_torus, wrap_angle
from lensflow.models import TrainConfig
from lensflow.properties import fd_logdet
from lensflow.training import init_flow


def _randomize(module, rng, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, scale, tuple(p.shape))))
    return module


def _zero_outputs(flow):
    with torch.no_grad():
        for layer in flow.layers:
            for net in (layer.s, layer.t):
                net[2].weight.zero_()
                net[2].bias.zero_()
    return flow


def test_mlp_shapes():
    mlp = make_mlp(1, 2, capped=True)
    out = mlp_forward(mlp, torch.zeros(5, 1, dtype=torch.float64))
    assert out.shape == (5, 2)
    assert torch.all(out.abs() < 1)
    with pytest.raises(ValueError):
        mlp_forward(mlp, torch.zeros(5, 2, dtype=torch.float64))


def test_disk_plane_examples():
    w, logdet = plane_to_disk(torch.zeros(1, 2, dtype=torch.float64))
    assert torch.all(w == 0) and float(logdet[0]) == 0.0
    v, logdet, clamped = disk_to_plane(torch.tensor([[0.5, 0.0]], dtype=torch.float64))
    assert torch.allclose(v, torch.tensor([[1.0, 0.0]], dtype=torch.float64))
    assert float(logdet[0]) == pytest.approx(3 * math.log(2))
    assert not bool(clamped[0])


def test_disk_to_plane_clamps_boundary():
    v, logdet, clamped = disk_to_plane(torch.tensor([[1.0, 0.0], [0.0, 0.3]], dtype=torch.float64))
    assert clamped.tolist() == [True, False]
    assert torch.all(torch.isfinite(v)) and torch.all(torch.isfinite(logdet))


def test_disk_maps_are_inverse(rng):
    w = torch.from_numpy(rng.uniform(-0.6, 0.6, (500, 2)))
    v, ld1, _ = disk_to_plane(w)
    back, ld2 = plane_to_disk(v)
    assert torch.allclose(back, w, atol=1e-13)
    assert torch.allclose(ld1 + ld2, torch.zeros(500, dtype=torch.float64), atol=1e-12)


def test_disk_logdets_match_finite_differences(rng):
    w = torch.from_numpy(rng.uniform(-0.6, 0.6, (200, 2)))
    assert torch.allclose(disk_to_plane(w)[1], fd_logdet(lambda u: disk_to_plane(u)[0], w), rtol=1e-4, atol=1e-4)
    v = torch.from_numpy(rng.normal(0.0, 2.0, (200, 2)))
    assert torch.allclose(plane_to_disk(v)[1], fd_logdet(lambda u: plane_to_disk(u)[0], v), rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("kind", [FIX_CIRCLE, FIX_DISK])
def test_coupling_logdet_and_inverse(kind, rng):
    layer = _randomize(CouplingLayer(kind), rng)
    x = torch.from_numpy(rng.normal(0.0, 1.0, (200, 3)))
    with torch.no_grad():
        theta, v, logdet = coupling_forward(layer, x[:, 0], x[:, 1:])
        back_theta, back_v, inv_logdet = layer.inverse(theta, v)

        def mapped(u):
            t, w, _ = layer(u[:, 0], u[:, 1:])
            return torch.cat([t.unsqueeze(-1), w], dim=-1)

        numeric = fd_logdet(mapped, x)
    assert torch.allclose(logdet, numeric, rtol=1e-4, atol=1e-4)
    assert torch.allclose(back_theta, x[:, 0], atol=1e-12)
    assert torch.allclose(back_v, x[:, 1:], atol=1e-12)
    assert torch.allclose(logdet + inv_logdet, torch.zeros(200, dtype=torch.float64), atol=1e-12)


def test_coupling_rejects_unknown_kind():
    with pytest.raises(ValueError):
        CouplingLayer("fix-both")


def test_flow_pipeline_logdet_matches_finite_differences(rng):
    for _ in range(20):
        flow = _randomize(FlowTransform(2), rng)
        z = prior_sample(PriorParams(), 1, rng)
        with torch.no_grad():
            analytic = float(flow(z, wrap=False).logdet[0])
            numeric = float(fd_logdet(lambda u: flow(u, wrap=False).coords, z)[0])
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-4)


def test_flow_inverse_unwrapped(rng):
    flow = _randomize(FlowTransform(2), rng, scale=0.3)
    z = prior_sample(PriorParams(), 200, rng)
    with torch.no_grad():
        out = flow(z, wrap=False).coords
        assert torch.allclose(flow.inverse_unwrapped(out), z, atol=1e-9)


def test_flow_identity_at_zero_outputs(rng):
    flow = _zero_outputs(_randomize(FlowTransform(3), rng))
    z = prior_sample(PriorParams(), 1000, rng)
    with torch.no_grad():
        out = flow_forward(flow, z)
    assert torch.allclose(out.coords, z, atol=1e-12)
    assert out.logdet.abs().max() <= 1e-12


def test_flow_output_in_domain(rng):
    flow = _randomize(FlowTransform(3), rng, scale=1.0)
    with torch.no_grad():
        out = flow(prior_sample(PriorParams(), 5000, rng)).coords
    assert torch.all((out[:, 0] >= 0) & (out[:, 0] < 2 * math.pi))
    assert torch.all(out[:, 1] ** 2 + out[:, 2] ** 2 <= 1.0)


def test_circle_scale_is_a_lift_of_a_circle_map(rng):
    theta = torch.from_numpy(rng.uniform(-math.pi, math.pi, 500))
    s = torch.from_numpy(rng.uniform(-1.0, 1.0, 500))
    image, logdet = circle_scale(theta, s)
    shifted, shifted_logdet = circle_scale(theta + 2 * math.pi, s)
    assert torch.allclose(shifted, image + 2 * math.pi, atol=1e-12)
    assert torch.allclose(shifted_logdet, logdet, atol=1e-12)
    back, inv_logdet = circle_scale(image, -s)
    assert torch.allclose(back, theta, atol=1e-12)
    assert torch.allclose(logdet + inv_logdet, torch.zeros(500, dtype=torch.float64), atol=1e-12)
    h = 1e-6
    numeric = (circle_scale(theta + h, s)[0] - circle_scale(theta - h, s)[0]) / (2 * h)
    assert torch.allclose(logdet, torch.log(numeric), atol=1e-6)


def test_circle_scale_slope_at_zero():
    s = torch.tensor([-1.0, 0.0, 0.7], dtype=torch.float64)
    image, logdet = circle_scale(torch.zeros(3, dtype=torch.float64), s)
    assert torch.all(image == 0)
    assert torch.allclose(logdet, s, atol=1e-15)
    ends, _ = circle_scale(torch.full((3,), math.pi, dtype=torch.float64), s)
    assert torch.allclose(ends, torch.full((3,), math.pi, dtype=torch.float64), atol=1e-12)


def test_centred_angle_range():
    theta = torch.tensor([0.0, 3.0, 4.0, -4.0, 7.0, 100.0], dtype=torch.float64)
    centred = centred_angle(theta)
    assert torch.all(centred.abs() <= math.pi)
    assert torch.allclose(torch.cos(centred), torch.cos(theta), atol=1e-12)
    assert torch.allclose(torch.sin(centred), torch.sin(theta), atol=1e-12)


def test_fix_disk_layer_is_injective_on_the_circle(rng):
    layer = _randomize(CouplingLayer(FIX_DISK), rng, scale=2.0)
    theta = torch.linspace(0.0, 2 * math.pi, 2001, dtype=torch.float64)[:-1]
    v = torch.tensor([[0.4, -0.3]], dtype=torch.float64).expand(theta.shape[0], 2)
    with torch.no_grad():
        image, _, _ = layer(theta, v)
    # one full turn maps to exactly one full turn, monotonically
    steps = torch.diff(torch.cat([image, image[:1] + 2 * math.pi]))
    assert torch.all(steps > 0)
    assert float(steps.sum()) == pytest.approx(2 * math.pi, abs=1e-10)


def test_model_density_integrates_to_one(rng):
    prior = PriorParams()
    flow = _randomize(FlowTransform(2), rng, scale=0.3)
    y = uniform_torus(200_000, rng)
    with torch.no_grad():
        z = flow.inverse_unwrapped(y)
        z = torch.cat([wrap_angle(z[:, :1]), z[:, 1:]], dim=-1)
        density = torch.exp(log_model_density(flow, prior, z))
    volume = 2 * math.pi ** 2
    mass = volume * float(density.mean())
    stderr = volume * float(density.std()) / math.sqrt(density.numel())
    assert abs(mass - 1.0) < max(0.05, 5 * stderr)


def test_kl_against_uniform_target_is_nonnegative(rng):
    prior = PriorParams()
    log_uniform = -math.log(2 * math.pi ** 2)
    for _ in range(3):
        flow = _randomize(FlowTransform(3), rng, scale=1.0)
        z = prior_sample(prior, 20_000, rng)
        with torch.no_grad():
            summands = kl_terms(flow, prior, lambda out: torch.full(out.shape[:-1], log_uniform, dtype=out.dtype), z).summands
        kl = float(summands.mean())
        stderr = float(summands.std()) / math.sqrt(summands.numel())
        assert kl >= -KL_FLOOR_SIGMAS * stderr


def test_flow_rejects_bad_pairs():
    with pytest.raises(ValueError):
        FlowTransform(0)


def test_prior_params_validation():
    with pytest.raises(ValueError):
        PriorParams(kappa=-1.0)
    with pytest.raises(ValueError):
        PriorParams(sigma=0.0)


def test_prior_logpdf_at_origin():
    prior = PriorParams(5.0, 0.25)
    var = 0.25 ** 2
    expected = 5.0 - math.log(2 * math.pi * np.i0(5.0)) - math.log(2 * math.pi * var * (1 - math.exp(-1 / (2 * var))))
    z = torch.zeros(1, 3, dtype=torch.float64)
    assert float(prior_logpdf(prior, z)[0]) == pytest.approx(expected, rel=1e-12)


def test_prior_logpdf_rejects_outside_disk():
    with pytest.raises(GeometryError):
        prior_logpdf(PriorParams(), torch.tensor([[0.0, 1.0, 1.0]], dtype=torch.float64))


def test_prior_sample_domain_and_moments(rng):
    prior = PriorParams(5.0, 0.25)
    z = prior_sample(prior, 50_000, rng)
    assert torch.all((z[:, 0] >= 0) & (z[:, 0] < 2 * math.pi))
    assert torch.all(z[:, 1] ** 2 + z[:, 2] ** 2 <= 1.0)
    # E[cos theta] = I1(k) / I0(k) for the von Mises marginal
    from scipy import special

    assert float(torch.cos(z[:, 0]).mean()) == pytest.approx(special.i1(5.0) / special.i0(5.0), abs=0.01)
    assert float(z[:, 1].std()) == pytest.approx(0.25, abs=0.01)


def test_prior_sample_angle_follows_von_mises(rng):
    theta = prior_sample(PriorParams(5.0, 0.25), 20_000, rng)[:, 0].numpy()
    centred = np.where(theta > math.pi, theta - 2 * math.pi, theta)
    assert stats.kstest(centred, stats.vonmises(5.0).cdf).pvalue > 1e-3


def test_prior_sample_rejects_empty(rng):
    with pytest.raises(ValueError):
        prior_sample(PriorParams(), 0, rng)


def test_kl_terms_zero_when_target_is_prior(rng):
    prior = PriorParams()
    flow = _zero_outputs(FlowTransform(1))
    z = prior_sample(prior, 1000, rng)
    with torch.no_grad():
        terms = kl_terms(flow, prior, lambda out: prior_logpdf(prior, out), z)
    assert terms.summands.abs().max() < 1e-10
    assert torch.allclose(log_model_density(flow, prior, z), prior_logpdf(prior, z), atol=1e-12)


def test_backward_gradients_loss_identity(rng):
    prior = PriorParams()
    flow = init_flow(TrainConfig(n_pairs=1), torch.Generator().manual_seed(0))
    batch = prior_sample(prior, 256, rng)
    record = flow_backward_gradients(flow, prior, lambda out: torch.cos(out[..., 0]), batch, 0.3)
    assert record.loss == record.kl - 0.3 * record.entropy
    assert set(record.grads) == {name for name, _ in flow.named_parameters()}
    for name, p in flow.named_parameters():
        assert record.grads[name].shape == p.shape


def test_backward_gradients_report_non_finite(rng):
    prior = PriorParams()
    flow = FlowTransform(1)
    batch = prior_sample(prior, 16, rng)
    with pytest.raises(NonFiniteError):
        flow_backward_gradients(flow, prior, lambda out: torch.full(out.shape[:-1], -math.inf, dtype=out.dtype), batch)


def test_kl_terms_count_disk_edge_clamps():
    prior = PriorParams()
    flow = _zero_outputs(FlowTransform(1))
    z = torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.1, 0.2]], dtype=torch.float64)
    with torch.no_grad():
        terms = kl_terms(flow, prior, lambda out: prior_logpdf(prior, out), z)
    assert terms.clamped == 1


def test_backward_gradients_emit_no_warnings(rng):
    prior = PriorParams()
    flow = init_flow(TrainConfig(n_pairs=1), torch.Generator().manual_seed(0))
    batch = prior_sample(prior, 64, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        record = flow_backward_gradients(flow, prior, lambda out: torch.cos(out[..., 0]), batch, 0.1)
    assert isinstance(record.kl, float) and isinstance(record.entropy, float)
    assert record.kl_stderr > 0
    assert record.clamped == 0


def test_checkpoint_roundtrip(tmp_path, rng):
    flow = _randomize(FlowTransform(2), rng)
    prior = PriorParams(4.0, 0.3)
    save_checkpoint(flow, prior, tmp_path / "ckpt")
    loaded, loaded_prior = load_checkpoint(tmp_path / "ckpt")
    assert loaded_prior == prior
    for (name, a), (_, b) in zip(flow.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name


def test_checkpoint_detects_tampering(tmp_path, rng):
    flow = _randomize(FlowTransform(1), rng)
    save_checkpoint(flow, PriorParams(), tmp_path / "ckpt")
    with (tmp_path / "ckpt" / "flow.pt").open("ab") as fh:
        fh.write(b"x")
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "ckpt")
