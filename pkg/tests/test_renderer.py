import numpy as np
import pytest
import torch

from puppetry import raster
from puppetry.errors import InvalidInputError
from puppetry.renderer import (DilatedUNet, NeuralTexture, TextureSampler,
                               erode_background, render_frame, sample_texture)


def make_uvmap(uv, coverage=None):
    uv = np.asarray(uv, dtype=np.float32)
    if coverage is None:
        coverage = np.ones(uv.shape[:2], dtype=bool)
    return raster.UVMap(uv, coverage)


def test_sample_at_texel_center():
    tex = NeuralTexture(resolution=4, channels=2)
    # uv (i/3, j/3) hits texel (j, i) exactly
    uv = np.array([[[2 / 3, 1 / 3]]])
    out = tex.sample(make_uvmap(uv))
    expected = tex.grid[1, 2].detach()
    assert torch.allclose(out[:, 0, 0], expected, atol=1e-6)


def test_sample_midpoint_averages_neighbors():
    tex = NeuralTexture(resolution=4, channels=3)
    uv = np.array([[[0.5 / 3, 0.0]]])  # halfway between texels (0,0) and (0,1)
    out = tex.sample(make_uvmap(uv))
    expected = 0.5 * (tex.grid[0, 0] + tex.grid[0, 1]).detach()
    assert torch.allclose(out[:, 0, 0], expected, atol=1e-6)


def test_sample_matches_four_neighbor_oracle():
    torch.manual_seed(0)
    tex = NeuralTexture(resolution=7, channels=4)
    rng = np.random.default_rng(1)
    uv = rng.random((5, 6, 2)).astype(np.float32)
    out = tex.sample(make_uvmap(uv)).detach().numpy()
    grid = tex.grid.detach().numpy()
    for y in range(5):
        for x in range(6):
            fx = uv[y, x, 0] * 6
            fy = uv[y, x, 1] * 6
            x0, y0 = min(int(np.floor(fx)), 5), min(int(np.floor(fy)), 5)
            ax, ay = fx - x0, fy - y0
            expected = ((1 - ax) * (1 - ay) * grid[y0, x0]
                        + ax * (1 - ay) * grid[y0, x0 + 1]
                        + (1 - ax) * ay * grid[y0 + 1, x0]
                        + ax * ay * grid[y0 + 1, x0 + 1])
            assert np.allclose(out[:, y, x], expected, atol=1e-5)


def test_sample_linear_in_texture():
    t1 = NeuralTexture(resolution=5, channels=2)
    t2 = NeuralTexture(resolution=5, channels=2)
    rng = np.random.default_rng(3)
    uvmap = make_uvmap(rng.random((4, 4, 2)).astype(np.float32))
    a, b = 0.7, -1.2
    combo = NeuralTexture(resolution=5, channels=2)
    with torch.no_grad():
        combo.grid.copy_(a * t1.grid + b * t2.grid)
    lhs = combo.sample(uvmap)
    rhs = a * t1.sample(uvmap) + b * t2.sample(uvmap)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_uncovered_pixels_get_zero_feature():
    tex = NeuralTexture(resolution=4, channels=2)
    cov = np.array([[True, False]])
    uv = np.array([[[0.3, 0.3], [0.3, 0.3]]])
    out = tex.sample(make_uvmap(uv, cov))
    assert torch.all(out[:, 0, 1] == 0)
    assert not torch.all(out[:, 0, 0] == 0)


def test_texture_gradient_through_sampler_and_tiny_net():
    # 4x4x2 toy texture -> sampling -> 1-layer conv -> scalar; analytic vs FD
    torch.manual_seed(2)
    grid = torch.randn(4, 4, 2, dtype=torch.float64, requires_grad=True)
    conv = torch.nn.Conv2d(2, 1, 3, padding=1).double()
    rng = np.random.default_rng(5)
    uvmap = make_uvmap(rng.random((6, 6, 2)).astype(np.float32))
    sampler = TextureSampler(uvmap)

    def loss_of(g):
        feats = sampler(g).unsqueeze(0)
        return (conv(feats) ** 2).sum()

    loss = loss_of(grid)
    loss.backward()
    analytic = grid.grad.reshape(-1)
    fd = torch.zeros_like(analytic)
    with torch.no_grad():
        flat = grid.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            for sign in (1.0, -1.0):
                probe = flat.clone()
                probe[i] += sign * 1e-4
                fd[i] += sign * float(loss_of(probe.reshape(4, 4, 2))) / 2e-4
    rel = (analytic - fd).norm() / fd.norm()
    assert rel < 1e-3


@pytest.mark.parametrize("res", [16, 64])
def test_unet_preserves_spatial_dims(res):
    net = DilatedUNet(16, base=4)
    out = net(torch.randn(1, 16, res, res))
    assert out.shape == (1, 3, res, res)


def test_unet_512_resolution_preserved():
    torch.manual_seed(0)
    net = DilatedUNet(16)
    with torch.no_grad():
        out = net(torch.randn(1, 16, 512, 512))
    assert out.shape == (1, 3, 512, 512)


def test_unet_zero_params_zero_image():
    net = DilatedUNet(16, base=4)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = net(torch.randn(2, 16, 32, 32))
    assert torch.all(out == 0)


def test_unet_parameter_count_near_published():
    interior = DilatedUNet(16)
    composite = DilatedUNet(6)
    for net in (interior, composite):
        assert abs(net.parameter_count() - 2.35e6) <= 0.15 * 2.35e6
    assert interior.parameter_count() == 2348419
    assert composite.parameter_count() == 2345539


def test_unet_channel_mismatch_raises():
    net = DilatedUNet(16, base=4)
    with pytest.raises(InvalidInputError):
        net(torch.randn(1, 8, 32, 32))


def test_strided_variant_runs_and_preserves_output_dims():
    torch.manual_seed(1)
    net = DilatedUNet(16, base=4, variant="strided")
    out = net(torch.randn(1, 16, 64, 64))
    assert out.shape == (1, 3, 64, 64)
    with pytest.raises(InvalidInputError):
        net(torch.randn(1, 16, 48, 48))


def test_erode_radius_zero_blanks_exactly_covered():
    frame = torch.ones(3, 8, 8)
    cov = np.zeros((8, 8), dtype=bool)
    cov[2, 3] = True
    cov[5, 6] = True
    out = erode_background(frame, cov, 0)
    assert torch.all(out[:, 2, 3] == 0) and torch.all(out[:, 5, 6] == 0)
    assert float(out.sum()) == 3 * (64 - 2)


def test_erode_empty_coverage_identity():
    frame = torch.rand(3, 8, 8)
    out = erode_background(frame, np.zeros((8, 8), dtype=bool), 4)
    assert torch.equal(out, frame)


def test_erode_radius_two_blanks_5x5_block():
    frame = torch.ones(3, 9, 9)
    cov = np.zeros((9, 9), dtype=bool)
    cov[4, 4] = True
    out = erode_background(frame, cov, 2)
    blanked = (out[0] == 0).numpy()
    expected = np.zeros((9, 9), dtype=bool)
    expected[2:7, 2:7] = True
    assert np.array_equal(blanked, expected)


def test_erode_matches_chebyshev_loop_oracle():
    rng = np.random.default_rng(7)
    frame = torch.rand(3, 12, 12)
    cov = rng.random((12, 12)) > 0.85
    radius = 3
    out = erode_background(frame, cov, radius)
    for y in range(12):
        for x in range(12):
            near = False
            for yy in range(12):
                for xx in range(12):
                    if cov[yy, xx] and max(abs(yy - y), abs(xx - x)) <= radius:
                        near = True
            if near:
                assert torch.all(out[:, y, x] == 0)
            else:
                assert torch.allclose(out[:, y, x], frame[:, y, x])


def test_render_frame_shapes():
    torch.manual_seed(3)
    tex = NeuralTexture(resolution=8, channels=16)
    interior = DilatedUNet(16, base=4)
    composite = DilatedUNet(6, base=4)
    rng = np.random.default_rng(2)
    uvmap = make_uvmap(rng.random((16, 16, 2)).astype(np.float32),
                       rng.random((16, 16)) > 0.4)
    bg = torch.rand(3, 16, 16)
    final, inter, eroded = render_frame(tex, interior, composite, uvmap, bg, 2)
    assert final.shape == (3, 16, 16)
    assert inter.shape == (3, 16, 16)
    assert eroded.shape == (3, 16, 16)
