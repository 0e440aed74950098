"""The low-rank mixing block: variants, rank structure, induced kernels,
slicing, FLOP accounting and checkpointing."""

import numpy as np
import pytest

from lrsa_lab.errors import (
    ContractError,
    DataError,
    DegeneracyError,
    DimensionError,
    ResourceError,
)
from lrsa_lab.lrsa import (
    BasisMatrix,
    KERNEL_POINT_CAP,
    LRSAConfig,
    VARIANTS,
    backbone_forward,
    block_matmul_flops,
    compress,
    coupling_flops,
    dense_coupling_flops,
    fixed_basis_mix,
    fourier_basis,
    induced_kernel_factors,
    init_backbone_params,
    latent_mix,
    load_checkpoint,
    lrsa_block,
    matched_mlp_hidden,
    materialize_induced_kernel,
    named_parameters,
    parameter_count,
    probe_induced_kernel,
    reconstruct,
    save_checkpoint,
    slicing_compress,
)
from lrsa_lab.pde import PointSet
from lrsa_lab.spectral import svd
from lrsa_lab.tensor import FlopCounter, Tensor, no_grad, write_tns


def small_cfg(**kw):
    base = dict(depth=1, width=16, heads=2, latent_count=4, num_freqs=2)
    base.update(kw)
    cfg = LRSAConfig(**base)
    cfg.validate()
    return cfg


def uniform_points(n, d_in=1, seed=0):
    rng = np.random.default_rng(seed)
    coords = (np.arange(n) / n)[:, None]
    return PointSet(
        coords=coords, features=rng.normal(size=(n, d_in)), quad_weight=1.0 / n
    )


def hidden_state(cfg, points, params):
    from lrsa_lab.nn import lift, positional_encoding

    with no_grad():
        pe = positional_encoding(points.coords, cfg.num_freqs)
        return lift(Tensor(points.features), pe, params.lift)


# -------------------------------------------------------------- config


def test_config_validation_errors():
    with pytest.raises(ContractError):
        small_cfg(heads=3)  # does not divide 16
    with pytest.raises(ContractError):
        small_cfg(variant="banana")
    with pytest.raises(ContractError):
        small_cfg(latent_count=0)
    with pytest.raises(ContractError):
        small_cfg(depth=0)
    cfg = LRSAConfig(depth=0, width=16, heads=2, latent_count=4)
    cfg.validate(allow_empty_depth=True)


def test_init_determinism():
    cfg = small_cfg()
    a = init_backbone_params(cfg, seed=11)
    b = init_backbone_params(cfg, seed=11)
    for (na, ta), (nb, tb) in zip(named_parameters(a), named_parameters(b)):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


# ----------------------------------------------------------- structure


def test_compress_yields_latent_rows():
    cfg = small_cfg()
    params = init_backbone_params(cfg, seed=0)
    pts = uniform_points(20)
    h = hidden_state(cfg, pts, params)
    z = compress(h, params.layers[0], cfg)
    assert z.data.shape == (cfg.latent_count, cfg.width)


def test_reconstruction_rank_bound_single_head():
    # with one head the block's point update is exactly rank <= M
    cfg = small_cfg(heads=1, width=32, latent_count=4)
    params = init_backbone_params(cfg, seed=5)
    pts = uniform_points(48, seed=6)
    h = hidden_state(cfg, pts, params)
    layer = params.layers[0]
    with no_grad():
        z = latent_mix(compress(h, layer, cfg), layer, cfg)
        delta = reconstruct(h, z, layer, cfg)
    _, s, _ = svd(delta.data)
    assert s[cfg.latent_count] / s[0] <= 1e-12


def test_variant_param_slots():
    pts = uniform_points(10)
    for variant in VARIANTS:
        cfg = small_cfg(variant=variant)
        params = init_backbone_params(cfg, seed=0)
        layer = params.layers[0]
        if variant == "fixed_basis":
            assert layer.basis_mix is not None
            assert layer.down is None and layer.up is None
        else:
            assert layer.latents is not None
            assert layer.down is not None and layer.up is not None
        if variant == "no_intra_attn":
            assert layer.self_attn is None and layer.latent_mlp is not None
        if variant == "full":
            assert layer.self_attn is not None and layer.latent_mlp is None
        if variant == "linear_no":
            assert layer.ffn_in is None and layer.ffn_out is None
            assert layer.self_attn is None and layer.latent_mlp is None
        out = backbone_forward(pts, cfg, params)
        assert out.data.shape == (10, cfg.d_out)
        assert np.all(np.isfinite(out.data))


def test_matched_mlp_parameter_budget():
    # swapping latent self-attention for the matched MLP stays within 5%
    for width in (16, 32, 64):
        full = small_cfg(width=width, heads=2, variant="full")
        swap = small_cfg(width=width, heads=2, variant="no_intra_attn")
        p_full = parameter_count(init_backbone_params(full, seed=0))
        p_swap = parameter_count(init_backbone_params(swap, seed=0))
        assert abs(p_swap - p_full) / p_full <= 0.05


def test_matched_mlp_hidden_formula():
    for d in (8, 16, 64):
        k = matched_mlp_hidden(d)
        attn_params = 4 * d * d
        mlp_params = 2 * d * k + k + d
        assert abs(mlp_params - attn_params) <= 2 * d + 1


def test_symmetric_tied_shares_projection():
    cfg = small_cfg(variant="symmetric_tied")
    params = init_backbone_params(cfg, seed=0)
    layer = params.layers[0]
    assert layer.up.w_q is layer.down.w_k
    names = [n for n, _ in named_parameters(params)]
    assert len(names) == len(set(names))
    ids = [id(t) for _, t in named_parameters(params)]
    assert len(ids) == len(set(ids))
    # one d*d matrix fewer than the untied block
    p_full = parameter_count(init_backbone_params(small_cfg(), seed=0))
    assert p_full - parameter_count(params) == cfg.width * cfg.width


def test_symmetric_tied_gradient_sums_both_uses():
    cfg = small_cfg(variant="symmetric_tied", width=8, heads=1, latent_count=2)
    params = init_backbone_params(cfg, seed=1)
    pts = uniform_points(6, seed=2)
    from lrsa_lab.tensor import sum_all

    out = backbone_forward(pts, cfg, params)
    sum_all(out).backward()
    tied = params.layers[0].down.w_k
    assert tied.grad is not None
    assert np.any(tied.grad != 0.0)


def test_linear_variant_skips_latent_mixing():
    cfg = small_cfg(variant="linear_no")
    params = init_backbone_params(cfg, seed=0)
    pts = uniform_points(12)
    h = hidden_state(cfg, pts, params)
    _, g_hat, _ = induced_kernel_factors(params.layers[0], cfg, h)
    np.testing.assert_array_equal(g_hat, np.eye(cfg.latent_count))


# --------------------------------------------------------- fixed basis


def test_fourier_basis_orthonormal():
    coords = np.arange(16) / 16
    phi = fourier_basis(coords, 7).data
    np.testing.assert_allclose(phi.T @ phi, np.eye(7), atol=1e-12)


def test_fourier_basis_complete_square():
    coords = np.arange(8) / 8
    phi = fourier_basis(coords, 8).data
    assert phi.shape == (8, 8)
    np.testing.assert_allclose(phi @ phi.T, np.eye(8), atol=1e-12)


def test_fourier_basis_rejects_nonuniform():
    with pytest.raises(ContractError):
        fourier_basis(np.array([0.0, 0.1, 0.3, 0.35]), 2)


def test_fourier_basis_permutation_covariant():
    coords = np.arange(12) / 12
    perm = np.random.default_rng(0).permutation(12)
    base = fourier_basis(coords, 5).data
    permuted = fourier_basis(coords[perm], 5).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_fixed_basis_mix_matches_dense_oracle():
    rng = np.random.default_rng(3)
    coords = np.arange(10) / 10
    phi = fourier_basis(coords, 4)
    g = Tensor(rng.normal(size=(4, 4)))
    h = Tensor(rng.normal(size=(10, 6)))
    out = fixed_basis_mix(h, BasisMatrix(phi=phi, g=g)).data
    oracle = phi.data @ (g.data @ (phi.data.T @ h.data))
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_fixed_basis_identity_when_complete():
    # m = n and g = I makes the mixer the identity map
    coords = np.arange(8) / 8
    phi = fourier_basis(coords, 8)
    h = Tensor(np.random.default_rng(4).normal(size=(8, 3)))
    out = fixed_basis_mix(h, BasisMatrix(phi=phi, g=Tensor(np.eye(8)))).data
    np.testing.assert_allclose(out, h.data, atol=1e-12)


# ------------------------------------------------------ induced kernel


def test_induced_kernel_factored_matches_probe():
    for variant in VARIANTS:
        cfg = small_cfg(variant=variant)
        params = init_backbone_params(cfg, seed=7)
        pts = uniform_points(24, seed=8)
        h = hidden_state(cfg, pts, params)
        direct = materialize_induced_kernel(
            params.layers[0], cfg, h, coords=pts.coords
        ).data
        probed = probe_induced_kernel(params.layers[0], cfg, h, coords=pts.coords)
        assert np.abs(direct - probed).max() <= 1e-8
        _, s, _ = svd(direct)
        assert s[cfg.latent_count] / s[0] <= 1e-10


def test_induced_kernel_shapes_and_cap():
    cfg = small_cfg()
    params = init_backbone_params(cfg, seed=0)
    pts = uniform_points(16)
    h = hidden_state(cfg, pts, params)
    b_fac, g_hat, a_fac = induced_kernel_factors(params.layers[0], cfg, h)
    assert a_fac.shape == (4, 16)
    assert b_fac.shape == (16, 4)
    assert g_hat.shape == (4, 4)
    np.testing.assert_allclose(a_fac.sum(axis=1), np.ones(4), atol=1e-12)
    np.testing.assert_allclose(b_fac.sum(axis=1), np.ones(16), atol=1e-12)
    big = Tensor(np.zeros((KERNEL_POINT_CAP + 1, cfg.width)))
    with pytest.raises(ResourceError):
        induced_kernel_factors(params.layers[0], cfg, big)


def test_induced_kernel_single_head_reproduces_value_path():
    # heads=1, identity-patched value/output projections: applying the
    # kernel to values equals running compress -> reconstruct directly
    cfg = small_cfg(heads=1, variant="linear_no", width=8, latent_count=3)
    params = init_backbone_params(cfg, seed=9)
    layer = params.layers[0]
    layer.down.w_v.data = np.eye(8)
    layer.down.w_o.data = np.eye(8)
    layer.up.w_v.data = np.eye(8)
    layer.up.w_o.data = np.eye(8)
    pts = uniform_points(14, seed=10)
    h = hidden_state(cfg, pts, params)
    from lrsa_lab.nn import apply_norm

    with no_grad():
        z = compress(h, layer, cfg)
        delta = reconstruct(h, z, layer, cfg)
        hn = apply_norm(h, layer.norm_entry, cfg.norm_kind)
    kern = materialize_induced_kernel(layer, cfg, h).data
    np.testing.assert_allclose(kern @ hn.data, delta.data, atol=1e-10)


# -------------------------------------------------------------- slicing


def test_slicing_points_axis_equals_attention():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(9, 5))
    w = rng.normal(size=(3, 5))
    out = slicing_compress(h, w, softmax_axis="points")
    logits = h @ w.T
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    attn = (e / e.sum(axis=0, keepdims=True)).T @ h
    np.testing.assert_allclose(out, attn, atol=1e-12)


def test_slicing_single_slice_is_mean():
    rng = np.random.default_rng(12)
    h = rng.normal(size=(7, 4))
    out = slicing_compress(h, rng.normal(size=(1, 4)), softmax_axis="slices")
    np.testing.assert_allclose(out, h.mean(axis=0, keepdims=True), atol=1e-12)


def test_slicing_rowstochastic_assignment():
    rng = np.random.default_rng(13)
    h = rng.normal(size=(8, 4))
    w = rng.normal(size=(3, 4))
    out = slicing_compress(h, w, softmax_axis="slices")
    assert out.shape == (3, 4)
    hull_lo, hull_hi = h.min(axis=0), h.max(axis=0)
    assert np.all(out >= hull_lo - 1e-12) and np.all(out <= hull_hi + 1e-12)


def test_slicing_starved_slice_raises():
    h = np.full((6, 2), 1000.0)
    w = np.array([[1.0, 0.0], [-1.0, 0.0]])  # slice 1 logit -1000 vs +1000
    with pytest.raises(DegeneracyError):
        slicing_compress(h, w, softmax_axis="slices")


def test_slicing_rejects_bad_axis_and_shapes():
    with pytest.raises(ContractError):
        slicing_compress(np.ones((3, 2)), np.ones((2, 2)), softmax_axis="rows")
    with pytest.raises(DimensionError):
        slicing_compress(np.ones((3, 2)), np.ones((2, 3)))


# ------------------------------------------------------ equivariance


def test_block_permutation_equivariance_all_variants():
    rng = np.random.default_rng(14)
    for variant in VARIANTS:
        cfg = small_cfg(variant=variant)
        params = init_backbone_params(cfg, seed=15)
        n = 20
        pts = uniform_points(n, seed=16)
        perm = rng.permutation(n)
        ppts = PointSet(
            coords=pts.coords[perm],
            features=pts.features[perm],
            quad_weight=pts.quad_weight,
        )
        base = backbone_forward(pts, cfg, params).data
        permuted = backbone_forward(ppts, cfg, params).data
        assert np.abs(permuted - base[perm]).max() <= 1e-12


def test_duplicated_points_duplicate_outputs():
    cfg = small_cfg()
    params = init_backbone_params(cfg, seed=17)
    pts = uniform_points(9, seed=18)
    dup = PointSet(
        coords=np.vstack([pts.coords, pts.coords[:1]]),
        features=np.vstack([pts.features, pts.features[:1]]),
        quad_weight=pts.quad_weight,
    )
    out = backbone_forward(dup, cfg, params).data
    np.testing.assert_allclose(out[-1], out[0], atol=1e-12)


# ------------------------------------------------------------- flops


def test_block_matmul_flops_matches_instrumentation():
    for variant in VARIANTS:
        cfg = small_cfg(variant=variant)
        params = init_backbone_params(cfg, seed=0)
        pts = uniform_points(18)
        h = hidden_state(cfg, pts, params)
        with no_grad(), FlopCounter() as fc:
            lrsa_block(h, pts, params.layers[0], cfg)
        assert fc.flops == block_matmul_flops(18, cfg), variant


def test_coupling_flops_scaling():
    cfg = LRSAConfig(depth=1, width=64, heads=4, latent_count=64)
    cfg.validate()
    ratio = coupling_flops(4096, cfg) / coupling_flops(512, cfg)
    assert 7.5 <= ratio <= 8.5
    dense_ratio = dense_coupling_flops(4096, 64) / dense_coupling_flops(512, 64)
    assert dense_ratio == 64.0


def test_coupling_flops_linear_in_m():
    cfg8 = small_cfg(latent_count=8)
    cfg16 = small_cfg(latent_count=16)
    n = 1 << 14
    # the N M d term dominates at large N, so doubling M roughly doubles cost
    assert 1.9 <= coupling_flops(n, cfg16) / coupling_flops(n, cfg8) <= 2.1


# --------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    for variant in ("full", "symmetric_tied", "fixed_basis"):
        cfg = small_cfg(variant=variant)
        params = init_backbone_params(cfg, seed=19)
        ckpt = tmp_path / variant
        save_checkpoint(ckpt, cfg, params, step=123)
        cfg2, params2, step = load_checkpoint(ckpt)
        assert step == 123
        assert cfg2 == cfg
        pairs = zip(named_parameters(params), named_parameters(params2))
        for (na, ta), (nb, tb) in pairs:
            assert na == nb
            assert np.array_equal(ta.data, tb.data)
        if variant == "symmetric_tied":
            assert params2.layers[0].up.w_q is params2.layers[0].down.w_k


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    cfg = small_cfg()
    params = init_backbone_params(cfg, seed=0)
    save_checkpoint(tmp_path, cfg, params, step=0)
    write_tns(tmp_path / "readout.w.tns", np.zeros((3, 3)))
    with pytest.raises(DataError, match="readout.w"):
        load_checkpoint(tmp_path)


def test_checkpoint_missing_tensor(tmp_path):
    cfg = small_cfg()
    params = init_backbone_params(cfg, seed=0)
    save_checkpoint(tmp_path, cfg, params, step=0)
    import json

    mpath = tmp_path / "manifest.json"
    manifest = json.loads(mpath.read_text())
    del manifest["tensors"]["readout.b"]
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="readout.b"):
        load_checkpoint(mpath.parent)


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nowhere")
