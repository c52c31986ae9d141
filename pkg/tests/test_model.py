import numpy as np
import pytest
import torch

from avasdl.model import (
    Conformer, ModelConfig, ModelError, RelPositionSelfAttention, audio_encoder_forward, build_model,
    camera_onehot, conformer_forward, count_parameters, fusion_head_forward, load_checkpoint, model_forward,
    read_checkpoint, save_checkpoint, visual_encoder_forward,
)
from oracles import layer_norm, single_head_attention

# regression constant recorded at first build (see decisions ledger)
PAPER_PARAMETER_COUNT = 69_790_672
TOY = ModelConfig.toy()


@pytest.fixture(scope="module")
def toy_net():
    return build_model(TOY, torch.float64).eval()


def _inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((cfg.in_channels, cfg.n_time, cfg.n_freq)),
            rng.standard_normal((cfg.n_frames, cfg.obs_width if cfg.visual_backbone == "toy_conv"
                                 else cfg.visual_feature_dim)))


def test_config_invariants():
    for bad in (dict(attention_heads=3), dict(depthwise_kernel=8), dict(conv_blocks=0),
                dict(visual_backbone="resnet"), dict(base_channels=8)):
        with pytest.raises(ModelError):
            ModelConfig.toy(**bad)
    assert ModelConfig.paper().n_frames == 60


def test_config_round_trip():
    assert ModelConfig.from_dict(TOY.to_dict()) == TOY
    with pytest.raises(ModelError):
        ModelConfig.from_dict({**TOY.to_dict(), "dropout": 0.1})


def _shape_calculator(cfg):
    t, f, c = cfg.n_time, cfg.n_freq, cfg.in_channels
    for b in range(cfg.conv_blocks):
        c = cfg.base_channels * 2**b
        t, f = t // 2, f // 2  # padding 1 keeps size through the convs, pool halves it
    return t, c


def test_audio_encoder_toy_shape_calculator():
    cfg = ModelConfig(conv_blocks=2, base_channels=4, embed_dim=8, attention_heads=2, ffn_hidden=16,
                      conformer_layers=1, depthwise_kernel=3, n_time=32, n_freq=16, visual_feature_dim=8,
                      toy_channels=2)
    net = build_model(cfg, torch.float64)
    out = audio_encoder_forward(net, np.zeros((16, 32, 16)))
    assert tuple(out.shape) == _shape_calculator(cfg) == (8, 8)


def test_audio_encoder_zero_input(toy_net):
    out = audio_encoder_forward(toy_net, np.zeros((16, 960, 64)))
    assert tuple(out.shape) == (60, TOY.embed_dim)
    assert torch.all(out == 0)


def test_audio_encoder_rejects_shape(toy_net):
    with pytest.raises(ModelError):
        audio_encoder_forward(toy_net, np.zeros((16, 900, 64)))


def test_visual_encoder_external_embeddings():
    cfg = ModelConfig.toy(visual_backbone="external_embedding")
    net = build_model(cfg, torch.float64).eval()
    out = visual_encoder_forward(net, np.random.default_rng(0).standard_normal((60, cfg.visual_feature_dim)))
    assert tuple(out.shape) == (60, cfg.embed_dim)
    with pytest.raises(ModelError):
        visual_encoder_forward(net, np.zeros((60, cfg.visual_feature_dim + 1)))
    with pytest.raises(ModelError):
        visual_encoder_forward(net, np.zeros((59, cfg.visual_feature_dim)))


def test_visual_backbone_position_independent(toy_net):
    frame = np.random.default_rng(1).standard_normal(TOY.obs_width)
    emb = toy_net.visual.embed_frames(torch.as_tensor(np.tile(frame, (1, 60, 1))))[0]
    assert torch.allclose(emb, emb[0].expand_as(emb), atol=0)


def test_visual_backbone_distinguishes_positions(toy_net):
    cols = np.arange(TOY.obs_width) + 0.5

    def bump(x):
        return np.exp(-0.5 * ((cols - x * TOY.obs_width) / 1.5) ** 2)

    with torch.no_grad():
        a = toy_net.visual.embed_frames(torch.as_tensor(bump(0.25))[None, None])[0, 0]
        b = toy_net.visual.embed_frames(torch.as_tensor(bump(0.75))[None, None])[0, 0]
    assert float(torch.nn.functional.cosine_similarity(a, b, dim=0)) < 0.99


@pytest.mark.parametrize("t", [1, 60, 128])
def test_conformer_shape(toy_net, t):
    seq = torch.randn(t, TOY.embed_dim, dtype=torch.float64)
    assert conformer_forward(toy_net.visual.conformer, seq).shape == seq.shape


def test_conformer_rejects_width(toy_net):
    with pytest.raises(ModelError):
        conformer_forward(toy_net.visual.conformer, torch.zeros(5, TOY.embed_dim + 1, dtype=torch.float64))


def test_conformer_permutation_sensitive(toy_net):
    seq = torch.randn(20, TOY.embed_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    perm = torch.randperm(20, generator=torch.Generator().manual_seed(1))
    out = conformer_forward(toy_net.visual.conformer, seq)
    out_perm = conformer_forward(toy_net.visual.conformer, seq[perm])
    assert not torch.allclose(out[perm], out_perm, atol=1e-6)


def test_attention_matches_brute_force():
    torch.manual_seed(0)
    att = RelPositionSelfAttention(4, 1, 64).double()
    with torch.no_grad():
        att.rel_bias.uniform_(-0.5, 0.5)
    x = torch.randn(1, 2, 4, dtype=torch.float64)
    got = att(x)[0]

    def w(lin):
        return lin.weight.tolist(), lin.bias.tolist()

    rows = [layer_norm(r) for r in x[0].tolist()]
    want = single_head_attention(rows, *w(att.q), *w(att.k), *w(att.v), *w(att.out), att.rel_bias[0].tolist(), 64)
    assert np.allclose(got.detach().numpy(), want, atol=1e-10, rtol=0)


def test_degenerate_conformer_config_runs():
    cfg = ModelConfig.toy(conformer_layers=1, attention_heads=1, depthwise_kernel=1)
    conf = Conformer(cfg.embed_dim, cfg).double().eval()
    x = torch.randn(1, 2, cfg.embed_dim, dtype=torch.float64)
    assert conf(x).shape == x.shape


def test_fusion_head_bounds_and_count(toy_net):
    rng = np.random.default_rng(3)
    a = rng.standard_normal((60, TOY.embed_dim)) * 5
    v = rng.standard_normal((60, TOY.embed_dim)) * 5
    out = fusion_head_forward(toy_net, a, v, np.eye(11)[2])
    assert len(out) == 60
    assert all(0 <= o.x_pred <= 1 and 0 <= o.confidence <= 1 for o in out)


def test_fusion_head_rejects_bad_onehot(toy_net):
    a = np.zeros((60, TOY.embed_dim))
    for oh in (np.zeros(11), np.ones(11), np.r_[np.eye(11)[0] * 2]):
        with pytest.raises(ModelError):
            fusion_head_forward(toy_net, a, a, oh)


def test_model_forward_composition_is_bitwise(toy_net):
    feats, frames = _inputs(TOY)
    oh = np.eye(11)[4]
    whole = model_forward(toy_net, feats, frames, oh)
    with torch.no_grad():
        staged = fusion_head_forward(toy_net, audio_encoder_forward(toy_net, feats),
                                     visual_encoder_forward(toy_net, frames), oh)
    assert whole == staged
    assert model_forward(toy_net, feats, frames, oh) == whole


def test_forward_finite_and_batch_shape(toy_net):
    feats = torch.randn(3, 16, 960, 64, dtype=torch.float64) * 100
    frames = torch.randn(3, 60, TOY.obs_width, dtype=torch.float64)
    out = toy_net(feats, frames, camera_onehot([0, 5, 10], dtype=torch.float64))
    assert out.shape == (3, 60, 2)
    assert torch.isfinite(out).all()


def test_paper_config_parameter_count():
    assert count_parameters(build_model(ModelConfig.paper())) == PAPER_PARAMETER_COUNT
    assert count_parameters(build_model(ModelConfig.paper())) == PAPER_PARAMETER_COUNT


def test_init_is_seeded():
    a = build_model(TOY).state_dict()
    b = build_model(TOY).state_dict()
    c = build_model(ModelConfig.toy(seed=1)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_checkpoint_round_trip(tmp_path, toy_net):
    path = tmp_path / "m.bin"
    save_checkpoint(toy_net, path)
    net2 = load_checkpoint(path)
    sd1, sd2 = toy_net.state_dict(), net2.state_dict()
    assert sd1.keys() == sd2.keys() and all(torch.equal(sd1[k], sd2[k]) for k in sd1)
    save_checkpoint(net2, tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()
    cfg, arrays = read_checkpoint(path)
    assert cfg == TOY and arrays["fusion.fc3.weight"].dtype == np.dtype("<f8")


def test_checkpoint_rejects_corruption(tmp_path, toy_net):
    path = tmp_path / "m.bin"
    save_checkpoint(toy_net, path)
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "long.bin").write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "long.bin")
