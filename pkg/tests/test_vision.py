import numpy as np
import pytest
import torch

from avpc.model import AVPCModel, load_checkpoint, save_checkpoint
from avpc.pcnet import PCNetArch
from avpc.vision import ClassEmbedding, FrameEncoder, encode_class, encode_frames


def frames(seed=0, B=2, F=3, size=64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, F, size, size, 3, generator=g)


@pytest.mark.parametrize("side", [1, 2, 4])
def test_output_shape(side):
    enc = FrameEncoder(16, side)
    assert enc(frames()).shape == (2, 16, side, side)


def test_desk_feature_map_shape():
    torch.manual_seed(0)
    out = encode_frames(frames(B=1)[0].numpy(), FrameEncoder())
    assert out.shape == (2, 2, 16)


@pytest.mark.parametrize("size", [32, 64, 96, 128])
def test_shape_independent_of_frame_size(size):
    assert FrameEncoder()(frames(size=size)).shape == (2, 16, 2, 2)


@pytest.mark.parametrize("pooling", ["mean", "max"])
def test_frame_permutation_invariance_is_exact(pooling):
    torch.manual_seed(0)
    enc = FrameEncoder(pooling=pooling)
    x = frames(F=5)
    for perm in ([4, 3, 2, 1, 0], [1, 3, 0, 4, 2]):
        assert torch.equal(enc(x), enc(x[:, perm]))


def test_zero_frames_zero_bias_give_zero_feature():
    enc = FrameEncoder()
    for m in enc.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    assert torch.count_nonzero(enc(torch.zeros(1, 3, 64, 64, 3))) == 0


def test_frozen_trunk_is_deterministic_and_untrainable():
    torch.manual_seed(0)
    enc = FrameEncoder(freeze_trunk=True)
    assert all(not p.requires_grad for p in enc.trunk.parameters())
    assert all(p.requires_grad for p in enc.extra.parameters())
    x = frames()[0].numpy()
    assert np.array_equal(encode_frames(x, enc), encode_frames(x, enc))


def test_bad_inputs_rejected():
    enc = FrameEncoder()
    with pytest.raises(ValueError):
        enc(torch.rand(2, 64, 64, 3))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 8, 8, 3))
    with pytest.raises(ValueError):
        encode_frames(np.full((3, 64, 64, 3), 2.0, dtype=np.float32), enc)
    with pytest.raises(ValueError):
        FrameEncoder(feature_side=3)


def test_class_embedding_lookup_and_orthogonality():
    torch.manual_seed(0)
    table = ClassEmbedding(8, 16, 2)
    a, b = encode_class(3, table), encode_class(3, table)
    assert np.array_equal(a, b) and a.shape == (2, 2, 16)
    flat = table.table.detach().reshape(8, -1)
    gram = flat @ flat.T
    off = gram - torch.diag(torch.diag(gram))
    assert float(off.abs().max()) < 1e-6
    with pytest.raises(ValueError):
        table(torch.tensor([8]))
    with pytest.raises(ValueError):
        table(torch.tensor([-1]))


def test_class_table_checkpoint_round_trip(tmp_path):
    torch.manual_seed(1)
    model = AVPCModel(PCNetArch(), guidance="class")
    path = save_checkpoint(tmp_path / "c.ckpt", model)
    loaded, _ = load_checkpoint(path)
    assert torch.equal(loaded.vision.table, model.vision.table)
