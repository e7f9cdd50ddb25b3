import numpy as np
import pytest

from plood import autodiff as ad
from plood import backbone as bb


@pytest.fixture
def params():
    return bb.init_backbone(seed=0)


def rand_images(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 16, 16))


def test_extract_features_deterministic(params):
    img = rand_images(1, seed=3)
    batch = np.concatenate([img, img], axis=0)
    feats = bb.extract_features(params, batch)
    assert np.array_equal(feats.h_ssfe.data[0], feats.h_ssfe.data[1])


def test_zero_image_zero_biases_gives_zero_features(params):
    feats = bb.extract_features(params, np.zeros((2, 1, 16, 16)))
    assert np.array_equal(feats.h_rc.data, np.zeros((2, 32)))
    assert np.array_equal(feats.h_ri.data, np.zeros((2, 32)))
    assert np.array_equal(feats.h_ssfe.data, np.zeros((2, 64)))


def test_concat_contract(params):
    feats = bb.extract_features(params, rand_images(5, seed=1))
    assert np.array_equal(feats.h_ssfe.data[:, :32], feats.h_rc.data)
    assert np.array_equal(feats.h_ssfe.data[:, 32:], feats.h_ri.data)


def test_batch_permutation_equivariance(params):
    imgs = rand_images(7, seed=2)
    perm = np.random.default_rng(0).permutation(7)
    a = bb.extract_features(params, imgs).h_ssfe.data
    b = bb.extract_features(params, imgs[perm]).h_ssfe.data
    assert np.allclose(a[perm], b, atol=0)


def test_wrong_image_shape_rejected(params):
    with pytest.raises(bb.BackboneError):
        bb.extract_features(params, np.zeros((2, 1, 8, 8)))


def test_rotation_logits_zero_map(params):
    params.tensors["rot_w"].data[:] = 0.0
    params.tensors["rot_b"].data[:] = 0.0
    out = bb.rotation_logits(params, np.ones((3, 32)))
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_rotation_logits_permutation(params):
    h = np.random.default_rng(5).random((6, 32))
    perm = np.array([3, 1, 5, 0, 2, 4])
    a = bb.rotation_logits(params, h).data
    b = bb.rotation_logits(params, h[perm]).data
    assert np.array_equal(a[perm], b)


def test_rotation_logits_1x1_hand_case():
    # h=[2], w=[[3]], b=[1] -> logit 7
    t = {
        "rot_w": ad.Tensor([[3.0]]),
        "rot_b": ad.Tensor([1.0]),
    }
    p = bb.BackboneParams.__new__(bb.BackboneParams)
    p.tensors, p.phase, p.seed, p.rotations, p.q = t, bb.PHASE_SSFE, 0, 1, None
    out = bb.rotation_logits(p, np.array([[2.0]]))
    assert out.data[0, 0] == 7.0


def test_pll_logits_1x1_hand_case(params):
    pll = bb.init_finetune(params, q=1, seed=0)
    pll.tensors["cls_w"].data[:] = 0.0
    pll.tensors["cls_b"].data[:] = 4.0
    out = bb.pll_logits(pll, rand_images(2, seed=6))
    assert np.array_equal(out.data, np.full((2, 1), 4.0))


def test_pll_logits_permutation(params):
    pll = bb.init_finetune(params, q=6, seed=1)
    imgs = rand_images(5, seed=7)
    perm = np.array([4, 2, 0, 3, 1])
    a = bb.pll_logits(pll, imgs).data
    b = bb.pll_logits(pll, imgs[perm]).data
    assert np.array_equal(a[perm], b)


def test_phase_checks(params):
    pll = bb.init_finetune(params, q=6, seed=0)
    with pytest.raises(bb.PhaseError):
        bb.rotation_logits(pll, np.zeros((1, 32)))
    with pytest.raises(bb.PhaseError):
        bb.pll_logits(params, rand_images(1))
    with pytest.raises(bb.PhaseError):
        bb.init_finetune(pll, q=6, seed=0)


def test_init_finetune_copies_extractor_bitwise(params):
    pll = bb.init_finetune(params, q=6, seed=9)
    for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                 "head_rc_w", "head_rc_b", "head_ri_w", "head_ri_b"):
        assert np.array_equal(pll.tensors[name].data, params.tensors[name].data)
    assert "rot_w" not in pll.tensors
    # a copy, not a view: mutating the fine-tune bundle must not leak back
    pll.tensors["conv1_w"].data += 1.0
    assert not np.array_equal(pll.tensors["conv1_w"].data, params.tensors["conv1_w"].data)


def test_init_finetune_seeding(params):
    a = bb.init_finetune(params, q=6, seed=4)
    b = bb.init_finetune(params, q=6, seed=4)
    c = bb.init_finetune(params, q=6, seed=5)
    assert np.array_equal(a.tensors["cls_w"].data, b.tensors["cls_w"].data)
    assert (c.tensors["cls_w"].data != a.tensors["cls_w"].data).any()
    assert np.abs(a.tensors["cls_w"].data).max() <= 0.05


def test_init_backbone_deterministic():
    a = bb.init_backbone(seed=13)
    b = bb.init_backbone(seed=13)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name].data, b.tensors[name].data)


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "theta.plbk"
    bb.save_params(params, path)
    back = bb.load_params(path)
    assert back.phase == params.phase
    assert back.seed == params.seed
    assert set(back.tensors) == set(params.tensors)
    for name in params.tensors:
        assert np.array_equal(back.tensors[name].data, params.tensors[name].data)
    assert back.checksum() == params.checksum()


def test_checkpoint_truncation(tmp_path, params):
    path = tmp_path / "theta.plbk"
    bb.save_params(params, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.plbk"
    bad.write_bytes(blob[:-16])
    with pytest.raises(bb.BackboneError, match="truncated"):
        bb.load_params(bad)


def test_pll_logits_ndarray_matches_tensor_path(params):
    pll = bb.init_finetune(params, q=6, seed=2)
    imgs = rand_images(10, seed=8)
    a = bb.pll_logits(pll, imgs).data
    b = bb.pll_logits_ndarray(pll, imgs, batch=3)
    assert np.allclose(a, b, atol=0)
