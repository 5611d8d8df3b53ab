"""Worked examples with hand-computed or oracle-computed expected values.

Class indices are 0-based: "the first class" is index 0.
"""

import math

import numpy as np
import pytest
import torch
from PIL import Image

from clipos.backbone import ContextConfig, VVAttentionConfig, patch_context_incorporate, vv_attention
from clipos.data import DatasetSpec, PreprocessConfig, load_image, sample_episode, write_manifest
from clipos.errors import NumericError
from clipos.masking import clip_similarity_map, discrepancy_partition, normalize_map, similarity_map, topk_partition
from clipos.objective import (EpisodeFeatures, TrainConfig, entropy_max_loss, id_loss_from_similarities,
                              negative_entropy, ood_loss_from_similarities, train)
from clipos.scoring import auroc, evaluate, mcm_from_similarities
from clipos.synthesis import LambdaPolicy, masked_pool, synthesize_outliers
from clipos.textbank import PromptBank, embed_prompts, similarity
from oracles import conv_mean_oracle, cross_entropy, entropy, pairwise_auroc, softmax, topk_oracle, two_token_vv

F64 = torch.float64


# backbone

def test_zero_image_gives_zero_grid_and_no_direction(toy):
    zero = torch.zeros(3, 16, 16, dtype=F64)
    assert torch.equal(toy.encode_patches(zero), torch.zeros(4, 4, 16, dtype=F64))
    with pytest.raises(NumericError):
        toy.encode_image(zero)


def test_toy_encoders_are_pure(toy):
    img = torch.randn(3, 16, 16, dtype=F64, generator=torch.Generator().manual_seed(0))
    assert torch.equal(toy.encode_patches(img), toy.encode_patches(img))
    assert torch.equal(toy.encode_image(img), toy.encode_image(img))


def test_context_one_to_nine_centre():
    grid = torch.arange(1.0, 10.0, dtype=F64).reshape(3, 3, 1)
    out = patch_context_incorporate(grid, ContextConfig(0.1, "replicate"))
    assert float(out[1, 1, 0]) == pytest.approx(5.5, abs=1e-12)
    assert np.allclose(out.numpy(), conv_mean_oracle(grid.numpy(), 0.1, "replicate"))


def test_vv_single_token_and_unit_pair():
    tok = torch.tensor([[[0.3, -1.2]]], dtype=F64)
    assert torch.equal(vv_attention(tok, VVAttentionConfig(1.0)), tok)
    grid = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=F64)
    o1, o2 = two_token_vv([1.0, 0.0], [0.0, 1.0], 1.0)
    assert np.allclose(vv_attention(grid, VVAttentionConfig(1.0))[0].numpy(), [o1, o2])


# textbank

def test_bank_rows(toy):
    bank = PromptBank(toy, ["teal", "amber", "olive"], n_ctx=4)
    emb = embed_prompts(bank)
    assert emb.shape[0] == 4
    assert torch.allclose(emb.norm(dim=-1), torch.ones(4, dtype=F64), atol=1e-5)
    assert torch.equal(emb, embed_prompts(bank))


def test_similarity_examples():
    rows = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=F64)
    assert similarity(torch.tensor([1.0, 0.0], dtype=F64), rows).tolist() == [1.0, 0.0]
    rows3 = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=F64)
    assert torch.allclose(similarity(torch.tensor([0.0, 0.0, 2.0], dtype=F64), rows3), torch.zeros(2, dtype=F64))


# masking

def test_normalization_examples():
    assert normalize_map(torch.tensor([0.2, 0.4, 0.6], dtype=F64)).tolist() == pytest.approx([0, 0.5, 1.0])
    assert normalize_map(torch.tensor([1.0, 3.0])).tolist() == [0.0, 1.0]
    emb = torch.tensor([0.0, 1.0, 0.0], dtype=F64)
    assert torch.equal(similarity_map(emb.expand(2, 2, 3).clone(), emb), torch.full((2, 2), 0.5, dtype=F64))


def test_clip_map_uses_unmodified_path(toy):
    img = torch.randn(3, 16, 16, dtype=F64, generator=torch.Generator().manual_seed(1))
    emb = toy.template_embeddings(["teal"])[0]
    expected = similarity_map(toy.patch_features(img, surgery=False), emb)
    assert torch.equal(clip_similarity_map(toy, img, emb), expected)


def test_discrepancy_hand_example_and_saturation():
    part = discrepancy_partition(torch.tensor([[0.48]], dtype=F64), torch.tensor([[0.10]], dtype=F64))
    assert part.foreground == {(0, 0)}
    ones = torch.ones(3, 3, dtype=F64)
    part = discrepancy_partition(ones, torch.rand(3, 3, dtype=F64))
    assert part.mask.all() and not part.background


def test_topk_examples():
    # one patch, class 1 strictly best among 3
    emb = torch.eye(3, dtype=F64)
    patch = torch.tensor([[[0.1, 0.9, 0.2]]], dtype=F64)
    assert topk_partition(patch, emb, 1, 1).mask.item()
    # 2 patches, 3 classes, K=2: second patch ranks class 0 last
    patches = torch.tensor([[[0.9, 0.5, 0.1], [0.1, 0.9, 0.5]]], dtype=F64)
    sims = (torch.nn.functional.normalize(patches, dim=-1).reshape(-1, 3) @ emb.T).tolist()
    got = topk_partition(patches, emb, 0, 2).mask.reshape(-1).tolist()
    assert got == topk_oracle(sims, 0, 2) == [True, False]


# synthesis

def test_pool_examples():
    v = torch.tensor([3.0, 4.0], dtype=F64)
    grid = v.expand(2, 2, 2).clone()
    assert torch.allclose(masked_pool(grid, [(1, 0)]), v / 5)
    assert torch.allclose(masked_pool(grid, torch.ones(2, 2, dtype=torch.bool)), v / 5)
    grid[0, 0] = torch.tensor([1.0, 0.0], dtype=F64)
    grid[0, 1] = torch.tensor([0.0, 1.0], dtype=F64)
    assert torch.allclose(masked_pool(grid, [(0, 0), (0, 1)]), torch.full((2,), 2 ** -0.5, dtype=F64))


def test_mix_examples():
    a, b = torch.tensor([1.0, 0.0], dtype=F64), torch.tensor([0.0, 1.0], dtype=F64)
    out = synthesize_outliers(torch.stack([a, b]), [0, 1], LambdaPolicy("fixed", value=1.0))
    assert torch.equal(out.raw[0], a)
    same = synthesize_outliers(torch.stack([a, a]), [0, 1], LambdaPolicy())
    assert torch.allclose(same.raw, a.expand(2, 2))
    mixed = synthesize_outliers(torch.stack([a, b]), [0, 1], LambdaPolicy("fixed", value=0.3))
    assert torch.allclose(mixed.raw[0], torch.tensor([0.3, 0.7], dtype=F64))


# objective

def test_id_loss_examples():
    assert float(id_loss_from_similarities(torch.tensor([1.0, 0.5], dtype=F64), 0, 1.0)) == pytest.approx(
        -math.log(math.e / (math.e + math.exp(0.5))), abs=1e-12)
    assert float(id_loss_from_similarities(torch.tensor([1.0, 0.5], dtype=F64), 0, 1.0)) == pytest.approx(
        0.4741, abs=5e-5)
    assert float(id_loss_from_similarities(torch.tensor([1.0, 0.0, 0.0], dtype=F64), 0, 1e-3)) < 1e-12


def test_ood_loss_examples():
    sims = [0.2, 0.1, 0.9]
    assert float(ood_loss_from_similarities(torch.tensor(sims, dtype=F64), 1.0)) == pytest.approx(
        cross_entropy(sims, 2))
    unknown_only = torch.tensor([0.0, 0.0, 1.0], dtype=F64)
    assert float(ood_loss_from_similarities(unknown_only, 0.01)) < 1e-12


def test_entropy_examples():
    assert float(negative_entropy(torch.tensor([0.8, 0.2], dtype=F64))) == pytest.approx(-0.5004, abs=5e-5)
    assert float(negative_entropy(torch.tensor([0.8, 0.2], dtype=F64))) == pytest.approx(-entropy([0.8, 0.2]))
    assert float(negative_entropy(torch.full((4,), 0.25, dtype=F64))) == pytest.approx(-math.log(4))
    emb = torch.eye(2, dtype=F64)
    assert abs(float(entropy_max_loss(torch.tensor([1.0, 0.0], dtype=F64), emb, 1e-3))) < 1e-12


def test_zero_loss_weight_trains_on_id_only(toy):
    g = torch.Generator().manual_seed(0)
    fg = torch.nn.functional.normalize(torch.randn(3, 16, generator=g, dtype=F64), dim=-1)
    feats = EpisodeFeatures(fg, torch.arange(3), fg.flip(0), torch.ones(3, dtype=torch.bool), ["a", "b", "c"])
    bank = PromptBank(toy, ["teal", "amber", "olive"], n_ctx=4)
    hist = train(bank, feats, TrainConfig(epochs=2, beta_loss=0.0, learning_rate=0.1)).history
    assert all(h.total == pytest.approx(h.id_loss) and h.ood_loss > 0 for h in hist)


# scoring

def test_mcm_examples():
    score, _ = mcm_from_similarities(torch.tensor([0.3, 0.9], dtype=F64), 1, 0.05)
    assert float(score) == 1.0
    score, pred = mcm_from_similarities(torch.tensor([1.0, 0.5, 0.0], dtype=F64), 2, 1.0)
    assert float(score) == pytest.approx(softmax([1.0, 0.5])[0]) == pytest.approx(0.6225, abs=5e-5)
    assert int(pred) == 0


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.2, 0.1]) == 1.0
    assert auroc([0.4] * 5, [0.4] * 3) == 0.5
    assert auroc([0.9, 0.8], [0.85, 0.1]) == 0.75 == pairwise_auroc([0.9, 0.8], [0.85, 0.1])


def test_evaluate_separated_clusters(toy):
    bank = PromptBank(toy, ["teal", "amber", "olive"], n_ctx=4)
    with torch.no_grad():
        emb = embed_prompts(bank)
    g = torch.Generator().manual_seed(3)
    id_feats = emb[[0, 1, 2] * 10] + 0.05 * torch.randn(30, 16, generator=g, dtype=F64)
    # OOD: equidistant from the three class rows
    centre = emb[:3].mean(0)
    ood = {"far": centre + 0.05 * torch.randn(20, 16, generator=g, dtype=F64)}
    r1 = evaluate(emb, bank.temperature, id_feats, torch.tensor([0, 1, 2] * 10), ood)
    r2 = evaluate(emb, bank.temperature, id_feats, torch.tensor([0, 1, 2] * 10), ood)
    assert r1.per_dataset["far"] > 0.5
    assert r1.per_dataset == r2.per_dataset and r1.id_accuracy == r2.id_accuracy
    assert r1.rows() == [("far", r1.average), ("Avg", r1.average)]


# data

def _ten_per_class(root):
    write_manifest(root, "d", ["a", "b", "c"])
    for c in "abc":
        (root / "train" / c).mkdir(parents=True)
        for k in range(10):
            (root / "train" / c / f"{k}.npy").write_bytes(b"")
    return DatasetSpec("d", str(root))


def test_episode_examples(tmp_path):
    spec = _ten_per_class(tmp_path)
    ep = sample_episode(spec, 1, 0)
    rng = np.random.Generator(np.random.PCG64(0))
    expected = []
    for idx, c in enumerate("abc"):
        files = sorted((tmp_path / "train" / c).glob("*.npy"))
        expected.append((files[int(rng.permutation(10)[0])], idx))
    assert ep.samples == expected
    full = sample_episode(spec, 10, 5)
    assert sorted(str(p) for p, c in full.samples if c == 1) == sorted(
        str(p) for p in (tmp_path / "train" / "b").glob("*.npy"))


def test_image_examples(tmp_path):
    Image.new("RGB", (32, 32), (10, 200, 30)).save(tmp_path / "s.png")
    prep = PreprocessConfig(224, mean=(0.48145466, 0.4578275, 0.40821073), std=(0.26862954, 0.26130258, 0.27577711))
    a, b = load_image(tmp_path / "s.png", prep), load_image(tmp_path / "s.png", prep)
    assert a.shape == (3, 224, 224) and torch.equal(a, b)
    for ch in a:
        assert torch.allclose(ch, ch[0, 0].expand_as(ch), atol=1e-6)
