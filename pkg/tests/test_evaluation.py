import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hglora import autodiff as ad
from hglora import evaluation as ev
from hglora.data import SynthConfig, generate, vocab_layout
from hglora.model import DualEncoderModel, ModelConfig
from oracles import pairwise_auc


def toy_model(**kw):
    base = dict(layers=2, heads=2, dim=8, mlp_hidden=12, side=2, patch_dim=4,
                vocab_size=24, max_len=8, rank=2, dprime=4, k=2, seed=0)
    base.update(kw)
    return DualEncoderModel(ModelConfig(**base))


def toy_synth():
    return SynthConfig(num_classes=2, pairs_per_class=4, side=2, patch_dim=4,
                       vocab_size=24, tokens_per_class=2, text_len=4, seed=0)


def test_template_slot_validation():
    with pytest.raises(ValueError):
        ev.PromptTemplate("no slot here", (1,))
    with pytest.raises(ValueError):
        ev.PromptTemplate("{disease} and {disease}", (1,))


def test_template_realize():
    t = ev.PromptTemplate("an image of {disease}", (10, 11))
    assert t.realize((2, 3)) == [10, 11, 2, 3]


def test_class_embeddings_single_template_is_that_embedding():
    model = toy_model()
    cfg = toy_synth()
    blocks = vocab_layout(cfg)["class_blocks"]
    template = ev.default_templates(cfg)[0]
    embeds = ev.class_text_embeddings(blocks, [template], model)
    with ad.no_grad():
        direct = model.text_embedding(template.realize(tuple(blocks[0]))).data[0]
    np.testing.assert_allclose(embeds[0], direct, atol=1e-12)


def test_class_embeddings_duplicate_templates_idempotent():
    model = toy_model()
    cfg = toy_synth()
    blocks = vocab_layout(cfg)["class_blocks"]
    t = ev.default_templates(cfg)[0]
    one = ev.class_text_embeddings(blocks, [t], model)
    two = ev.class_text_embeddings(blocks, [t, t], model)
    np.testing.assert_allclose(one, two, atol=1e-12)


def test_class_embeddings_mean_then_renormalize_oracle():
    model = toy_model()
    cfg = toy_synth()
    blocks = vocab_layout(cfg)["class_blocks"]
    templates = ev.default_templates(cfg)
    embeds = ev.class_text_embeddings(blocks, templates, model)
    with ad.no_grad():
        per_template = [
            model.text_embedding(t.realize(tuple(blocks[1]))).data[0] for t in templates
        ]
    mean = np.mean(per_template, axis=0)
    np.testing.assert_allclose(embeds[1], mean / np.linalg.norm(mean), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(embeds, axis=1), 1.0, atol=1e-10)


def test_class_embeddings_rejects_unknown_token():
    model = toy_model()
    bad = ev.PromptTemplate("x {disease}", (9999,))
    with pytest.raises(ValueError):
        ev.class_text_embeddings([(0, 1)], [bad], model)


def test_zero_shot_scores_identity_cases():
    # orthonormal class embeds, image embed equals class 2's embed
    model = toy_model()
    d = model.cfg.dim
    class_embeds = np.eye(3, d)
    image = np.zeros((2, 2, 4))
    scores = ev.zero_shot_scores([image], class_embeds, model)
    with ad.no_grad():
        emb = model.image_embedding(image).data[0]
    np.testing.assert_allclose(scores[0], class_embeds @ emb, atol=1e-12)

    # degenerate: identical class embeds -> argmax picks index 0
    same = np.tile(class_embeds[0], (3, 1))
    scores2 = ev.zero_shot_scores([image], same, model)
    assert int(np.argmax(scores2[0])) == 0


def test_accuracy_counting():
    assert ev.accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    assert ev.accuracy([1, 1], [1, 1]) == 1.0
    assert ev.accuracy([0, 0], [1, 1]) == 0.0
    with pytest.raises(ValueError):
        ev.accuracy([], [])


def test_auc_perfect_ranking():
    assert ev.auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0


def test_auc_hand_case_three_of_four_pairs():
    assert ev.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_matches_bruteforce_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        scores = np.round(rng.normal(size=n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert ev.auc(scores, labels) == pairwise_auc(scores, labels)


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=10_000)
    labels = np.concatenate([np.ones(5000, int), np.zeros(5000, int)])
    assert abs(ev.auc(scores, labels) - 0.5) < 0.02


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    scores = rng.normal(size=n)
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = ev.auc(scores, labels)
    assert ev.auc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)
    assert ev.auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert ev.auc(np.tanh(scores) * 0.1, labels) == pytest.approx(base, abs=1e-12)


def test_macro_auc_equals_binary_for_two_classes():
    rng = np.random.default_rng(2)
    n = 50
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    s1 = rng.normal(size=n)
    scores = np.stack([-s1, s1], axis=1)  # class-1 score is s1, class-0 its negation
    macro = ev.auc(scores, labels)
    binary = ev.auc(s1, labels)
    assert macro == pytest.approx(binary, abs=1e-12)


def test_auc_degenerate_class_excluded_with_warning():
    scores = np.random.default_rng(3).normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 0, 1])  # class 2 never appears
    with pytest.warns(RuntimeWarning):
        value = ev.auc(scores, labels)
    assert 0.0 <= value <= 1.0
    with pytest.raises(ValueError), pytest.warns(RuntimeWarning):
        ev.auc(np.zeros((3, 1)), np.zeros(3, dtype=int))


def test_accuracy_invariant_under_positive_rescale():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=(20, 3))
    preds = np.argmax(scores, axis=1)
    preds2 = np.argmax(scores * 4.2, axis=1)
    np.testing.assert_array_equal(preds, preds2)


def test_evaluate_zero_shot_report_roundtrip(tmp_path):
    model = toy_model()
    cfg = toy_synth()
    samples = generate(cfg)
    blocks = vocab_layout(cfg)["class_blocks"]
    report = ev.evaluate_zero_shot(
        [s.image for s in samples], [s.label for s in samples],
        blocks, ev.default_templates(cfg), model,
    )
    assert 0.0 <= report.accuracy <= 1.0
    assert 0.0 <= report.auc <= 1.0
    assert report.confusion.sum() == len(samples)

    text = ev.format_report(report)
    parsed = ev.parse_report(text)
    assert parsed.accuracy == report.accuracy
    assert parsed.auc == report.auc
    np.testing.assert_array_equal(parsed.predictions, report.predictions)
    np.testing.assert_array_equal(parsed.labels, report.labels)
    np.testing.assert_array_equal(parsed.confusion, report.confusion)
    np.testing.assert_array_equal(parsed.scores, report.scores)
    assert ev.format_report(parsed) == text  # lossless


def test_zero_shot_matches_nearest_centroid_oracle():
    model = toy_model()
    cfg = toy_synth()
    samples = generate(cfg)
    blocks = vocab_layout(cfg)["class_blocks"]
    embeds = ev.class_text_embeddings(blocks, ev.default_templates(cfg), model)
    scores = ev.zero_shot_scores([s.image for s in samples], embeds, model)
    with ad.no_grad():
        img_embeds = np.stack(
            [model.image_embedding(s.image).data[0] for s in samples]
        )
    # brute-force cosine argmax over the same embeddings
    expected = np.argmax(img_embeds @ embeds.T, axis=1)
    np.testing.assert_array_equal(np.argmax(scores, axis=1), expected)


def test_similarity_map_shapes_and_normalization():
    model = toy_model()
    raw, norm = ev.similarity_map(np.random.default_rng(5).normal(size=(2, 2, 4)),
                                  [1, 2], model)
    assert raw.shape == (2, 2) and norm.shape == (2, 2)
    assert norm.min() == 0.0 and norm.max() == 1.0


def test_similarity_map_orthogonal_query_zero():
    model = toy_model(hgnn_image=False, hgnn_text=False, use_lora=False)
    image = np.random.default_rng(6).normal(size=(2, 2, 4))
    with ad.no_grad():
        tokens = model.image_tokens(image)
        locals_unit = ad.l2_normalize(ad.gather_rows(tokens, [1, 2, 3, 4])).data
    # build a query vector orthogonal to every local token
    q, _ = np.linalg.qr(locals_unit.T, mode="complete")
    ortho = q[:, -1]
    raw_scores = locals_unit @ ortho
    np.testing.assert_allclose(raw_scores, 0.0, atol=1e-12)


def test_write_pgm(tmp_path):
    grid = np.array([[0.0, 0.5], [0.75, 1.0]])
    path = tmp_path / "map.pgm"
    ev.write_pgm(path, grid)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 128, 191, 255]
