import numpy as np
import pytest
import torch

from hardgen.conditioning import Vocabulary
from hardgen.dataset import LabeledImage
from hardgen.errors import TrainingDivergence
from hardgen.scorer import (
    ClassifierParams,
    ScorerTrainConfig,
    SmallConvNet,
    annotate_dataset,
    assess_difficulties,
    assess_difficulty,
    split_by_difficulty,
    train_classifier,
)
from hardgen.shapes import ShapesConfig, generate_shapes_dataset


def _random_tiny_classifier(rng, k=3, image_size=16, width=4):
    torch.manual_seed(int(rng.integers(2**31)))
    net = SmallConvNet(image_size, 1, k, width=width, feature_dim=8)
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0, 0.3)
    return ClassifierParams.from_module(net, width=width, feature_dim=8)


def _zero_head_classifier(k, image_size=16):
    torch.manual_seed(0)
    net = SmallConvNet(image_size, 1, k, width=4, feature_dim=8)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    return ClassifierParams.from_module(net, width=4, feature_dim=8)


def _image(rng, size=16):
    return LabeledImage(pixels=rng.uniform(0, 1, (size, size, 1)).astype(np.float32), label=0, id="x")


def test_rejects_single_class():
    images = [LabeledImage(pixels=np.zeros((16, 16, 1), dtype=np.float32), label=0, id=f"i{i}") for i in range(4)]
    with pytest.raises(ValueError, match="2 classes"):
        train_classifier(images, ScorerTrainConfig(epochs=1), num_classes=1)


def test_rejects_empty_dataset():
    with pytest.raises(ValueError, match="non-empty"):
        train_classifier([], ScorerTrainConfig(epochs=1))


def test_same_seed_identical_parameters(tiny_shapes):
    images, manifest = tiny_shapes
    cfg = ScorerTrainConfig(epochs=2, seed=9)
    params_a, _ = train_classifier(images, cfg, num_classes=manifest.num_classes)
    params_b, _ = train_classifier(images, cfg, num_classes=manifest.num_classes)
    assert set(params_a.state) == set(params_b.state)
    for name in params_a.state:
        assert np.array_equal(params_a.state[name], params_b.state[name])


def test_clean_shapes_heldout_accuracy_at_least_095():
    # regression fixture: a small CNN separates clean shapes nearly perfectly
    images, manifest = generate_shapes_dataset(
        ShapesConfig(num_classes=3, samples_per_class=80, seed=33)
    )
    _, report = train_classifier(
        images, ScorerTrainConfig(epochs=10, batch_size=16, seed=3), num_classes=manifest.num_classes
    )
    assert report["heldout_accuracy"] >= 0.95


def test_equal_logits_give_difficulty_point_nine(rng):
    classifier = _zero_head_classifier(k=10)
    d = assess_difficulty(classifier, _image(rng), true_label=0)
    assert abs(d - 0.9) < 1e-12


def test_dominant_true_logit_drives_difficulty_to_zero(rng):
    classifier = _zero_head_classifier(k=3)
    classifier.state["head.bias"] = np.array([1e4, 0.0, 0.0], dtype=np.float32)
    classifier._module = None
    d = assess_difficulty(classifier, _image(rng), true_label=0)
    assert d <= 1e-30


def test_matches_double_precision_softmax_oracle(rng):
    from hardgen.scorer import _logits

    for _ in range(20):
        classifier = _random_tiny_classifier(rng)
        image = _image(rng)
        label = int(rng.integers(3))
        d = assess_difficulty(classifier, image, true_label=label)
        logits = _logits(classifier, [image]).astype(np.float64)[0]
        exp = np.exp(logits)  # independent recomputation, no max shift
        oracle = 1.0 - exp[label] / exp.sum()
        assert abs(d - oracle) < 1e-10
        assert 0.0 < d < 1.0


def test_softmax_shift_invariance(rng):
    from hardgen.scorer import _softmax64

    for _ in range(10):
        logits = rng.normal(0, 3, size=5)
        shift = float(rng.uniform(-50, 50))
        base = 1.0 - _softmax64(logits)[1]
        shifted = 1.0 - _softmax64(logits + shift)[1]
        assert abs(base - shifted) < 1e-12


def test_assess_label_validation(rng):
    classifier = _random_tiny_classifier(rng)
    with pytest.raises(ValueError, match="range"):
        assess_difficulty(classifier, _image(rng), true_label=5)


def test_annotate_empty_dataset(tiny_classifier):
    classifier, _ = tiny_classifier
    vocab = Vocabulary.build(["circle", "square", "triangle"])
    assert annotate_dataset(classifier, [], ["circle", "square", "triangle"], vocab) == []


def test_annotate_ranges_order_and_prompts(tiny_shapes, tiny_classifier):
    images, manifest = tiny_shapes
    classifier, _ = tiny_classifier
    vocab = Vocabulary.build(manifest.class_names)
    annotated = annotate_dataset(classifier, images, manifest.class_names, vocab)
    assert [s.image.id for s in annotated] == [img.id for img in images]
    assert all(0.0 <= s.difficulty <= 1.0 for s in annotated)
    circle = next(s for s in annotated if s.image.label == 0)
    assert vocab.decode(circle.prompt) == "photo of circle"


def test_annotate_class_names_length_checked(tiny_shapes, tiny_classifier):
    images, manifest = tiny_shapes
    classifier, _ = tiny_classifier
    vocab = Vocabulary.build(manifest.class_names)
    with pytest.raises(ValueError, match="class_names"):
        annotate_dataset(classifier, images, ["circle"], vocab)


def _sample(d):
    img = LabeledImage(pixels=np.zeros((4, 4, 1), dtype=np.float32), label=0, id=f"s{d}")
    from hardgen.dataset import DifficultySample

    return DifficultySample(image=img, difficulty=d, prompt=(1,))


def test_split_one_sample_per_bin():
    easy, moderate, hard = split_by_difficulty([_sample(0.05), _sample(0.3), _sample(0.7)])
    assert [s.difficulty for s in easy] == [0.05]
    assert [s.difficulty for s in moderate] == [0.3]
    assert [s.difficulty for s in hard] == [0.7]


def test_split_boundary_is_half_open():
    easy, moderate, hard = split_by_difficulty([_sample(0.1), _sample(0.5)])
    assert not easy
    assert [s.difficulty for s in moderate] == [0.1]
    assert [s.difficulty for s in hard] == [0.5]


def test_split_empty():
    assert split_by_difficulty([]) == ([], [], [])


def test_split_threshold_validation():
    with pytest.raises(ValueError, match="increasing"):
        split_by_difficulty([], thresholds=(0.5, 0.1))
    with pytest.raises(ValueError, match="increasing"):
        split_by_difficulty([], thresholds=(0.0, 0.5))


def test_split_is_partition_preserving_order(rng):
    samples = [_sample(float(d)) for d in rng.uniform(0, 1, size=60)]
    position = {id(s): i for i, s in enumerate(samples)}
    easy, moderate, hard = split_by_difficulty(samples)
    rejoined = easy + moderate + hard
    assert len(rejoined) == len(samples)
    assert {id(s) for s in rejoined} == {id(s) for s in samples}
    for bin_ in (easy, moderate, hard):
        positions = [position[id(s)] for s in bin_]
        assert positions == sorted(positions)


def test_divergent_training_reports_step(tiny_shapes):
    images, manifest = tiny_shapes
    cfg = ScorerTrainConfig(epochs=3, learning_rate=1e12, seed=0)
    with pytest.raises(TrainingDivergence):
        train_classifier(images, cfg, num_classes=manifest.num_classes)


def test_assess_difficulties_batch_matches_single(tiny_shapes, tiny_classifier):
    images, _ = tiny_shapes
    classifier, _ = tiny_classifier
    batch = assess_difficulties(classifier, images[:5])
    singles = [assess_difficulty(classifier, img, img.label) for img in images[:5]]
    assert np.allclose(batch, singles, atol=1e-12)
