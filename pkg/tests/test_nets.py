import pytest
import torch
from torch import nn

from cellweight.losses import weighted_dice_batch
from cellweight.nets import (
    Classifier,
    ClassifierSpec,
    Detector,
    DetectorSpec,
    InitSpec,
    build_classifier,
    build_detector,
    count_parameters,
    load_model,
    save_model,
)

SMALL = DetectorSpec((64, 64, 3), levels=2, base_filters=8)


@pytest.mark.slow
def test_default_detector_shape():
    model = build_detector(DetectorSpec(), seed=0)
    with torch.no_grad():
        y = model(torch.rand(2, 256, 256, 3))
    assert y.shape == (2, 256, 256, 1)
    assert float(y.min()) >= 0 and float(y.max()) <= 1


@pytest.mark.parametrize("levels,size", [(1, 32), (2, 48), (3, 64), (3, 128)])
def test_fully_convolutional(levels, size):
    model = build_detector(DetectorSpec((size, size, 3), levels=levels, base_filters=8), seed=1)
    with torch.no_grad():
        assert model(torch.rand(1, size, size, 3)).shape == (1, size, size, 1)
        # any size divisible by 2**levels works, not just the declared one
        assert model(torch.rand(1, 2 * size, size, 3)).shape == (1, 2 * size, size, 1)


def test_indivisible_input_rejected():
    with pytest.raises(ValueError):
        build_detector(DetectorSpec((60, 64, 3), levels=3))
    model = build_detector(SMALL)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 30, 64, 3))


def test_final_decoder_width_is_base_filters():
    model = build_detector(DetectorSpec((64, 64, 3), levels=3, base_filters=16))
    assert model.head.in_channels == 16 and model.head.out_channels == 1


def test_seeded_init_is_deterministic():
    a, b, c = build_detector(SMALL, 3), build_detector(SMALL, 3), build_detector(SMALL, 4)
    x = torch.rand(1, 64, 64, 3)
    with torch.no_grad():
        assert torch.equal(a(x), b(x))
        assert not torch.equal(a(x), c(x))


def test_classifier_outputs_simplex():
    model = build_classifier(ClassifierSpec(), seed=0)
    with torch.no_grad():
        p = model(torch.rand(5, 28, 28, 3))
    assert p.shape == (5, 3)
    assert torch.allclose(p.sum(dim=1), torch.ones(5), atol=1e-6)
    assert bool((p >= 0).all())
    with pytest.raises(ValueError):
        model(torch.rand(5, 32, 32, 3))


def test_parameter_counts():
    model = build_classifier()
    last = model.dense[-1]
    assert isinstance(last, nn.Linear)
    assert sum(p.numel() for p in last.parameters()) == 200 * 3 + 3
    assert count_parameters(model) == count_parameters(build_classifier(seed=9))
    small = count_parameters(build_detector(SMALL))
    wide = count_parameters(build_detector(DetectorSpec((64, 64, 3), levels=2, base_filters=16)))
    assert wide > small


@pytest.mark.parametrize("model", [build_detector(SMALL), build_classifier()], ids=["detector", "classifier"])
def test_relu_only_hidden_activations(model):
    allowed = (nn.ReLU, nn.Sigmoid, nn.Softmax)
    acts = [m for m in model.modules() if not list(m.children()) and not isinstance(
        m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, nn.MaxPool2d, nn.Flatten, nn.BatchNorm2d)
    )]
    assert acts and all(isinstance(m, allowed) for m in acts)
    finals = [m for m in acts if not isinstance(m, nn.ReLU)]
    assert len(finals) == 1 and finals[0] is model.out


def test_one_step_decreases_loss():
    decreased = 0
    for seed in range(10):
        torch.manual_seed(seed)
        model = build_detector(SMALL, seed)
        x = torch.rand(1, 64, 64, 3)
        r = torch.zeros(1, 64, 64, 1)
        r[:, 20:30, 20:30] = 1
        w = torch.ones_like(r)
        opt = torch.optim.Adam(model.parameters(), lr=InitSpec().learning_rate)
        before = weighted_dice_batch(model(x), r, w)
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = weighted_dice_batch(model(x), r, w)
        decreased += after.item() < before.item()
    assert decreased > 5


def test_checkpoint_round_trip(tmp_path):
    det = build_detector(SMALL, 5)
    cls = build_classifier(seed=5)
    x = torch.rand(2, 64, 64, 3)
    xc = torch.rand(2, 28, 28, 3)
    d2 = load_model(save_model(det, tmp_path / "d.pt"))
    c2 = load_model(save_model(cls, tmp_path / "c.pt"))
    assert isinstance(d2, Detector) and isinstance(c2, Classifier)
    assert d2.spec == det.spec and c2.spec == cls.spec
    det.eval()
    cls.eval()
    with torch.no_grad():
        assert torch.equal(det(x), d2(x))
        assert torch.equal(cls(xc), c2(xc))


def test_spec_validation():
    with pytest.raises(ValueError):
        DetectorSpec(levels=0)
    with pytest.raises(ValueError):
        ClassifierSpec(dense_units=(200, 1))
    with pytest.raises(ValueError):
        InitSpec(learning_rate=0)
    assert ClassifierSpec(dense_units=(64, 5)).n_classes == 5
