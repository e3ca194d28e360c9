# tests/test_models.py
"""
Tests for the student architecture, backbone registry, feature taps and ensembles
"""
import pytest
import torch
import torch.nn as nn


def test_student_has_three_conv_blocks():
    from src.models import StudentNet

    net = StudentNet(class_count=5)
    convs = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 64, 128]
    assert [c.kernel_size for c in convs] == [(5, 5), (3, 3), (3, 3)]
    assert sum(p.numel() for c in convs for p in c.parameters()) == 112_448


def test_student_output_shape():
    from src.models import build_network

    handle = build_network('student-3block', 5, seed=0)
    assert handle.module(torch.zeros(2, 1, 64, 64)).shape == (2, 5)


def test_capacity_ordering_of_defaults():
    from src.core import RunConfig
    from src.models import check_capacity_ordering

    cfg = RunConfig()
    counts = check_capacity_ordering(cfg.teacher_backbones + ('tiny-inception',), cfg.assistant_backbone,
                                     cfg.student_backbone, cfg.class_count)
    assert min(counts['tiny-b6'], counts['tiny-b7'], counts['tiny-inception']) > counts['tiny-densenet']
    assert counts['tiny-densenet'] > counts['student-3block']


def test_capacity_ordering_rejects_wrong_roles():
    from src.core import RegistryError
    from src.models import check_capacity_ordering

    with pytest.raises(RegistryError, match='role'):
        check_capacity_ordering(['tiny-b6'], 'student-3block', 'student-3block', 3)


def test_registry_lookup_and_roles():
    from src.core import NetworkRole, RegistryError
    from src.models import get_backbone, registered_backbones

    assert get_backbone('tiny-densenet').role is NetworkRole.ASSISTANT
    assert 'student-3block' in registered_backbones(NetworkRole.STUDENT)
    assert {'tiny-b6', 'tiny-b7', 'tiny-inception', 'efficientnet-b6', 'efficientnet-b7',
            'inception-v3'} <= set(registered_backbones(NetworkRole.TEACHER))
    assert get_backbone('densenet121').full_scale
    with pytest.raises(RegistryError, match='unknown backbone'):
        get_backbone('resnet-9000')


def test_registry_rejects_duplicates_and_bad_capacity():
    from src.core import NetworkRole, RegistryError
    from src.models import BackboneSpec, StudentNet, register_backbone

    with pytest.raises(RegistryError, match='already registered'):
        register_backbone(BackboneSpec('student-3block', NetworkRole.STUDENT, 1, ('block1',), 'head',
                                       lambda c, ch: StudentNet(c, ch)))
    with pytest.raises(RegistryError, match='capacity_class'):
        BackboneSpec('odd', NetworkRole.STUDENT, 3, ('block1',), 'head', lambda c, ch: StudentNet(c, ch))
    with pytest.raises(RegistryError, match='no feature taps'):
        BackboneSpec('tapless', NetworkRole.STUDENT, 1, (), 'head', lambda c, ch: StudentNet(c, ch))


def test_build_network_rejects_missing_tap():
    from src.core import NetworkRole, RegistryError
    from src.models import BackboneSpec, StudentNet, build_network

    spec = BackboneSpec('broken', NetworkRole.STUDENT, 1, ('block9',), 'head', lambda c, ch: StudentNet(c, ch))
    with pytest.raises(RegistryError, match='block9'):
        build_network(spec, 2, seed=0)


def test_build_network_seeded_and_isolated():
    from src.models import build_network

    state = torch.random.get_rng_state()
    a = build_network('tiny-densenet', 3, seed=5)
    b = build_network('tiny-densenet', 3, seed=5)
    c = build_network('tiny-densenet', 3, seed=6)
    assert torch.equal(torch.random.get_rng_state(), state)
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.module.parameters(), c.module.parameters()))


def test_forward_with_taps_student_shapes():
    from src.core import NetworkRole
    from src.models import build_network, forward_with_taps

    handle = build_network('student-3block', 3, seed=0)
    pred, taps = forward_with_taps(handle, torch.randn(2, 1, 32, 32))
    assert pred.probabilities.shape == (2, 3)
    assert list(taps) == ['block1', 'block2', 'block3']
    assert taps['block1'].tensor.shape == (2, 64, 16, 16)
    assert taps['block2'].tensor.shape == (2, 64, 8, 8)
    assert taps['block3'].tensor.shape == (2, 128, 4, 4)
    assert all(t.producer_role is NetworkRole.STUDENT for t in taps.values())


@pytest.mark.parametrize('name', ['tiny-b6', 'tiny-b7', 'tiny-inception', 'tiny-densenet'])
def test_every_desk_backbone_exposes_three_taps(name):
    from src.models import build_network, forward_with_taps

    handle = build_network(name, 4, seed=0)
    pred, taps = forward_with_taps(handle, torch.randn(2, 1, 32, 32))
    assert pred.logits.shape == (2, 4)
    assert len(taps) == 3
    assert all(t.is_batched and t.tensor.shape[0] == 2 for t in taps.values())


def test_forward_rejects_wrong_channels():
    from src.core import DimensionError
    from src.models import build_network, predict

    handle = build_network('student-3block', 3, seed=0)
    with pytest.raises(DimensionError):
        predict(handle, torch.randn(2, 3, 32, 32))
    with pytest.raises(DimensionError):
        predict(handle, torch.randn(1, 32, 32))


def test_softmax_predictions_sum_to_one():
    from src.core import SoftLabelMode
    from src.models import build_network, predict

    handle = build_network('student-3block', 3, seed=0)
    pred = predict(handle, torch.randn(4, 1, 32, 32), SoftLabelMode.SOFTMAX)
    assert torch.allclose(pred.probabilities.sum(dim=-1), torch.ones(4), atol=1e-6)


def test_ensemble_of_one_matches_member():
    from src.models import build_network, predict, teacher_ensemble_predict

    member = build_network('tiny-b6', 3, seed=0)
    member.module.eval()
    images = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        single = predict(member, images).probabilities.to(torch.float64)
        ensemble = teacher_ensemble_predict([member], images).probabilities
    assert torch.allclose(single, ensemble, atol=1e-6)


def test_ensemble_probabilities_average_members():
    from src.core import SoftLabelMode
    from src.models import ensemble_probabilities

    z1 = torch.tensor([[2.0, -2.0]])
    z2 = torch.tensor([[0.0, 0.0]])
    mean = ensemble_probabilities([z1, z2], SoftLabelMode.SIGMOID)
    expected = (torch.sigmoid(z1.double()) + torch.sigmoid(z2.double())) / 2
    assert torch.allclose(mean, expected)


def test_ensemble_rejects_mismatched_members():
    from src.core import DimensionError, SoftLabelMode
    from src.models import build_network, ensemble_probabilities, teacher_ensemble_predict

    with pytest.raises(DimensionError):
        ensemble_probabilities([torch.zeros(1, 2), torch.zeros(1, 3)], SoftLabelMode.SIGMOID)
    with pytest.raises(DimensionError):
        teacher_ensemble_predict([build_network('tiny-b6', 2, 0), build_network('tiny-b7', 3, 0)],
                                 torch.zeros(1, 1, 32, 32))


def test_benchmark_inference_restores_mode():
    from src.models import benchmark_inference, build_network

    handle = build_network('student-3block', 2, seed=0)
    handle.module.train()
    seconds = benchmark_inference(handle, image_size=32, repeats=2)
    assert seconds > 0.0
    assert handle.module.training


@pytest.mark.slow
def test_full_scale_densenet_taps():
    from src.models import build_network, forward_with_taps

    handle = build_network('densenet121', 5, seed=0)
    handle.module.eval()
    with torch.no_grad():
        pred, taps = forward_with_taps(handle, torch.randn(1, 1, 64, 64))
    assert pred.logits.shape == (1, 5)
    assert list(taps) == ['features.denseblock2', 'features.denseblock3', 'features.denseblock4']
