import numpy as np
import pytest
import torch

from atklab.datagen import CLASSES, ToySpec, generate, generate_set, stack
from atklab.diffmath import ContractError


def test_same_seed_is_bit_identical():
    a, la = stack(generate_set(30, seed=3))
    b, lb = stack(generate_set(30, seed=3))
    assert torch.equal(a, b) and torch.equal(la, lb)
    c, _ = stack(generate_set(30, seed=4))
    assert not torch.equal(a, c)


def test_values_shapes_and_count():
    xs, ys = stack(generate_set(12, seed=0, size=24))
    assert xs.shape == (12, 3, 24, 24) and xs.dtype == torch.float32
    assert xs.min() >= 0 and xs.max() <= 1
    assert set(ys.tolist()) <= set(range(len(CLASSES)))


def test_class_balance_2048():
    _, ys = stack(generate_set(2048, seed=0, size=8))
    frac = np.bincount(ys.numpy(), minlength=3) / 2048
    assert np.all(np.abs(frac - 1 / 3) <= 0.02)


def test_dataset_has_variance_in_every_channel():
    xs, _ = stack(generate_set(64, seed=1))
    assert (xs.var(dim=0).mean(dim=(1, 2)) > 1e-3).all()


def test_generate_is_pure_and_antialiased():
    spec = ToySpec(shape="circle", center=(16.0, 16.0), scale=9.3)
    a, b = generate(spec), generate(spec)
    assert torch.equal(a, b)
    red = a[0]
    edge = ((red > 0) & (red < 1)).sum().item()
    assert edge > 0  # partial coverage along the boundary
    area = red.sum().item()
    assert area == pytest.approx(np.pi * 9.3 ** 2, rel=0.02)


def test_spec_validation():
    with pytest.raises(ContractError):
        generate(ToySpec(shape="hexagon"))
    with pytest.raises(ContractError):
        generate(ToySpec(center=(2.0, 16.0), scale=8.0))
    with pytest.raises(ContractError):
        generate(ToySpec(fill=(1.2, 0.0, 0.0)))
    with pytest.raises(ContractError):
        generate_set(0, seed=0)


def test_random_specs_lie_inside_canvas():
    from atklab.datagen import random_spec
    from atklab.diffmath import Rng

    for i in range(200):
        spec = random_spec(Rng(5).child(i), i % 3, size=32)
        spec.validate()
        cx, cy = spec.center
        assert min(cx, cy) - spec.scale >= 0 and max(cx, cy) + spec.scale <= 32
        # nothing is clipped: the rasterized circle keeps its full area
        if spec.shape == "circle":
            cover = generate(spec)
            diff = (cover - torch.tensor(spec.background, dtype=torch.float32)[:, None, None]).abs().sum(0)
            gap = np.abs(np.array(spec.fill) - np.array(spec.background)).sum()
            assert diff.sum().item() / gap == pytest.approx(np.pi * spec.scale ** 2, rel=0.03)
