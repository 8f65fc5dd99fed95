import pytest
import torch

from sslchange._utils import module_checksum
from sslchange.adapter import (AdapterBundle, AdapterTrainConfig, Generator, PatchDiscriminator,
                               freeze, load_adapter, save_adapter, train_adapter, transfer_view)
from sslchange.exceptions import ConfigurationError, ShapeError, StateError


@pytest.fixture(scope="module")
def trained():
    g = torch.Generator().manual_seed(1)
    t1 = torch.rand(4, 3, 32, 32, generator=g)
    t2 = (t1.flip(0) * 0.8 + 0.1).clamp(0, 1)
    bundle = train_adapter(t1, t2, AdapterTrainConfig(epochs=2, batch_size=2), probe=t1[:2])
    return bundle, t1


def test_generator_preserves_shape_and_range():
    g = Generator().eval()
    y = g(torch.rand(2, 3, 32, 32))
    assert y.shape == (2, 3, 32, 32) and 0 <= y.min() and y.max() <= 1
    assert PatchDiscriminator()(y).dim() == 4


def test_training_log(trained):
    bundle, _ = trained
    assert [r["epoch"] for r in bundle.log] == [1, 2]
    assert {"adversarial", "cycle", "identity", "discriminator", "probe_cycle_l1"} <= set(bundle.log[0])


def test_unfrozen_adapter_refuses_views(trained):
    bundle, t1 = trained
    fresh = AdapterBundle.build(patch_size=32)
    with pytest.raises(StateError):
        transfer_view(fresh, t1)


def test_freeze_idempotent_and_views(trained):
    bundle, t1 = trained
    freeze(bundle)
    before = module_checksum(bundle.g1)
    freeze(bundle)
    assert module_checksum(bundle.g1) == before
    assert all(not p.requires_grad for m in bundle.networks().values() for p in m.parameters())
    v = transfer_view(bundle, t1)
    assert v.shape == t1.shape and v.min() >= 0 and v.max() <= 1
    assert transfer_view(bundle, t1[0]).shape == (3, 32, 32)
    torch.testing.assert_close(transfer_view(bundle, t1), v)
    assert module_checksum(bundle.g1) == before
    with pytest.raises(ShapeError):
        transfer_view(bundle, torch.rand(1, 3, 64, 64))


def test_save_load(trained, tmp_path):
    bundle, t1 = trained
    freeze(bundle)
    save_adapter(bundle, tmp_path / "a.pt")
    loaded = load_adapter(tmp_path / "a.pt")
    assert loaded.frozen and loaded.patch_size == 32
    torch.testing.assert_close(transfer_view(loaded, t1), transfer_view(bundle, t1))


def test_training_is_seeded():
    t = torch.rand(2, 3, 32, 32)
    cfg = AdapterTrainConfig(epochs=1, batch_size=2, seed=7)
    a, b = train_adapter(t, t, cfg), train_adapter(t, t, cfg)
    assert module_checksum(a.g1) == module_checksum(b.g1)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AdapterTrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        AdapterTrainConfig(cycle_weight=-1)
    with pytest.raises(ShapeError):
        train_adapter(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 64, 64), AdapterTrainConfig(epochs=1))
