import numpy as np
import pytest
import torch

from gendistill.core import DistilledDataset, ImageBatch, LabelRegistry, Provenance


def make_distilled(num_classes=3, ipc=2, resolution=8, channels=3, seed=0, quantize=True):
    g = torch.Generator().manual_seed(seed)
    data = torch.rand(num_classes * ipc, channels, resolution, resolution, generator=g)
    batch = ImageBatch(data)
    if quantize:
        batch = batch.quantized()
    labels = torch.arange(num_classes).repeat_interleave(ipc)
    return DistilledDataset(batch, labels, (Provenance.GENERATED,) * len(labels), ipc,
                            LabelRegistry.numbered(num_classes, "c"), metadata={"dataset": "unit"})


@pytest.fixture
def small_ds():
    return make_distilled()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
