import numpy as np
import pytest
import torch

from jointseg.datasets import Subject
from jointseg.networks import ExtractorConfig
from jointseg.phantom import (
    PhantomConfig,
    generate_anatomy_phantom,
    generate_lesion_phantom,
    scaled_config,
)

TINY_EXTRACTOR = ExtractorConfig(levels=2, base_filters=4, feature_channels=4)


@pytest.fixture(scope="session")
def tiny_phantom_cfg():
    return scaled_config(PhantomConfig(grid_size=48), 24)


@pytest.fixture(scope="session")
def tiny_anatomy_subjects(tiny_phantom_cfg):
    subs = []
    for i in range(3):
        t1, y = generate_anatomy_phantom(tiny_phantom_cfg, seed=100 + i)
        subs.append(
            Subject(
                subject_id=f"ana{i}",
                provenance="lesion-free",
                split="train",
                t1=t1.data,
                anatomy=y.data,
            )
        )
    return subs


@pytest.fixture(scope="session")
def tiny_lesion_subjects(tiny_phantom_cfg):
    subs = []
    for i in range(3):
        t1, flair, mask, full = generate_lesion_phantom(tiny_phantom_cfg, seed=200 + i)
        subs.append(
            Subject(
                subject_id=f"les{i}",
                provenance="lesioned",
                split="train",
                t1=t1.data,
                flair=flair.data,
                lesion=mask.data,
                full_gt=full.data,
            )
        )
    return subs


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[ACCEPTANCE] {name}: {report.outcome.upper()}")


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
