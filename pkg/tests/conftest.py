"""
测试公共夹具
"""

import os
from pathlib import Path

import numpy as np
import pytest

from hierarchical_cxr.core.dataset import ImageRecord
from hierarchical_cxr.core.taxonomy import parse_taxonomy

TAXONOMY_DIR = Path(__file__).resolve().parent.parent / "config" / "taxonomy"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 较慢的端到端合成实验，需设置 HCXR_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("HCXR_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="设置 HCXR_RUN_SLOW=1 运行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def covid_taxonomy():
    return parse_taxonomy(TAXONOMY_DIR / "covid_subtree.json")


@pytest.fixture(scope="session")
def toy_taxonomy():
    return parse_taxonomy(TAXONOMY_DIR / "toy.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_record(image_id, patient_id, labels=(), split=None, path="img.png"):
    return ImageRecord(
        image_id=image_id,
        patient_id=patient_id,
        path=Path(path),
        labels=frozenset(labels),
        split=split,
    )


def minimal_document(**extra):
    document = {
        "trees": {
            "findings": {"id": "findings-root", "name": "findings"},
            "diagnoses": {"id": "differential-diagnosis-root", "name": "differential diagnosis"},
            "localizations": {"id": "localizations-root", "name": "localization"},
        }
    }
    document.update(extra)
    return document
