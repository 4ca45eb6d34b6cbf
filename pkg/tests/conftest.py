"""Shared, session-cached fixture renders and reconstructions."""
import functools

import numpy as np
import pytest
from hypothesis import settings

from peelkit import make_scene, peel_render, reconstruct_label
from peelkit.core import LABEL_PANTS, LABEL_TORSO_SKIN, LABEL_UPPER_CLOTHES

settings.register_profile("peelkit", max_examples=40, deadline=None)
settings.load_profile("peelkit")

FIXTURE_LABELS = {
    "sphere": (LABEL_UPPER_CLOTHES,),
    "cylinder_skirt": (LABEL_PANTS,),
    "two_garment_mannequin": (LABEL_TORSO_SKIN, LABEL_UPPER_CLOTHES, LABEL_PANTS),
    "stacked_planes": (LABEL_UPPER_CLOTHES, LABEL_PANTS),
}


@functools.lru_cache(maxsize=None)
def scene(name, resolution=128, texture="checker"):
    return make_scene(name, resolution, texture)


@functools.lru_cache(maxsize=None)
def stack(name, resolution=128, texture="checker", layers=4):
    return peel_render(scene(name, resolution, texture), layers)


@functools.lru_cache(maxsize=None)
def recon(name, label, resolution=128):
    return reconstruct_label(stack(name, resolution), label)


def source_mesh(name, label):
    """Source geometry carrying ``label`` (one fixture mesh per label)."""
    for m in scene(name).meshes:
        if np.all(m.face_labels == label):
            return m
    raise KeyError(label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
