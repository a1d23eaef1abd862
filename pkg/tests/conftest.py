import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from phantoms import make_phantom
from se3core import RigidTransform

ENV_VARS = ("SVR_POSE_W_ROT", "SVR_POSE_W_TRANS", "SVR_POSE_THREADS", "SVR_POSE_LOG_LEVEL", "SVR_POSE_MODEL_URL")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="session")
def blobs64():
    return make_phantom("blobs", 64, 1.0, seed=0)


@pytest.fixture(scope="session")
def blobs32():
    return make_phantom("blobs", 32, 1.0, seed=0)


@pytest.fixture
def random_transforms():
    def build(n, seed=0, max_translation=50.0):
        rng = np.random.default_rng(seed)
        rotations = Rotation.from_quat(rng.normal(size=(n, 4))).as_matrix()
        translations = rng.uniform(-max_translation, max_translation, size=(n, 3))
        return [RigidTransform(r, t) for r, t in zip(rotations, translations)]

    return build
