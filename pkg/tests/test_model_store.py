import math

import numpy as np
import pytest

import create_tables
from database import get_db, model_store_url
from models import list_model_names
from pipeline_utils import PipelineError
from predictor import DictionaryPredictor, build_dictionary, load_dictionary, save_dictionary
from sampler import SamplingConfig
from volume import extract_slice


@pytest.fixture(scope="module")
def small_model(blobs32):
    cfg = SamplingConfig(scheme="fibonacci", n_normals=12, n_inplane=2, tz_min=-4.0, tz_max=4.0, tz_step=4.0)
    return build_dictionary(blobs32, cfg, descriptor_size=16)


def test_model_store_url(monkeypatch):
    assert model_store_url("models/dict.db") == "sqlite:///models/dict.db"
    assert model_store_url("postgresql://host/db") == "postgresql://host/db"
    assert model_store_url(None) == "sqlite:///dictionary.db"
    monkeypatch.setenv("SVR_POSE_MODEL_URL", "sqlite:///elsewhere.db")
    assert model_store_url(None) == "sqlite:///elsewhere.db"


def test_save_and_load_is_bit_exact(tmp_path, small_model):
    path = str(tmp_path / "dict.db")
    save_dictionary(small_model, path)
    loaded = load_dictionary(path)

    assert len(loaded) == len(small_model)
    assert loaded.descriptors.tobytes() == small_model.descriptors.tobytes()
    for a, b in zip(loaded.transforms, small_model.transforms):
        assert a.as_matrix().tobytes() == b.as_matrix().tobytes()
    assert loaded.slice_ids == small_model.slice_ids
    assert loaded.descriptor_size == 16
    assert loaded.similarity == "cc"
    assert loaded.anchor_scale == small_model.anchor_scale
    assert loaded.config == small_model.config
    assert loaded.config["angle_step"] == pytest.approx(math.radians(18.0))


def test_saving_twice_replaces_the_model(tmp_path, small_model):
    path = str(tmp_path / "dict.db")
    save_dictionary(small_model, path)
    save_dictionary(small_model, path)
    save_dictionary(small_model, path, name="copy")
    with get_db(model_store_url(path)) as db:
        assert list_model_names(db) == ["default", "copy"]
    assert len(load_dictionary(path, "copy")) == len(small_model)


def test_missing_model_is_reported(tmp_path, small_model):
    empty = str(tmp_path / "empty.db")
    with pytest.raises(PipelineError) as err:
        load_dictionary(empty)
    assert err.value.code == "model_store"

    path = str(tmp_path / "dict.db")
    save_dictionary(small_model, path)
    with pytest.raises(PipelineError) as err:
        load_dictionary(path, "absent")
    assert err.value.code == "model_store"


def test_create_tables_initializes_an_empty_store(tmp_path, capsys):
    path = str(tmp_path / "store.db")
    assert create_tables.main([path]) == 0
    assert "created successfully" in capsys.readouterr().out
    with get_db(model_store_url(path)) as db:
        assert list_model_names(db) == []


def test_loaded_model_predicts_like_the_original(tmp_path, small_model, blobs32):
    path = str(tmp_path / "dict.db")
    save_dictionary(small_model, path)
    loaded = DictionaryPredictor(load_dictionary(path))
    original = DictionaryPredictor(small_model)
    for t in small_model.transforms[::5]:
        image = extract_slice(blobs32, t, small_model.slice_size, small_model.slice_spacing)
        np.testing.assert_array_equal(loaded.similarities(image), original.similarities(image))
