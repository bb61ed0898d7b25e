import numpy as np
import pytest
from fastapi.testclient import TestClient

from layerstack.harness.checkpoint import Checkpoint
from layerstack.schedule import build_schedule
from layerstack.service import (
    Engine,
    LayerSetPayload,
    create_app,
    mask_to_png,
    png_to_mask,
)
from layerstack.synthdata import generate_dataset, read_dataset, write_dataset
from layerstack.textcond import Vocabulary

from _oracles import random_model, tiny_config

RES = 16


@pytest.fixture(scope="module")
def client():
    ck = Checkpoint(random_model(5, tiny_config(resolution=RES)), build_schedule(), Vocabulary.default(), {"step": 12})
    return TestClient(create_app(Engine(ck)))


@pytest.fixture(scope="module")
def source(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    write_dataset(generate_dataset(2, seed=1, layer_mix=(0, 1, 0), resolution=RES), root)
    return next(read_dataset(root))[0]


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "resolution": RES, "max_layers": 4, "step": 12}


def test_dataset_layer_set_survives_the_wire(source):
    back = LayerSetPayload.model_validate_json(LayerSetPayload.from_layer_set(source).model_dump_json()).to_layer_set()
    assert np.array_equal(back.images(), source.images())
    assert np.array_equal(back.masks(), source.masks())
    assert back.layer_prompts == source.layer_prompts


def test_mask_png_rejects_grey():
    grid = np.zeros((4, 4), np.float32)
    grid[1, 1] = 1
    assert np.array_equal(png_to_mask(mask_to_png(grid)).grid, grid)
    with pytest.raises(ValueError):
        png_to_mask("not base64!")


def test_sample_endpoint(client):
    body = {"global_prompt": "a red circle", "layer_prompts": ["the background", "a red circle"], "num_samples": 2,
            "guidance": {"steps": 3, "seed": 4}}
    r = client.post("/sample", json=body)
    assert r.status_code == 200
    out = r.json()
    assert len(out["layer_sets"]) == 2 and out["steps_run"] == 3
    assert out["forward_passes"] == 3 * 3  # cfg pass pair plus the self-mask pass
    ls = LayerSetPayload.model_validate(out["layer_sets"][0]).to_layer_set()
    assert ls.shape == (RES, RES) and ls.num_layers == 2
    again = client.post("/sample", json=body).json()
    assert again == out


@pytest.mark.parametrize(
    "body",
    [
        {"global_prompt": "g", "layer_prompts": ["the background"]},
        {"global_prompt": "g", "layer_prompts": ["the background", "a"], "num_samples": 0},
        {"global_prompt": "g", "layer_prompts": ["the background", "a"], "guidance": {"steps": 0}},
        {"global_prompt": "g", "layer_prompts": ["the background"] + ["x"] * 4},
        {"global_prompt": "g", "layer_prompts": ["sky", "a"]},
    ],
)
def test_sample_rejects_bad_bodies(client, body):
    assert client.post("/sample", json=body).status_code == 422


def test_inpaint_and_style_endpoints(client, source):
    payload = LayerSetPayload.from_layer_set(source).model_dump()
    g = {"steps": 4, "cfg_scale": 1.0, "smg_scale": 0.0}
    r = client.post("/inpaint", json={"source": payload, "targets": [2], "prompts": ["a blue star"], "guidance": g})
    assert r.status_code == 200
    ls = LayerSetPayload.model_validate(r.json()["layer_sets"][0]).to_layer_set()
    assert np.array_equal(ls.background_image, source.background_image)
    assert ls.layer_prompts[2] == "a blue star"

    r = client.post("/style", json={"source": payload, "targets": [1], "style": "neon", "strength": 0.5, "guidance": g})
    assert r.status_code == 200 and r.json()["steps_run"] == 2

    r = client.post("/inpaint", json={"source": payload, "targets": [2], "prompts": ["a", "b"], "guidance": g})
    assert r.status_code == 422
    r = client.post("/inpaint", json={"source": payload, "targets": [0], "prompts": ["a"], "guidance": g})
    assert r.status_code == 422
    r = client.post("/inpaint", json={"source": payload, "targets": [0], "prompts": ["the background"], "guidance": g})
    assert r.status_code == 200


def test_wrong_resolution_is_rejected(client):
    _, small, _ = next(generate_dataset(1, seed=0, layer_mix=(1, 0, 0), resolution=8))
    payload = LayerSetPayload.from_layer_set(small).model_dump()
    r = client.post("/style", json={"source": payload, "targets": [1], "style": "x", "guidance": {"steps": 2}})
    assert r.status_code == 422 and "expects" in r.json()["detail"]


def test_priors_and_iterate(client, source):
    grid = np.zeros((RES, RES), np.float32)
    grid[2:9, 3:10] = 1
    g = {"steps": 2}
    r = client.post("/priors", json={"global_prompt": "g", "layer_prompts": ["the background", "a red square"],
                                     "mask_priors": [mask_to_png(grid)], "guidance": g})
    assert r.status_code == 200
    r = client.post("/priors", json={"global_prompt": "g", "layer_prompts": ["the background", "a red square"],
                                     "mask_priors": [mask_to_png(np.zeros((4, 4)))], "guidance": g})
    assert r.status_code == 422

    _, base, _ = next(generate_dataset(1, seed=2, layer_mix=(1, 0, 0), resolution=RES))
    body = {"base": LayerSetPayload.from_layer_set(base).model_dump(), "additions": [{"prompt": "a green star"}], "guidance": g}
    r = client.post("/iterate", json=body)
    assert r.status_code == 200
    out = r.json()
    assert out["steps_run"] == 2 and out["forward_passes"] == 6
    assert LayerSetPayload.model_validate(out["layer_sets"][0]).to_layer_set().num_layers == 3
