import pytest
import numpy as np
from app.adapters import AdapterConfig, AdapterParams, AttentionArtifacts, Variant, local_attention
from app.errors import NoAttentionArtifactsError
from app.layers import MLPParams
from app.synth_qa import TASKS, DataConfig, build_split
from app.tensor import Tensor
from app.trainer import PromptAwareModel
from app.heatmap import (
    FLAT_GRAY,
    export_artifacts,
    export_attention,
    read_grid_csv,
    read_pgm,
    to_gray,
    write_grid_csv,
    write_pgm,
)

DATA = DataConfig(sizes={t.value: 4 for t in TASKS}, train_fraction=0.5)


@pytest.fixture(scope="module")
def scene_qa():
    return build_split(DATA, 0).test[0]


def model_for(variant):
    cfg = AdapterConfig(variant=variant, N=9, M=8, C=8, D=6, C_i=8, E=8, C_prime=8)
    return PromptAwareModel.for_split(cfg, DATA, 1234)


def test_min_max_scaling():
    grid = np.array([[0.7, 0.1], [0.1, 0.1]])
    assert to_gray(grid).tolist() == [[255, 0], [0, 0]]


def test_constant_grid_is_flat_gray(tmp_path):
    path = write_pgm(tmp_path / "flat.pgm", np.full((3, 3), 1 / 9))
    pixels = read_pgm(path)
    assert pixels.shape == (3, 3)
    assert (pixels == FLAT_GRAY).all()


def test_pgm_layout(tmp_path):
    path = write_pgm(tmp_path / "a.pgm", np.array([[0.7, 0.1, 0.1], [0.1, 0.1, 0.4]]))
    lines = path.read_text().splitlines()
    assert lines[:3] == ["P2", "3 2", "255"]
    assert read_pgm(path).tolist() == [[255, 0, 0], [0, 0, 128]]


def test_grid_csv_round_trip(tmp_path):
    grid = np.random.default_rng(0).dirichlet(np.ones(9)).reshape(3, 3)
    path = write_grid_csv(tmp_path / "g.csv", grid, header=["a", "b", "c"])
    back = read_grid_csv(path, has_header=True)
    assert abs(back.sum() - 1.0) <= 1e-6
    assert np.array_equal(back, grid)
    assert path.read_text().splitlines()[0] == "a,b,c"


def test_dominant_patch_takes_the_local_mass(tmp_path):
    def one():
        return Tensor([[1.0]], requires_grad=True)

    identity = MLPParams([(one(), Tensor([[0.0]], requires_grad=True))])
    params = AdapterParams(w_i=one(), w_y=one(), local_mlp=identity)
    X = Tensor([[20.0], [0.0], [0.0], [0.0]])
    _, artifacts = local_attention(X, Tensor([[1.0]]), params)

    written = export_artifacts(artifacts, 2, 2, tmp_path)
    grid = read_grid_csv(written["local_csv"])
    assert grid[0, 0] > 0.99
    assert read_pgm(written["local_pgm"]).tolist() == [[255, 0], [0, 0]]
    assert set(written) == {"local_csv", "local_pgm", "similarity_csv"}


def test_export_without_artifacts_is_refused(tmp_path):
    with pytest.raises(NoAttentionArtifactsError):
        export_artifacts(AttentionArtifacts(), 3, 3, tmp_path)


@pytest.mark.parametrize("variant", [Variant.linear, Variant.cross_attention])
def test_baselines_have_no_attention_to_export(variant, scene_qa, tmp_path):
    with pytest.raises(NoAttentionArtifactsError, match="no attention artifacts"):
        export_attention(model_for(variant), scene_qa, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_export_fused_model(scene_qa, tmp_path):
    written = export_attention(model_for(Variant.global_plus_local), scene_qa, tmp_path / "attn")
    assert set(written) == {"local_csv", "local_pgm", "global_csv", "global_pgm", "similarity_csv"}

    local = read_grid_csv(written["local_csv"])
    assert local.shape == (3, 3)
    assert abs(local.sum() - 1.0) <= 1e-6

    similarity = written["similarity_csv"].read_text().splitlines()
    assert similarity[0].split(",") == list(scene_qa.question)
    assert len(similarity) == 1 + 9


@pytest.mark.parametrize(
    "variant, expected",
    [
        (Variant.local_only, {"local_csv", "local_pgm", "similarity_csv"}),
        (Variant.global_only, {"global_csv", "global_pgm"}),
    ],
)
def test_export_single_path_models(variant, expected, scene_qa, tmp_path):
    assert set(export_attention(model_for(variant), scene_qa, tmp_path)) == expected


def test_export_from_checkpoint(scene_qa, tmp_path):
    from app.checkpoint import save_checkpoint

    model = model_for(Variant.local_only)
    path = save_checkpoint(tmp_path / "model.npz", model.config_dict(), model.state_dict())
    written = export_attention(path, scene_qa, tmp_path / "out")
    direct = export_attention(model, scene_qa, tmp_path / "direct")
    assert written["local_csv"].read_text() == direct["local_csv"].read_text()
