import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dancelab.data import DatasetSpec, _rest_pose, held_out_tracks
from dancelab.model import ModelConfig, SamplerSettings, build_model
from dancelab.numerics import make_rng
from dancelab.probe import (
    AdaptabilityReport,
    ProbeError,
    default_eval_set,
    default_k,
    mean_sq_jerk,
    pose_validity,
    probe_layers,
    select_layers,
    smoothness,
)

CFG = ModelConfig(layers=4, d_model=16, heads=2)
FAST = SamplerSettings(steps=4)


@pytest.fixture(scope="module")
def model():
    return build_model(CFG, make_rng(0))


@pytest.fixture(scope="module")
def eval_set():
    return default_eval_set(held_out_tracks(DatasetSpec(), 3, 0))


def test_default_k_is_a_third():
    assert default_k(48) == 16
    assert default_k(8) == 3
    assert default_k(3) == 1


def test_probe_is_seed_deterministic(model, eval_set):
    a = probe_layers(model, eval_set, 3, seed=5, settings=FAST, final_loss=1.0)
    b = probe_layers(model, eval_set, 3, seed=5, settings=FAST, final_loss=1.0)
    assert a.scores == b.scores and a.to_csv() == b.to_csv()
    assert len(a.scores) == CFG.layers
    assert a.k == 1 and len(a.selected) == 1
    assert not a.warnings


def test_probe_warns_on_untrained_base(model, eval_set):
    r = probe_layers(model, eval_set, 2, seed=0, settings=FAST)
    assert r.warnings and "untrained" in r.warnings[0]
    assert probe_layers(model, eval_set, 2, seed=0, settings=FAST, final_loss=50.0).warnings


def test_probe_rejects_empty_inputs(model, eval_set):
    with pytest.raises(ProbeError):
        probe_layers(model, eval_set, 0, seed=0)
    with pytest.raises(ProbeError):
        probe_layers(model, [], 2, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_ranking_is_a_permutation_and_topk_nests(scores):
    r = AdaptabilityReport(scores, scores, scores, 0)
    assert sorted(r.ranking) == list(range(len(scores)))
    prev = set()
    for k in range(len(scores) + 1):
        cur = set(select_layers(r, k))
        assert len(cur) == k and prev <= cur
        prev = cur


def test_ties_go_to_lower_index():
    assert select_layers([3, 1, 3], 1) == (0,)
    assert select_layers([3, 1, 3], 2) == (0, 2)
    assert select_layers([0.5, 0.5, 0.5, 0.9], 2) == (0, 3)


def test_select_layers_bounds():
    with pytest.raises(ProbeError):
        select_layers([1.0, 2.0], 3)
    with pytest.raises(ProbeError):
        select_layers([1.0, 2.0], -1)
    with pytest.raises(ProbeError):
        AdaptabilityReport([float("nan")], [0.0], [0.0], 0)


def test_report_csv():
    r = AdaptabilityReport([0.2, 0.9, 0.5], [1, 1, 1], [0.1, 0.8, 0.4], 1)
    rows = r.to_csv().splitlines()
    assert rows[0] == "layer,score,rank,selected"
    assert rows[2].split(",")[2:] == ["0", "1"]
    assert r.series_csv().splitlines()[0] == "layer,score,validity,smoothness"


def test_rest_pose_is_fully_valid():
    poses = np.broadcast_to(_rest_pose(8), (10, 8, 2))
    assert pose_validity(poses) == 1.0
    assert pose_validity(poses * 3.0) < 0.5
    assert mean_sq_jerk(poses) == 0.0


def test_smoothness_ordering():
    rng = make_rng(1)
    calm = np.cumsum(0.01 * rng.standard_normal((32, 8, 2)), axis=0)
    rough = 0.2 * rng.standard_normal((32, 8, 2))
    ref = mean_sq_jerk(calm)
    assert smoothness(calm, ref) == pytest.approx(0.5)
    assert smoothness(rough, ref) < 0.1
    assert smoothness(calm[:2], 0.0) == 1.0
