import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from acdis import training as T
from acdis.errors import ConfigError, ShapeError
from acdis.evaluation import (
    REGIONS,
    DiceTable,
    dice,
    evaluate_all_masks,
    region_dice,
    render_report,
    row_mean,
    to_regions,
)
from acdis.network import ACDIS, ModelConfig
from acdis.volume_data import ModalityMask, PhantomSpec, enumerate_masks, generate_phantom


# ---------------------------------------------------------------- regions / dice


def test_region_membership():
    lab = np.array([0, 1, 2, 3])
    r = to_regions(lab)
    assert r.wt.tolist() == [False, True, True, True]
    assert r.tc.tolist() == [False, True, False, True]
    assert r.et.tolist() == [False, False, False, True]
    with pytest.raises(ValueError):
        to_regions(np.array([0, 4]))


def test_dice_examples():
    assert dice([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
    assert dice([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0
    assert dice([1, 1, 1, 0], [1, 1, 0, 0]) == 0.8
    assert dice([1, 1, 0, 0, 0, 0], [1, 0, 1, 1, 0, 0]) == pytest.approx(0.4, abs=1e-15)
    assert dice(np.zeros(5), np.zeros(5)) == 1.0
    assert dice([1, 0], [0, 0]) == 0.0
    with pytest.raises(ShapeError):
        dice(np.zeros(3), np.zeros(4))


def test_dice_hand_value():
    # prediction of 2 voxels inside a 4-voxel target: 2 * 2 / (2 + 4)
    pred = np.zeros((2, 2, 2), bool)
    gt = np.zeros((2, 2, 2), bool)
    pred[0, 0, :] = True
    gt[0, :, :] = True
    assert dice(pred, gt) == 0.6666666666666666


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), p=st.floats(0.0, 1.0), q=st.floats(0.0, 1.0))
def test_dice_matches_set_oracle_and_is_symmetric(seed, p, q):
    rng = np.random.default_rng(seed)
    a = rng.random((4, 5, 3)) < p
    b = rng.random((4, 5, 3)) < q
    d = dice(a, b)
    assert d == oracles.dice_by_sets(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_region_dice_perfect_and_nested():
    lab = generate_phantom(PhantomSpec(size=16, num_lesions=2, seed=2)).label
    assert region_dice(lab, lab) == {"WT": 1.0, "TC": 1.0, "ET": 1.0}
    pred = np.where(lab == 3, 1, lab)  # enhancing relabelled as core
    scores = region_dice(pred, lab)
    assert scores["WT"] == 1.0 and scores["TC"] == 1.0 and scores["ET"] == 0.0


# ---------------------------------------------------------------- table


def _table(seed=0):
    rng = np.random.default_rng(seed)
    masks = enumerate_masks()
    return DiceTable(masks, {r: rng.random(15).tolist() for r in REGIONS})


def test_table_average_is_row_mean():
    t = _table()
    for r in REGIONS:
        assert t.avg[r] == row_mean(t.cells[r])
        assert abs(t.avg[r] - float(np.mean(t.cells[r]))) < 1e-12
    with pytest.raises(ShapeError):
        DiceTable(enumerate_masks(), {"WT": [0.1] * 15, "TC": [0.1] * 14, "ET": [0.1] * 15})


def test_csv_roundtrip_is_exact():
    t = _table(3)
    back = DiceTable.from_csv(t.to_csv())
    assert [m.bits for m in back.masks] == [m.bits for m in t.masks]
    assert back.cells == t.cells and back.avg == t.avg
    assert back.to_csv() == t.to_csv()


def test_csv_header_uses_availability_symbols():
    header = _table().to_csv().splitlines()[0].split(",")
    assert header[0] == "region" and header[-1] == "AVG"
    assert header[1] == "●○○○" and header[15] == "●●●●"
    assert len(header) == 17
    with pytest.raises(ValueError):
        DiceTable.from_csv("x,y\n")


def test_markdown_layout():
    md = _table().to_markdown().splitlines()
    assert md[2].startswith("| FLAIR |") and md[5].startswith("| T2 |")
    assert md[2].count("●") == 8  # FLAIR is present in 8 of the 15 masks
    assert [ln.split("|")[1].strip() for ln in md[-3:]] == list(REGIONS)
    assert all(ln.count("|") == 18 for ln in md[2:])


def test_json_roundtrip():
    t = _table(5)
    back = DiceTable.from_json(json.loads(json.dumps(t.to_json())))
    assert back.cells == t.cells and back.avg == t.avg


# ---------------------------------------------------------------- full evaluation


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    return ACDIS(ModelConfig(base_channels=4, encoder_depth=1))


@pytest.fixture(scope="module")
def cases():
    return [generate_phantom(PhantomSpec(size=8, num_lesions=1, seed=s)) for s in (1, 2)]


def test_untrained_model_gives_valid_table(untrained, cases):
    t = evaluate_all_masks(untrained, cases)
    assert [m.bits for m in t.masks] == [m.bits for m in enumerate_masks()]
    for r in REGIONS:
        assert len(t.cells[r]) == 15
        assert all(0.0 <= v <= 1.0 for v in t.cells[r])
        assert abs(t.avg[r] - np.mean(t.cells[r])) < 1e-12
    assert set(t.per_case) == {m.bits for m in enumerate_masks()}
    assert all(len(v) == 2 for v in t.per_case.values())


def test_evaluate_accepts_checkpoint(cases):
    cfg = T.TrainConfig.toy(epochs=0, syn_start_epoch=1, base_channels=4, encoder_depth=1, crop=8)
    ckpt = T.train(cfg, cases)
    a = evaluate_all_masks(ckpt, cases, masks=[ModalityMask.full()])
    b = evaluate_all_masks(ckpt.model(), cases, masks=[ModalityMask.full()])
    assert a.cells == b.cells and len(a.masks) == 1


def test_empty_dataset(untrained):
    with pytest.raises(ConfigError):
        evaluate_all_masks(untrained, [])


def test_predictions_give_nested_regions(untrained, cases):
    x = torch.from_numpy(cases[0].stack()[None])
    pred = untrained.predict(x, ModalityMask.from_bits("0011")).argmax(1)[0].numpy()
    r = to_regions(pred)
    assert not (r.et & ~r.tc).any() and not (r.tc & ~r.wt).any()


def test_render_report_files(tmp_path):
    t = _table(1)
    files = render_report(t, tmp_path, {"note": "x"})
    names = {p.name for p in files.values()}
    assert names == {"dice_table.csv", "dice_table.md", "report.json", "dice_WT.png", "dice_TC.png", "dice_ET.png"}
    assert (tmp_path / "dice_WT.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["run"] == {"note": "x"}
    assert DiceTable.from_json(payload["table"]).cells == t.cells
    no_plots = render_report(t, tmp_path / "np", plots=False)
    assert set(no_plots) == {"csv", "md", "json"}
