import math
import random
from pathlib import Path
from typing import Optional

import pytest

from povmap.iwi import (
    INDICATORS,
    HouseholdRecord,
    IwiError,
    IwiWeights,
    UnscoreableRecordError,
    cluster_iwi,
    compute_iwi,
    load_weights,
    read_households,
)


def _flat_weights(constant: float = 20.0, tv: float = 10.0) -> IwiWeights:
    table = {name: {"0": 0.0, "1": 0.0} for name in INDICATORS}
    table["tv"] = {"0": 0.0, "1": tv}
    return IwiWeights(version="test", constant=constant, table=table)


def _household(
    hid: str, cluster: str = "c1", **indicators: Optional[str]
) -> HouseholdRecord:
    values: dict[str, Optional[str]] = {name: "0" for name in INDICATORS}
    values.update(indicators)
    return HouseholdRecord(household_id=hid, cluster_id=cluster, indicators=values)


def _spreadsheet(weights_file: Path, bundle: dict[str, Optional[str]]) -> float:
    # plain re-reading of the key/value file, independent of the loader
    entries: dict[str, str] = {}
    for line in weights_file.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    total = float(entries["constant"])
    for name in INDICATORS:
        category = bundle[name]
        if category is None:
            category = next(k for k in entries if k.startswith(f"{name}.")).split(".", 1)[1]
        total += float(entries[f"{name}.{category}"])
    return min(100.0, max(0.0, total))


def test_linear_form_with_test_weights() -> None:
    w = _flat_weights()
    assert compute_iwi(_household("h1", tv="1"), w).score == 30.0
    assert compute_iwi(_household("h2"), w).score == 20.0


def test_scores_are_clamped() -> None:
    assert compute_iwi(_household("h1", tv="1"), _flat_weights(constant=95.0)).score == 100.0
    assert compute_iwi(_household("h1"), _flat_weights(constant=-5.0)).score == 0.0


def test_reference_weights_match_spreadsheet_evaluation() -> None:
    w = load_weights()
    weights_file = Path(__file__).parents[1] / "src" / "povmap" / "data" / "iwi_weights.txt"
    rng = random.Random(7)
    for i in range(1000):
        bundle: dict[str, Optional[str]] = {
            name: rng.choice(w.categories(name)) for name in INDICATORS
        }
        for name in rng.sample(INDICATORS, rng.randint(0, 3)):
            bundle[name] = None
        score = compute_iwi(HouseholdRecord(f"h{i}", "c", bundle), w)
        assert score.score == pytest.approx(_spreadsheet(weights_file, bundle), abs=1e-9)
        assert score.flagged == any(v is None for v in bundle.values())


def test_missing_indicators_take_lowest_weight_and_flag() -> None:
    w = load_weights()
    full = _household("h1", water="low", rooms="one", floor="low", toilet="low")
    partial = _household("h2", water=None, rooms=None, floor="low", toilet="low")
    scored = compute_iwi(partial, w)
    assert scored.imputed == ("water", "rooms")
    assert scored.score == compute_iwi(full, w).score


def test_four_missing_indicators_are_unscoreable() -> None:
    h = _household("h9", tv=None, fridge=None, phone=None, bike=None)
    with pytest.raises(UnscoreableRecordError, match="h9"):
        compute_iwi(h, _flat_weights())


def test_unknown_category_is_rejected() -> None:
    with pytest.raises(IwiError, match="not valid"):
        compute_iwi(_household("h1", tv="maybe"), _flat_weights())


def test_positive_weight_never_lowers_score() -> None:
    w = load_weights()
    housing = {"water": "low", "rooms": "one", "floor": "low", "toilet": "low"}
    for name in ("tv", "fridge", "phone", "bike", "car", "electricity"):
        without = compute_iwi(_household("a", **housing), w)
        with_asset = compute_iwi(_household("b", **housing, **{name: "1"}), w)
        assert with_asset.score >= without.score


def test_cluster_means_and_order_independence() -> None:
    w = _flat_weights()
    records = [
        _household("h1", "c1"),
        _household("h2", "c1", tv="1"),
        _household("h3", "c2", tv="1"),
        _household("h4", "c2", tv=None, fridge=None, phone=None, bike=None),
        _household("h5", "c3", tv=None, fridge=None, phone=None, car=None),
    ]
    result = cluster_iwi(records, w)
    assert result.means == {"c1": 25.0, "c2": 30.0}
    assert result.household_counts == {"c1": 2, "c2": 1}
    assert result.unscoreable == {"c2": ("h4",), "c3": ("h5",)}
    assert result.empty_clusters == ("c3",)

    shuffled = list(reversed(records))
    assert cluster_iwi(shuffled, w).means == result.means


def test_cluster_iwi_rejects_empty_input() -> None:
    with pytest.raises(IwiError):
        cluster_iwi([], _flat_weights())


def test_load_weights_errors(tmp_path: Path) -> None:
    missing_version = tmp_path / "a.txt"
    missing_version.write_text("constant=1\n")
    with pytest.raises(IwiError, match="version"):
        load_weights(missing_version)

    incomplete = tmp_path / "b.txt"
    incomplete.write_text("version=x\nconstant=1\ntv.0=0\n")
    with pytest.raises(IwiError, match="lack indicators"):
        load_weights(incomplete)

    with pytest.raises(IwiError, match="not found"):
        load_weights(tmp_path / "absent.txt")


def test_load_weights_reference_file() -> None:
    w = load_weights()
    assert w.version == "iwi-2015-no-utensils"
    assert w.lowest("water") == "low"
    assert math.isclose(w.constant, 25.00447)


def test_read_households_treats_empty_cell_as_missing(tmp_path: Path) -> None:
    path = tmp_path / "households.csv"
    header = ",".join(("household_id", "cluster_id", *INDICATORS))
    row = ",".join(("h1", "c1", "", *(["0"] * (len(INDICATORS) - 1))))
    path.write_text(f"{header}\n{row}\n")
    (record,) = read_households(path)
    assert record.indicators["tv"] is None
    assert record.missing() == ("tv",)


def test_read_households_requires_columns(tmp_path: Path) -> None:
    path = tmp_path / "households.csv"
    path.write_text("household_id,cluster_id,tv\nh1,c1,1\n")
    with pytest.raises(IwiError, match="missing columns"):
        read_households(path)
