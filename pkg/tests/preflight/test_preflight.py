import hashlib
import logging
from pathlib import Path

import pytest

from povmap.errors import UsageError
from povmap.preflight import (
    PreflightCheckError,
    Stage,
    input_digests,
    run_preflight_checks,
    stage_inputs,
)
from povmap.runtime_config import CountryInputs, Manifest


def _manifest(tmp_path: Path, **countries: CountryInputs) -> Manifest:
    return Manifest(
        path=tmp_path / "manifest.json", output_dir=tmp_path / "out", countries=countries
    )


def _touch(path: Path, text: str = "x") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def test_run_preflight_success(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    inputs = CountryInputs(
        code="KE",
        list_a=_touch(tmp_path / "KE" / "list_a.csv"),
        population=_touch(tmp_path / "KE" / "pop.asc"),
        list_b=_touch(tmp_path / "KE" / "list_b.csv"),
    )
    caplog.set_level(logging.INFO)
    found = run_preflight_checks(_manifest(tmp_path, KE=inputs), Stage.places)
    assert found == {
        "countries.KE.list_a": inputs.list_a,
        "countries.KE.population": inputs.population,
        "countries.KE.list_b": inputs.list_b,
    }
    assert "Preflight for places: 3 input file(s) present" in caplog.text


def test_missing_keys_and_files_are_all_reported(tmp_path: Path) -> None:
    inputs = CountryInputs(code="KE", list_a=tmp_path / "absent.csv")
    with pytest.raises(PreflightCheckError) as excinfo:
        run_preflight_checks(_manifest(tmp_path, KE=inputs), Stage.places)
    errors = excinfo.value.errors
    assert "countries.KE.population: not set" in errors
    assert f"countries.KE.list_a: {tmp_path / 'absent.csv'} does not exist" in errors
    assert isinstance(excinfo.value, UsageError)


def test_stage_needs_countries(tmp_path: Path) -> None:
    with pytest.raises(PreflightCheckError, match="no countries configured"):
        run_preflight_checks(_manifest(tmp_path), Stage.features)
    assert run_preflight_checks(_manifest(tmp_path), Stage.synth) == {}


def test_output_dir_must_be_a_directory(tmp_path: Path) -> None:
    _touch(tmp_path / "out")
    with pytest.raises(PreflightCheckError, match="output_dir"):
        run_preflight_checks(_manifest(tmp_path), Stage.synth)


def test_iwi_stage_reads_households_and_weights(tmp_path: Path) -> None:
    inputs = CountryInputs(
        code="KE",
        households=_touch(tmp_path / "hh.csv"),
        tiles=_touch(tmp_path / "tiles.csv"),
    )
    manifest = Manifest(
        path=tmp_path / "manifest.json",
        output_dir=tmp_path / "out",
        countries={"KE": inputs},
        iwi_weights=tmp_path / "weights.txt",
    )
    assert stage_inputs(manifest, Stage.iwi) == {
        "iwi_weights": tmp_path / "weights.txt",
        "countries.KE.households": inputs.households,
    }
    with pytest.raises(PreflightCheckError, match="iwi_weights"):
        run_preflight_checks(manifest, Stage.iwi)


def test_input_digests(tmp_path: Path) -> None:
    a = _touch(tmp_path / "a.txt", "alpha")
    b = _touch(tmp_path / "b.txt", "beta")
    digests = input_digests({"z": a, "y": b})
    assert list(digests) == ["y", "z"]
    assert digests["z"] == hashlib.sha256(b"alpha").hexdigest()
    assert digests["y"] == hashlib.sha256(b"beta").hexdigest()
