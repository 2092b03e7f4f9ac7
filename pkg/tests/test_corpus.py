import json

import pytest

from battaudit.corpus import CorpusManifest, build_manifest, regenerate_corpus
from battaudit.errors import ConfigError
from battaudit.synth import FleetScenario, PlatformTemplate


def desk_scenario(seed=101):
    return FleetScenario(
        seed=seed, duration_days=2,
        platforms=[PlatformTemplate(name="EGMP", n_vehicles=3)],
    )


def test_build_then_regenerate_matches(tmp_path):
    scen = tmp_path / "desk.json"
    scen.write_text(desk_scenario().to_json())
    manifest_path = tmp_path / "manifest.txt"
    build_manifest(scen, manifest_path, tmp_path / "work")
    out = regenerate_corpus(manifest_path, tmp_path / "regen")
    assert out["ok"]
    assert out["mismatches"] == {}


def test_edited_scenario_reports_mismatch(tmp_path):
    scen = tmp_path / "desk.json"
    scen.write_text(desk_scenario().to_json())
    manifest_path = tmp_path / "manifest.txt"
    build_manifest(scen, manifest_path, tmp_path / "work")
    # edit the scenario without updating digests
    edited = desk_scenario()
    edited.duration_days = 3
    scen.write_text(edited.to_json())
    out = regenerate_corpus(manifest_path, tmp_path / "regen")
    assert not out["ok"]
    assert "telemetry" in out["mismatches"]


def test_seed_change_flips_all_digests(tmp_path):
    scen = tmp_path / "desk.json"
    scen.write_text(desk_scenario(seed=101).to_json())
    manifest_path = tmp_path / "manifest.txt"
    m1 = build_manifest(scen, manifest_path, tmp_path / "w1")
    scen2 = tmp_path / "desk2.json"
    scen2.write_text(desk_scenario(seed=102).to_json())
    m2 = build_manifest(scen2, tmp_path / "manifest2.txt", tmp_path / "w2")
    for k in m1.digests:
        assert m1.digests[k] != m2.digests[k]


def test_manifest_seed_mismatch_rejected(tmp_path):
    scen = tmp_path / "desk.json"
    scen.write_text(desk_scenario(seed=101).to_json())
    manifest_path = tmp_path / "manifest.txt"
    manifest_path.write_text(f"scenario = desk.json\nseed = 999\n")
    with pytest.raises(ConfigError):
        regenerate_corpus(manifest_path, tmp_path / "regen")


def test_manifest_parse_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("scenario desk.json\n")
    with pytest.raises(ConfigError):
        CorpusManifest.load(p)
    p.write_text("mystery = 3\nscenario = s.json\nseed = 1\n")
    with pytest.raises(ConfigError):
        CorpusManifest.load(p)


def test_checked_in_corpus_regenerates(tmp_path):
    # fresh checkout: regenerating the desk corpus reproduces its digests
    from pathlib import Path

    manifest = Path(__file__).resolve().parent.parent / "corpus" / "manifest.txt"
    out = regenerate_corpus(manifest, tmp_path / "regen")
    assert out["ok"], out["mismatches"]
