"""Desk-scale corpus management: scenario + seed + expected digests.

The corpus is a recipe, not a blob: a manifest pins a scenario file, its
seed and the sha256 of every generated output, and regeneration must
reproduce the digests exactly. A manifest line is ``key = value``; digest
keys look like ``digest.telemetry``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .synth import FleetScenario, write_fleet


@dataclass
class CorpusManifest:
    scenario_path: Path
    seed: int
    digests: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        scenario = None
        seed = None
        digests = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = (x.strip() for x in line.split("=", 1))
            if key == "scenario":
                scenario = (path.parent / val).resolve()
            elif key == "seed":
                seed = int(val)
            elif key.startswith("digest."):
                digests[key.split(".", 1)[1]] = val
            else:
                raise ConfigError(f"{path}:{lineno}: unknown manifest key {key!r}")
        if scenario is None or seed is None:
            raise ConfigError(f"{path}: manifest needs scenario and seed")
        return cls(scenario_path=scenario, seed=seed, digests=digests)

    def dump(self, path: str | Path, scenario_rel: str) -> None:
        lines = [f"scenario = {scenario_rel}", f"seed = {self.seed}"]
        lines += [f"digest.{k} = {v}" for k, v in sorted(self.digests.items())]
        Path(path).write_text("\n".join(lines) + "\n")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def regenerate_corpus(manifest_path: str | Path, outdir: str | Path) -> dict:
    """Regenerate from the manifest and compare digests.

    Returns {"ok": bool, "mismatches": {name: {expected, actual}}, "files": ...}.
    A digest mismatch is reported per file, never silently accepted.
    """
    manifest = CorpusManifest.load(manifest_path)
    scenario = FleetScenario.from_json(manifest.scenario_path.read_text())
    if scenario.seed != manifest.seed:
        raise ConfigError(
            f"manifest seed {manifest.seed} != scenario seed {scenario.seed}"
        )
    paths = write_fleet(scenario, outdir)
    actual = {name: file_digest(p) for name, p in paths.items() if name != "scenario"}
    mismatches = {}
    for name, expected in manifest.digests.items():
        got = actual.get(name)
        if got != expected:
            mismatches[name] = {"expected": expected, "actual": got}
    return {"ok": not mismatches, "mismatches": mismatches,
            "files": paths, "digests": actual}


def build_manifest(scenario_path: str | Path, manifest_path: str | Path,
                   workdir: str | Path) -> CorpusManifest:
    """Generate once and freeze the digests into a new manifest."""
    scenario_path = Path(scenario_path)
    scenario = FleetScenario.from_json(scenario_path.read_text())
    paths = write_fleet(scenario, workdir)
    digests = {name: file_digest(p) for name, p in paths.items() if name != "scenario"}
    manifest = CorpusManifest(
        scenario_path=scenario_path.resolve(), seed=scenario.seed, digests=digests
    )
    rel = scenario_path.name if Path(manifest_path).parent == scenario_path.parent \
        else str(scenario_path)
    manifest.dump(manifest_path, rel)
    return manifest
