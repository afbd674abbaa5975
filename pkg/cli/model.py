from dataclasses import dataclass, field
from pathlib import Path

from libhypoxia.util import Serialize, sha256_file


@dataclass
class Artifact(Serialize):
    path: str
    sha256: str
    size: int

    @classmethod
    def of(cls, path, root):
        path = Path(path)
        return cls(path=path.relative_to(root).as_posix(), sha256=sha256_file(path), size=path.stat().st_size)


@dataclass
class RunManifest(Serialize):
    command: str
    config: str | None
    seed: int | None
    out_dir: str
    started: str
    wall_clock: float
    artifacts: list[Artifact] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["artifacts"] = [Artifact.from_dict(a) for a in data.get("artifacts", [])]
        return cls(**data)

    def artifact(self, name):
        for a in self.artifacts:
            if a.path == name:
                return a
        raise KeyError(name)

    def verify(self):
        """Names of listed artifacts that are missing or whose hash changed"""
        root = Path(self.out_dir)
        bad = []
        for a in self.artifacts:
            path = root / a.path
            if not path.exists() or sha256_file(path) != a.sha256:
                bad.append(a.path)
        return bad
