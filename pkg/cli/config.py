import logging as log
from pathlib import Path

from platformdirs import PlatformDirs

from libhypoxia.params import (
    baseline_parameters, default_protocol, dump_parameters, load_numerics, load_parameters, load_protocol,
)


class BaseConfigManager:

    def __init__(self, dirs: PlatformDirs):
        self._dirs = dirs

    @property
    def config_root(self):
        return self._dirs.user_config_path

    def config_path(self, name):
        return self.config_root / Path(f"{name}.json")

    def load(self, name, default=None):
        path = self.config_path(name)
        if not path.exists():
            return default
        return path.read_text()

    def save(self, name, text):
        self.config_root.mkdir(exist_ok=True, parents=True)
        path = self.config_path(name)
        path.write_text(text)
        return path


class TpzConfigManager(BaseConfigManager):

    def resolve(self, explicit=None):
        """Config file in effect: the given path, else the user config file, else None (built-in defaults)"""
        if explicit:
            return Path(explicit)
        path = self.config_path("config")
        if path.exists():
            log.debug(f"Using user config {path}")
            return path
        return None

    def init(self, force=False):
        path = self.config_path("config")
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists (use --force to overwrite)")
        params = baseline_parameters()
        text = dump_parameters(params, default_protocol(params), load_numerics())
        return self.save("config", text)


class RunConfig:
    """Parameters, injection protocol and numerics read from one config file"""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.text = self.path.read_text() if self.path else ""
        self.params = load_parameters(self.text)
        self.protocol = load_protocol(self.text, self.params)
        self.numerics = load_numerics(self.text)

    def dump(self):
        return dump_parameters(self.params, self.protocol, self.numerics)


def configmgr():
    return TpzConfigManager(PlatformDirs("tpzctl"))
