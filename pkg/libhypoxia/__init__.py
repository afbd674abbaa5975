"""
Simulation library for hypoxia-activated prodrug transport.

Variables:
- ROOT_DIR: Path of the repository checkout (parent of this package).
- DATA_DIR: Path of the files shipped with the package (defaults, default
  network, golden bounds).
"""
from pathlib import Path

ROOT_DIR = Path(__file__).parent.parent
DATA_DIR = Path(__file__).parent / "data"
