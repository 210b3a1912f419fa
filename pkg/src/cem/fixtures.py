"""Access to the bundled example modules and scenarios (a product catalog
evolved across three versions)."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .model import Module, System
from .parser import parse_module, parse_system

MODULE_FILES = (
    "catalog_v1.cem",
    "catalog_v2.cem",
    "catalog_v3.cem",
    "marketing_v1.cem",
    "marketing_v2.cem",
    "marketing_v3.cem",
    "backoffice_v1.cem",
)

SCENARIO_FILES = ("fig4.ces", "catalog_v3_blocked.ces")


def data_dir() -> Path:
    return Path(str(resources.files("cem").joinpath("data")))


def data_path(name: str) -> Path:
    return data_dir() / name


def load_module(name: str) -> Module:
    path = data_path(name)
    return parse_module(path.read_text(), str(path))


def load_snapshot_system() -> System:
    path = data_path("upgraded_system.ces")
    return parse_system(path.read_text(), str(path))
