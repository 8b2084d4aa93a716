"""Knowledge-enriched, type-constrained question generation over KB fact paths."""

__version__ = "0.1.0"

from pathlib import Path


def resource_path(name: str) -> Path:
    """Path of a bundled fixture (toy corpus, KB fixture store, toy config)."""
    return Path(__file__).parent / "resources" / name
