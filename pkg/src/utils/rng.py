"""Seed-Verwaltung: numpy Generatoren, Kind-Generatoren, Zustand sichern/laden."""

from typing import Any

import numpy as np

RngLike = int | np.random.Generator | None


def make_rng(seed: RngLike = None) -> np.random.Generator:
    """Erzeugt einen PCG64-Generator aus einem Seed (oder reicht ihn durch)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Leitet n unabhängige Kind-Generatoren ab.

    Die Kinder hängen nur vom aktuellen Zustand von rng ab, nicht davon, in
    welcher Reihenfolge oder in welchem Thread sie später benutzt werden.
    """
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [make_rng(int(s)) for s in seeds]


def rng_state(rng: np.random.Generator) -> dict[str, Any]:
    """JSON-fähiger Zustand eines Generators."""
    return rng.bit_generator.state


def restore_rng(state: dict[str, Any]) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"Unbekannter Bit-Generator: {state.get('bit_generator')}")
    bit_gen = np.random.PCG64()
    bit_gen.state = state
    return np.random.Generator(bit_gen)
