"""Exception-Hierarchie des Pakets.

Alle fachlichen Fehler erben von RewMbError, damit die CLI sie an einer
Stelle abfangen und mit Exit-Code 2 beenden kann.
"""


class RewMbError(Exception):
    """Basisklasse für alle Fehler dieses Pakets."""


class ConfigError(RewMbError):
    """Ungültige Konfiguration oder Dimensionsfehler (fatal)."""


class NonFiniteGradientError(RewMbError):
    """Gradient enthält NaN/Inf."""


class EmptyBufferError(RewMbError):
    """Replay-Buffer ist leer."""


class SequenceUnavailableError(RewMbError):
    """Keine Episode enthält genug aufeinanderfolgende Schritte."""

    def __init__(self, horizon: int):
        super().__init__(
            f"Keine Episode mit mindestens H={horizon} aufeinanderfolgenden Schritten im Buffer"
        )
        self.horizon = horizon


class CheckpointError(RewMbError):
    """Checkpoint fehlt, ist beschädigt oder hat eine falsche Version."""


class TrainingDivergedError(RewMbError):
    """Nicht-endlicher Loss; das Training wurde mit Diagnose-Checkpoint gestoppt."""

    def __init__(self, what: str, timestep: int, checkpoint_path: str | None = None):
        msg = f"Nicht-endlicher Wert in {what} bei Schritt {timestep}"
        if checkpoint_path:
            msg += f" (Diagnose-Checkpoint: {checkpoint_path})"
        super().__init__(msg)
        self.what = what
        self.timestep = timestep
        self.checkpoint_path = checkpoint_path
