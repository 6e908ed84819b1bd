"""Logging-Setup mit Rotation."""

import logging
import os
from logging.handlers import RotatingFileHandler

APP_LOGGER = "ReweightedMBSAC"


def setup_logging(
    log_dir: str = "logs",
    level: int = logging.INFO,
    console_level: int = logging.WARNING,
) -> logging.Logger:
    """Konfiguriert und gibt den App-Logger zurück.

    Ein zweiter Aufruf (z.B. neuer Trainingslauf im selben Prozess) ersetzt
    die Handler, damit jeder Lauf in sein eigenes Log-Verzeichnis schreibt.
    """
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, "training.log")

    logger = logging.getLogger(APP_LOGGER)
    logger.setLevel(level)

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    file_handler = RotatingFileHandler(
        log_file, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8"
    )
    file_handler.setLevel(level)
    file_fmt = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s.%(funcName)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    file_handler.setFormatter(file_fmt)
    logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_level)
    console_fmt = logging.Formatter("[%(levelname)s] %(message)s")
    console_handler.setFormatter(console_fmt)
    logger.addHandler(console_handler)

    return logger


def get_logger(name: str = APP_LOGGER) -> logging.Logger:
    """Gibt einen Child-Logger zurück.

    Stellt sicher, dass alle Logger als Children von 'ReweightedMBSAC' registriert
    werden, damit sie die konfigurierten Handler (File + Console) erben.
    """
    if name == APP_LOGGER:
        return logging.getLogger(name)
    # Child-Logger: ReweightedMBSAC.src.core.sac etc.
    return logging.getLogger(f"{APP_LOGGER}.{name}")
